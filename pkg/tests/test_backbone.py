"""Backbone layers, model wiring, gradients, and the checkpoint container."""

from __future__ import annotations

import numpy as np
import pytest

from pmrnn.backbone import (CellBlock, GluMlp, LayerNorm, Linear, Model,
                            ModelConfig, PositionalEncoding, ResidualCoder,
                            apply_checkpoint, config_digest, load_checkpoint,
                            pool_backward, pool_forward, save_checkpoint,
                            sinusoidal_table, surrogate_free_params)
from pmrnn.cells import make_cell
from pmrnn.numerics import Rng, finite_difference_grad, zero_grad


def small_config(cell_type: str, **overrides) -> ModelConfig:
    base = dict(cell_type=cell_type, input_dim=3, output_dim=3, state_dim=2,
                model_dim=4, num_blocks=1, pe_dim=4)
    base.update(overrides)
    return ModelConfig(**base)


def test_linear_and_layernorm_gradients():
    gen = Rng(seed=40).generator()
    lin = Linear(3, 5, gen, "lin")
    ln = LayerNorm(5, "ln")
    x = gen.normal(size=(7, 3))
    w = gen.normal(size=(7, 5))

    def loss() -> float:
        y, _ = lin.forward(x)
        z, _ = ln.forward(y)
        return float(np.sum(w * z))

    y, c_lin = lin.forward(x)
    z, c_ln = ln.forward(y)
    zero_grad(lin.params() + ln.params())
    gy = ln.backward(c_ln, w)
    lin.backward(c_lin, gy)
    for p in lin.params() + ln.params():
        fd = finite_difference_grad(loss, p, h=1e-6)
        np.testing.assert_allclose(p.grad, fd, rtol=2e-6, atol=1e-7, err_msg=p.name)


def test_layernorm_output_is_normalized():
    ln = LayerNorm(8, "ln")
    x = Rng(seed=41).generator().normal(size=(5, 8)) * 3.0 + 1.0
    y, _ = ln.forward(x)
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1.0, atol=1e-6)


def test_glu_mlp_shapes_and_gradient():
    gen = Rng(seed=42).generator()
    mlp = GluMlp(4, 4, gen, "mlp")
    assert mlp.fc_in.w.values.shape == (32, 4)  # 8x fan-in before the GLU split
    assert mlp.fc_out.w.values.shape == (4, 16)
    x = gen.normal(size=(6, 4))
    w = gen.normal(size=(6, 4))

    def loss() -> float:
        y, _ = mlp.forward(x)
        return float(np.sum(w * y))

    y, cache = mlp.forward(x)
    zero_grad(mlp.params())
    mlp.backward(cache, w)
    for p in mlp.params():
        fd = finite_difference_grad(loss, p, h=1e-6)
        np.testing.assert_allclose(p.grad, fd, rtol=2e-6, atol=1e-7, err_msg=p.name)


def test_dropout_contract():
    gen = Rng(seed=43).generator()
    mlp = GluMlp(4, 4, gen, "mlp", dropout=0.5)
    x = gen.normal(size=(10, 4))
    with pytest.raises(ValueError, match="generator"):
        mlp.forward(x, train=True)
    y1, _ = mlp.forward(x, train=True, drop_gen=Rng(seed=44).generator())
    y2, _ = mlp.forward(x, train=True, drop_gen=Rng(seed=44).generator())
    assert np.array_equal(y1, y2)
    # Inference ignores dropout entirely.
    y_eval, _ = mlp.forward(x, train=False)
    mlp_plain = GluMlp(4, 4, Rng(seed=43).generator(), "mlp", dropout=0.0)
    y_plain, _ = mlp_plain.forward(x)
    assert np.array_equal(y_eval, y_plain)


def test_positional_table_conventions():
    table = sinusoidal_table(5, 8)
    assert np.array_equal(table[0, 0::2], np.zeros(4))
    assert np.array_equal(table[0, 1::2], np.ones(4))
    np.testing.assert_allclose(table[3, 0], np.sin(3.0), rtol=1e-12)
    np.testing.assert_allclose(table[3, 1], np.cos(3.0), rtol=1e-12)


def test_positional_encoding_backward_strips_table_columns():
    gen = Rng(seed=45).generator()
    pe = PositionalEncoding(4, 4, gen, "pe")
    x = gen.normal(size=(2, 6, 4))
    y, cache = pe.forward(x)
    g = pe.backward(cache, np.ones_like(y))
    assert g.shape == x.shape


def test_cell_block_zero_gate_halves_normed_projection():
    cell = make_cell("cmru", 2, 4, Rng(seed=46), epsilon=1.0)
    cb = CellBlock(cell, 4, Rng(seed=47).generator(), "cb")
    cb.gate.w.values[:] = 0.0
    cb.gate.b.values[:] = 0.0
    u = Rng(seed=48).generator().normal(size=(2, 5, 4))
    y, cache = cb.forward(u)
    _, _, _, _, normed, _, _ = cache
    np.testing.assert_allclose(y, 0.5 * normed, rtol=1e-14)


def test_decoder_on_zero_vector_gives_constant_bias_logits():
    dec = ResidualCoder(4, 3, Rng(seed=49).generator(), "dec", 0.0)
    out, _ = dec.forward(np.zeros((5, 4)))
    assert np.all(out == out[0])


def test_pooling_modes_and_backward():
    y = Rng(seed=50).generator().normal(size=(2, 4, 3))
    lengths = np.array([4, 2])
    last, _ = pool_forward(y, lengths, "last")
    assert np.array_equal(last, np.stack([y[0, 3], y[1, 1]]))
    mean, mask = pool_forward(y, lengths, "mean")
    np.testing.assert_allclose(mean[1], y[1, :2].mean(0), rtol=1e-14)
    g = pool_backward(np.ones((2, 3)), y.shape, lengths, "mean", mask)
    assert g[1, 2:].sum() == 0.0
    np.testing.assert_allclose(g[1, 0], 0.5, rtol=1e-14)


def test_model_config_validation():
    with pytest.raises(ValueError, match="unknown ModelConfig keys: bogus"):
        ModelConfig.from_dict(dict(cell_type="cmru", input_dim=1, output_dim=1,
                                   state_dim=1, model_dim=2, bogus=1))
    with pytest.raises(ValueError, match="epsilon"):
        small_config("lru", epsilon=1.0)
    with pytest.raises(ValueError, match="dropout"):
        small_config("cmru", dropout=1.0)
    with pytest.raises(ValueError, match="pooling"):
        small_config("cmru", pooling="first")
    assert small_config("bmru").epsilon == 0.0
    assert small_config("cmru").epsilon == 1.0


def test_model_seeded_construction_is_reproducible():
    cfg = small_config("cmru")
    m1, m2 = Model(cfg, Rng(seed=51)), Model(cfg, Rng(seed=51))
    for p1, p2 in zip(m1.params(), m2.params()):
        assert p1.name == p2.name
        assert np.array_equal(p1.values, p2.values)
    names = [p.name for p in m1.params()]
    assert len(names) == len(set(names))


@pytest.mark.parametrize("cell_type", ["cmru", "acmru", "lru", "mingru"])
def test_model_padding_and_scan_mode_invariance(cell_type):
    cfg = small_config(cell_type)
    model = Model(cfg, Rng(seed=52))
    gen = Rng(seed=53).generator()
    data = gen.normal(size=(2, 10, 3))
    data[1, 6:] = 0.0
    lengths = np.array([10, 6])
    out, _ = model.forward(data, lengths)

    garbage = data.copy()
    garbage[1, 6:] = gen.normal(size=(4, 3)) * 50.0
    out_garbage, _ = model.forward(garbage, lengths)
    assert np.array_equal(out, out_garbage)

    out_seq, _ = model.forward(data, lengths, parallel=False)
    out_par, _ = model.forward(data, lengths, parallel=True)
    assert np.abs(out_seq - out_par).max() < 1e-8


@pytest.mark.parametrize("cell_type", ["cmru", "bmru", "acmru", "lru", "mingru"])
def test_model_gradients_match_finite_differences(cell_type):
    cfg = small_config(cell_type, epsilon=0.5 if cell_type == "cmru" else None)
    model = Model(cfg, Rng(seed=54))
    gen = Rng(seed=55).generator()
    data = gen.normal(size=(2, 6, 3))
    lengths = np.array([6, 6])
    w = gen.normal(size=(2, 3))

    def loss() -> float:
        out, _ = model.forward(data, lengths)
        return float(np.sum(w * out))

    out, cache = model.forward(data, lengths)
    zero_grad(model.params())
    model.backward(cache, w)
    checked = surrogate_free_params(model)
    assert checked, "no parameters selected"
    for p in checked:
        fd = finite_difference_grad(loss, p, h=1e-6)
        scale = max(1.0, float(np.abs(fd).max()))
        np.testing.assert_allclose(p.grad, fd, rtol=3e-5, atol=3e-5 * scale,
                                   err_msg=f"{cell_type}:{p.name}")


def test_surrogate_free_selection_contents():
    model = Model(small_config("cmru"), Rng(seed=56))
    names = {p.name for p in surrogate_free_params(model)}
    assert "dec.lin.w" in names
    assert "block0.cell_block.cell.log_step" in names
    assert "block0.cell_pre.gain" in names
    assert "enc.lin.w" not in names
    assert "block0.cell_block.cell.w_cand" not in names
    assert "block0.cell_pre.norm.scale" not in names
    all_names = {p.name for p in model.params()}
    assert names < all_names

    two = Model(small_config("cmru", num_blocks=2), Rng(seed=57))
    with pytest.raises(ValueError, match="one block"):
        surrogate_free_params(two)


def test_epsilon_annealing_reaches_cell():
    model = Model(small_config("cmru"), Rng(seed=58))
    model.set_epsilon(0.25)
    assert model.cells()[0].epsilon == 0.25


@pytest.mark.parametrize("cell_type", ["cmru", "lru"])
def test_checkpoint_round_trip(tmp_path, cell_type):
    cfg = small_config(cell_type)
    model = Model(cfg, Rng(seed=59))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, model.params(), extra={"step": 17})
    loaded_cfg, arrays, extra = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert extra == {"step": 17}
    fresh = Model(cfg, Rng(seed=60))
    apply_checkpoint(fresh, arrays)
    for p, q in zip(fresh.params(), model.params()):
        assert np.array_equal(p.values, q.values)
        assert p.values.dtype == q.values.dtype


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)
    cfg = small_config("cmru")
    model = Model(cfg, Rng(seed=61))
    good = tmp_path / "good.ckpt"
    save_checkpoint(good, cfg, model.params())
    _, arrays, _ = load_checkpoint(good)
    del arrays["dec.lin.w"]
    with pytest.raises(KeyError, match="dec.lin.w"):
        apply_checkpoint(model, arrays)


def test_config_digest_stable_under_key_order():
    a = config_digest({"x": 1, "y": 2})
    b = config_digest({"y": 2, "x": 1})
    assert a == b and len(a) == 16
