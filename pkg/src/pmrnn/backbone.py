"""Sequence backbone around a recurrent cell, with hand-written backward.

Layout per block pair: y = gain*x + CellBlock(Norm(x)) followed by
y = gain*x + MLP(Norm(x)), where CellBlock(u) = Norm(Linear(Cell(u))) *
sigmoid(Linear(u)) and MLP is a GLU feed-forward. Inputs pass through a
residual encoder and a positional-encoding injection before the blocks;
a pooled decoder produces the task output.

Every layer's forward returns (output, cache); backward consumes the cache,
accumulates parameter gradients in place, and returns the input gradient.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .cells import CELL_KINDS, CmruCell, make_cell
from .numerics import REAL, ParamTensor, Rng, glorot_init
from .scan import TIME_PARALLEL_THRESHOLD

LN_EPS = 1e-6
CHECKPOINT_MAGIC = b"PMN1"
CHECKPOINT_VERSION = 1


def config_from_dict(cls, data: dict):
    """Build a config dataclass, rejecting keys it does not define."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**data)


@dataclass
class ModelConfig:
    cell_type: str
    input_dim: int
    output_dim: int
    state_dim: int
    model_dim: int
    num_blocks: int = 1
    pe_dim: int = 32
    pooling: str = "last"
    dropout: float = 0.0
    epsilon: float | None = None
    surrogate_sharpness: float = 1.0

    def __post_init__(self) -> None:
        if self.cell_type not in CELL_KINDS:
            raise ValueError(f"cell_type must be one of {CELL_KINDS}")
        if self.pooling not in ("last", "mean", "none"):
            raise ValueError("pooling must be last, mean, or none")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for field in ("input_dim", "output_dim", "state_dim", "model_dim",
                      "num_blocks", "pe_dim"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        in_family = self.cell_type in ("bmru", "cmru", "acmru")
        if in_family and self.epsilon is None:
            self.epsilon = 0.0 if self.cell_type == "bmru" else 1.0
        if not in_family and self.epsilon is not None:
            raise ValueError("epsilon only applies to the bmru/cmru/acmru family")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return config_from_dict(cls, data)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, d_in: int, d_out: int, gen, name: str):
        self.w = glorot_init(d_out, d_in, gen, f"{name}.w")
        self.b = ParamTensor.zeros(d_out, f"{name}.b")

    def params(self):
        return [self.w, self.b]

    def forward(self, x: np.ndarray):
        """x [..., d_in] -> [..., d_out]."""
        return x @ self.w.values.T + self.b.values, x

    def backward(self, x: np.ndarray, gy: np.ndarray) -> np.ndarray:
        gf = gy.reshape(-1, gy.shape[-1])
        self.w.grad += gf.T @ x.reshape(-1, x.shape[-1])
        self.b.grad += gf.sum(0)
        return gy @ self.w.values


class LayerNorm:
    def __init__(self, dim: int, name: str):
        self.scale = ParamTensor.of(np.ones(dim), f"{name}.scale")
        self.bias = ParamTensor.zeros(dim, f"{name}.bias")

    def params(self):
        return [self.scale, self.bias]

    def forward(self, x: np.ndarray):
        """Normalize the trailing axis to zero mean, unit variance."""
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (x - mu) * inv
        return xhat * self.scale.values + self.bias.values, (xhat, inv)

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        xhat, inv = cache
        gf = gy.reshape(-1, gy.shape[-1])
        self.scale.grad += (gy * xhat).reshape(-1, gy.shape[-1]).sum(0)
        self.bias.grad += gf.sum(0)
        gxhat = gy * self.scale.values
        return inv * (gxhat - gxhat.mean(-1, keepdims=True)
                      - xhat * (gxhat * xhat).mean(-1, keepdims=True))


class GluMlp:
    """Linear -> GLU -> dropout -> Linear, hidden width 4x the input."""

    def __init__(self, dim_in: int, dim_out: int, gen, name: str,
                 dropout: float = 0.0, hidden: int | None = None):
        self.hidden = 4 * dim_in if hidden is None else hidden
        self.dropout = dropout
        self.fc_in = Linear(dim_in, 2 * self.hidden, gen, f"{name}.fc_in")
        self.fc_out = Linear(self.hidden, dim_out, gen, f"{name}.fc_out")

    def params(self):
        return self.fc_in.params() + self.fc_out.params()

    def forward(self, x: np.ndarray, train: bool = False, drop_gen=None):
        pre, c_in = self.fc_in.forward(x)
        value, gate_pre = pre[..., :self.hidden], pre[..., self.hidden:]
        gate = 1.0 / (1.0 + np.exp(-gate_pre))
        act = value * gate
        if train and self.dropout > 0.0:
            if drop_gen is None:
                raise ValueError("dropout needs an explicit generator")
            mask = (drop_gen.uniform(size=act.shape) >= self.dropout) / (1.0 - self.dropout)
        else:
            mask = None
        dropped = act if mask is None else act * mask
        y, c_out = self.fc_out.forward(dropped)
        return y, (c_in, value, gate, mask, c_out)

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        c_in, value, gate, mask, c_out = cache
        g_drop = self.fc_out.backward(c_out, gy)
        g_act = g_drop if mask is None else g_drop * mask
        g_value = g_act * gate
        g_gate_pre = g_act * value * gate * (1.0 - gate)
        g_pre = np.concatenate([g_value, g_gate_pre], axis=-1)
        return self.fc_in.backward(c_in, g_pre)


class CellBlock:
    """Cell output projected to model width, normalized, and input-gated."""

    def __init__(self, cell, model_dim: int, gen, name: str):
        self.cell = cell
        self.out_proj = Linear(cell.d, model_dim, gen, f"{name}.out_proj")
        self.norm = LayerNorm(model_dim, f"{name}.norm")
        self.gate = Linear(model_dim, model_dim, gen, f"{name}.gate")

    def params(self):
        return (self.cell.params() + self.out_proj.params()
                + self.norm.params() + self.gate.params())

    def forward(self, u: np.ndarray, parallel=None):
        h, c_cell = self.cell.forward(u, parallel=parallel)
        proj, c_proj = self.out_proj.forward(h)
        normed, c_norm = self.norm.forward(proj)
        gate_pre, c_gate = self.gate.forward(u)
        gate = 1.0 / (1.0 + np.exp(-gate_pre))
        return normed * gate, (c_cell, c_proj, c_norm, c_gate, normed, gate, parallel)

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        c_cell, c_proj, c_norm, c_gate, normed, gate, parallel = cache
        g_normed = gy * gate
        g_gate_pre = gy * normed * gate * (1.0 - gate)
        g_proj = self.norm.backward(c_norm, g_normed)
        g_h = self.out_proj.backward(c_proj, g_proj)
        g_u = self.cell.backward(c_cell, g_h, parallel=parallel)
        return g_u + self.gate.backward(c_gate, g_gate_pre)


class PreNormResidual:
    """y = gain*x + sublayer(Norm(x)); gain starts at one."""

    def __init__(self, dim: int, name: str):
        self.norm = LayerNorm(dim, f"{name}.norm")
        self.gain = ParamTensor.of(np.ones(dim), f"{name}.gain")

    def params(self):
        return self.norm.params() + [self.gain]

    def forward_pre(self, x: np.ndarray):
        normed, c_norm = self.norm.forward(x)
        return normed, (x, c_norm)

    def finish(self, cache, sub_out: np.ndarray) -> np.ndarray:
        x, _ = cache
        return self.gain.values * x + sub_out

    def backward(self, cache, gy: np.ndarray, g_sub_in: np.ndarray) -> np.ndarray:
        """Combine the residual and sublayer paths; g_sub_in = dL/d(Norm(x))."""
        x, c_norm = cache
        self.gain.grad += (gy * x).reshape(-1, x.shape[-1]).sum(0)
        return gy * self.gain.values + self.norm.backward(c_norm, g_sub_in)


def sinusoidal_table(steps: int, dim: int) -> np.ndarray:
    """[steps, dim] positional table; even channels sin, odd channels cos."""
    pos = np.arange(steps, dtype=REAL)[:, None]
    idx = np.arange(0, dim, 2, dtype=REAL)
    freq = 1.0 / np.power(10000.0, idx / dim)
    table = np.zeros((steps, dim), REAL)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: table[:, 1::2].shape[1]])
    return table


class PositionalEncoding:
    """Concatenate a sinusoidal table to the features, project back down."""

    def __init__(self, model_dim: int, pe_dim: int, gen, name: str):
        self.pe_dim = pe_dim
        self.proj = Linear(model_dim + pe_dim, model_dim, gen, f"{name}.proj")

    def params(self):
        return self.proj.params()

    def forward(self, x: np.ndarray):
        B, T, _ = x.shape
        table = np.broadcast_to(sinusoidal_table(T, self.pe_dim), (B, T, self.pe_dim))
        cat = np.concatenate([x, table], axis=-1)
        y, c = self.proj.forward(cat)
        return y, c

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        g_cat = self.proj.backward(cache, gy)
        return g_cat[..., : g_cat.shape[-1] - self.pe_dim]


class ResidualCoder:
    """Linear projection plus a residual GLU MLP (used at both ends)."""

    def __init__(self, dim_in: int, dim_out: int, gen, name: str, dropout: float):
        self.lin = Linear(dim_in, dim_out, gen, f"{name}.lin")
        self.mlp = GluMlp(dim_out, dim_out, gen, f"{name}.mlp", dropout)

    def params(self):
        return self.lin.params() + self.mlp.params()

    def forward(self, x: np.ndarray, train=False, drop_gen=None):
        base, c_lin = self.lin.forward(x)
        delta, c_mlp = self.mlp.forward(base, train, drop_gen)
        return base + delta, (c_lin, c_mlp)

    def backward(self, cache, gy: np.ndarray) -> np.ndarray:
        c_lin, c_mlp = cache
        g_base = gy + self.mlp.backward(c_mlp, gy)
        return self.lin.backward(c_lin, g_base)


def pool_forward(y: np.ndarray, lengths: np.ndarray, mode: str):
    """Collapse the time axis: last valid step, masked mean, or pass-through."""
    if mode == "none":
        return y, None
    B, T, _ = y.shape
    if mode == "last":
        return y[np.arange(B), lengths - 1], None
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(y.dtype)
    return (y * mask[..., None]).sum(1) / lengths[:, None], mask


def pool_backward(g_pool: np.ndarray, y_shape, lengths: np.ndarray, mode: str,
                  mask) -> np.ndarray:
    if mode == "none":
        return g_pool
    g = np.zeros(y_shape, g_pool.dtype)
    if mode == "last":
        g[np.arange(y_shape[0]), lengths - 1] = g_pool
    else:
        g += mask[..., None] * (g_pool / lengths[:, None])[:, None, :]
    return g


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        gen = rng.generator()
        c = config
        self.encoder = ResidualCoder(c.input_dim, c.model_dim, gen, "enc", c.dropout)
        self.pe = PositionalEncoding(c.model_dim, c.pe_dim, gen, "pe")
        self.blocks = []
        for i in range(c.num_blocks):
            cell = make_cell(c.cell_type, c.state_dim, c.model_dim,
                             rng.offset(1 + i), epsilon=c.epsilon or 0.0,
                             surrogate_sharpness=c.surrogate_sharpness)
            pre_cell = PreNormResidual(c.model_dim, f"block{i}.cell_pre")
            cell_block = CellBlock(cell, c.model_dim, gen, f"block{i}.cell_block")
            pre_mlp = PreNormResidual(c.model_dim, f"block{i}.mlp_pre")
            mlp = GluMlp(c.model_dim, c.model_dim, gen, f"block{i}.mlp", c.dropout)
            self.blocks.append((pre_cell, cell_block, pre_mlp, mlp))
        self.decoder = ResidualCoder(c.model_dim, c.output_dim, gen, "dec", c.dropout)
        self._rename_cells()

    def _rename_cells(self) -> None:
        for i, (_, cb, _, _) in enumerate(self.blocks):
            for p in cb.cell.params():
                p.name = f"block{i}.cell_block.{p.name}"

    def params(self) -> list[ParamTensor]:
        out = self.encoder.params() + self.pe.params()
        for pre_cell, cell_block, pre_mlp, mlp in self.blocks:
            out += (pre_cell.params() + cell_block.params()
                    + pre_mlp.params() + mlp.params())
        return out + self.decoder.params()

    def cells(self):
        return [cb.cell for _, cb, _, _ in self.blocks]

    def set_epsilon(self, value: float) -> None:
        for cell in self.cells():
            if isinstance(cell, CmruCell):
                cell.set_epsilon(value)

    def forward(self, data: np.ndarray, lengths: np.ndarray, train: bool = False,
                drop_gen=None, parallel: bool | None = None):
        """data [B, T, F], lengths [B] -> task output plus backward cache."""
        x, c_enc = self.encoder.forward(data, train, drop_gen)
        x, c_pe = self.pe.forward(x)
        block_caches = []
        for pre_cell, cell_block, pre_mlp, mlp in self.blocks:
            normed, c_pre = pre_cell.forward_pre(x)
            sub, c_cb = cell_block.forward(normed, parallel=parallel)
            x = pre_cell.finish(c_pre, sub)
            normed, c_pre2 = pre_mlp.forward_pre(x)
            sub, c_mlp = mlp.forward(normed, train, drop_gen)
            x = pre_mlp.finish(c_pre2, sub)
            block_caches.append((c_pre, c_cb, c_pre2, c_mlp))
        pooled, pool_mask = pool_forward(x, lengths, self.config.pooling)
        out, c_dec = self.decoder.forward(pooled, train, drop_gen)
        cache = (c_enc, c_pe, block_caches, x.shape, lengths, pool_mask, c_dec)
        return out, cache

    def backward(self, cache, grad_out: np.ndarray) -> None:
        c_enc, c_pe, block_caches, x_shape, lengths, pool_mask, c_dec = cache
        g_pool = self.decoder.backward(c_dec, grad_out)
        g_x = pool_backward(g_pool, x_shape, lengths, self.config.pooling, pool_mask)
        for (pre_cell, cell_block, pre_mlp, mlp), caches in zip(
                reversed(self.blocks), reversed(block_caches)):
            c_pre, c_cb, c_pre2, c_mlp = caches
            g_sub = mlp.backward(c_mlp, g_x)
            g_x = pre_mlp.backward(c_pre2, g_x, g_sub)
            g_sub = cell_block.backward(c_cb, g_x)
            g_x = pre_cell.backward(c_pre, g_x, g_sub)
        g_x = self.pe.backward(c_pe, g_x)
        self.encoder.backward(c_enc, g_x)


def surrogate_free_params(model: Model) -> list[ParamTensor]:
    """Parameters whose gradients carry no surrogate approximation.

    For the hard-gated family, anything feeding the gate computations
    (encoder, positional projection, the cell pre-norm, and the cell's
    candidate/threshold maps) sees gradients through the surrogate slope and
    is excluded; everything downstream of the cell states, the input-side
    gate/step maps, and the residual gains have exact adjoints. Smooth cells
    keep every parameter. Assumes a single block.
    """
    if model.config.cell_type in ("lru", "mingru"):
        return model.params()
    if model.config.num_blocks != 1:
        raise ValueError("exact-path split is only defined for one block")
    blocked_exact = ("cell.w_cand", "cell.b_cand", "cell.w_thresh", "cell.b_thresh")
    out = []
    for p in model.params():
        if p.name.startswith(("enc.", "pe.")) or ".cell_pre.norm" in p.name:
            continue
        if any(p.name.endswith(sfx) for sfx in blocked_exact):
            continue
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: list[ParamTensor],
                    extra: dict | None = None) -> None:
    """Self-describing single file: header JSON + little-endian float64 blobs."""
    entries, blobs = [], []
    for p in params:
        arr = np.ascontiguousarray(p.values)
        if arr.dtype == np.complex128:
            blob = arr.view(REAL).astype("<f8").tobytes()
            dtype = "complex128"
        else:
            blob = arr.astype("<f8").tobytes()
            dtype = "float64"
        entries.append({"name": p.name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "params": entries,
        "extra": extra or {},
    }).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (ModelConfig, {name: array}, extra)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64))
            if entry["dtype"] == "complex128":
                buf = np.frombuffer(fh.read(16 * n), dtype="<f8")
                arrays[entry["name"]] = buf.view(np.complex128).reshape(shape).copy()
            else:
                buf = np.frombuffer(fh.read(8 * n), dtype="<f8")
                arrays[entry["name"]] = buf.astype(REAL).reshape(shape)
    return ModelConfig.from_dict(header["config"]), arrays, header["extra"]


def apply_checkpoint(model: Model, arrays: dict) -> None:
    for p in model.params():
        if p.name not in arrays:
            raise KeyError(f"checkpoint is missing {p.name}")
        if arrays[p.name].shape != p.values.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        p.values[...] = arrays[p.name]


def config_digest(config_dict: dict) -> str:
    """Stable short hash of a JSON-serializable config."""
    return hashlib.sha256(
        json.dumps(config_dict, sort_keys=True).encode()).hexdigest()[:16]
