"""Losses, schedules, AdamW, and the deterministic training loop.

Protocol: AdamW with decoupled weight decay, linear warmup into a cosine
decay, global gradient-norm clipping, periodic validation on a fixed slice
of the validation split, best-checkpoint selection on the validation metric,
and optional early stopping after a run of consecutive target-hitting evals.

The retention coefficient of the hard-gated cells can be annealed: held at 1
for the first stretch of training, decayed linearly to 0, then held at 0,
with checkpoints only accepted once the decay has finished.

All randomness (batch sampling, dropout) is drawn from counter-derived
streams of the run seed, so two runs with identical configs and seed produce
byte-identical metric logs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import (Model, ModelConfig, apply_checkpoint, config_from_dict,
                       save_checkpoint)
from .numerics import ParamTensor, Rng, zero_grad
from .tasks import TaskConfig, build_task

# Stream bases for the training loop, far above the task-split streams.
BATCH_STREAM = 1 << 50
DROPOUT_STREAM = 1 << 51
MODEL_INIT_STREAM = 1 << 52


def lr_schedule(step: int, total: int, peak: float = 1e-3, floor: float = 1e-5,
                warmup_frac: float = 0.01) -> float:
    """Linear warmup from 0 to peak, then cosine decay from peak to floor."""
    warmup = warmup_frac * total
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total - warmup)
    return floor + (peak - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))


def epsilon_anneal(step: int, total: int, hold: float = 0.05,
                   decay: float = 0.70) -> float:
    """1 during the hold phase, linear to 0 across the decay phase, then 0."""
    x = step / total
    end = hold + decay
    if x <= hold:
        return 1.0
    if x >= end:
        return 0.0
    return (end - x) / decay


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean NLL over the batch; returns (loss, dloss/dlogits)."""
    shifted = logits - logits.max(-1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(-1, keepdims=True)
    n = logits.shape[0]
    nll = -(shifted[np.arange(n), labels]
            - np.log(expd.sum(-1)))
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(nll.mean()), grad / n


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error on [B, 1] predictions; returns (loss, grad)."""
    diff = pred[:, 0] - target
    return float(np.mean(diff ** 2)), (2.0 * diff / diff.size)[:, None]


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(-1) == labels).mean())


def mean_absolute_error(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(pred[:, 0] - target).mean())


def clip_global_norm(params: list[ParamTensor], max_norm: float) -> float:
    """Scale every gradient by max_norm/norm when the global norm exceeds it."""
    total = 0.0
    for p in params:
        total += float(np.sum(np.abs(p.grad) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


class AdamW:
    """Decoupled weight decay Adam; complex parameters use |g|^2 second moments."""

    def __init__(self, params: list[ParamTensor], beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(np.abs(p.values)) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * np.abs(p.grad) ** 2
            p.values -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.values -= lr * self.weight_decay * p.values


@dataclass
class TrainConfig:
    max_iters: int
    batch_size: int = 64
    peak_lr: float = 1e-3
    floor_lr: float = 1e-5
    warmup_frac: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    eval_every: int = 64
    eval_batches: int = 20
    early_stop_patience: int = 100
    stop_at_mae: float | None = None
    anneal: bool = False
    anneal_hold: float = 0.05
    anneal_decay: float = 0.70

    def __post_init__(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.anneal and self.anneal_hold + self.anneal_decay > 1.0:
            raise ValueError("anneal phases exceed the training budget")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return config_from_dict(cls, data)


def run_digest(model_config: ModelConfig, task_config: TaskConfig,
               train_config: TrainConfig, seed: int) -> str:
    """Short hex hash of the full run configuration, for manifests."""
    blob = json.dumps({"model": model_config.to_dict(), "seed": seed,
                       "task": task_config.to_dict(),
                       "train": train_config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:40]


@dataclass
class RunRecord:
    seed: int
    best_val: float | None
    best_step: int | None
    first_checkpoint_step: int | None
    test_metric: float | None
    test_loss: float | None
    steps_run: int
    stopped_early: bool
    failed: bool
    wall_time: float
    metric_name: str

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _forward_loss(model: Model, batch, labels, classification: bool,
                  train: bool, drop_gen=None):
    out, cache = model.forward(batch.data, batch.lengths, train=train,
                               drop_gen=drop_gen)
    if classification:
        loss, grad = softmax_cross_entropy(out, labels)
        metric = accuracy(out, labels)
    else:
        loss, grad = mse_loss(out, labels)
        metric = mean_absolute_error(out, labels)
    return loss, metric, grad, cache


def evaluate(model: Model, dataset, indices: np.ndarray, classification: bool,
             batch_size: int):
    """Average loss and pooled metric over the given sample indices."""
    losses, outs, labs = [], [], []
    for lo in range(0, len(indices), batch_size):
        batch, labels = dataset.batch(indices[lo:lo + batch_size])
        out, _ = model.forward(batch.data, batch.lengths)
        outs.append(out)
        labs.append(labels)
        if classification:
            losses.append(softmax_cross_entropy(out, labels)[0] * len(labels))
        else:
            losses.append(mse_loss(out, labels)[0] * len(labels))
    out = np.concatenate(outs)
    labels = np.concatenate(labs)
    loss = float(np.sum(losses) / len(indices))
    metric = accuracy(out, labels) if classification else mean_absolute_error(out, labels)
    return loss, metric


def run_training(model_config: ModelConfig, task_config: TaskConfig,
                 train_config: TrainConfig, seed: int,
                 out_dir=None) -> RunRecord:
    """Train one model; returns the run record and optionally writes artifacts.

    Writes metrics.jsonl (deterministic), best.ckpt, and manifest.json under
    out_dir when given.
    """
    t_start = time.monotonic()
    c = train_config
    splits = build_task(task_config, seed)
    classification = task_config.classification
    metric_name = "accuracy" if classification else "mae"
    better = ((lambda a, b: a > b) if classification else (lambda a, b: a < b))

    base = Rng(seed)
    model = Model(model_config, base.stream(MODEL_INIT_STREAM))
    opt = AdamW(model.params(), c.beta1, c.beta2, c.adam_eps, c.weight_decay)
    in_family = model_config.cell_type in ("bmru", "cmru", "acmru")
    if c.anneal and model_config.cell_type not in ("cmru", "acmru"):
        raise ValueError("annealing needs a cell with a retention coefficient")

    train_set, val_set = splits["train"], splits["val"]
    n_eval = min(c.eval_batches * c.batch_size, val_set.count)
    eval_indices = np.arange(n_eval)

    log_lines: list[dict] = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "metrics.jsonl", "w")

    def log(step: int, split: str, metric: str, value: float,
            epsilon: float | None, lr: float) -> None:
        line = {"step": step, "split": split, "metric": metric, "value": value,
                "epsilon": epsilon, "lr": lr}
        log_lines.append(line)
        if log_fh is not None:
            log_fh.write(json.dumps(line) + "\n")

    best_val = best_step = first_ckpt_step = None
    best_params = None
    streak = 0
    stopped_early = failed = False
    steps_run = 0
    epsilon = model_config.epsilon if in_family else None

    try:
        for step in range(1, c.max_iters + 1):
            steps_run = step
            lr = lr_schedule(step, c.max_iters, c.peak_lr, c.floor_lr,
                             c.warmup_frac)
            if c.anneal:
                epsilon = epsilon_anneal(step, c.max_iters, c.anneal_hold,
                                         c.anneal_decay)
                model.set_epsilon(epsilon)

            gen = base.stream(BATCH_STREAM + step).generator()
            idx = gen.integers(0, train_set.count, size=c.batch_size)
            batch, labels = train_set.batch(idx)
            drop_gen = (base.stream(DROPOUT_STREAM + step).generator()
                        if model_config.dropout > 0.0 else None)
            loss, _, grad, cache = _forward_loss(model, batch, labels,
                                                 classification, True, drop_gen)
            if not np.isfinite(loss):
                failed = True
                log(step, "train", "loss", loss, epsilon, lr)
                break
            zero_grad(model.params())
            model.backward(cache, grad)
            clip_global_norm(model.params(), c.clip_norm)
            opt.step(lr)
            log(step, "train", "loss", loss, epsilon, lr)

            if step % c.eval_every == 0:
                val_loss, val_metric = evaluate(model, val_set, eval_indices,
                                                classification, c.batch_size)
                log(step, "val", "loss", val_loss, epsilon, lr)
                log(step, "val", metric_name, val_metric, epsilon, lr)

                checkpoint_ok = (not c.anneal) or epsilon == 0.0
                if checkpoint_ok and (best_val is None
                                      or better(val_metric, best_val)):
                    best_val, best_step = val_metric, step
                    if first_ckpt_step is None:
                        first_ckpt_step = step
                    best_params = [p.values.copy() for p in model.params()]

                if classification:
                    hit = val_metric == 1.0
                else:
                    hit = c.stop_at_mae is not None and val_metric <= c.stop_at_mae
                streak = streak + 1 if hit else 0
                if streak >= c.early_stop_patience and checkpoint_ok:
                    stopped_early = True
                    break

        test_loss = test_metric = None
        if best_params is not None and not failed:
            for p, values in zip(model.params(), best_params):
                p.values[...] = values
            test_set = splits["test"]
            test_loss, test_metric = evaluate(model, test_set,
                                              np.arange(test_set.count),
                                              classification, c.batch_size)
            final_lr = lr_schedule(steps_run, c.max_iters, c.peak_lr,
                                   c.floor_lr, c.warmup_frac)
            log(steps_run, "test", "loss", test_loss, epsilon, final_lr)
            log(steps_run, "test", metric_name, test_metric, epsilon, final_lr)
    finally:
        if log_fh is not None:
            log_fh.close()

    record = RunRecord(seed=seed, best_val=best_val, best_step=best_step,
                       first_checkpoint_step=first_ckpt_step,
                       test_metric=test_metric, test_loss=test_loss,
                       steps_run=steps_run, stopped_early=stopped_early,
                       failed=failed, wall_time=time.monotonic() - t_start,
                       metric_name=metric_name)

    if out_dir is not None:
        if best_params is not None:
            for p, values in zip(model.params(), best_params):
                p.values[...] = values
            save_checkpoint(out_dir / "best.ckpt", model_config, model.params(),
                            extra={"step": best_step, "seed": seed,
                                   "val_metric": best_val})
        manifest = {
            "version": __version__,
            "provenance": f"pmrnn {__version__}",
            "config_digest": run_digest(model_config, task_config,
                                        train_config, seed),
            "seed": seed,
            "model": model_config.to_dict(),
            "task": task_config.to_dict(),
            "train": train_config.to_dict(),
            "record": record.to_dict(),
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    return record


def load_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
