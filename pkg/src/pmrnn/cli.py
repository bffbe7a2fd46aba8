"""Command-line front end: run experiments, verify invariants, generate data.

Three subcommands:

  pmrnn run CONFIG.json     train every (config, seed) pair, write per-seed
                            metric logs and checkpoints, print a summary
                            table with mean and min/max over seeds
  pmrnn verify              fast self-checks of the numerical core
  pmrnn gen TASK.json OUT   materialize one task split to a dataset file

Seeds run sequentially by default; `run --parallel-seeds N` farms them out
to worker processes.  A relative run output directory is resolved under
$PMRNN_OUT_ROOT when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Model, ModelConfig, surrogate_free_params
from .cells import make_cell, ssm_equivalence_check
from .numerics import Rng, finite_difference_grad, zero_grad
from .scan import AffineElement, scan_parallel, scan_sequential
from .tasks import (DenseDataset, TaskConfig, VirtualParityDataset, build_task,
                    quantization_limit, write_dataset)
from .train import (TrainConfig, epsilon_anneal, load_metrics, lr_schedule,
                    run_training)

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class ExperimentConfig:
    model: ModelConfig
    task: TaskConfig
    train: TrainConfig
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be a non-empty list")
        for s in self.seeds:
            if not isinstance(s, int) or not 0 <= s < 2 ** 64:
                raise ValueError(f"seed {s!r} is not an unsigned 64-bit integer")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {"model", "task", "train", "seeds", "out_dir"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        for key in ("model", "task", "train"):
            if key not in data:
                raise ValueError(f"missing experiment key: {key!r}")
        return cls(model=ModelConfig.from_dict(data["model"]),
                   task=TaskConfig.from_dict(data["task"]),
                   train=TrainConfig.from_dict(data["train"]),
                   seeds=list(data.get("seeds", DEFAULT_SEEDS)),
                   out_dir=data.get("out_dir"))

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "task": self.task.to_dict(),
                "train": self.train.to_dict(), "seeds": list(self.seeds),
                "out_dir": self.out_dir}


def _format_metric(value: float, classification: bool) -> str:
    return f"{100.0 * value:.2f}" if classification else f"{value:.6f}"


def summarize_runs(out_dir: Path, seeds, metric_name: str) -> dict:
    """Aggregate the test metric straight from the per-seed JSONL logs."""
    values, missing = {}, []
    for seed in seeds:
        lines = load_metrics(out_dir / f"seed{seed}" / "metrics.jsonl")
        found = [l["value"] for l in lines
                 if l["split"] == "test" and l["metric"] == metric_name]
        if found:
            values[seed] = found[-1]
        else:
            missing.append(seed)
    stats = {}
    if values:
        arr = [values[s] for s in seeds if s in values]
        stats = {"mean": float(np.mean(arr)), "min": float(np.min(arr)),
                 "max": float(np.max(arr))}
    return {"metric": metric_name, "values": values, "missing": missing,
            **stats}


def cmd_run(args) -> int:
    try:
        config = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.seeds is not None:
        config.seeds = [int(s) for s in args.seeds.split(",") if s]
    if args.out is not None:
        config.out_dir = args.out
    if config.out_dir is None:
        print("error: no output directory (config out_dir or --out)",
              file=sys.stderr)
        return 1
    if args.parallel_seeds < 1:
        print("error: --parallel-seeds must be at least 1", file=sys.stderr)
        return 1

    out_dir = Path(config.out_dir)
    root = os.environ.get("PMRNN_OUT_ROOT")
    if root and not out_dir.is_absolute():
        out_dir = Path(root) / out_dir
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        print(f"error: {out_dir} is not empty; pass --force to overwrite",
              file=sys.stderr)
        return 2
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "experiment.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")

    classification = config.task.classification
    failed = []

    def report(seed, record):
        if record.failed or record.test_metric is None:
            failed.append(seed)
        shown = ("diverged" if record.failed else
                 _format_metric(record.test_metric, classification)
                 if record.test_metric is not None else "no checkpoint")
        print(f"seed {seed}: test {record.metric_name} {shown} "
              f"({record.steps_run} steps"
              f"{', early stop' if record.stopped_early else ''})")

    workers = min(args.parallel_seeds, len(config.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [(seed, pool.submit(run_training, config.model,
                                          config.task, config.train, seed,
                                          out_dir=out_dir / f"seed{seed}"))
                       for seed in config.seeds]
            for seed, future in futures:
                report(seed, future.result())
    else:
        for seed in config.seeds:
            report(seed, run_training(config.model, config.task, config.train,
                                      seed, out_dir=out_dir / f"seed{seed}"))

    metric_name = "accuracy" if classification else "mae"
    summary = summarize_runs(out_dir, config.seeds, metric_name)
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "seed", "value"])
        for seed in config.seeds:
            if seed in summary["values"]:
                writer.writerow([metric_name, seed, summary["values"][seed]])
        for stat in ("mean", "min", "max"):
            if stat in summary:
                writer.writerow([metric_name, stat, summary[stat]])
    if summary.get("mean") is not None:
        print(f"{metric_name} over {len(summary['values'])} seeds: "
              f"mean {_format_metric(summary['mean'], classification)}, "
              f"min {_format_metric(summary['min'], classification)}, "
              f"max {_format_metric(summary['max'], classification)}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _suite_scan_equivalence():
    gen = np.random.default_rng(101)
    worst = 0.0
    for steps in (1, 2, 5, 64, 193):
        for dtype in (float, complex):
            a = gen.normal(size=(2, steps, 3)).astype(dtype)
            b = gen.normal(size=(2, steps, 3)).astype(dtype)
            if dtype is complex:
                a = a + 1j * gen.normal(size=a.shape)
                b = b + 1j * gen.normal(size=b.shape)
            a *= 0.98 / (1.0 + np.abs(a))  # contractive, so products stay tame
            h0 = gen.normal(size=(2, 3)).astype(dtype)
            el = AffineElement(a, b)
            seq = scan_sequential(el, h0)
            par = scan_parallel(el, h0)
            worst = max(worst, float(np.abs(seq - par).max()))
    if worst > 1e-10:
        raise AssertionError(f"scan mismatch {worst:.3e}")
    return f"sequential vs tree scan, max |diff| {worst:.2e}"


def _suite_gradient_oracles():
    worst = 0.0
    for kind in ("bmru", "lru"):
        config = ModelConfig(cell_type=kind, input_dim=2, output_dim=2,
                             state_dim=3, model_dim=6, pe_dim=4)
        model = Model(config, Rng(7).stream(1))
        gen = np.random.default_rng(13)
        data = gen.normal(size=(2, 6, 2))
        lengths = np.full(2, 6, np.int64)

        def loss():
            out, _ = model.forward(data, lengths)
            return 0.5 * float(np.sum(out ** 2))

        out, cache = model.forward(data, lengths)
        grad_out = out
        zero_grad(model.params())
        model.backward(cache, grad_out)
        for p in surrogate_free_params(model):
            idx = list(range(min(4, p.values.size)))
            fd = finite_difference_grad(loss, p, indices=idx)
            for i in idx:
                got = p.grad.reshape(-1)[i]
                want = fd.reshape(-1)[i]
                err = abs(got - want) / max(abs(want), 1e-6)
                worst = max(worst, float(err))
    if worst > 5e-4:
        raise AssertionError(f"gradient mismatch, rel err {worst:.3e}")
    return f"finite differences on exact-path params, worst rel err {worst:.1e}"


def _suite_ssm_equivalence():
    gen = np.random.default_rng(3)
    worst = 0.0
    for kind, eps in (("bmru", 0.0), ("cmru", 1.0), ("acmru", 1.0)):
        cell = make_cell(kind, d=5, m=4, rng=Rng(11).stream(2), epsilon=eps)
        for _ in range(20):
            u = gen.normal(size=4)
            h = gen.normal(size=(8, 5))
            worst = max(worst, ssm_equivalence_check(cell, u, h))
    if worst > 1e-12:
        raise AssertionError(f"SSM residual {worst:.3e}")
    return f"input-dependent SSM form, max residual {worst:.2e}"


def _suite_quantization_oracle():
    gen = np.random.default_rng(5)
    targets = gen.uniform(-1.0, 1.0, size=200_000)
    for bits in (1, 2, 3, 4, 6):
        limit = quantization_limit(bits)
        levels = 2 ** bits
        width = 2.0 / levels
        centers = -1.0 + width * (np.floor((targets + 1.0) / width) + 0.5)
        mc = float(np.abs(targets - centers).mean())
        if abs(mc - limit) > 0.02 * limit + 1e-4:
            raise AssertionError(f"bits={bits}: MC {mc:.5f} vs limit {limit}")
    return ("midpoint quantizer MC agrees; "
            + ", ".join(f"b={b}: {quantization_limit(b):g}" for b in (2, 4, 8)))


def _suite_annealing_schedule():
    total = 35_000
    points = {0: 1.0, 1750: 1.0, 14_000: 0.5, 26_250: 0.0, total: 0.0}
    for step, want in points.items():
        got = epsilon_anneal(step, total)
        if got != want:
            raise AssertionError(f"anneal({step}) = {got}, want {want}")
    if lr_schedule(0, total) != 0.0 or lr_schedule(total, total) != 1e-5:
        raise AssertionError("learning-rate endpoints drifted")
    ramp = [epsilon_anneal(s, total) for s in range(1750, 26_251, 490)]
    if not all(a > b for a, b in zip(ramp, ramp[1:])):
        raise AssertionError("retention ramp is not strictly decreasing")
    return "retention and learning-rate schedules hit exact endpoints"


VERIFY_SUITES = (
    ("scan-equivalence", _suite_scan_equivalence),
    ("gradient-oracles", _suite_gradient_oracles),
    ("ssm-equivalence", _suite_ssm_equivalence),
    ("quantization-oracle", _suite_quantization_oracle),
    ("annealing-schedule", _suite_annealing_schedule),
)


def cmd_verify(args) -> int:
    selected = [(name, suite) for name, suite in VERIFY_SUITES
                if args.suite is None or name == args.suite]
    failures = 0
    for name, suite in selected:
        try:
            detail = suite()
            print(f"pass  {name}: {detail}")
        except Exception as exc:
            failures += 1
            print(f"FAIL  {name}: {exc}")
    return 1 if failures else 0


def cmd_gen(args) -> int:
    try:
        task = TaskConfig.from_dict(json.loads(Path(args.task).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    splits = build_task(task, args.seed)
    dataset = splits[args.split]
    if isinstance(dataset, VirtualParityDataset):
        if args.count is None:
            print("error: --count is required for on-the-fly splits",
                  file=sys.stderr)
            return 1
        if args.count < 1:
            print("error: --count must be positive", file=sys.stderr)
            return 1
        dataset = dataset.materialize_first(args.count)
    elif args.count is not None:
        if args.count < 1:
            print("error: --count must be positive", file=sys.stderr)
            return 1
        data, lengths, labels = dataset.materialize()
        dataset = DenseDataset(data[:args.count], lengths[:args.count],
                               labels[:args.count], dataset.n_classes)
    if dataset.count < 1:
        print("error: split is empty", file=sys.stderr)
        return 1
    meta = {"task": task.to_dict(), "split": args.split, "seed": args.seed}
    write_dataset(args.out, dataset, meta)
    print(f"wrote {dataset.count} sequences to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmrnn")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train one experiment config")
    p_run.add_argument("config", help="experiment JSON file")
    p_run.add_argument("--out", help="output directory (overrides config)")
    p_run.add_argument("--seeds", help="comma-separated seed list override")
    p_run.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
    p_run.add_argument("--parallel-seeds", type=int, default=1, metavar="N",
                       help="run up to N seeds in worker processes "
                            "(default: sequential)")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="run the numerical self-checks")
    p_verify.add_argument("--suite", choices=[n for n, _ in VERIFY_SUITES],
                          help="run only the named suite")
    p_verify.set_defaults(func=cmd_verify)

    p_gen = sub.add_parser("gen", help="materialize a task split to a file")
    p_gen.add_argument("task", help="task JSON file")
    p_gen.add_argument("out", help="output dataset path")
    p_gen.add_argument("--split", default="train",
                       choices=("train", "val", "test"))
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--count", type=int,
                       help="materialize only the first N sequences")
    p_gen.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
