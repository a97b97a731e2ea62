"""``mmflow`` command line: train, sample, eval, merge, schedules-bench.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ck
from . import config as C
from . import schedules as S
from . import synthetic as syn
from .errors import MMFlowError
from .models import MLPVelocityNet, OmniTransformer, build, describe, merge_states
from .paths import ModalitySpec, task_path
from .sampler import SamplerConfig, parse_guidance, sample_chunked
from .training import FlowModel, Trainer, TrainerConfig

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CHECKPOINT_NAME = "model.mmck"


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# --- helpers ------------------------------------------------------------


def _threads() -> int:
    raw = os.environ.get("MMFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CommandError(f"MMFLOW_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CommandError(f"MMFLOW_THREADS must be a positive integer, got {raw!r}")
    return n


def _thread_limit():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=_threads())


def _config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    if args.seed is not None:
        cfg.set("seed", args.seed)
    if args.out is not None:
        cfg.set("out", args.out)
    return cfg


def _out_dir(args, cfg: C.ExperimentConfig | None = None) -> Path:
    out = Path(args.out if args.out is not None else (cfg["out"] if cfg is not None else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: C.ExperimentConfig, n: int | None = None, stream: int = 0):
    rng = np.random.default_rng([cfg["seed"], stream])
    return syn.make_dataset(cfg["data.kind"], n or cfg["data.size"], rng, cfg["data.epsilon"], cfg["data.split"])


def _restrict(data: dict, keep: Sequence[str]) -> dict:
    if not keep:
        return data
    missing = [k for k in keep if k not in data]
    if missing:
        raise CommandError(f"data.modalities names {missing}, dataset has {list(data)}")
    return {k: data[k] for k in keep}


def _net(cfg: C.ExperimentConfig, specs: list[ModalitySpec], rng: np.random.Generator):
    kind = cfg["model.kind"]
    if kind == "mlp":
        return MLPVelocityNet(specs, rng, width=cfg["model.width"], depth=cfg["model.depth"],
                              time_dim=cfg["model.time_dim"])
    if kind == "omni":
        return OmniTransformer(specs, rng, width=cfg["model.width"], blocks=cfg["model.blocks"],
                               time_dim=cfg["model.time_dim"], time_slots=cfg["model.time_slots"] or None)
    raise CommandError(f"model.kind must be 'mlp' or 'omni', got {kind!r}")


def _trainer_config(cfg: C.ExperimentConfig) -> TrainerConfig:
    t = cfg.section("train")
    return TrainerConfig(lr=t["lr"], warmup=t["warmup"], total_steps=t["total_steps"], batch_size=t["batch_size"],
                         ema_decay=t["ema_decay"], ema_interval=t["ema_interval"], weight_decay=t["weight_decay"],
                         seed=cfg["seed"], time_sampler=S.parse_sampler(cfg["schedule.time_sampler"]),
                         task_weights=t["task_weights"])


def _flow_model(net, meta: dict) -> FlowModel:
    return FlowModel(net, S.schedule_from_name(meta["schedule"]), meta["parameterization"], meta["v_weight"])


def _meta(cfg: C.ExperimentConfig) -> dict:
    return {"config": cfg.identity(), "parameterization": cfg["schedule.parameterization"],
            "schedule": cfg["schedule.kind"], "v_weight": cfg["schedule.v_weight"]}


def _columns(specs: Sequence[ModalitySpec]) -> list[str]:
    cols = []
    for s in specs:
        cols += [s.name] if s.size == 1 else [f"{s.name}.{k}" for k in range(s.size)]
    return cols


def _f32(v) -> str:
    return format(float(v), ".9g")


def _write_csv(path: Path, header: Sequence[str], rows, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        if comment is not None:
            f.write(f"# {comment}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_samples_csv(path, columns: Sequence[str]) -> np.ndarray:
    """Rows of the named columns as float64; comment lines start with ``#``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise CommandError(f"cannot read {path}: {e.strerror}") from None
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), 1) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise CommandError(f"{path}: no header line")
    header_no, header = lines[0]
    names = next(csv.reader([header]))
    missing = [c for c in columns if c not in names]
    if missing:
        raise CommandError(f"{path}: missing column(s) {', '.join(missing)}")
    idx = [names.index(c) for c in columns]
    out = np.empty((len(lines) - 1, len(columns)))
    for r, (lineno, ln) in enumerate(lines[1:]):
        fields = next(csv.reader([ln]))
        if len(fields) != len(names):
            raise CommandError(f"{path}: line {lineno}: expected {len(names)} fields, got {len(fields)}")
        try:
            out[r] = [float(fields[k]) for k in idx]
        except ValueError:
            raise CommandError(f"{path}: line {lineno}: non-numeric value") from None
    return out


# --- commands -----------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    tcfg = _trainer_config(cfg)
    data = _restrict(_dataset(cfg).modalities(), cfg["data.modalities"])
    full_specs = {s.name: s for s in _dataset(cfg, 1).specs()}
    specs = [full_specs[n] for n in data]
    rng = np.random.default_rng([cfg["seed"], 1])
    net = _net(cfg, specs, rng)
    meta = _meta(cfg)
    model = _flow_model(net, meta)
    names = model.names
    paths = [task_path(t, names) for t in cfg["train.tasks"]]
    patterns = sorted({tuple(n for i, n in enumerate(names) if i in _present_for(p)) for p in paths})
    trainer = Trainer(model, paths, tcfg)
    source = syn.ArraySource(data, patterns)
    digest = cfg.digest()
    every = cfg["train.checkpoint_every"]
    C.save(cfg, out / "config.txt")

    def snapshot(step: int) -> ck.Checkpoint:
        return ck.Checkpoint(describe(net), net.state_dict(), dict(trainer.ema), step, digest, meta)

    def on_step(row):
        if every and row["step"] % every == 0 and row["step"] != tcfg.total_steps:
            ck.save(snapshot(row["step"]), out / f"ckpt_{row['step']:07d}.mmck")

    rows = []
    try:
        trainer.fit(source, rng, callback=lambda r: (rows.append(r), on_step(r)))
    except FloatingPointError as e:
        _write_loss_log(out, rows)
        raise CommandError(str(e), EXIT_NUMERIC) from None
    _write_loss_log(out, rows)
    ck.save(snapshot(trainer.step_count), out / CHECKPOINT_NAME)
    print(f"trained {trainer.step_count} steps; final loss {rows[-1]['loss']:.6g}; wrote {out / CHECKPOINT_NAME}")
    return EXIT_OK


def _present_for(path) -> set[int]:
    """Modalities a sample must carry to train on ``path``: everything not held at pure noise."""
    return {i for i in range(path.dim) if not (path.start[i] == path.end[i] == 1.0)}


def _write_loss_log(out: Path, rows) -> None:
    _write_csv(out / "loss.csv", ["step", "task", "loss", "lr"],
               [[r["step"], r["task"], repr(float(r["loss"])), repr(float(r["lr"]))] for r in rows])


def _load_model(path, use_ema: bool = True) -> tuple[FlowModel, ck.Checkpoint, C.ExperimentConfig]:
    ckpt = ck.load(path)
    net = build(ckpt.arch)
    net.load_state_dict(ckpt.ema if (use_ema and ckpt.ema is not None) else ckpt.params)
    cfg = C.loads(ckpt.meta["config"]) if "config" in ckpt.meta else C.ExperimentConfig()
    return _flow_model(net, ckpt.meta), ckpt, cfg


def cmd_sample(args) -> int:
    model, ckpt, cfg = _load_model(args.checkpoint, use_ema=not args.raw)
    if args.seed is not None:
        cfg.set("seed", args.seed)
    out = _out_dir(args, cfg)
    names = model.names
    task = args.task or cfg["sample.task"]
    path = task_path(task, names)
    count = cfg["sample.count"] if args.count is None else args.count
    if count < 0:
        raise CommandError("--count must be non-negative")
    scfg = SamplerConfig(steps=args.steps or cfg["sample.steps"],
                         gamma=cfg["sample.shift"] if args.shift is None else args.shift,
                         guidance=parse_guidance(args.guidance if args.guidance is not None else cfg["sample.guidance"],
                                                 len(names)),
                         seed=cfg["seed"], chunk=cfg["sample.chunk"])
    rng = np.random.default_rng([cfg["seed"], 2])
    needs = [n for i, n in enumerate(names) if path.start[i] != 1.0]
    conditioning = {}
    if needs and count > 0:
        data = _dataset(cfg, count, stream=3).modalities()
        conditioning = {n: data[n] for n in needs}
    elif needs:
        spec = {s.name: s for s in model.specs}
        conditioning = {n: np.zeros((0,) + spec[n].shape, dtype=np.float32) for n in needs}
    result = sample_chunked(model, path, count, scfg, rng, conditioning)
    flat = np.concatenate([result[n].reshape(count, -1) for n in names], axis=1) if count else np.zeros((0, 0))
    target = out / (args.output or "samples.csv")
    _write_csv(target, _columns(model.specs), ([_f32(v) for v in row] for row in flat),
               comment=f"config_digest={ckpt.config_digest} task={path.name} modalities={','.join(names)}")
    print(f"wrote {count} samples to {target}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    dataset = _dataset(cfg)
    cols = _columns(dataset.specs())
    pts = read_samples_csv(args.samples, cols)
    if len(pts) == 0:
        raise CommandError(f"{args.samples}: no sample rows")
    if not np.all(np.isfinite(pts)):
        raise CommandError(f"{args.samples}: non-finite sample values", EXIT_NUMERIC)
    ref = np.concatenate([np.asarray(v, dtype=np.float64).reshape(len(v), -1)
                          for v in dataset.modalities().values()], axis=1)
    report = syn.MetricsReport(name=cfg["data.kind"], samples=len(pts), energy_distance=syn.energy_distance(pts, ref))
    if isinstance(dataset, syn.TetrahedronDataset):
        report.support_distance = syn.support_distance(pts, dataset)
        report.face_coverage = syn.face_coverage(pts, dataset, cfg["eval.threshold"])
    target = out / (args.output or "metrics.csv")
    target.write_text(syn.reports_csv([report]), encoding="utf-8")
    print(f"wrote metrics to {target}")
    return EXIT_OK


def cmd_merge(args) -> int:
    a, b = ck.load(args.ckpt_a), ck.load(args.ckpt_b)
    arch, params = merge_states(a.arch, a.params, b.arch, b.params, args.shared)
    ema = None
    if a.ema is not None and b.ema is not None:
        _, ema = merge_states(a.arch, a.ema, b.arch, b.ema, args.shared)
    for key in ("schedule", "parameterization", "v_weight"):
        if a.meta.get(key) != b.meta.get(key):
            raise CommandError(f"checkpoints differ in {key}: {a.meta.get(key)} vs {b.meta.get(key)}")
    meta = {k: a.meta[k] for k in ("schedule", "parameterization", "v_weight") if k in a.meta}
    meta["merged_from"] = [a.config_digest, b.config_digest]
    meta["shared"] = args.shared
    if "config" in a.meta:
        cfg = C.loads(a.meta["config"])
        cfg.set("data.modalities", [s["name"] for s in arch["specs"]])
        meta["config"] = cfg.identity()
    merged = ck.Checkpoint(arch, params, ema, 0, f"{a.config_digest}+{b.config_digest}", meta)
    out = Path(args.out) if args.out is not None else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    target = out / (args.output or "merged.mmck")
    ck.save(merged, target)
    print(f"merged {len(params)} tensors into {target}")
    return EXIT_OK


def cmd_schedules_bench(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    kind = cfg["data.kind"]
    if kind not in syn.TOY_KINDS:
        raise CommandError(f"schedules-bench needs a 2-D toy dataset, got {kind!r}")
    t = cfg.section("train")
    bcfg = syn.BenchConfig(kind=kind, split=cfg["data.split"], data_size=cfg["data.size"],
                           heldout=cfg["bench.heldout"], width=cfg["model.width"], depth=cfg["model.depth"],
                           time_dim=cfg["model.time_dim"], steps=t["total_steps"], batch_size=t["batch_size"],
                           lr=t["lr"], warmup=t["warmup"], ema_decay=t["ema_decay"], v_weight=cfg["schedule.v_weight"],
                           sample_count=cfg["bench.sample_count"], sample_steps=cfg["bench.sample_steps"],
                           sample_shift=cfg["bench.sample_shift"])
    for v in cfg["bench.variants"]:
        syn.get_variant(v)
    reports = syn.run_variant_bench(cfg["bench.variants"], None, bcfg, np.random.default_rng(cfg["seed"]))
    (out / "bench.csv").write_text(syn.reports_csv(reports), encoding="utf-8")
    _write_csv(out / "bench_losses.csv", ["variant", "step", "loss"],
               ([r.name, k + 1, repr(float(l))] for r in reports for k, l in enumerate(r.losses)))
    for r in reports:
        print(f"{r.name:12s} energy={r.energy_distance:.3e} baseline={r.baseline:.3e}")
    return EXIT_OK


# --- entry point --------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p = argparse.ArgumentParser(prog="mmflow", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="train a model from a config")

    s = sub.add_parser("sample", parents=[common], help="generate samples from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--task", help="task name (joint, t2i, ...) or path(start=[..],end=[..])")
    s.add_argument("--count", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--shift", type=float)
    s.add_argument("--guidance", action="append", metavar="I,J=ALPHA", help="1-based guidance entry; repeatable")
    s.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA shadow")
    s.add_argument("--output", help="file name inside --out (default samples.csv)")

    e = sub.add_parser("eval", parents=[common], help="score a samples CSV against the configured dataset")
    e.add_argument("samples")
    e.add_argument("--output", help="file name inside --out (default metrics.csv)")

    m = sub.add_parser("merge", parents=[common], help="merge two Omni-Transformer checkpoints")
    m.add_argument("ckpt_a")
    m.add_argument("ckpt_b")
    m.add_argument("--shared", required=True, help="modality whose branch both models carry")
    m.add_argument("--output", help="file name inside --out (default merged.mmck)")

    sub.add_parser("schedules-bench", parents=[common], help="compare forward-process variants on a 2-D toy")
    return p


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "merge": cmd_merge,
            "schedules-bench": cmd_schedules_bench}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except CommandError as e:
        print(f"mmflow {args.command}: {e}", file=sys.stderr)
        return e.code
    except FloatingPointError as e:
        print(f"mmflow {args.command}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MMFlowError, ValueError, RuntimeError, KeyError) as e:
        print(f"mmflow {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
