"""Command line harness: ``terlab <command> [flags]``.

Every training command writes a run directory under the output root
(``--out``, else ``$TERLAB_OUT``, else ``./runs``) named by a deterministic
run id, holding the resolved config, the dataset fingerprint, CSV metrics,
per-epoch entropy logs and checkpoints.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from . import sim
from .config import Paradigm, TerMode, TrainConfig, build_config, read_kv_file, write_kv
from .encoder import LARGE_PRESET, SMALL_PRESET, PoolMode, atomic_write_bytes, load_checkpoint, save_checkpoint
from .errors import ConfigError, TerlabError, UsageError
from .evaluation import GENERATIONS, aggregate_entropy_log
from . import experiments as ex

log = logging.getLogger("terlab")

DEFAULT_OUT = "runs"

METRIC_COLUMNS = ["run_id", "paradigm", "encoder_preset", "ter_mode", "generation",
                  "acc_at_1", "acc_at_3", "threshold", "seed"]
ENTROPY_COLUMNS = ["epoch", "modality", "mean_entropy", "first_token_entropy", "run_id", "seed"]
CURVE_COLUMNS = ["run_id", "seed", "epoch", "loss", "task_loss", "tel", "lr", "val_acc1", "val_acc3"]
ABLATION_COLUMNS = ["run_id", "cell", "ter_mode", "pool_mode", "lambda", "seed", "status",
                    "final_acc1", "final_acc3", "best_acc1", "final_tel", "error"]
CLASSIFY_COLUMNS = ["run_id", "pool_mode", "fusion", "seed", "accuracy", "majority_baseline"]


# ---------------------------------------------------------------------------
# small helpers


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    """UTF-8 CSV with header, written to a temp file and renamed into place."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def output_root(args) -> Path:
    return Path(args.out or os.environ.get("TERLAB_OUT") or DEFAULT_OUT)


def make_run_id(command: str, payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return f"{command}-{hashlib.sha256(blob).hexdigest()[:12]}"


def encoder_preset(cfg: TrainConfig) -> str:
    shape = (cfg.layers, cfg.heads, cfg.dim, cfg.ffn_mult)
    for name, p in (("small", SMALL_PRESET), ("large", LARGE_PRESET)):
        if shape == (p.layers, p.heads, p.dim, p.ffn_mult):
            return name
    return "custom"


def _seeds(cfg: TrainConfig, repeats: int) -> list[int]:
    if repeats < 1:
        raise ConfigError(f"--repeats must be >= 1, got {repeats}")
    return [cfg.seed + i for i in range(repeats)]


def _split_list(raw: str, parse=str) -> list:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise ConfigError(f"empty list {raw!r}")
    return [parse(x) for x in items]


# ---------------------------------------------------------------------------
# config resolution

_CONFIG_KEYS = [("lambda" if f.name == "lam" else f.name) for f in fields(TrainConfig)]


def add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training config (same keys as config files)")
    g.add_argument("--config", help="key=value config file; flags override it")
    for key in _CONFIG_KEYS:
        names = [f"--{key}"]
        if "_" in key:
            names.append(f"--{key.replace('_', '-')}")
        g.add_argument(*names, dest=f"cfg_{key}", metavar="VALUE", default=None)


def resolve_config(args) -> TrainConfig:
    values = read_kv_file(args.config) if args.config else {}
    for key in _CONFIG_KEYS:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            values[key] = v
    return build_config(values)


def _load_data(args) -> tuple[list, str]:
    if not args.data:
        raise UsageError("--data is required (create one with `terlab gen-data`)")
    path = Path(args.data)
    if not path.exists():
        raise UsageError(f"dataset {path} does not exist")
    return sim.load_dataset(path), sim.fingerprint(path)


class RunDir:
    def __init__(self, root: Path, run_id: str, force: bool):
        self.path = root / run_id
        self.run_id = run_id
        self.force = force

    def open(self, cfg: TrainConfig | None, fingerprint: str, extra: dict | None = None) -> "RunDir":
        if self.path.exists() and any(self.path.glob("*.ckpt")) and not self.force:
            raise UsageError(f"run directory {self.path} already holds checkpoints; pass --force to overwrite")
        self.path.mkdir(parents=True, exist_ok=True)
        snap = write_kv(cfg) if cfg is not None else ""
        for k, v in (extra or {}).items():
            snap += f"# {k}={v}\n"
        atomic_write_bytes(self.path / "config.txt", snap.encode("utf-8"))
        atomic_write_bytes(self.path / "dataset.sha256", (fingerprint + "\n").encode("utf-8"))
        return self

    def checkpoint(self, name: str, model) -> Path:
        path = self.path / name
        save_checkpoint(path, model.state_dict())
        return path


def _entropy_rows(history, run_id: str, seed: int) -> list[dict]:
    rows = aggregate_entropy_log(history.entropy)
    return [dict(r, run_id=run_id, seed=seed) for r in rows]


def _metric_rows(run_id, paradigm, cfg, metrics, threshold, seed) -> list[dict]:
    return [{
        "run_id": run_id, "paradigm": paradigm, "encoder_preset": encoder_preset(cfg),
        "ter_mode": cfg.ter_mode.value, "generation": gen,
        "acc_at_1": metrics[gen][1], "acc_at_3": metrics[gen][3],
        "threshold": threshold, "seed": seed,
    } for gen in GENERATIONS]


def _summary_rows(rows: list[dict]) -> list[dict]:
    """Append mean and std rows per generation over the per-seed rows."""
    out = list(rows)
    if len({r["seed"] for r in rows}) < 2:
        return out
    for stat in ("mean", "std"):
        for gen in GENERATIONS:
            sel = [r for r in rows if r["generation"] == gen]
            row = dict(sel[0], seed=stat)
            for col in ("acc_at_1", "acc_at_3"):
                m, s = ex.mean_std([r[col] for r in sel])
                row[col] = m if stat == "mean" else s
            out.append(row)
    return out


def _curve_rows(history, run_id, seed) -> list[dict]:
    return [dict(r, run_id=run_id, seed=seed) for r in history.epochs]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.stations < 1:
        raise ConfigError(f"--stations must be >= 1, got {args.stations}")
    stations = sim.generate_dataset(args.stations, args.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out, sim.dumps_dataset(stations).encode("utf-8"))
    gens = [g for st in stations for g in st.generations]
    labels = [a.class_label for st in stations for a in st.antennas]
    summary = {
        "version": sim.DATASET_VERSION,
        "seed": args.seed,
        "stations": len(stations),
        "antennas": sum(len(st.antennas) for st in stations),
        "signals": len(gens),
        "pairs": sum(len(st.pairs) for st in stations),
        "signals_by_generation": {g: gens.count(g) for g in ("4G", "5G")},
        "antennas_by_class": {str(c): labels.count(c) for c in range(4)},
        "sha256": sim.fingerprint(out),
    }
    stats_path = out.with_name(out.name + ".stats.json")
    atomic_write_bytes(stats_path, (json.dumps(summary, indent=2) + "\n").encode("utf-8"))
    print(f"wrote {len(stations)} stations to {out}")
    return 0


def _setup(args, command: str, extra: dict | None = None):
    cfg = resolve_config(args)
    stations, fp = _load_data(args)
    payload = {"cfg": cfg.to_dict(), "data": fp, "split_seed": args.split_seed,
               "repeats": args.repeats, **(extra or {})}
    run = RunDir(output_root(args), make_run_id(command, payload), args.force)
    splits = ex.prepare(stations, args.split_seed)
    return cfg, splits, run, fp


def cmd_pretrain(args) -> int:
    cfg, splits, run, fp = _setup(args, "pretrain")
    run.open(cfg, fp, {"split_seed": args.split_seed, "repeats": args.repeats})
    metrics, entropy, curves = [], [], []
    for seed in _seeds(cfg, args.repeats):
        c = cfg.replace(seed=seed)
        res = ex.run_pretrain(c, splits)
        run.checkpoint(f"seed{seed}.ckpt", res.model)
        from .train import evaluate_matching
        m = evaluate_matching(res.model, splits.val, c.temperature)
        metrics += _metric_rows(run.run_id, "Pretrain", c, m, args.threshold, seed)
        entropy += _entropy_rows(res.history, run.run_id, seed)
        curves += _curve_rows(res.history, run.run_id, seed)
    write_csv(run.path / "metrics.csv", METRIC_COLUMNS, _summary_rows(metrics))
    write_csv(run.path / "entropy.csv", ENTROPY_COLUMNS, entropy)
    write_csv(run.path / "curves.csv", CURVE_COLUMNS, curves)
    print(run.path)
    return 0


def _matching_command(args, command: str, paradigm: Paradigm) -> int:
    extra = {}
    state = None
    if paradigm is Paradigm.PRETRAIN_THEN_SFT:
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise UsageError(f"finetune needs an existing --checkpoint (got {args.checkpoint!r})")
        state = load_checkpoint(args.checkpoint)
        extra["checkpoint"] = sim.fingerprint(args.checkpoint)
    cfg, splits, run, fp = _setup(args, command, extra)
    cfg = cfg.replace(paradigm=paradigm)
    run.open(cfg, fp, {"split_seed": args.split_seed, "repeats": args.repeats, **extra})
    metrics, entropy, curves = [], [], []
    for seed in _seeds(cfg, args.repeats):
        c = cfg.replace(seed=seed)
        if state is not None:
            model = ex.new_model(c, splits)
            model.load_state_dict(state)
            res = ex.finetune(model, c, splits)
        else:
            res = ex.run_end2end(c, splits)
        run.checkpoint(f"seed{seed}.ckpt", res.model)
        metrics += _metric_rows(run.run_id, paradigm.value, c, res.metrics, args.threshold, seed)
        entropy += _entropy_rows(res.history, run.run_id, seed)
        curves += _curve_rows(res.history, run.run_id, seed)
    write_csv(run.path / "metrics.csv", METRIC_COLUMNS, _summary_rows(metrics))
    write_csv(run.path / "entropy.csv", ENTROPY_COLUMNS, entropy)
    write_csv(run.path / "curves.csv", CURVE_COLUMNS, curves)
    print(run.path)
    return 0


def cmd_finetune(args) -> int:
    return _matching_command(args, "finetune", Paradigm.PRETRAIN_THEN_SFT)


def cmd_end2end(args) -> int:
    return _matching_command(args, "end2end", Paradigm.END2END)


def ablation_grid(cfg: TrainConfig, ter_modes, pool_modes, lambdas) -> list[TrainConfig]:
    return [cfg.replace(ter_mode=t, pool_mode=p, lam=lam)
            for t in ter_modes for p in pool_modes for lam in lambdas]


def cmd_ablate(args) -> int:
    ter_modes = _split_list(args.ter_modes, TerMode)
    pool_modes = _split_list(args.pool_modes, PoolMode)
    lambdas = _split_list(args.lambdas, float)
    extra = {"grid": [[t.value for t in ter_modes], [p.value for p in pool_modes], lambdas]}
    cfg, splits, run, fp = _setup(args, "ablate", extra)
    run.open(cfg, fp, {"split_seed": args.split_seed, "repeats": args.repeats, **extra})
    rows, curves, entropy = [], [], []
    for cell, base in enumerate(ablation_grid(cfg, ter_modes, pool_modes, lambdas)):
        for seed in _seeds(cfg, args.repeats):
            row = {"run_id": run.run_id, "cell": cell, "ter_mode": base.ter_mode.value,
                   "pool_mode": base.pool_mode.value, "lambda": base.lam, "seed": seed}
            try:
                c = base.replace(seed=seed)
                res = ex.run_pretrain(c, splits)
                acc1 = [r["val_acc1"] for r in res.history.epochs]
                row.update(status="ok", final_acc1=acc1[-1],
                           final_acc3=res.history.epochs[-1]["val_acc3"],
                           best_acc1=max(acc1), final_tel=res.history.epochs[-1]["tel"], error="")
                run.checkpoint(f"cell{cell}_seed{seed}.ckpt", res.model)
                tag = f"{run.run_id}/cell{cell}"
                curves += _curve_rows(res.history, tag, seed)
                entropy += _entropy_rows(res.history, tag, seed)
            except (TerlabError, ValueError, ArithmeticError) as exc:
                log.warning("cell %d seed %d failed: %s", cell, seed, exc)
                row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
    write_csv(run.path / "ablation.csv", ABLATION_COLUMNS, rows)
    write_csv(run.path / "curves.csv", CURVE_COLUMNS, curves)
    write_csv(run.path / "entropy.csv", ENTROPY_COLUMNS, entropy)
    ok = [r for r in rows if r["status"] == "ok"]
    metric_rows = [{"run_id": r["run_id"], "paradigm": "Pretrain", "encoder_preset": encoder_preset(cfg),
                    "ter_mode": r["ter_mode"], "generation": "overall", "acc_at_1": r["final_acc1"],
                    "acc_at_3": r["final_acc3"], "threshold": args.threshold, "seed": r["seed"]} for r in ok]
    write_csv(run.path / "metrics.csv", METRIC_COLUMNS, metric_rows)
    failed = len(rows) - len(ok)
    print(f"{run.path} ({len(rows)} rows, {failed} failed)")
    return 0


def cmd_classify(args) -> int:
    pool_modes = _split_list(args.pool_modes, PoolMode)
    cfg, splits, run, fp = _setup(args, "classify", {"pool_modes": [p.value for p in pool_modes]})
    run.open(cfg, fp, {"split_seed": args.split_seed, "repeats": args.repeats})
    baseline = ex.majority_baseline(splits.train, splits.test)
    rows = []
    for pm in pool_modes:
        for fusion in (True, False):
            for seed in _seeds(cfg, args.repeats):
                c = cfg.replace(pool_mode=pm, use_geometry=fusion, seed=seed)
                model, acc = ex.run_classify(c, splits)
                tag = "fused" if fusion else "visual"
                run.checkpoint(f"{pm.value}_{tag}_seed{seed}.ckpt", model)
                rows.append({"run_id": run.run_id, "pool_mode": pm.value, "fusion": "on" if fusion else "off",
                             "seed": seed, "accuracy": acc, "majority_baseline": baseline})
    write_csv(run.path / "classify.csv", CLASSIFY_COLUMNS, rows)
    write_csv(run.path / "metrics.csv", METRIC_COLUMNS, [])
    write_csv(run.path / "entropy.csv", ENTROPY_COLUMNS, [])
    print(run.path)
    for r in rows:
        print(f"{r['pool_mode']:>13} fusion={r['fusion']:<3} seed={r['seed']} acc={r['accuracy']:.4f} "
              f"(majority {baseline:.4f})")
    return 0


def cmd_report(args) -> int:
    root = output_root(args)
    files = sorted(root.glob("*/metrics.csv"))
    if not files:
        raise UsageError(f"no metrics.csv files under {root}")
    groups: dict[tuple, list[dict]] = {}
    for f in files:
        for r in read_csv(f):
            if r["seed"] in ("mean", "std"):
                continue
            key = (r["run_id"], r["paradigm"], r["encoder_preset"], r["ter_mode"], r["generation"])
            groups.setdefault(key, []).append(r)
    rows = []
    for key, sel in sorted(groups.items()):
        m1, s1 = ex.mean_std([float(r["acc_at_1"]) for r in sel])
        m3, s3 = ex.mean_std([float(r["acc_at_3"]) for r in sel])
        rows.append(dict(zip(("run_id", "paradigm", "encoder_preset", "ter_mode", "generation"), key),
                         seeds=len(sel), acc_at_1_mean=m1, acc_at_1_std=s1, acc_at_3_mean=m3, acc_at_3_std=s3))
    cols = ["run_id", "paradigm", "encoder_preset", "ter_mode", "generation", "seeds",
            "acc_at_1_mean", "acc_at_1_std", "acc_at_3_mean", "acc_at_3_std"]
    out = Path(args.output) if args.output else root / "report.csv"
    write_csv(out, cols, rows)
    for r in rows:
        print(f"{r['run_id']:<24} {r['paradigm']:<16} {r['ter_mode']:<10} {r['generation']:<8} "
              f"acc@1 {r['acc_at_1_mean']:.3f}±{r['acc_at_1_std']:.3f}  "
              f"acc@3 {r['acc_at_3_mean']:.3f}±{r['acc_at_3_std']:.3f}  (n={r['seeds']})")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="terlab", description="Token entropy regularization experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic station dataset (JSONL)")
    g.add_argument("--stations", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--output", "-o", default="data/stations.jsonl")
    g.set_defaults(func=cmd_gen_data)

    def training(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--data", help="dataset JSONL from gen-data")
        sp.add_argument("--out", help="output root (default $TERLAB_OUT or ./runs)")
        sp.add_argument("--split-seed", type=int, default=0)
        sp.add_argument("--repeats", type=int, default=1, help="seeds seed, seed+1, ...")
        sp.add_argument("--threshold", type=float, default=0.5, help="open-set score threshold recorded with metrics")
        sp.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
        add_config_flags(sp)
        sp.set_defaults(func=func)
        return sp

    training("pretrain", cmd_pretrain, "contrastive pretraining")
    ft = training("finetune", cmd_finetune, "supervised matching from a pretrained checkpoint")
    ft.add_argument("--checkpoint", help="checkpoint written by pretrain")
    training("end2end", cmd_end2end, "matching trained from scratch")
    ab = training("ablate", cmd_ablate, "ter_mode x pool_mode x lambda pretraining grid")
    ab.add_argument("--ter-modes", default="Off,EteOnly,EtePlusTel")
    ab.add_argument("--pool-modes", default="CLS,TLF")
    ab.add_argument("--lambdas", default="0,0.001,0.01,0.1")
    cl = training("classify", cmd_classify, "4-way antenna type classification")
    cl.add_argument("--pool-modes", default="CLS,TLF,CLS_PLUS_TLF")

    r = sub.add_parser("report", help="summarize metrics.csv files under the output root")
    r.add_argument("--out", help="output root (default $TERLAB_OUT or ./runs)")
    r.add_argument("--output", help="report CSV path (default <root>/report.csv)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except TerlabError as exc:
        print(f"terlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
