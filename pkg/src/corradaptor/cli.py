"""Command-line entry points: gen, train, eval, bench-attn.

Every subcommand accepts ``--config FILE.toml``; keys mirror the long flag
names (dashes or underscores) and explicit flags override the file.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import tomli

from .data import load_pairs, save_pairs, split_seeds, synth_dataset
from .metrics import MetricsReport
from .model import CorrAdaptorConfig
from .motion_attention import benchmark_attention
from .training import (
    ABLATIONS,
    TrainConfig,
    TrainingError,
    ablation_config,
    evaluate,
    evaluate_ransac,
    load_model,
    oracle_report,
    train,
)

log = logging.getLogger("corradaptor")

SPLITS = ("train", "val", "test")
REPORT_KEYS = ("precision", "recall", "fscore", "auc5", "auc10", "auc20")
ATTENTION_KINDS = {"flow": "flow", "plain": "dense"}


class CliError(Exception):
    pass


# ------------------------------------------------------------------- helpers

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


# ----------------------------------------------------------------------- gen

def split_counts(pairs: int, fractions: list[float]) -> list[int]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise CliError("--split needs three nonnegative fractions summing to 1")
    counts = [int(round(pairs * f)) for f in fractions[1:]]
    return [pairs - sum(counts)] + counts


def cmd_gen(args) -> int:
    out = Path(args.out)
    counts = split_counts(args.pairs, args.split)
    seeds = split_seeds(args.seed, len(SPLITS))
    manifest = {"format": "corrpairs v1", "seed": args.seed,
                "params": {"n": args.n, "outlier_ratio": args.outliers, "noise_sigma": args.noise},
                "splits": {}}
    for name, count, seed in zip(SPLITS, counts, seeds):
        pairs = synth_dataset(count, args.n, args.outliers, args.noise, seed)
        paths = save_pairs(pairs, out / name) if count else []
        (out / name).mkdir(parents=True, exist_ok=True)
        labels = np.concatenate([p.labels for p in pairs]) if pairs else np.zeros(0, bool)
        built = np.concatenate([p.constructed for p in pairs]) if pairs else np.zeros(0, bool)
        manifest["splits"][name] = {
            "count": count, "seed": seed,
            # resampled by construction vs. labeled outlier after re-deriving labels at tau
            "outlier_fraction": float(1 - built.mean()) if built.size else None,
            "label_outlier_fraction": float(1 - labels.mean()) if labels.size else None,
            "files": {p.name: _sha256(p) for p in paths},
        }
    path = out / "manifest.json"
    _write_json(path, manifest)
    digest = _sha256(path)
    (out / "manifest.sha256").write_text(digest + "\n")
    print(f"wrote {sum(counts)} pairs to {out} (manifest sha256 {digest})")
    return 0


# --------------------------------------------------------------------- train

def model_config_from_args(args) -> CorrAdaptorConfig:
    values = {"k_per_block": tuple(_ints(args.k_per_block)), "d": args.d, "clusters": args.clusters,
              "heads": args.heads, "L_m": args.l_m, "L_p": len(_ints(args.k_per_block)),
              "L_fusion": args.l_fusion, "alpha": args.alpha, "attention": ATTENTION_KINDS[args.attention],
              "lam": args.lam, "warmup_frac": args.warmup_frac,
              "share_motion_weights": args.share_motion_weights}
    cfg = CorrAdaptorConfig(**values)
    return ablation_config(cfg, args.ablate) if args.ablate else cfg


def _split_dir(data: Path, name: str) -> Path:
    return data / name if (data / name).is_dir() else data


def cmd_train(args) -> int:
    data = Path(args.data)
    if not data.exists():
        raise CliError(f"dataset {data} does not exist")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = model_config_from_args(args)
    tcfg = TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, weight_decay=args.weight_decay,
                       seed=args.seed, val_every=args.val_every, ransac_iters=args.ransac_iters,
                       pose_path=args.pose_path)
    train_pairs = load_pairs(_split_dir(data, "train"))
    if not train_pairs:
        raise CliError(f"no training pairs under {data}")
    val_dir = data / "val"
    val_pairs = load_pairs(val_dir) if val_dir.is_dir() else None
    _write_json(out / "config.json", {"model": cfg.to_dict(), "train": asdict(tcfg)})
    _, history = train(train_pairs, cfg, tcfg, val_pairs or None, out / "train.jsonl", out / "model.ckpt")
    losses = [h["loss_total"] for h in history if "step" in h]
    print(f"trained {len(losses)} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return 0


# ---------------------------------------------------------------------- eval

def _report_files(out: Path, tag: str, report: MetricsReport) -> dict:
    summary = report.summary()
    errors = sorted(r["pose_error"] for r in report.rows if r.get("pose_error") is not None)
    with open(out / f"error_cdf_{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["error_deg", "cdf"])
        for i, e in enumerate(errors):
            w.writerow([repr(float(e)), repr((i + 1) / len(errors))])
    with open(out / f"pairs_{tag}.csv", "w", newline="") as fh:
        fields = ["name", "precision", "recall", "fscore", "pose_error"]
        w = csv.DictWriter(fh, fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(report.rows)
    return summary


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = Path(args.data)
    if not data.exists():
        raise CliError(f"dataset {data} does not exist")
    pairs = load_pairs(_split_dir(data, "test"))
    if not pairs:
        raise CliError(f"no pairs under {data}")
    if args.oracle:
        if any(p.labels is None for p in pairs):
            raise CliError("oracle mode needs labeled pairs")
        report, tag = oracle_report(pairs), "oracle"
    else:
        ckpt = Path(args.checkpoint) if args.checkpoint else None
        if ckpt is None or not ckpt.is_file():
            raise CliError(f"checkpoint {ckpt} not found")
        cfg_path = Path(args.model_config) if args.model_config else ckpt.parent / "config.json"
        if not cfg_path.is_file():
            raise CliError(f"model config {cfg_path} not found")
        cfg = CorrAdaptorConfig.from_dict(json.loads(cfg_path.read_text())["model"])
        model = load_model(cfg, ckpt)
        report, tag = evaluate(model, pairs, args.ransac_iters, args.pose_path, seed=args.seed), "model"
    summary = _report_files(out, tag, report)
    _write_json(out / "report.json", summary)
    table = [{"method": tag, **summary}]
    if args.baseline == "ransac":
        base = evaluate_ransac(pairs, args.ransac_iters, seed=args.seed)
        base_summary = _report_files(out, "ransac", base)
        _write_json(out / "report_ransac.json", base_summary)
        table.append({"method": "ransac", **base_summary})
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["method", *REPORT_KEYS])
        w.writeheader()
        for row in table:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    for row in table:
        print(" ".join([f"{row['method']:>8}"] + [f"{k}={row[k]:.4f}" for k in REPORT_KEYS]))
    return 0


# ----------------------------------------------------------------- bench-attn

def cmd_bench_attn(args) -> int:
    rows = benchmark_attention(tuple(args.sizes), args.d, args.runs, args.warmup, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["kind", "N", "d", "median_ms", "p90_ms"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['kind']:>5} N={r['N']:>6} median={r['median_ms']:.2f} ms p90={r['p90_ms']:.2f} ms")
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corradaptor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML file whose keys mirror the flags")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    g = command("gen", cmd_gen, "generate synthetic train/val/test splits")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=300, help="total pairs over all splits")
    g.add_argument("--n", type=int, default=500, help="correspondences per pair")
    g.add_argument("--outliers", type=float, default=0.5)
    g.add_argument("--noise", type=float, default=1e-3)
    g.add_argument("--split", type=float, nargs=3, default=[0.8, 0.1, 0.1], metavar=("TRAIN", "VAL", "TEST"))

    defaults = CorrAdaptorConfig()
    t = command("train", cmd_train, "train a model")
    t.add_argument("--data", required=True, help="dataset root (with train/ and optional val/) or a directory")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--batch", type=int, default=8, help="desk default; the paper used 32")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--val-every", type=int, default=0, help="epochs between validations (0 = at the end)")
    t.add_argument("--d", type=int, default=defaults.d)
    t.add_argument("--heads", type=int, default=defaults.heads)
    t.add_argument("--clusters", type=int, default=defaults.clusters)
    t.add_argument("--k-per-block", default=" ".join(map(str, defaults.k_per_block)),
                   help="neighbor counts, one per pruning block")
    t.add_argument("--l-m", type=int, default=defaults.L_m, help="motion injection rounds")
    t.add_argument("--l-fusion", type=int, default=defaults.L_fusion)
    t.add_argument("--alpha", type=float, default=defaults.alpha)
    t.add_argument("--lam", type=float, default=defaults.lam)
    t.add_argument("--warmup-frac", type=float, default=defaults.warmup_frac)
    t.add_argument("--attention", choices=sorted(ATTENTION_KINDS), default="flow")
    t.add_argument("--ablate", choices=sorted(set(ABLATIONS) - {"full", "plain-attention"}))
    t.add_argument("--share-motion-weights", action="store_true")
    t.add_argument("--ransac-iters", type=int, default=1000)
    t.add_argument("--pose-path", choices=("ransac", "direct"), default="ransac")

    e = command("eval", cmd_eval, "evaluate a checkpoint (or the label oracle) on a split")
    e.add_argument("--data", required=True, help="dataset root (uses test/) or a directory")
    e.add_argument("--out", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--model-config", help="config.json written by train (default: next to the checkpoint)")
    e.add_argument("--oracle", action="store_true", help="use ground-truth labels as predictions")
    e.add_argument("--baseline", choices=("ransac",))
    e.add_argument("--ransac-iters", type=int, default=1000)
    e.add_argument("--pose-path", choices=("ransac", "direct"), default="ransac")

    b = command("bench-attn", cmd_bench_attn, "time flow vs dense attention")
    b.add_argument("--out", required=True)
    b.add_argument("--sizes", type=int, nargs="+", default=[1024, 4096, 16384])
    b.add_argument("--d", type=int, default=128)
    b.add_argument("--runs", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` become defaults that explicit flags override."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    with open(args.config, "rb") as fh:
        values = tomli.load(fh)
    sub = _subparser(parser, args.command)
    dests = {a.dest for a in sub._actions} - {"help", "config", "func"}
    file_defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise CliError(f"unknown config key {key!r} for {args.command}")
        file_defaults[dest] = " ".join(map(str, value)) if dest == "k_per_block" and isinstance(value, list) else value
    sub.set_defaults(**file_defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = apply_config_file(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (CliError, ValueError, TrainingError, OSError, tomli.TOMLDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
