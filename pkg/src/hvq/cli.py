"""Command-line entry point: ``hvq synth|train|segment|eval|ablate``.

Exit codes are 0 on success, 2 for usage or data problems and 1 for
anything unexpected. Configuration files are JSON; unknown keys are errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import (
    ActivityDataset,
    FormatError,
    _atomic_write,
    group_dataset,
    load_activity,
    load_checkpoint,
    read_label_tokens,
    write_dataset,
    write_labels,
)
from .inference import DecodeError, FifaConfig, segment_activity
from .metrics import BIN_WIDTH, MetricError, evaluate, paired_histograms
from .numerics import ConfigError
from .synthetic import SeparationError, SyntheticSpec, synth_generate
from .tcn import DataError
from .training import (
    TrainConfig,
    _build,
    config_from_dict,
    config_to_dict,
    init_state,
    save_state,
    state_from_checkpoint,
    train_activity,
)

logger = logging.getLogger("hvq")

USAGE_ERRORS = (ConfigError, DataError, FormatError, DecodeError, MetricError, SeparationError,
                FileNotFoundError, NotADirectoryError, json.JSONDecodeError)

DECODERS = ("fifa", "dp", "argmax")
METRIC_KEYS = ("MoF", "F1", "precision", "recall", "JSD")

# Sweep grids; each entry is (row label, overrides applied to the run config).
ABLATION_GRIDS: Dict[str, List[tuple]] = {
    "lambda_rec": [(str(v), {"train": {"lambda_rec": v}}) for v in (0.0005, 0.001, 0.002, 0.005, 0.01)],
    "alpha": [(str(v), {"hvq": {"alpha": v}}) for v in (1, 2, 3, 4)],
    "levels": [(name, {"hvq": {"levels": n}}) for name, n in (("Single", 1), ("Double", 2), ("Triple", 3))],
    "ema_decay": [(str(v), {"hvq": {"ema_decay": v}}) for v in (0.7, 0.75, 0.8, 0.85, 0.9)],
    "decoder_kind": [(v, {"tcn": {"decoder_kind": v}}) for v in ("mlp", "tcn")],
    "loss_terms": [("+".join(t), {"train": {"loss_terms": list(t)}}) for t in (
        ("rec",), ("commit_q",), ("commit_z",), ("commit_z", "commit_q"),
        ("rec", "commit_q"), ("rec", "commit_z"), ("rec", "commit_z", "commit_q"))],
}


class UsageError(Exception):
    """Bad flags or inconsistent inputs; maps to exit code 2."""


@dataclass
class DecodeOptions:
    decoder: str = "fifa"
    mode: str = "product"

    def __post_init__(self) -> None:
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if self.mode not in ("product", "literal"):
            raise ConfigError(f"soft-assignment mode must be 'product' or 'literal', got {self.mode!r}")


@dataclass
class RunConfig:
    """Every tunable in one JSON document.

    Top-level keys: ``seed``, ``protocol``, ``background``, ``train``
    (``TrainConfig`` scalars), ``optimizer``, ``hvq``, ``tcn``, ``fifa``,
    ``decode``. Missing keys keep their defaults.
    """

    seed: int = 0
    protocol: str = "full"
    background: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    fifa: FifaConfig = field(default_factory=FifaConfig)
    decode: DecodeOptions = field(default_factory=DecodeOptions)

    SECTIONS = ("train", "optimizer", "hvq", "tcn", "fifa", "decode")

    @classmethod
    def from_dict(cls, values: dict, seed_fallback: Optional[int] = None) -> "RunConfig":
        if not isinstance(values, dict):
            raise ConfigError("config must be a JSON object")
        known = {"seed", "protocol", "background"} | set(cls.SECTIONS)
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"config: unknown keys {unknown}")
        for section in cls.SECTIONS:
            if section in values and not isinstance(values[section], dict):
                raise ConfigError(f"config: section {section!r} must be an object")
        seed = values.get("seed", seed_fallback if seed_fallback is not None else 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"config: seed must be an integer, got {seed!r}")
        protocol = values.get("protocol", "full")
        if protocol not in ("full", "split_80_20"):
            raise ConfigError(f"config: protocol must be 'full' or 'split_80_20', got {protocol!r}")
        train = dict(values.get("train", {}))
        for nested in ("optimizer", "hvq", "tcn"):
            if nested in train:
                raise ConfigError(f"config: put {nested!r} at the top level, not inside 'train'")
            if nested in values:
                train[nested] = values[nested]
        train.setdefault("seed", seed)
        return cls(seed=seed, protocol=protocol, background=values.get("background"),
                   train=config_from_dict(train),
                   fifa=_build(FifaConfig, values.get("fifa"), "fifa"),
                   decode=_build(DecodeOptions, values.get("decode"), "decode"))

    def to_dict(self) -> dict:
        train = config_to_dict(self.train)
        out = {"seed": self.seed, "protocol": self.protocol, "background": self.background}
        for nested in ("optimizer", "hvq", "tcn"):
            out[nested] = train.pop(nested)
        out["train"] = train
        out["fifa"] = asdict(self.fifa)
        out["decode"] = asdict(self.decode)
        return out


def _env_seed() -> Optional[int]:
    raw = os.environ.get("HVQ_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"HVQ_SEED must be an integer, got {raw!r}") from None


def load_run_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    if path is not None:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for section, patch in (overrides or {}).items():
        if isinstance(patch, dict):
            values[section] = {**values.get(section, {}), **patch}
        else:
            values[section] = patch
    return RunConfig.from_dict(values, _env_seed())


def _select(data: Dict[str, object], activity: str) -> Dict[str, object]:
    if activity == "all":
        return data
    if activity not in data:
        raise UsageError(f"activity {activity!r} not found; available: {sorted(data)}")
    return {activity: data[activity]}


def _checkpoint_paths(out: Path, names: Sequence[str]) -> Dict[str, Path]:
    if len(names) == 1 and out.suffix:
        return {names[0]: out}
    return {name: out / f"{name}.hvqc" for name in names}


# --- train -------------------------------------------------------------------

def _train_one(name: str, dataset: ActivityDataset, run: RunConfig, path: Path) -> dict:
    state = init_state(dataset, run.train)
    _, _, report = train_activity(dataset, run.train, state=state)
    save_state(path, state, {"activity": name, "run": run.to_dict(), "loss": report.total})
    return {"activity": name, "checkpoint": str(path), "first_loss": report.total[0],
            "final_loss": report.total[-1], "seconds": round(report.duration, 3)}


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args.config)
    data = group_dataset(args.data, run.protocol, run.seed, require_labels=False,
                         background=run.background)
    if run.protocol == "split_80_20":
        data = {name: pair[0] for name, pair in data.items()}
    data = _select(data, args.activity)
    paths = _checkpoint_paths(Path(args.out), list(data))
    jobs = max(1, args.jobs)
    if jobs == 1 or len(data) == 1:
        results = [_train_one(n, d, run, paths[n]) for n, d in data.items()]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_one, n, d, run, paths[n]) for n, d in data.items()]
            results = [f.result() for f in futures]
    for r in results:
        print(f"{r['activity']}: loss {r['first_loss']:.6g} -> {r['final_loss']:.6g} "
              f"({r['seconds']:.1f}s) -> {r['checkpoint']}")
    return 0


# --- segment -----------------------------------------------------------------

def _resolve_checkpoints(path: Path) -> List[Path]:
    if path.is_dir():
        found = sorted(path.glob("*.hvqc"))
        if not found:
            raise UsageError(f"{path}: no .hvqc checkpoints")
        return found
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such checkpoint")
    return [path]


def cmd_segment(args: argparse.Namespace) -> int:
    overrides = {"decode": {"decoder": args.decoder}} if args.decoder else None
    run = load_run_config(args.config, overrides)
    root = Path(args.data)
    for ckpt_path in _resolve_checkpoints(Path(args.checkpoint)):
        ckpt = load_checkpoint(ckpt_path)
        state = state_from_checkpoint(ckpt)
        name = args.activity or ckpt.extra.get("activity")
        if name is None:
            raise UsageError(f"{ckpt_path}: checkpoint names no activity; pass --activity")
        folder = root / name
        if not folder.is_dir():
            raise UsageError(f"{ckpt_path}: activity {name!r} missing under {root}")
        dataset = load_activity(folder, require_labels=False)
        expected = state.model.config.input_dim
        if dataset.feature_dim != expected:
            raise UsageError(f"{ckpt_path}: checkpoint expects {expected}-dim features, "
                             f"{name} has {dataset.feature_dim}")
        segs, stats = segment_activity(state.model, state.books, dataset.videos, run.decode.decoder,
                                       run.fifa, run.decode.mode, run.fifa.gamma)
        out = Path(args.out) / name
        for video, labels in zip(dataset.videos, segs):
            write_labels(out / f"{video.id}.txt", labels)
        sidecar = {"activity": name, "decoder": run.decode.decoder, "mode": run.decode.mode,
                   "order": [int(k) for k in stats.order],
                   "prior": {str(k): float(v) for k, v in zip(stats.order, stats.prior_vector())},
                   "videos": [v.id for v in dataset.videos]}
        _atomic_write(out / "segmentation.json", (json.dumps(sidecar, indent=2) + "\n").encode())
        print(f"{name}: {len(segs)} videos segmented with {run.decode.decoder} -> {out}")
    return 0


# --- eval --------------------------------------------------------------------

def _read_predictions(pred_dir: Path, gt: Dict[str, ActivityDataset]) -> Dict[str, List[np.ndarray]]:
    preds: Dict[str, List[np.ndarray]] = {}
    for name, ds in gt.items():
        folder = pred_dir / name
        if not folder.is_dir():
            raise UsageError(f"predictions for activity {name!r} missing under {pred_dir}")
        expected = {v.id for v in ds.videos}
        present = {p.stem for p in folder.glob("*.txt")}
        extra = sorted(present - expected)
        if extra:
            raise UsageError(f"{name}: prediction for unknown video {extra[0]!r}")
        tokens = []
        for video in ds.videos:
            path = folder / f"{video.id}.txt"
            if not path.exists():
                raise UsageError(f"{name}: no prediction for video {video.id!r}")
            toks = read_label_tokens(path)
            if len(toks) != video.length:
                raise UsageError(f"{name}: video {video.id!r} has {len(toks)} predicted labels "
                                 f"for {video.length} frames")
            tokens.append(toks)
        # One vocabulary per activity so cluster ids agree across its videos.
        vocab = {t: i for i, t in enumerate(sorted({t for toks in tokens for t in toks}))}
        preds[name] = [np.array([vocab[t] for t in toks], dtype=np.int64) for toks in tokens]
    return preds


def _write_histograms(out: Path, name: str, ds: ActivityDataset,
                      pred: Sequence[np.ndarray], bin_width: int) -> None:
    for video, p, g in zip(ds.videos, pred, ds.labels):
        hp, hg = paired_histograms(p, g, bin_width)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_start", "pred", "gt"])
        for i, (a, b) in enumerate(zip(hp, hg)):
            writer.writerow([i * bin_width, f"{a:.6g}", f"{b:.6g}"])
        _atomic_write(out / name / f"{video.id}.csv", buf.getvalue().encode())


def cmd_eval(args: argparse.Namespace) -> int:
    gt = group_dataset(args.gt, "full", background=args.background_label)
    pred = _read_predictions(Path(args.pred), gt)
    background = {n: ds.background for n, ds in gt.items()} if args.background_label else None
    report = evaluate(pred, {n: ds.labels for n, ds in gt.items()}, background,
                      names={n: [v.id for v in ds.videos] for n, ds in gt.items()})
    doc = report.to_dict()
    _atomic_write(Path(args.out), (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    if args.hist_out:
        for name, ds in gt.items():
            _write_histograms(Path(args.hist_out), name, ds, pred[name], BIN_WIDTH)
    agg = doc["aggregate"]
    print(" ".join(f"{k}={agg[k]:.1f}" for k in METRIC_KEYS if k in agg))
    return 0


# --- synth -------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    values = {}
    if args.spec:
        values = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    if not isinstance(values, dict):
        raise ConfigError("synthetic spec must be a JSON object")
    for key in ("short_lengths", "long_lengths"):
        if key in values:
            values[key] = tuple(values[key])
    if "seed" not in values and _env_seed() is not None:
        values["seed"] = _env_seed()
    try:
        spec = _build(SyntheticSpec, values, "spec")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    ds = synth_generate(spec)
    folder = write_dataset(ds, args.out)
    frames = sum(v.length for v in ds.videos)
    print(f"{ds.name}: {len(ds.videos)} videos, {frames} frames, K={ds.K}, "
          f"{int(max(s.max() for s in ds.sub_labels)) + 1} subactions -> {folder}")
    return 0


# --- ablate ------------------------------------------------------------------

def run_ablation(data: Dict[str, ActivityDataset], axis: str, base: dict) -> List[dict]:
    """Train and evaluate every activity once per grid value of ``axis``."""
    if axis not in ABLATION_GRIDS:
        raise UsageError(f"unknown axis {axis!r}; choose from {sorted(ABLATION_GRIDS)}")
    rows = []
    for label, patch in ABLATION_GRIDS[axis]:
        values = json.loads(json.dumps(base))
        for section, sub in patch.items():
            values[section] = {**values.get(section, {}), **sub}
        run = RunConfig.from_dict(values, _env_seed())
        pred, gt, bg = {}, {}, {}
        for name, ds in data.items():
            model, books, _ = train_activity(ds, run.train)
            segs, _ = segment_activity(model, books, ds.videos, run.decode.decoder, run.fifa,
                                       run.decode.mode, run.fifa.gamma)
            pred[name], gt[name], bg[name] = segs, ds.labels, ds.background
        background = bg if any(v is not None for v in bg.values()) else None
        agg = evaluate(pred, gt, background).to_dict()["aggregate"]
        row = {"axis": axis, "setting": label}
        row.update({k: round(agg[k], 4) for k in METRIC_KEYS if k in agg})
        rows.append(row)
        logger.info("%s=%s MoF=%.2f F1=%.2f", axis, label, agg["MoF"], agg["F1"])
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.axis not in ABLATION_GRIDS:
        raise UsageError(f"unknown axis {args.axis!r}; choose from {sorted(ABLATION_GRIDS)}")
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    run = RunConfig.from_dict(base, _env_seed())
    data = group_dataset(args.data, "full", run.seed, background=run.background)
    data = _select(data, args.activity)
    rows = run_ablation(data, args.axis, base)
    columns = ["axis", "setting"] + [k for k in METRIC_KEYS if all(k in r for r in rows)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _atomic_write(Path(args.out), buf.getvalue().encode())
    print(buf.getvalue(), end="")
    return 0


# --- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvq", description="Hierarchical vector-quantized "
                                     "unsupervised temporal action segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    p.add_argument("--out", required=True, help="dataset root")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one checkpoint per activity")
    p.add_argument("--data", required=True)
    p.add_argument("--activity", default="all")
    p.add_argument("--config")
    p.add_argument("--out", required=True,
                   help="checkpoint file for a single activity, otherwise a directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes across activities")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="decode segmentations from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or directory of them")
    p.add_argument("--data", required=True)
    p.add_argument("--activity", help="override the activity recorded in the checkpoint")
    p.add_argument("--decoder", choices=DECODERS)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--background-label")
    p.add_argument("--out", required=True)
    p.add_argument("--hist-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one hyperparameter over its grid")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--activity", default="all")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"hvq {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort guard for the exit-code contract
        logger.debug("internal error", exc_info=True)
        print(f"hvq {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
