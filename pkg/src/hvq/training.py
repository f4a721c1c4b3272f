"""Loss assembly and the per-activity training loop.

One video is one batch. A step encodes the video, l2-normalises the
embeddings, quantizes them through the codebook hierarchy, decodes the
top-level prototypes with a straight-through gradient path back to the
embeddings, applies AdamW to encoder and decoder, then moves the codebooks
by EMA and resets dead prototypes.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import ActivityDataset, Checkpoint, VideoFeatures, load_checkpoint, save_checkpoint
from .numerics import ConfigError, OptimConfig, adamw_step
from .quantizer import (
    Codebook,
    HvqConfig,
    QuantizeResult,
    commitment_losses,
    ema_update,
    init_kmeans,
    l2_normalize,
    quantize_hierarchy,
    reset_dead,
)
from .tcn import (
    DataError,
    TcnConfig,
    TcnModel,
    build_model,
    decode_backward,
    decode_forward,
    encode,
    encode_backward,
    encode_forward,
)

logger = logging.getLogger(__name__)

LOSS_TERMS = ("rec", "commit_z", "commit_q")


@dataclass
class TrainConfig:
    lambda_rec: float = 0.002
    epochs: int = 30
    seed: int = 0
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    hvq: HvqConfig = field(default_factory=HvqConfig)
    tcn: TcnConfig = field(default_factory=TcnConfig)
    loss_terms: Tuple[str, ...] = LOSS_TERMS

    def __post_init__(self) -> None:
        if self.lambda_rec < 0:
            raise ConfigError("lambda_rec must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        self.loss_terms = tuple(self.loss_terms)
        unknown = set(self.loss_terms) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}")
        if not self.loss_terms:
            raise ConfigError("at least one loss term must be enabled")


@dataclass
class TrainReport:
    total: List[float] = field(default_factory=list)
    rec: List[float] = field(default_factory=list)
    commit_z: List[float] = field(default_factory=list)
    commit_q: List[float] = field(default_factory=list)
    resets: List[List[int]] = field(default_factory=list)
    duration: float = 0.0


@dataclass
class StepResult:
    losses: Dict[str, float]
    quantized: QuantizeResult
    resets: List[int]


def reconstruction_loss(x: np.ndarray, x_hat: np.ndarray) -> Tuple[float, np.ndarray]:
    """``sum_t ||x_t - x_hat_t||^2`` and its gradient w.r.t. ``x_hat``."""
    if x.shape != x_hat.shape:
        raise DataError(f"reconstruction shape {x_hat.shape} != input shape {x.shape}")
    diff = x_hat - x
    return float(np.sum(diff * diff)), 2.0 * diff


def total_loss(terms: Dict[str, float], config: TrainConfig) -> float:
    """Enabled commitment terms plus ``lambda_rec`` times the reconstruction term."""
    enabled = config.loss_terms
    total = 0.0
    if "commit_z" in enabled:
        total += terms.get("commit_z", 0.0)
    if "commit_q" in enabled:
        total += terms.get("commit_q", 0.0)
    if "rec" in enabled:
        total += config.lambda_rec * terms.get("rec", 0.0)
    return total


def embed(model: TcnModel, frames: np.ndarray) -> np.ndarray:
    """Evaluation-mode, unit-norm frame embeddings."""
    return l2_normalize(encode(model, frames, training=False))


def forward_backward(model: TcnModel, books: Sequence[Codebook], x: np.ndarray,
                     config: TrainConfig, rng: Optional[np.random.Generator] = None,
                     training: bool = True, video_id: str = "video"
                     ) -> Tuple[Dict[str, float], QuantizeResult, np.ndarray]:
    """Loss terms, quantization and unit embeddings ``e`` for one video.

    Parameter gradients are left in the model's stores; codebooks are read
    but not modified. Gradients are those of the
    straight-through composite: the decoder input and every lower-level
    prototype behave as ``e`` plus a constant offset.
    """
    x = np.asarray(x, dtype=np.float64)
    model.encoder.zero_grad()
    model.decoder.zero_grad()

    raw, enc_tape = encode_forward(model, x, training=training, rng=rng)
    norms = np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
    e = raw / norms
    result = quantize_hierarchy(e, books)

    # Straight-through: the decoder sees q but its input gradient lands on e.
    x_hat, dec_tape = decode_forward(model, result.q, training=training, rng=rng)
    rec, g_xhat = reconstruction_loss(x, x_hat)
    commit = commitment_losses(e, result, books)
    terms = {"rec": rec, "commit_z": commit.commit_z, "commit_q": commit.commit_q}
    terms["total"] = total_loss(terms, config)
    if not np.isfinite(terms["total"]):
        raise FloatingPointError(f"non-finite loss {terms} on video {video_id!r}")

    enabled = config.loss_terms
    g_e = np.zeros_like(e)
    if "rec" in enabled and config.lambda_rec != 0.0:
        g_e += decode_backward(model, dec_tape, config.lambda_rec * g_xhat)
    if "commit_z" in enabled:
        g_e += commit.grad_commit_z
    if "commit_q" in enabled:
        g_e += commit.grad_commit_q
    # Through the row normalisation e = r / ||r||.
    g_raw = (g_e - e * np.sum(g_e * e, axis=1, keepdims=True)) / norms
    encode_backward(model, enc_tape, g_raw)
    return terms, result, e


def train_step(model: TcnModel, books: Sequence[Codebook], video: VideoFeatures,
               config: TrainConfig, rng: np.random.Generator) -> StepResult:
    """One gradient + codebook update on a single video (mutates model and books)."""
    terms, result, e = forward_backward(model, books, video.frames, config, rng, True, video.id)
    adamw_step(model.encoder, config.optimizer)
    adamw_step(model.decoder, config.optimizer)

    beta, variant = config.hvq.ema_decay, config.hvq.ema_variant
    inputs = [e] + result.vectors[:-1]
    for level, book in enumerate(books):
        ema_update(book, inputs[level], result.indices[level], beta, variant)
    resets = [reset_dead(book, inputs[level], rng) for level, book in enumerate(books)]
    return StepResult(terms, result, resets)


def resolve_config(config: TrainConfig, dataset: ActivityDataset) -> TrainConfig:
    """Fill K and the input width from the dataset where the config leaves them open."""
    hvq = config.hvq if config.hvq.K is not None else replace(config.hvq, K=dataset.K)
    tcn = config.tcn
    if tcn.input_dim is None:
        tcn = replace(tcn, input_dim=dataset.feature_dim)
    elif tcn.input_dim != dataset.feature_dim:
        raise DataError(f"config input_dim {tcn.input_dim} != dataset feature width {dataset.feature_dim}")
    if hvq.K is None:
        raise ConfigError(f"activity {dataset.name!r}: K unknown (no labels and no K in config)")
    return replace(config, hvq=hvq, tcn=tcn)


@dataclass
class TrainState:
    model: TcnModel
    books: List[Codebook]
    config: TrainConfig
    rng: np.random.Generator
    epoch: int = 0


def init_state(dataset: ActivityDataset, config: TrainConfig) -> TrainState:
    """Fresh model plus codebooks K-means-initialised on the first video."""
    if not dataset.videos:
        raise ConfigError(f"activity {dataset.name!r} has no videos")
    config = resolve_config(config, dataset)
    model = build_model(config.tcn, config.seed)
    first = embed(model, dataset.videos[0].frames)
    books = init_kmeans(first, config.hvq, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    return TrainState(model, books, config, rng)


StepCallback = Callable[[TrainState, VideoFeatures, StepResult], None]


def run_epoch(state: TrainState, dataset: ActivityDataset,
              on_step: Optional[StepCallback] = None) -> Dict[str, float]:
    order = np.arange(len(dataset.videos))
    if state.epoch > 0:
        order = state.rng.permutation(order)
    sums = {k: 0.0 for k in ("total",) + LOSS_TERMS}
    resets = [0] * len(state.books)
    for i in order:
        video = dataset.videos[int(i)]
        step = train_step(state.model, state.books, video, state.config, state.rng)
        for k in sums:
            sums[k] += step.losses[k]
        resets = [a + b for a, b in zip(resets, step.resets)]
        if on_step is not None:
            on_step(state, video, step)
    state.epoch += 1
    n = len(order)
    out = {k: v / n for k, v in sums.items()}
    out["resets"] = resets
    return out


def train_activity(dataset: ActivityDataset, config: TrainConfig,
                   on_step: Optional[StepCallback] = None,
                   state: Optional[TrainState] = None) -> Tuple[TcnModel, List[Codebook], TrainReport]:
    """Train one activity, from scratch or onward from ``state``.

    Epoch 0 visits videos in dataset order, later epochs in a seeded shuffle.
    Training stops once ``config.epochs`` epochs have run in total.
    Progress is logged at INFO as ``epoch=<n> loss=<x> resets_z=<a> resets_q=<b>``.
    """
    start = time.perf_counter()
    if state is None:
        state = init_state(dataset, config)
    else:
        state.config = replace(state.config, epochs=config.epochs)
    report = TrainReport()
    while state.epoch < state.config.epochs:
        stats = run_epoch(state, dataset, on_step)
        report.total.append(stats["total"])
        report.rec.append(stats["rec"])
        report.commit_z.append(stats["commit_z"])
        report.commit_q.append(stats["commit_q"])
        report.resets.append(stats["resets"])
        resets_q = sum(stats["resets"][1:])
        logger.info("epoch=%d loss=%.6g resets_z=%d resets_q=%d",
                    state.epoch, stats["total"], stats["resets"][0], resets_q)
    report.duration = time.perf_counter() - start
    return state.model, state.books, report


# --- config and state persistence -------------------------------------------

def config_to_dict(config: TrainConfig) -> dict:
    out = asdict(config)
    out["loss_terms"] = list(config.loss_terms)
    return out


def _build(cls, values: Optional[dict], where: str):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(values: dict) -> TrainConfig:
    """Inverse of :func:`config_to_dict`; unknown keys are rejected at every level."""
    values = dict(values)
    nested = {
        "optimizer": _build(OptimConfig, values.pop("optimizer", None), "optimizer"),
        "hvq": _build(HvqConfig, values.pop("hvq", None), "hvq"),
        "tcn": _build(TcnConfig, values.pop("tcn", None), "tcn"),
    }
    if "loss_terms" in values:
        values["loss_terms"] = tuple(values["loss_terms"])
    return _build(TrainConfig, {**values, **nested}, "train")


def save_state(path, state: TrainState, extra: Optional[dict] = None) -> None:
    """Checkpoint everything needed to resume: weights, moments, codebooks, RNG and epoch."""
    info = {"epoch": state.epoch, "rng_state": state.rng.bit_generator.state}
    info.update(extra or {})
    save_checkpoint(path, state.model, state.books, {"train": config_to_dict(state.config)}, info)


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    config = config_from_dict(ckpt.configs["train"])
    rng = np.random.default_rng()
    if "rng_state" in ckpt.extra:
        rng.bit_generator.state = ckpt.extra["rng_state"]
    return TrainState(ckpt.model, ckpt.books, config, rng, int(ckpt.extra.get("epoch", config.epochs)))


def load_state(path) -> TrainState:
    return state_from_checkpoint(load_checkpoint(path))
