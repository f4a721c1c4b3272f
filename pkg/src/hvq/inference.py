"""From trained codebooks to ordered, smooth segmentations.

Frames get a soft cluster assignment from their cosine relations to the fine
and coarse prototypes. Clusters are ordered by the mean normalised timestamp
of their frames, and a length prior is the average per-video frame share.
Decoding then fits one contiguous segment per ordered cluster, either
exactly by dynamic programming or approximately by gradient descent on
relaxed segment boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import digamma, expit, gammaln, softmax

from .numerics import ConfigError
from .quantizer import Codebook, cosine_matrix, quantize_hierarchy
from .tcn import TcnModel
from .training import embed

DEFAULT_GAMMA = 0.05


class DecodeError(ValueError):
    """The requested segmentation cannot be produced."""


@dataclass
class FifaConfig:
    learning_rate: float = 6e-6
    sharpness: float = 0.1
    epochs: int = 100
    gamma: float = DEFAULT_GAMMA
    step_check: bool = False

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.sharpness <= 0 or self.epochs < 0:
            raise ConfigError("FIFA learning_rate and sharpness must be > 0, epochs >= 0")


@dataclass
class ActivityStats:
    """What decoding needs to know about the whole activity."""

    order: List[int]
    prior: Dict[int, float]

    def prior_vector(self) -> np.ndarray:
        return np.array([self.prior[k] for k in self.order])


def soft_assign(E: np.ndarray, books: Sequence[Codebook], mode: str = "product") -> np.ndarray:
    """Row-stochastic ``(T, K)`` soft assignment of frames to top-level clusters.

    ``product``: ``sim[t, i] = sum_j cos(e_t, z_j) * cos(z_j, q_i)``.
    ``literal``: ``sim[t, i] = sum_j cos(e_t, z_j) + cos(z_j, q_i)``, whose
    frame-dependent part is constant across clusters.
    With more than two levels the fine-to-top relation is the chained product
    through the intermediate level. Rows are softmaxed over clusters.
    """
    if any(b.size == 0 for b in books):
        raise ConfigError("empty codebook")
    e_z = cosine_matrix(E, books[0].prototypes)
    if len(books) == 1:
        return softmax(e_z, axis=1)
    z_q = _chain(books)
    if mode == "product":
        sim = e_z @ z_q
    elif mode == "literal":
        sim = e_z.sum(axis=1, keepdims=True) + z_q.sum(axis=0, keepdims=True)
    else:
        raise ConfigError(f"unknown soft-assignment mode {mode!r}")
    return softmax(sim, axis=1)


def _chain(books: Sequence[Codebook]) -> np.ndarray:
    rel = cosine_matrix(books[0].prototypes, books[1].prototypes)
    for lower, upper in zip(books[1:-1], books[2:]):
        rel = rel @ cosine_matrix(lower.prototypes, upper.prototypes)
    return rel


def cluster_order(assignments: Sequence[np.ndarray]) -> List[int]:
    """Non-empty clusters sorted by mean normalised timestamp ``t / T``; ties by index."""
    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for labels in assignments:
        labels = np.asarray(labels)
        T = len(labels)
        times = np.arange(T) / T
        for k in np.unique(labels):
            sel = labels == k
            sums[int(k)] = sums.get(int(k), 0.0) + float(times[sel].sum())
            counts[int(k)] = counts.get(int(k), 0) + int(sel.sum())
    if not counts:
        raise DecodeError("no assigned frames")
    return sorted(counts, key=lambda k: (sums[k] / counts[k], k))


def length_prior(assignments: Sequence[np.ndarray]) -> Dict[int, float]:
    """Average per-video frame share of each cluster, renormalised over non-empty clusters."""
    if not assignments:
        raise DecodeError("length prior needs at least one video")
    shares: Dict[int, float] = {}
    for labels in assignments:
        labels = np.asarray(labels)
        ks, cs = np.unique(labels, return_counts=True)
        for k, c in zip(ks, cs):
            shares[int(k)] = shares.get(int(k), 0.0) + c / len(labels)
    total = sum(shares.values())
    return {k: v / total for k, v in sorted(shares.items())}


def activity_stats(assignments: Sequence[np.ndarray]) -> ActivityStats:
    return ActivityStats(cluster_order(assignments), length_prior(assignments))


def log_poisson(length: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Poisson log-pmf, continued to real ``length`` through the gamma function."""
    mean = np.maximum(mean, 1e-12)
    return length * np.log(mean) - mean - gammaln(length + 1.0)


def _restricted_logp(probs: np.ndarray, order: Sequence[int]) -> np.ndarray:
    return np.log(np.maximum(probs[:, list(order)], 1e-300))


def segmentation_objective(labels: np.ndarray, probs: np.ndarray, order: Sequence[int],
                           prior: np.ndarray, gamma: float = DEFAULT_GAMMA) -> float:
    """``sum_t log p(k_t|t) + gamma * sum_k log Poisson(len_k; prior_k * T)``.

    ``labels`` must visit ``order`` once each, contiguously; otherwise -inf.
    """
    labels = np.asarray(labels)
    T = len(labels)
    runs = run_lengths(labels)
    if [k for k, _ in runs] != list(order):
        return -np.inf
    logp = np.log(np.maximum(probs[np.arange(T), labels], 1e-300)).sum()
    lengths = np.array([n for _, n in runs], dtype=np.float64)
    return float(logp + gamma * log_poisson(lengths, np.asarray(prior) * T).sum())


def run_lengths(labels: Sequence[int]) -> List[tuple]:
    out: List[list] = []
    for lab in labels:
        lab = int(lab)
        if out and out[-1][0] == lab:
            out[-1][1] += 1
        else:
            out.append([lab, 1])
    return [tuple(r) for r in out]


def _labels_from_lengths(order: Sequence[int], lengths: Sequence[int]) -> np.ndarray:
    return np.repeat(np.asarray(order, dtype=np.int64), np.asarray(lengths, dtype=np.int64))


def dp_decode(probs: np.ndarray, order: Sequence[int], prior: np.ndarray,
              gamma: float = DEFAULT_GAMMA, name: str = "video") -> np.ndarray:
    """Exact maximiser of :func:`segmentation_objective` over ordered segmentations.

    ``O(K * T^2)``: ``best[k, t]`` is the best score of the first ``k``
    segments covering frames ``[0, t)``.
    """
    T = probs.shape[0]
    K = len(order)
    if T < K:
        raise DecodeError(f"{name}: {T} frames cannot hold {K} ordered segments")
    logp = _restricted_logp(probs, order)
    cum = np.vstack([np.zeros((1, K)), np.cumsum(logp, axis=0)])
    prior = np.asarray(prior, dtype=np.float64)
    best = np.full((K + 1, T + 1), -np.inf)
    back = np.zeros((K + 1, T + 1), dtype=np.int64)
    best[0, 0] = 0.0
    lengths = np.arange(T + 1, dtype=np.float64)
    for k in range(1, K + 1):
        len_score = gamma * log_poisson(lengths, prior[k - 1] * T)
        col = cum[:, k - 1]
        for t in range(k, T - (K - k) + 1):
            starts = np.arange(k - 1, t)
            scores = best[k - 1, starts] + (col[t] - col[starts]) + len_score[t - starts]
            i = int(np.argmax(scores))
            best[k, t] = scores[i]
            back[k, t] = starts[i]
    seg_lengths = []
    t = T
    for k in range(K, 0, -1):
        s = back[k, t]
        seg_lengths.append(t - s)
        t = s
    return _labels_from_lengths(order, seg_lengths[::-1])


def _fifa_energy(lam: np.ndarray, logp: np.ndarray, prior: np.ndarray,
                 width: float, gamma: float, grad: bool = True):
    T, K = logp.shape
    w = softmax(lam)
    lengths = T * w
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    t = np.arange(T, dtype=np.float64)[:, None]
    u = (t - bounds[None, :]) / width  # (T, K+1)
    sig = expit(u)
    mask = sig[:, :-1] - sig[:, 1:]
    len_term = log_poisson(lengths, prior * T)
    energy = -float(np.sum(mask * logp)) - gamma * float(len_term.sum())
    if not grad:
        return energy, None
    dsig = sig * (1.0 - sig) / width
    # d mask_k / d b_{k-1} = -dsig[:, k-1];  d mask_k / d b_k = +dsig[:, k]
    g_b = np.zeros(K + 1)
    g_b[:-1] += np.sum(logp * dsig[:, :-1], axis=0)
    g_b[1:] -= np.sum(logp * dsig[:, 1:], axis=0)
    # b_k = sum_{j <= k} l_j, so dE/dl_j = sum_{k >= j} dE/db_k.
    g_len = np.cumsum(g_b[1:][::-1])[::-1]
    g_len -= gamma * (np.log(np.maximum(prior * T, 1e-12)) - digamma(lengths + 1.0))
    g_lam = lengths * (g_len - np.dot(w, g_len))
    return energy, g_lam


def fifa_energy(lam: np.ndarray, probs: np.ndarray, order: Sequence[int], prior: np.ndarray,
                config: FifaConfig):
    """Relaxed energy and its gradient w.r.t. the log-length parameters."""
    logp = _restricted_logp(probs, order)
    width = config.sharpness * probs.shape[0]
    return _fifa_energy(np.asarray(lam, dtype=np.float64), logp, np.asarray(prior, dtype=np.float64),
                        width, config.gamma)


def lengths_to_segments(lengths: np.ndarray, T: int) -> np.ndarray:
    """Integer segment lengths (each >= 1, summing to T) from real ones."""
    K = len(lengths)
    bounds = np.rint(np.cumsum(lengths)[:-1]).astype(np.int64)
    # Boundary i needs i+1 frames before it and K-1-i after it.
    for i in range(K - 1):
        bounds[i] = max(bounds[i], i + 1, bounds[i - 1] + 1 if i else 0)
    for i in range(K - 2, -1, -1):
        bounds[i] = min(bounds[i], T - (K - 1 - i), bounds[i + 1] - 1 if i < K - 2 else T)
    edges = np.concatenate([[0], bounds, [T]])
    return np.diff(edges)


@dataclass
class FifaTrace:
    labels: np.ndarray
    energies: List[float]
    lengths: np.ndarray


def fifa_decode(probs: np.ndarray, order: Sequence[int], prior: np.ndarray,
                config: Optional[FifaConfig] = None, name: str = "video",
                return_trace: bool = False):
    """Gradient-descent decoding over relaxed segment lengths.

    Parameters ``lam`` give lengths ``T * softmax(lam)``; boundaries are
    their cumulative sums and frame ``t`` belongs to segment ``k`` with soft
    mask ``sigmoid((t - b_{k-1}) / w) - sigmoid((t - b_k) / w)``,
    ``w = sharpness * T``. Starting from ``lam = log(prior)``, the energy
    ``-sum mask * log p - gamma * sum log Poisson(len_k; prior_k * T)`` is
    descended for ``epochs`` steps. With ``step_check`` a step that raises
    the energy is rejected and the step size halved. Final lengths are
    rounded to integer boundaries.
    """
    config = config or FifaConfig()
    T = probs.shape[0]
    K = len(order)
    if T < K:
        raise DecodeError(f"{name}: {T} frames cannot hold {K} ordered segments")
    prior = np.asarray(prior, dtype=np.float64)
    logp = _restricted_logp(probs, order)
    width = config.sharpness * T
    lam = np.log(np.maximum(prior, 1e-12))
    lr = config.learning_rate
    energy, grad = _fifa_energy(lam, logp, prior, width, config.gamma)
    energies = [energy]
    for _ in range(config.epochs):
        cand = lam - lr * grad
        cand_energy, cand_grad = _fifa_energy(cand, logp, prior, width, config.gamma)
        if config.step_check and cand_energy > energy:
            lr *= 0.5
            energies.append(energy)
            continue
        lam, energy, grad = cand, cand_energy, cand_grad
        energies.append(energy)
    lengths = T * softmax(lam)
    labels = _labels_from_lengths(order, lengths_to_segments(lengths, T))
    if return_trace:
        return FifaTrace(labels, energies, lengths)
    return labels


def argmax_decode(probs: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Frame-wise argmax over the non-empty clusters only."""
    order = list(order)
    return np.asarray(order)[np.argmax(probs[:, order], axis=1)]


def hard_assignments(model: TcnModel, books: Sequence[Codebook], videos) -> List[np.ndarray]:
    return [quantize_hierarchy(embed(model, v.frames), books).coarse for v in videos]


def segment_video(model: TcnModel, books: Sequence[Codebook], frames: np.ndarray,
                  stats: ActivityStats, decoder: str = "fifa",
                  fifa: Optional[FifaConfig] = None, mode: str = "product",
                  gamma: float = DEFAULT_GAMMA, name: str = "video") -> np.ndarray:
    """Encode, soft-assign and decode one video into per-frame cluster ids."""
    probs = soft_assign(embed(model, frames), books, mode)
    if decoder == "argmax":
        return argmax_decode(probs, stats.order)
    if decoder == "dp":
        return dp_decode(probs, stats.order, stats.prior_vector(), gamma, name)
    if decoder == "fifa":
        return fifa_decode(probs, stats.order, stats.prior_vector(), fifa, name)
    raise ConfigError(f"unknown decoder {decoder!r}")


def segment_activity(model: TcnModel, books: Sequence[Codebook], videos,
                     decoder: str = "fifa", fifa: Optional[FifaConfig] = None,
                     mode: str = "product", gamma: float = DEFAULT_GAMMA):
    """Segment every video of an activity; returns ``(segmentations, stats)``."""
    stats = activity_stats(hard_assignments(model, books, videos))
    segs = [segment_video(model, books, v.frames, stats, decoder, fifa, mode, gamma, v.id)
            for v in videos]
    return segs, stats
