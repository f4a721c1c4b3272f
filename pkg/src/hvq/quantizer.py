"""Hierarchical vector quantization with cosine assignment and EMA codebooks.

Level 1 is the fine codebook (``alpha * K`` prototypes for two levels), the
top level holds the K action clusters. Frames are assigned to level 1, and
every prototype of a level is assigned to its nearest prototype one level up,
so frame-to-cluster assignment is a composition of per-prototype lookups.
Prototypes never receive gradients; they move only through the EMA update
and dead-prototype resets.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numerics import ConfigError

logger = logging.getLogger(__name__)

# Level 1 uses the fine threshold, every coarser level the second one.
RESET_THRESHOLDS = (3.0, 1.0)

_zero_vector_count = 0


def zero_vector_count() -> int:
    """How many zero vectors :func:`assign` has mapped to index 0 so far."""
    return _zero_vector_count


@dataclass
class Codebook:
    prototypes: np.ndarray
    mass: np.ndarray
    level: int = 1
    reset_threshold: float = RESET_THRESHOLDS[0]
    version: int = 0

    def __post_init__(self) -> None:
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ConfigError(f"codebook needs a (P, D) matrix with P >= 1, got {self.prototypes.shape}")
        if self.mass.shape != (self.prototypes.shape[0],):
            raise ConfigError("mass must have one entry per prototype")

    @property
    def size(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.prototypes.copy(), self.mass.copy(), self.level,
                        self.reset_threshold, self.version)


@dataclass
class HvqConfig:
    """Codebook hierarchy settings.

    ``alpha`` is either one multiplicity shared by every level below the top,
    or a list with one entry per lower level (fine to coarse). ``K=None``
    means "take it from the dataset".
    """

    K: Optional[int] = None
    alpha: int | List[int] = 2
    levels: int = 2
    ema_decay: float = 0.8
    ema_variant: str = "paper"

    def __post_init__(self) -> None:
        if self.K is not None and self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.levels not in (1, 2, 3):
            raise ConfigError(f"levels must be 1, 2 or 3, got {self.levels}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.ema_variant not in ("paper", "running_sum"):
            raise ConfigError(f"unknown ema_variant {self.ema_variant!r}")
        alphas = self.alphas()
        if any(a < 1 for a in alphas):
            raise ConfigError("alpha must be >= 1")

    def alphas(self) -> List[int]:
        n = self.levels - 1
        if isinstance(self.alpha, (list, tuple)):
            if len(self.alpha) != n:
                raise ConfigError(f"{self.levels} levels need {n} alpha values, got {len(self.alpha)}")
            return [int(a) for a in self.alpha]
        return [int(self.alpha)] * n

    def level_sizes(self) -> List[int]:
        """Prototype count per level, fine (level 1) first."""
        if self.K is None:
            raise ConfigError("HvqConfig.K is unset")
        sizes = [self.K]
        for a in reversed(self.alphas()):
            sizes.insert(0, sizes[0] * a)
        return sizes


@dataclass
class QuantizeResult:
    """Per-frame indices and assigned prototypes at every level.

    ``indices[0]`` is the fine index j(t), ``indices[-1]`` the cluster i(t).
    ``parents[l]`` maps each level-(l+1) prototype to its level-(l+2) parent.
    """

    indices: List[np.ndarray]
    vectors: List[np.ndarray]
    parents: List[np.ndarray]
    versions: Tuple[int, ...] = ()

    @property
    def fine(self) -> np.ndarray:
        return self.indices[0]

    @property
    def coarse(self) -> np.ndarray:
        return self.indices[-1]

    @property
    def z(self) -> np.ndarray:
        return self.vectors[0]

    @property
    def q(self) -> np.ndarray:
        return self.vectors[-1]


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norm, eps)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``."""
    return l2_normalize(a) @ l2_normalize(b).T


def assign_many(vectors: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Row-wise argmax cosine; ties go to the lowest index."""
    global _zero_vector_count
    vectors = np.atleast_2d(vectors)
    if vectors.shape[1] != prototypes.shape[1]:
        raise ConfigError(f"dimension mismatch: vectors {vectors.shape[1]}, prototypes {prototypes.shape[1]}")
    zero = ~np.any(vectors != 0, axis=1)
    if zero.any():
        _zero_vector_count += int(zero.sum())
    # np.argmax returns the first maximum, which is the tie rule we want.
    idx = np.argmax(cosine_matrix(vectors, prototypes), axis=1)
    idx[zero] = 0
    return idx


def assign(vector: np.ndarray, codebook: Codebook) -> int:
    return int(assign_many(np.asarray(vector, dtype=np.float64)[None, :], codebook.prototypes)[0])


def quantize_hierarchy(E: np.ndarray, books: Sequence[Codebook]) -> QuantizeResult:
    """Assign frames to level 1, then chain prototype-to-prototype lookups upward."""
    if not books:
        raise ConfigError("at least one codebook is required")
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != books[0].dim:
        raise ConfigError(f"embeddings of shape {E.shape} do not match codebook dim {books[0].dim}")
    idx = assign_many(E, books[0].prototypes)
    indices = [idx]
    vectors = [books[0].prototypes[idx]]
    parents = []
    for lower, upper in zip(books[:-1], books[1:]):
        if upper.dim != lower.dim:
            raise ConfigError("all codebooks must share the latent dimension")
        parent = assign_many(lower.prototypes, upper.prototypes)
        parents.append(parent)
        idx = parent[idx]
        indices.append(idx)
        vectors.append(upper.prototypes[idx])
    return QuantizeResult(indices, vectors, parents, tuple(b.version for b in books))


def ema_update(codebook: Codebook, inputs: np.ndarray, assignment: np.ndarray,
               beta: float, variant: str = "paper", normalize: Optional[bool] = None) -> Codebook:
    """EMA step for one codebook, in place.

    ``inputs`` are the vectors assigned this batch (frame embeddings for the
    fine level, the frames' assigned lower-level prototypes otherwise) and
    ``assignment`` their prototype indices.

    ``variant="paper"``::

        N_hat = beta * N + (1 - beta) * n
        z_hat = (beta * z + (1 - beta) * sum(inputs)) / N_hat

    ``variant="running_sum"`` treats ``z * N`` as the running sum instead, i.e.
    ``z_hat = (beta * N * z + (1 - beta) * sum(inputs)) / N_hat``.
    Prototypes with no assigned input keep their vector and only decay mass.
    Level-1 prototypes are re-normalised to unit length unless ``normalize``
    says otherwise.
    """
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must lie in (0, 1), got {beta}")
    inputs = np.asarray(inputs, dtype=np.float64)
    P = codebook.size
    counts = np.bincount(assignment, minlength=P).astype(np.float64)
    sums = np.zeros_like(codebook.prototypes)
    np.add.at(sums, assignment, inputs)
    old_mass = codebook.mass
    new_mass = beta * old_mass + (1.0 - beta) * counts
    hit = (counts > 0) & (new_mass > 0)
    if variant == "paper":
        numer = beta * codebook.prototypes + (1.0 - beta) * sums
    elif variant == "running_sum":
        numer = beta * old_mass[:, None] * codebook.prototypes + (1.0 - beta) * sums
    else:
        raise ConfigError(f"unknown ema variant {variant!r}")
    protos = codebook.prototypes.copy()
    protos[hit] = numer[hit] / new_mass[hit, None]
    if normalize is None:
        normalize = codebook.level == 1
    if normalize:
        protos[hit] = l2_normalize(protos[hit])
    codebook.prototypes = protos
    codebook.mass = new_mass
    codebook.version += 1
    return codebook


def reset_dead(codebook: Codebook, batch_inputs: np.ndarray, rng: np.random.Generator,
               normalize: Optional[bool] = None) -> int:
    """Replace prototypes whose mass is below the threshold; return how many.

    Each dead prototype becomes a uniformly drawn row of ``batch_inputs`` and
    its mass is reset to 1.
    """
    batch_inputs = np.asarray(batch_inputs)
    if batch_inputs.ndim != 2 or batch_inputs.shape[0] == 0:
        raise ValueError("reset_dead needs a non-empty (T, D) batch")
    dead = np.flatnonzero(codebook.mass < codebook.reset_threshold)
    if dead.size == 0:
        return 0
    rows = rng.integers(0, batch_inputs.shape[0], size=dead.size)
    fresh = batch_inputs[rows].astype(np.float64)
    if normalize is None:
        normalize = codebook.level == 1
    if normalize:
        fresh = l2_normalize(fresh)
    codebook.prototypes = codebook.prototypes.copy()
    codebook.prototypes[dead] = fresh
    codebook.mass = codebook.mass.copy()
    codebook.mass[dead] = 1.0
    codebook.version += 1
    return int(dead.size)


def make_codebooks(prototypes_per_level: Sequence[np.ndarray]) -> List[Codebook]:
    books = []
    for level, protos in enumerate(prototypes_per_level, start=1):
        threshold = RESET_THRESHOLDS[0] if level == 1 else RESET_THRESHOLDS[1]
        books.append(Codebook(np.asarray(protos, dtype=np.float64), np.ones(len(protos)),
                              level=level, reset_threshold=threshold))
    return books


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first centre uniform, the rest with D^2 weighting."""
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from ``centers``; empty clusters keep their centre."""
    centers = centers.copy()
    labels = np.full(points.shape[0], -1)
    for _ in range(max_iter):
        d2 = (np.sum(points ** 2, axis=1)[:, None] - 2 * points @ centers.T
              + np.sum(centers ** 2, axis=1)[None, :])
        new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(centers.shape[0]):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return centers, labels


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    return lloyd(points, kmeans_plus_plus(points, k, rng), max_iter)


def within_cluster_ss(points: np.ndarray, centers: np.ndarray) -> float:
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return float(d2.min(axis=1).sum())


def init_kmeans(first_video_embeddings: np.ndarray, config: HvqConfig,
                seed: int | np.random.Generator = 0) -> List[Codebook]:
    """Codebooks initialised by K-means on one video's embeddings.

    The fine level clusters the frames; each coarser level clusters the
    centroids of the level below. Fine centroids are unit-normalised.
    """
    rng = np.random.default_rng(seed)
    E = np.asarray(first_video_embeddings, dtype=np.float64)
    sizes = config.level_sizes()
    if E.shape[0] < sizes[0]:
        warnings.warn(f"only {E.shape[0]} frames for {sizes[0]} fine prototypes; sampling frames")
        rows = rng.choice(E.shape[0], size=sizes[0], replace=E.shape[0] < sizes[0])
        centers = E[rows] + 1e-3 * rng.standard_normal((sizes[0], E.shape[1]))
    else:
        centers, _ = kmeans(E, sizes[0], rng)
    levels = [l2_normalize(centers)]
    for size in sizes[1:]:
        centers, _ = kmeans(levels[-1], size, rng)
        levels.append(centers)
    return make_codebooks(levels)


@dataclass
class CommitmentResult:
    commit_z: float
    commit_q: float
    grad_commit_z: np.ndarray
    grad_commit_q: np.ndarray


def commitment_losses(E: np.ndarray, result: QuantizeResult,
                      books: Optional[Sequence[Codebook]] = None) -> CommitmentResult:
    """Commitment terms and their gradients w.r.t. ``E``.

    ``commit_z = sum_t ||e_t - sg[z_t]||^2`` and ``commit_q`` sums
    ``||c_l - sg[c_{l+1}]||^2`` over consecutive levels, where the lower
    prototype reaches ``E`` through the straight-through identity. With a
    single level ``commit_q`` is zero.
    """
    if books is not None and tuple(b.version for b in books) != result.versions:
        raise RuntimeError("QuantizeResult is stale: a codebook changed after quantization")
    diff_z = E - result.vectors[0]
    commit_z = float(np.sum(diff_z ** 2))
    grad_q = np.zeros_like(E)
    commit_q = 0.0
    for lower, upper in zip(result.vectors[:-1], result.vectors[1:]):
        d = lower - upper
        commit_q += float(np.sum(d ** 2))
        grad_q += 2.0 * d
    return CommitmentResult(commit_z, commit_q, 2.0 * diff_z, grad_q)
