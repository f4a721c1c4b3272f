"""Synthetic activities with known action and subaction ground truth.

Every action owns a few subactions whose mean directions share a common
action component, so subactions of one action are closer to each other than
to subactions of other actions while all pairs stay at least ``separation``
degrees apart. Videos visit the actions in a fixed order, and inside every
action its subactions in order; a frame is its subaction mean plus Gaussian
noise, renormalised to unit length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .data import ActivityDataset, VideoFeatures


class SeparationError(ValueError):
    """The requested angular separation cannot be met."""


@dataclass
class SyntheticSpec:
    K: int = 4
    min_subactions: int = 2
    max_subactions: int = 3
    feature_dim: int = 16
    n_videos: int = 20
    short_lengths: Tuple[int, int] = (4, 12)
    long_lengths: Tuple[int, int] = (20, 45)
    long_fraction: float = 0.5
    noise: float = 0.05
    separation_deg: float = 60.0
    action_coherence: float = 1.0
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 1 <= self.min_subactions <= self.max_subactions <= 3:
            raise ValueError("subactions per action must satisfy 1 <= min <= max <= 3")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not 0 < self.separation_deg <= 90:
            raise ValueError("separation_deg must lie in (0, 90]")
        for lo, hi in (self.short_lengths, self.long_lengths):
            if not 1 <= lo <= hi:
                raise ValueError("segment length ranges need 1 <= low <= high")
        if not 0 <= self.long_fraction <= 1:
            raise ValueError("long_fraction must lie in [0, 1]")
        if self.n_videos < 1 or self.feature_dim < 1:
            raise ValueError("n_videos and feature_dim must be >= 1")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def subaction_means(spec: SyntheticSpec, rng: np.random.Generator) -> Tuple[np.ndarray, List[int]]:
    """Unit mean vectors for every subaction and the owning action of each."""
    F = spec.feature_dim
    if spec.K >= F:
        raise SeparationError(f"{spec.K} orthogonal action directions plus an off-axis part need "
                              f"feature_dim > K (got {F}); use a smaller K or a larger feature_dim")
    actions = np.linalg.qr(rng.standard_normal((F, spec.K)))[0].T
    counts = rng.integers(spec.min_subactions, spec.max_subactions + 1, size=spec.K)
    max_cos = np.cos(np.deg2rad(spec.separation_deg))
    means: List[np.ndarray] = []
    owner: List[int] = []
    for k, n_sub in enumerate(counts):
        for _ in range(n_sub):
            for _attempt in range(2000):
                u = rng.standard_normal(F)
                u -= actions.T @ (actions @ u)
                if np.linalg.norm(u) < 1e-9:
                    continue
                cand = _unit(spec.action_coherence * actions[k] + _unit(u))
                if all(cand @ m <= max_cos + 1e-12 for m in means):
                    break
            else:
                raise SeparationError(
                    f"cannot place {int(counts.sum())} subaction means {spec.separation_deg} deg apart "
                    f"in {F} dimensions; use a smaller K or a larger feature_dim")
            means.append(cand)
            owner.append(k)
    return np.array(means), owner


def synth_generate(spec: SyntheticSpec) -> ActivityDataset:
    """Deterministic dataset for ``spec``; labels are actions, ``sub_labels`` subactions."""
    rng = np.random.default_rng(spec.seed)
    means, owner = subaction_means(spec, rng)
    order = [[s for s, k in enumerate(owner) if k == a] for a in range(spec.K)]
    width = len(str(spec.n_videos - 1))
    videos, labels, sub_labels = [], [], []
    for v in range(spec.n_videos):
        subs, acts = [], []
        for a in range(spec.K):
            for s in order[a]:
                lo, hi = spec.long_lengths if rng.random() < spec.long_fraction else spec.short_lengths
                n = int(rng.integers(lo, hi + 1))
                subs.extend([s] * n)
                acts.extend([a] * n)
        subs_arr = np.array(subs)
        frames = means[subs_arr] + spec.noise * rng.standard_normal((len(subs), spec.feature_dim))
        frames /= np.linalg.norm(frames, axis=1, keepdims=True)
        videos.append(VideoFeatures(f"video_{v:0{width}d}", frames))
        labels.append(np.array(acts, dtype=np.int64))
        sub_labels.append(subs_arr.astype(np.int64))
    names = [f"action_{a}" for a in range(spec.K)]
    return ActivityDataset(spec.name, videos, labels, spec.K, None, names, sub_labels)


def nearest_mean_labels(ds: ActivityDataset) -> List[np.ndarray]:
    """Oracle labels: each frame goes to the action whose frame mean is closest."""
    X = np.concatenate([v.frames for v in ds.videos])
    y = np.concatenate(ds.labels)
    centers = np.array([X[y == k].mean(axis=0) for k in range(ds.K)])
    out = []
    for v in ds.videos:
        d2 = ((v.frames[:, None, :] - centers[None]) ** 2).sum(axis=2)
        out.append(d2.argmin(axis=1))
    return out
