"""Dense sequence arithmetic with hand-written gradients.

Sequences are ``(T, C)`` float64 arrays (frames x channels). Only the layer
types the temporal conv nets need are provided: width-3 dilated convolution,
pointwise (1x1) convolution, ReLU and inverted dropout. Gradients are
computed explicitly from cached forward inputs; there is no graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Mapping, Tuple

import numpy as np

KERNEL_WIDTH = 3


class ConfigError(ValueError):
    """Inconsistent shapes or hyperparameters."""


def _check_seq(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 2:
        raise ConfigError(f"{name} must be a (T, C) matrix, got shape {x.shape}")


def _shifted_stack(x: np.ndarray, dilation: int) -> np.ndarray:
    """Rows ``[x[t-d], x[t], x[t+d]]`` side by side, zeros outside ``[0, T)``."""
    T, C = x.shape
    out = np.zeros((T, KERNEL_WIDTH * C), dtype=x.dtype)
    out[:, C:2 * C] = x
    if dilation < T:
        out[dilation:, :C] = x[:-dilation]
        out[:-dilation, 2 * C:] = x[dilation:]
    return out


def dilated_conv1d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
                           dilation: int) -> np.ndarray:
    """Acausal width-3 dilated convolution with zero padding.

    ``kernel`` has shape ``(3, Cin, Cout)``; tap ``k`` reads frame
    ``t + (k - 1) * dilation``. Output length equals input length.
    """
    _check_seq(x)
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3 or kernel.shape[0] != KERNEL_WIDTH:
        raise ConfigError(f"kernel must have shape (3, Cin, Cout), got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ConfigError(f"kernel expects {kernel.shape[1]} input channels, x has {x.shape[1]}")
    if bias.shape != (kernel.shape[2],):
        raise ConfigError(f"bias shape {bias.shape} does not match Cout={kernel.shape[2]}")
    cin, cout = kernel.shape[1], kernel.shape[2]
    return _shifted_stack(x, dilation) @ kernel.reshape(KERNEL_WIDTH * cin, cout) + bias


def dilated_conv1d_backward(upstream: np.ndarray, cached_input: np.ndarray | None,
                            kernel: np.ndarray, dilation: int
                            ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(d_input, d_kernel, d_bias)`` of :func:`dilated_conv1d_forward`."""
    if cached_input is None:
        raise RuntimeError("backward called without a cached forward input")
    _check_seq(upstream, "upstream")
    T, cin = cached_input.shape
    cout = kernel.shape[2]
    if upstream.shape != (T, cout):
        raise ConfigError(f"upstream shape {upstream.shape} != {(T, cout)}")
    stacked = _shifted_stack(cached_input, dilation)
    d_kernel = (stacked.T @ upstream).reshape(KERNEL_WIDTH, cin, cout)
    d_bias = upstream.sum(axis=0)
    d_stacked = upstream @ kernel.reshape(KERNEL_WIDTH * cin, cout).T
    d_input = d_stacked[:, cin:2 * cin].copy()
    if dilation < T:
        d_input[:-dilation] += d_stacked[dilation:, :cin]
        d_input[dilation:] += d_stacked[:-dilation, 2 * cin:]
    return d_input, d_kernel, d_bias


def pointwise_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """1x1 convolution, i.e. the same affine map applied to every frame."""
    _check_seq(x)
    if weight.shape[0] != x.shape[1] or bias.shape != (weight.shape[1],):
        raise ConfigError(
            f"pointwise weight {weight.shape} / bias {bias.shape} incompatible with x {x.shape}")
    return x @ weight + bias


def pointwise_backward(upstream: np.ndarray, cached_input: np.ndarray | None,
                       weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cached_input is None:
        raise RuntimeError("backward called without a cached forward input")
    return upstream @ weight.T, cached_input.T @ upstream, upstream.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(upstream: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    return np.where(cached_input > 0, upstream, 0.0)


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept entries scaled by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


@dataclass
class OptimConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0 when set")


@dataclass
class ParamStore:
    """Named parameters with gradient and AdamW moment buffers."""

    params: Dict[str, np.ndarray] = field(default_factory=dict)
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        buf = self.grads[name]
        if buf.shape != grad.shape:
            raise ConfigError(f"gradient for {name!r} has shape {grad.shape}, expected {buf.shape}")
        buf += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def copy(self) -> "ParamStore":
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
            exp_avg={k: v.copy() for k, v in self.exp_avg.items()},
            exp_avg_sq={k: v.copy() for k, v in self.exp_avg_sq.items()},
            step=self.step,
        )


def adamw_step(store: ParamStore, config: OptimConfig) -> ParamStore:
    """One in-place AdamW update (decoupled decay, then bias-corrected Adam).

    Moment buffers are created lazily as zeros. Returns ``store`` for chaining.
    """
    store.step += 1
    t = store.step
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2 = config.beta1, config.beta2
    scale = 1.0
    if config.clip_norm is not None:
        norm = store.grad_norm()
        if norm > config.clip_norm:
            scale = config.clip_norm / norm
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, w in store.params.items():
        g = store.grads[name] * scale if scale != 1.0 else store.grads[name]
        m = store.exp_avg.setdefault(name, np.zeros_like(w))
        v = store.exp_avg_sq.setdefault(name, np.zeros_like(w))
        if wd:
            w *= 1.0 - lr * wd
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
    return store


LossFn = Callable[[ParamStore], Tuple[float, Mapping[str, np.ndarray]]]


def finite_diff_check(loss_fn: LossFn, params: ParamStore, eps: float = 1e-5,
                      max_entries: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps
    parameter names to analytic gradients. With ``max_entries`` set, only that
    many randomly chosen entries per parameter are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    loss, analytic = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError(f"loss is not finite: {loss}")
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, w in params.params.items():
        flat = w.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            plus, _ = loss_fn(params)
            flat[i] = orig - eps
            minus, _ = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise FloatingPointError(f"non-finite loss while probing {name}[{i}]")
            numeric = (plus - minus) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
