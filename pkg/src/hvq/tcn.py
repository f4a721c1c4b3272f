"""Light multi-stage TCN encoder and decoder.

Each stage is a 1x1 input projection, a stack of dilated residual layers
(dilation doubles per layer) and a 1x1 output projection. The next stage
consumes the previous stage's output. The encoder ends in a projection to the
latent width D, the decoder in a projection back to the feature width F.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .numerics import (
    ConfigError,
    ParamStore,
    dilated_conv1d_backward,
    dilated_conv1d_forward,
    dropout_mask,
    pointwise_backward,
    pointwise_forward,
    relu,
    relu_backward,
)


class DataError(ValueError):
    """Input data inconsistent with the model or dataset layout."""


@dataclass
class TcnConfig:
    """Encoder/decoder shape. ``input_dim`` may be left unset until data is seen."""

    input_dim: Optional[int] = None
    latent_dim: int = 32
    stages: int = 2
    layers_per_stage: int = 10
    hidden_channels: int = 64
    dropout_rate: float = 0.0
    decoder_kind: str = "tcn"

    def __post_init__(self) -> None:
        for name in ("input_dim", "latent_dim", "stages", "layers_per_stage", "hidden_channels"):
            value = getattr(self, name)
            if value is not None and int(value) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.decoder_kind not in ("tcn", "mlp"):
            raise ConfigError(f"decoder_kind must be 'tcn' or 'mlp', got {self.decoder_kind!r}")

    def dilations(self) -> List[int]:
        return [2 ** layer for layer in range(self.layers_per_stage)]


@dataclass
class TcnModel:
    config: TcnConfig
    encoder: ParamStore = field(default_factory=ParamStore)
    decoder: ParamStore = field(default_factory=ParamStore)

    def copy(self) -> "TcnModel":
        return TcnModel(self.config, self.encoder.copy(), self.decoder.copy())


def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _add_pointwise(store: ParamStore, name: str, cin: int, cout: int, rng) -> None:
    store.add(f"{name}.w", _uniform(rng, (cin, cout), cin))
    store.add(f"{name}.b", np.zeros(cout))


def _add_dilated(store: ParamStore, name: str, cin: int, cout: int, rng) -> None:
    store.add(f"{name}.w", _uniform(rng, (3, cin, cout), 3 * cin))
    store.add(f"{name}.b", np.zeros(cout))


def _build_tcn(store: ParamStore, prefix: str, in_dim: int, out_dim: int,
               cfg: TcnConfig, rng: np.random.Generator) -> None:
    h = cfg.hidden_channels
    for s in range(cfg.stages):
        stage_in = in_dim if s == 0 else out_dim
        _add_pointwise(store, f"{prefix}.s{s}.in", stage_in, h, rng)
        for layer in range(cfg.layers_per_stage):
            _add_dilated(store, f"{prefix}.s{s}.l{layer}.dil", h, h, rng)
            _add_pointwise(store, f"{prefix}.s{s}.l{layer}.pw", h, h, rng)
        _add_pointwise(store, f"{prefix}.s{s}.out", h, out_dim, rng)


def build_model(config: TcnConfig, seed: int = 0) -> TcnModel:
    """Initialise encoder and decoder deterministically from ``seed``.

    Kernels are drawn uniformly in +-1/sqrt(fan_in); biases start at zero.
    """
    if config.input_dim is None:
        raise ConfigError("TcnConfig.input_dim must be set before building a model")
    rng = np.random.default_rng(seed)
    model = TcnModel(config)
    _build_tcn(model.encoder, "enc", config.input_dim, config.latent_dim, config, rng)
    if config.decoder_kind == "tcn":
        _build_tcn(model.decoder, "dec", config.latent_dim, config.input_dim, config, rng)
    else:
        _add_pointwise(model.decoder, "dec.mlp.hidden", config.latent_dim, config.hidden_channels, rng)
        _add_pointwise(model.decoder, "dec.mlp.out", config.hidden_channels, config.input_dim, rng)
    return model


# A tape is the list of forward operations with whatever each needs for its
# backward pass, replayed in reverse.
Tape = List[tuple]


def _pw(store: ParamStore, name: str, x: np.ndarray, tape: Tape) -> np.ndarray:
    tape.append(("pw", name, x))
    return pointwise_forward(x, store[f"{name}.w"], store[f"{name}.b"])


def _tcn_forward(store: ParamStore, prefix: str, x: np.ndarray, cfg: TcnConfig,
                 training: bool, rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, Tape]:
    tape: Tape = []
    use_dropout = training and cfg.dropout_rate > 0
    if use_dropout and rng is None:
        raise ValueError("dropout in training mode needs an rng")
    out = x
    for s in range(cfg.stages):
        h = _pw(store, f"{prefix}.s{s}.in", out, tape)
        for layer, dilation in enumerate(cfg.dilations()):
            name = f"{prefix}.s{s}.l{layer}"
            tape.append(("dil", f"{name}.dil", h, dilation))
            a = dilated_conv1d_forward(h, store[f"{name}.dil.w"], store[f"{name}.dil.b"], dilation)
            tape.append(("relu", a))
            r = _pw(store, f"{name}.pw", relu(a), tape)
            if use_dropout:
                mask = dropout_mask(r.shape, cfg.dropout_rate, rng)
                tape.append(("drop", mask))
                r = r * mask
            tape.append(("res",))
            h = h + r
        out = _pw(store, f"{prefix}.s{s}.out", h, tape)
    return out, tape


def _tcn_backward(store: ParamStore, tape: Tape, grad: np.ndarray) -> np.ndarray:
    # Residual adds split the gradient: one copy flows into the layer body,
    # the other skips it. The stack holds the skip copies.
    skips: List[np.ndarray] = []
    g = grad
    for entry in reversed(tape):
        kind = entry[0]
        if kind == "pw":
            _, name, x = entry
            g, dw, db = pointwise_backward(g, x, store[f"{name}.w"])
            store.accumulate(f"{name}.w", dw)
            store.accumulate(f"{name}.b", db)
        elif kind == "res":
            skips.append(g)
        elif kind == "drop":
            g = g * entry[1]
        elif kind == "relu":
            g = relu_backward(g, entry[1])
        elif kind == "dil":
            _, name, x, dilation = entry
            g, dw, db = dilated_conv1d_backward(g, x, store[f"{name}.w"], dilation)
            store.accumulate(f"{name}.w", dw)
            store.accumulate(f"{name}.b", db)
            g = g + skips.pop()
        else:  # pragma: no cover
            raise RuntimeError(f"unknown tape entry {kind!r}")
    return g


def _mlp_forward(store: ParamStore, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    tape: Tape = []
    a = _pw(store, "dec.mlp.hidden", x, tape)
    tape.append(("relu", a))
    return _pw(store, "dec.mlp.out", relu(a), tape), tape


def _check_width(x: np.ndarray, width: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise DataError(f"{what} expects a (T, {width}) matrix, got shape {x.shape}")
    if x.shape[0] < 1:
        raise DataError(f"{what} got an empty sequence")


def encode_forward(model: TcnModel, video: np.ndarray, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Tape]:
    _check_width(video, model.config.input_dim, "encoder")
    return _tcn_forward(model.encoder, "enc", np.asarray(video, dtype=np.float64),
                        model.config, training, rng)


def encode_backward(model: TcnModel, tape: Tape, grad: np.ndarray) -> np.ndarray:
    """Accumulate encoder parameter gradients; return the input gradient."""
    return _tcn_backward(model.encoder, tape, grad)


def decode_forward(model: TcnModel, quantized: np.ndarray, training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, Tape]:
    _check_width(quantized, model.config.latent_dim, "decoder")
    quantized = np.asarray(quantized, dtype=np.float64)
    if model.config.decoder_kind == "mlp":
        return _mlp_forward(model.decoder, quantized)
    return _tcn_forward(model.decoder, "dec", quantized, model.config, training, rng)


def decode_backward(model: TcnModel, tape: Tape, grad: np.ndarray) -> np.ndarray:
    return _tcn_backward(model.decoder, tape, grad)


def encode(model: TcnModel, video: np.ndarray, training: bool = False,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-frame embeddings ``(T, D)`` for one video (not normalised)."""
    return encode_forward(model, video, training, rng)[0]


def decode(model: TcnModel, quantized: np.ndarray, training: bool = False,
           rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Reconstruction ``(T, F)`` from quantized latents."""
    return decode_forward(model, quantized, training, rng)[0]


def receptive_field(layers_per_stage: int) -> int:
    """Frames seen by one stage of width-3 layers with doubling dilation."""
    return 2 * (2 ** layers_per_stage - 1) + 1
