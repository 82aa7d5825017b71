"""Frame-wise magnitude separator and the three end-to-end separation graphs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .aet import AetConfig, AetParams, decode, encode, init_params
from .frontends import istft_node, stft

__all__ = [
    "FRONTENDS",
    "StftGeometry",
    "SeparatorParams",
    "SeparationModel",
    "init_separator",
    "apply_separator",
    "build_model",
    "separate_forward",
]

FRONTENDS = ("stft", "aet", "aet_orthogonal")


@dataclass(frozen=True)
class StftGeometry:
    n_fft: int = 1024
    hop: int = 16
    window: str = "hann"

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class SeparatorParams:
    """Dense layers as (weight, bias) pairs; the last pair is the output projection."""

    layers: list[tuple[ad.Tensor, ad.Tensor]]

    def named(self) -> dict[str, ad.Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"sep.{i}.weight"] = w
            out[f"sep.{i}.bias"] = b
        return out

    @property
    def input_size(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w, _ in self.layers[:-1])

    def count(self) -> int:
        return sum(t.size for t in self.named().values())


def init_separator(size: int, hidden: Sequence[int] = (512, 512, 512), seed: int = 0) -> SeparatorParams:
    """Glorot-uniform weights, zero biases; ``size`` in and out."""
    rng = np.random.default_rng(seed)
    dims = [size, *hidden, size]
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        layers.append((ad.Tensor(rng.uniform(-bound, bound, (d_in, d_out)), True), ad.Tensor(np.zeros(d_out), True)))
    return SeparatorParams(layers)


def apply_separator(
    frames: ad.Tensor,
    params: SeparatorParams,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ad.Tensor:
    """Map (frames, K) magnitudes to (frames, K) nonnegative source magnitudes.

    Dropout hits the input of each hidden layer, with inverted scaling.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    if frames.shape[1] != params.input_size:
        raise ValueError(f"separator expects {params.input_size} features, got {frames.shape[1]}")
    x = frames
    for w, b in params.layers[:-1]:
        if training and dropout_rate > 0.0:
            if rng is None:
                raise ValueError("training with dropout needs a random generator")
            keep = rng.random(x.shape) >= dropout_rate
            x = x * ad.Tensor(keep / (1.0 - dropout_rate))
        x = ad.softplus(ad.dense(x, w, b))
    w, b = params.layers[-1]
    return ad.softplus(ad.dense(x, w, b))


@dataclass
class SeparationModel:
    frontend: str
    separator: SeparatorParams
    aet_config: Optional[AetConfig] = None
    aet_params: Optional[AetParams] = None
    stft_geometry: Optional[StftGeometry] = None
    sample_rate: int = 16000
    meta: dict = field(default_factory=dict)

    def named_parameters(self) -> dict[str, ad.Tensor]:
        out = {} if self.aet_params is None else self.aet_params.named()
        out.update(self.separator.named())
        return out

    def frontend_parameter_count(self) -> int:
        return 0 if self.aet_params is None else self.aet_params.count()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())


def build_model(
    frontend: str,
    geometry=None,
    seed: int = 0,
    hidden: Sequence[int] = (512, 512, 512),
    sample_rate: int = 16000,
) -> SeparationModel:
    """Construct and initialise a model; ``geometry`` is an AetConfig or StftGeometry."""
    if frontend not in FRONTENDS:
        raise ValueError(f"unknown front-end {frontend!r}; expected one of {FRONTENDS}")
    if frontend == "stft":
        geometry = StftGeometry() if geometry is None else geometry
        if not isinstance(geometry, StftGeometry):
            raise ValueError("the stft front-end needs an StftGeometry")
        separator = init_separator(geometry.bins, hidden, seed)
        return SeparationModel(frontend, separator, stft_geometry=geometry, sample_rate=sample_rate)
    geometry = AetConfig() if geometry is None else geometry
    if not isinstance(geometry, AetConfig):
        raise ValueError(f"the {frontend} front-end needs an AetConfig")
    tied = frontend == "aet_orthogonal"
    if geometry.tied != tied:
        geometry = AetConfig(**{**geometry.__dict__, "tied": tied})
    # separate streams so front-end and separator initialisations do not interact
    seeds = np.random.SeedSequence(seed).spawn(2)
    aet_params = init_params(geometry, int(seeds[0].generate_state(1)[0]))
    separator = init_separator(geometry.num_filters, hidden, int(seeds[1].generate_state(1)[0]))
    return SeparationModel(frontend, separator, geometry, aet_params, sample_rate=sample_rate)


def separate_forward(
    model: SeparationModel,
    mixture,
    dropout_rate: float = 0.0,
    training: bool = False,
    seed: Optional[int | Sequence[int]] = None,
) -> ad.Tensor:
    """Estimate the target source waveform; the result is the graph node to differentiate."""
    mixture = np.asarray(mixture, dtype=np.float64)
    if mixture.size == 0:
        raise ValueError("empty mixture")
    rng = np.random.default_rng(seed) if training and dropout_rate > 0.0 else None
    if model.frontend == "stft":
        geo = model.stft_geometry
        spec = stft(mixture, geo.n_fft, geo.hop, geo.window)
        cos, sin = spec.unit_phase()
        frames = ad.Tensor(spec.magnitude.T)
        mag = ad.transpose(apply_separator(frames, model.separator, dropout_rate, training, rng))
        return istft_node(
            mag * ad.Tensor(cos), mag * ad.Tensor(sin), geo.n_fft, geo.hop, geo.window, mixture.size
        )
    enc = encode(mixture, model.aet_params, model.aet_config)
    frames = ad.transpose(enc.pooled)
    mag = ad.transpose(apply_separator(frames, model.separator, dropout_rate, training, rng))
    return decode(mag, enc, model.aet_params, model.aet_config)
