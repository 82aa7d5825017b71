"""Learnable auto-encoder transform (AET).

The analysis side is a unit-hop convolutional filterbank followed by modulus,
a per-channel smoothing convolution with softplus, and max-pooling. The
synthesis side undoes the pooling by zero insertion, re-applies the carrier and
sums shifted, weighted copies of the synthesis filters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad

__all__ = [
    "AetConfig",
    "AetParams",
    "EncodedSignal",
    "BasisInfo",
    "init_params",
    "encode",
    "decode",
    "inspect_bases",
    "spectral_flatness",
]


@dataclass(frozen=True)
class AetConfig:
    num_filters: int = 1024
    filter_width: int = 1024
    pool: int = 16
    smoothing_length: int = 5
    tied: bool = False
    placement: str = "window_start"
    eps: float = ad.DIV_EPS

    def __post_init__(self):
        if self.num_filters < 1 or self.filter_width < 2 or self.pool < 1 or self.smoothing_length < 1:
            raise ValueError(f"invalid AET geometry: {self}")
        if self.placement not in ("window_start", "recorded_indices"):
            raise ValueError(f"unknown unpool placement {self.placement!r}")


@dataclass
class AetParams:
    analysis: ad.Tensor
    smoothing: ad.Tensor
    smoothing_bias: ad.Tensor
    synthesis: Optional[ad.Tensor] = None

    def named(self) -> dict[str, ad.Tensor]:
        out = {
            "aet.analysis": self.analysis,
            "aet.smoothing": self.smoothing,
            "aet.smoothing_bias": self.smoothing_bias,
        }
        if self.synthesis is not None:
            out["aet.synthesis"] = self.synthesis
        return out

    def count(self) -> int:
        return sum(t.size for t in self.named().values())

    def synthesis_filters(self) -> ad.Tensor:
        return self.analysis if self.synthesis is None else self.synthesis


class EncodedSignal(NamedTuple):
    coeffs: ad.Tensor          # X, (K, T)
    magnitude: ad.Tensor       # M_full, (K, T)
    phase: ad.Tensor           # P = X / M, (K, T)
    pooled: ad.Tensor          # M_pooled, (K, ceil(T / pool))
    pool_indices: np.ndarray


def init_params(config: AetConfig, seed: int = 0) -> AetParams:
    rng = np.random.default_rng(seed)
    k, w, l = config.num_filters, config.filter_width, config.smoothing_length
    bound = np.sqrt(1.0 / w)
    analysis = rng.uniform(-bound, bound, (k, w))
    smoothing = rng.uniform(0.0, 2.0 / l, (k, l))
    synthesis = None if config.tied else ad.Tensor(rng.uniform(-bound, bound, (k, w)), True)
    return AetParams(
        analysis=ad.Tensor(analysis, True),
        smoothing=ad.Tensor(smoothing, True),
        smoothing_bias=ad.Tensor(np.zeros(k), True),
        synthesis=synthesis,
    )


def _as_signal(x) -> ad.Tensor:
    if isinstance(x, ad.Tensor):
        return ad.reshape(x, (1, x.size))
    x = np.asarray(x, dtype=np.float64)
    return ad.Tensor(x.reshape(1, -1))


def encode(x, params: AetParams, config: AetConfig) -> EncodedSignal:
    """Analysis encoder; every output is a live graph node."""
    signal = _as_signal(x)
    length = signal.shape[1]
    k, w = params.analysis.shape
    if length < w:
        raise ValueError(f"signal of {length} samples is shorter than the filter width {w}")
    filters = ad.reshape(params.analysis, (k, 1, w))
    coeffs = ad.conv1d(signal, filters, stride=1, padding="same")
    smoothed = ad.depthwise_conv1d(
        ad.abs_elem(coeffs), params.smoothing, padding="same", bias=params.smoothing_bias
    )
    magnitude = ad.softplus(smoothed)
    phase = ad.div_elem(coeffs, magnitude, config.eps)
    pooled, indices = ad.maxpool1d(magnitude, config.pool)
    return EncodedSignal(coeffs, magnitude, phase, pooled, indices)


def decode(magnitude_pooled, encoded: EncodedSignal, params: AetParams, config: AetConfig) -> ad.Tensor:
    """Synthesis decoder: returns a (T,) waveform node.

    The filterbank sum is divided by the filter width, the number of
    contributions each output sample receives at unit hop.
    """
    magnitude_pooled = ad.as_tensor(magnitude_pooled)
    if magnitude_pooled.shape != encoded.pooled.shape:
        raise ValueError(
            f"magnitude shape {magnitude_pooled.shape} does not match encoder geometry {encoded.pooled.shape}"
        )
    k, length = encoded.phase.shape
    unpooled = ad.unpool_zero_insert(
        magnitude_pooled, config.pool, length, config.placement, encoded.pool_indices
    )
    coeffs = ad.mul_elem(unpooled, encoded.phase)
    synth = params.synthesis_filters()
    w = synth.shape[1]
    out = ad.conv_transpose1d(coeffs, ad.reshape(synth, (k, 1, w)), length, stride=1, padding="same")
    return ad.reshape(out, (length,)) * (1.0 / w)


class BasisInfo(NamedTuple):
    index: int
    filter: np.ndarray
    spectrum: np.ndarray
    dominant_bin: int


def inspect_bases(filters, fft_size: int = 1024) -> list[BasisInfo]:
    """Peak-normalised magnitude spectra of each filter, sorted by dominant bin."""
    filters = np.asarray(filters.data if isinstance(filters, ad.Tensor) else filters, dtype=np.float64)
    if filters.shape[1] > fft_size:
        raise ValueError(f"filter width {filters.shape[1]} exceeds fft size {fft_size}")
    spectra = np.abs(np.fft.rfft(filters, n=fft_size, axis=1))
    peaks = spectra.max(axis=1, keepdims=True)
    spectra = np.divide(spectra, peaks, out=np.zeros_like(spectra), where=peaks > 0)
    dominant = spectra.argmax(axis=1)
    order = sorted(range(len(filters)), key=lambda i: (dominant[i], i))
    return [BasisInfo(i, filters[i], spectra[i], int(dominant[i])) for i in order]


def spectral_flatness(spectrum: np.ndarray, floor: float = 1e-12) -> float:
    """Geometric over arithmetic mean of a power spectrum; 1 for white, near 0 for a tone."""
    power = np.maximum(np.asarray(spectrum, dtype=np.float64) ** 2, floor)
    return float(np.exp(np.mean(np.log(power))) / np.mean(power))
