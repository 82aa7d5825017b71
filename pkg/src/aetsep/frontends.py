"""Fixed short-time front-ends: sliding DCT-II, STFT/ISTFT and demodulation."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad

__all__ = [
    "make_window",
    "dct2_basis",
    "short_time_transform",
    "StftPair",
    "stft",
    "istft",
    "istft_node",
    "MagPhase",
    "smooth_demodulate",
]


def make_window(kind: str, length: int) -> np.ndarray:
    """Analysis window with values in [0, 1]. Hann is periodic so it overlap-adds exactly."""
    if length < 1:
        raise ValueError(f"window length must be positive, got {length}")
    if kind == "rectangular":
        return np.ones(length)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    raise ValueError(f"unknown window kind {kind!r}")


def _as_window(window, length: int) -> np.ndarray:
    if isinstance(window, str):
        return make_window(window, length)
    w = np.asarray(window, dtype=np.float64)
    if w.shape != (length,):
        raise ValueError(f"window has shape {w.shape}, expected ({length},)")
    return w


def dct2_basis(n: int, k: Optional[int] = None, normalization: str = "orthonormal") -> np.ndarray:
    """Orthonormal DCT-II basis, one basis function per row: shape (k, n)."""
    k = n if k is None else k
    if normalization != "orthonormal":
        raise ValueError(f"unsupported normalization {normalization!r}")
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    rows = np.arange(k)[:, None]
    t = np.arange(n)[None, :]
    basis = np.cos(np.pi * rows * (2 * t + 1) / (2 * n)) * np.sqrt(2.0 / n)
    basis[0] = np.sqrt(1.0 / n)
    return basis


def _frame_count(length: int, width: int, hop: int) -> int:
    return -(-(length - width) // hop) + 1


def _frames(x: np.ndarray, width: int, hop: int, n_frames: int) -> np.ndarray:
    needed = (n_frames - 1) * hop + width
    padded = np.pad(x, (0, max(needed - x.size, 0)))
    return sliding_window_view(padded, width)[::hop][:n_frames]


def short_time_transform(x, basis: np.ndarray, window="rectangular", hop: int = 1) -> np.ndarray:
    """Windowed block transform ``X[k, n] = sum_t x[n*hop + t] * w[t] * b[k, t]``.

    Returns a (components, frames) array. The tail is zero-padded to complete the
    last frame, giving ``ceil((len(x) - N) / hop) + 1`` frames.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    width = basis.shape[1]
    if x.size < width:
        raise ValueError(f"signal of {x.size} samples is shorter than one frame ({width})")
    w = _as_window(window, width)
    frames = _frames(x, width, hop, _frame_count(x.size, width, hop))
    return basis @ (frames * w).T


class StftPair(NamedTuple):
    """Real and imaginary planes, each (n_fft // 2 + 1, frames)."""

    real: np.ndarray
    imag: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)

    def unit_phase(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit-modulus (cos, sin) pair; bins with zero magnitude get phase 0."""
        mag = self.magnitude
        safe = np.where(mag > 0, mag, 1.0)
        return np.where(mag > 0, self.real / safe, 1.0), np.where(mag > 0, self.imag / safe, 0.0)


def _stft_geometry(length: int, n_fft: int, hop: int) -> tuple[int, int]:
    pad = n_fft // 2
    n_frames = -(-length // hop) + 1
    return pad, n_frames


def stft(x, n_fft: int = 1024, hop: int = 16, window="hann") -> StftPair:
    """Short-time Fourier analysis with ``n_fft // 2`` zeros of padding at both ends.

    Every input sample then lies under full overlap, which keeps the synthesis
    normalisation away from zero at the edges.
    """
    x = np.asarray(x, dtype=np.float64)
    if n_fft % 2:
        raise ValueError(f"n_fft must be even, got {n_fft}")
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if x.size == 0:
        raise ValueError("empty signal")
    w = _as_window(window, n_fft)
    pad, n_frames = _stft_geometry(x.size, n_fft, hop)
    frames = _frames(np.pad(x, (pad, 0)), n_fft, hop, n_frames)
    spec = np.fft.rfft(frames * w, axis=1).T
    return StftPair(spec.real.copy(), spec.imag.copy())


def _ola_norm(w: np.ndarray, hop: int, n_frames: int) -> np.ndarray:
    total = (n_frames - 1) * hop + w.size
    norm = np.zeros(total)
    for i in range(n_frames):
        norm[i * hop:i * hop + w.size] += w**2
    return np.where(norm > 1e-10, norm, 1.0)


def _check_istft(real, imag, n_fft):
    if real.shape != imag.shape or real.ndim != 2 or real.shape[0] != n_fft // 2 + 1:
        raise ValueError(f"planes {real.shape}/{imag.shape} inconsistent with n_fft={n_fft}")


def istft(
    real, imag, n_fft: int = 1024, hop: int = 16, window="hann", length: Optional[int] = None
) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    real, imag = np.asarray(real, dtype=np.float64), np.asarray(imag, dtype=np.float64)
    _check_istft(real, imag, n_fft)
    return _IstftOperator(real.shape[1], n_fft, hop, window, length).forward(real, imag)


class _IstftOperator:
    def __init__(self, n_frames, n_fft, hop, window, length):
        self.w = _as_window(window, n_fft)
        self.n_fft, self.hop, self.n_frames = n_fft, hop, n_frames
        self.pad = n_fft // 2
        total = (n_frames - 1) * hop + n_fft
        self.length = total - self.pad if length is None else length
        if self.pad + self.length > total:
            raise ValueError(f"{n_frames} frames cannot produce {self.length} samples")
        self.norm = _ola_norm(self.w, hop, n_frames)
        # irfft ignores the imaginary parts of the DC and Nyquist bins
        self.weights = np.full(n_fft // 2 + 1, 2.0 / n_fft)
        self.weights[[0, -1]] = 1.0 / n_fft

    def forward(self, real, imag):
        frames = np.fft.irfft((real + 1j * imag).T, n=self.n_fft, axis=1) * self.w
        out = np.zeros(self.norm.size)
        for i in range(self.n_frames):
            out[i * self.hop:i * self.hop + self.n_fft] += frames[i]
        out /= self.norm
        return out[self.pad:self.pad + self.length]

    def adjoint(self, g):
        buf = np.zeros(self.norm.size)
        buf[self.pad:self.pad + self.length] = g
        buf /= self.norm
        frames = sliding_window_view(buf, self.n_fft)[::self.hop][:self.n_frames] * self.w
        spec = np.fft.rfft(frames, axis=1).T * self.weights[:, None]
        gim = spec.imag.copy()
        gim[[0, -1]] = 0.0
        return spec.real.copy(), gim


def istft_node(
    real: ad.Tensor, imag: ad.Tensor, n_fft: int, hop: int, window="hann", length: Optional[int] = None
) -> ad.Tensor:
    """Differentiable :func:`istft` for graphs that train through the fixed synthesis."""
    _check_istft(real.data, imag.data, n_fft)
    op = _IstftOperator(real.shape[1], n_fft, hop, window, length)
    return ad.linear_map((real, imag), op.forward, op.adjoint)


class MagPhase(NamedTuple):
    magnitude: np.ndarray
    phase: np.ndarray


def smooth_demodulate(
    coeffs, length: int = 5, eps: float = 1e-8, smoother: Optional[np.ndarray] = None
) -> MagPhase:
    """Split coefficients into a smoothed magnitude and a carrier, ``X = M * P``.

    ``M`` is ``|X|`` smoothed along time per channel ("same" alignment); the
    default smoother is a length-``length`` moving average.
    """
    x = np.asarray(coeffs, dtype=np.float64)
    channels, frames = x.shape
    if smoother is None:
        if length < 1:
            raise ValueError(f"smoothing length must be >= 1, got {length}")
        smoother = np.full((channels, length), 1.0 / length)
    smoother = np.asarray(smoother, dtype=np.float64)
    if smoother.ndim == 1:
        smoother = np.broadcast_to(smoother, (channels, smoother.size))
    if smoother.shape[1] > frames:
        raise ValueError(f"smoother length {smoother.shape[1]} exceeds {frames} frames")
    mag = ad.depthwise_conv1d(ad.Tensor(np.abs(x)), ad.Tensor(smoother), padding="same").data
    phase = x / np.maximum(mag, eps)
    return MagPhase(mag, phase)
