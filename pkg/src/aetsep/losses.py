"""Training objectives and BSS_EVAL-style separation metrics."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg
from scipy.signal import fftconvolve

from . import autodiff as ad

__all__ = [
    "LOSSES",
    "DB_CAP",
    "mse_loss",
    "sdr_loss",
    "make_loss",
    "sdr_db",
    "BssScores",
    "BssDecomposition",
    "bss_decompose",
    "bss_eval",
]

LOSSES = ("mse", "sdr")
DB_CAP = 300.0
SDR_LOSS_EPS = 1e-12
RIDGE = 1e-10


def _check_pair(x: ad.Tensor, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ValueError(f"estimate shape {x.shape} does not match reference {y.shape}")


def mse_loss(x: ad.Tensor, y) -> ad.Tensor:
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    return ad.mean_all((x - ad.Tensor(y)) ** 2)


def sdr_loss(x: ad.Tensor, y, eps: float = SDR_LOSS_EPS) -> ad.Tensor:
    """``<x, x> / (<x, y>^2 + eps)``; lower is better and the value is scale-free in ``x``."""
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    if not np.any(y):
        raise ValueError("reference signal is all zeros")
    ref = ad.Tensor(y)
    return ad.dot(x, x) / (ad.dot(x, ref) ** 2 + eps)


def make_loss(kind: str):
    if kind == "mse":
        return mse_loss
    if kind == "sdr":
        return sdr_loss
    raise ValueError(f"unknown loss {kind!r}; expected one of {LOSSES}")


def _db(num: float, den: float) -> float:
    if den <= 0.0:
        return DB_CAP
    if num <= 0.0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def sdr_db(x, y) -> float:
    """``10 log10(<xy>^2 / (<yy><xx> - <xy>^2))``, invariant to the scale of ``x``.

    Evaluated as projection energy over residual energy (the same ratio after
    dividing by ``<yy>``), which avoids cancellation for near-perfect estimates.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    yy = float(y @ y)
    if yy == 0.0 or not np.any(x):
        raise ValueError("sdr_db needs nonzero signals")
    proj = (float(x @ y) / yy) * y
    resid = x - proj
    den = float(resid @ resid)
    if den <= 1e-24:
        return DB_CAP
    return _db(float(proj @ proj), den)


class BssScores(NamedTuple):
    sdr_db: float
    sir_db: float
    sar_db: float
    filter_len: int
    regularized: bool = False


class BssDecomposition(NamedTuple):
    estimate: np.ndarray
    target: np.ndarray
    interference: np.ndarray
    artifacts: np.ndarray
    regularized: bool


def _xcorr(a: np.ndarray, b: np.ndarray, lags: int) -> np.ndarray:
    """``r[d] = sum_t a[t + d] * b[t]`` for ``d`` in ``[-(lags - 1), lags - 1]``."""
    full = fftconvolve(a, b[::-1])
    mid = b.size - 1
    return full[mid - (lags - 1):mid + lags]


def _solve(gram: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        if np.linalg.cond(gram) < 1e12:
            return scipy.linalg.solve(gram, rhs, assume_a="sym"), False
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        pass
    ridge = RIDGE * max(float(np.mean(np.diag(gram))), 1e-300)
    return scipy.linalg.solve(gram + ridge * np.eye(gram.shape[0]), rhs, assume_a="sym"), True


def _project(est: np.ndarray, refs: np.ndarray, filter_len: int) -> tuple[np.ndarray, bool]:
    """Least-squares projection of ``est`` onto all ``filter_len``-tap delays of ``refs``.

    Signals are zero-extended by ``filter_len - 1`` samples so delayed copies are
    complete and the Gram matrix is exactly block-Toeplitz.
    """
    n_src, length = refs.shape
    lags = filter_len
    gram = np.zeros((n_src * lags, n_src * lags))
    for i in range(n_src):
        for j in range(i, n_src):
            r = _xcorr(refs[j], refs[i], lags)  # r[d] = sum_t refs_j[t + d] refs_i[t]
            # block[d1, d2] = sum_t refs_i[t - d1] refs_j[t - d2] = r[d1 - d2]
            block = scipy.linalg.toeplitz(r[lags - 1:], r[lags - 1::-1])
            gram[i * lags:(i + 1) * lags, j * lags:(j + 1) * lags] = block
            gram[j * lags:(j + 1) * lags, i * lags:(i + 1) * lags] = block.T
    rhs = np.concatenate([_xcorr(est, refs[i], lags)[lags - 1:] for i in range(n_src)])
    coef, regularized = _solve(gram, rhs)
    out = np.zeros(length + lags - 1)
    for i in range(n_src):
        out += fftconvolve(refs[i], coef[i * lags:(i + 1) * lags])
    return out, regularized


def bss_decompose(estimate, references: Sequence, target_index: int = 0, filter_len: int = 512) -> BssDecomposition:
    """Split ``estimate`` into target, interference and artifact components."""
    est = np.asarray(estimate, dtype=np.float64)
    refs = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if refs.shape[1] != est.size:
        raise ValueError(f"references have {refs.shape[1]} samples, estimate has {est.size}")
    if not 1 <= filter_len <= est.size:
        raise ValueError(f"filter length must be in [1, {est.size}], got {filter_len}")
    if not 0 <= target_index < refs.shape[0]:
        raise ValueError(f"target index {target_index} out of range for {refs.shape[0]} sources")
    est_padded = np.pad(est, (0, filter_len - 1))
    target, reg_t = _project(est, refs[target_index:target_index + 1], filter_len)
    all_sources, reg_a = _project(est, refs, filter_len)
    return BssDecomposition(
        est_padded, target, all_sources - target, est_padded - all_sources, reg_t or reg_a
    )


def bss_eval(estimate, references: Sequence, target_index: int = 0, filter_len: int = 512) -> BssScores:
    d = bss_decompose(estimate, references, target_index, filter_len)
    e_total = d.interference + d.artifacts
    s_energy = float(d.target @ d.target)
    sdr = _db(s_energy, float(e_total @ e_total))
    sir = _db(s_energy, float(d.interference @ d.interference))
    sar = _db(float((d.target + d.interference) @ (d.target + d.interference)), float(d.artifacts @ d.artifacts))
    return BssScores(sdr, sir, sar, filter_len, d.regularized)
