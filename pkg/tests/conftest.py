import numpy as np
import pytest

from aetsep.corpus import Waveform, write_wav


def fd_grad(fn, arr, step=1e-5):
    """Central finite differences of scalar fn() w.r.t. arr (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_err(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_grads(build, tensors, step=1e-5):
    """Return the worst relative error between backward() and finite differences."""
    for t in tensors:
        t.requires_grad = True
    root = build()
    root.backward()
    analytic = [t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        numeric = fd_grad(lambda: float(build().data), t.data, step)
        worst = max(worst, rel_err(a, numeric))
    return worst


def brute_force_transform(x, basis, window, hop):
    """Triple loop over frames, components and taps, zero-padding past the end."""
    k_count, n = basis.shape
    frames = -(-(len(x) - n) // hop) + 1
    out = np.zeros((k_count, frames))
    for f in range(frames):
        for k in range(k_count):
            acc = 0.0
            for t in range(n):
                idx = f * hop + t
                sample = x[idx] if idx < len(x) else 0.0
                acc += sample * window[t] * basis[k, t]
            out[k, f] = acc
    return out


def band_noise(rng, n, sr, lo, hi, rms=0.1):
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x * (rms / np.sqrt(np.mean(x**2)))


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_corpus(root, speakers, sentences, sr=8000, length=1200, seed=0):
    """Write a toy corpus: one folder per speaker, each a few noise 'sentences'."""
    rng = np.random.default_rng(seed)
    for spk in speakers:
        for i in range(sentences):
            n = length + int(rng.integers(0, 400))
            write_wav(root / spk / f"sa{i:02d}.wav", Waveform(0.2 * rng.uniform(-1, 1, n), sr))
    return root


@pytest.fixture
def tiny_corpus(tmp_path):
    return make_corpus(tmp_path / "corpus", ["FAAA0", "FBBB0", "MCCC0", "MDDD0"], 5)
