"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import re
import time

import numpy as np
import pytest

from aetsep import autodiff as ad
from aetsep import cli
from aetsep.aet import AetConfig, encode, init_params
from aetsep.corpus import Waveform, build_manifest, mix_at_0db
from aetsep.frontends import dct2_basis, istft, istft_node, make_window, short_time_transform, stft
from aetsep.losses import DB_CAP, bss_eval, mse_loss, sdr_db, sdr_loss
from aetsep.separator import StftGeometry, build_model, separate_forward
from aetsep.trainer import TrainConfig, load_checkpoint, save_checkpoint, train

from conftest import ACCEPTANCE_LINES, band_noise, brute_force_transform, check_grads, make_corpus

SMOKE_RATE = 8000
SMOKE_STEPS = 300
SMOKE_LR = 1e-3


class Verdict:
    """Named checks for one criterion; ``conclude`` asserts them all."""

    def __init__(self):
        self.checks = []
        self.concluded = False

    def __call__(self, label, ok):
        self.checks.append((label, bool(ok)))

    @property
    def ok(self):
        return self.concluded and bool(self.checks) and all(c for _, c in self.checks)

    def line(self, number):
        if not self.concluded:
            detail = "did not complete"
        elif self.ok:
            detail = "; ".join(label for label, _ in self.checks)
        else:
            detail = "failed: " + "; ".join(label for label, c in self.checks if not c)
        return f"criterion {number}: {'PASS' if self.ok else 'FAIL'} - {detail}"

    def conclude(self):
        self.concluded = True
        failed = [label for label, c in self.checks if not c]
        assert self.checks and not failed, failed


@pytest.fixture(autouse=True)
def verdict(request, capsys):
    """Print and record one PASS/FAIL line for the criterion when the test ends."""
    number = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))
    v = Verdict()
    yield v
    line = v.line(number)
    request.config.stash[ACCEPTANCE_LINES].append(line)
    with capsys.disabled():
        print(f"\n{line}")


# ---------------------------------------------------------------- gradients

def _op_cases(r):
    """(name, loss builder, tensors) covering every differentiable operation."""
    T = ad.Tensor
    x2, f3 = T(r.normal(size=(2, 20))), T(r.normal(size=(3, 2, 5)))
    c = T(r.normal(size=(3, 8)))
    dw_x, dw_f, dw_b = T(r.normal(size=(3, 15))), T(r.normal(size=(3, 4))), T(r.normal(size=3))
    a, b = T(r.normal(size=(4, 6))), T(r.uniform(0.5, 2.0, (4, 6)))
    w, bias, inp = T(r.normal(size=(6, 3))), T(r.normal(size=3)), T(r.normal(size=(5, 6)))
    m = T(r.normal(size=(3, 12)))
    pooled = T(r.normal(size=(3, 4)))
    _, idx = ad.maxpool1d(T(r.normal(size=(3, 12))), 3)
    v1, v2 = T(r.normal(size=10)), T(r.normal(size=10))
    n_fft, hop = 16, 4
    spec = stft(r.normal(size=40), n_fft, hop)
    re_, im_ = T(spec.real), T(spec.imag)
    probe = r.normal(size=40)
    lin_in = T(r.normal(size=5))
    matrix = r.normal(size=(7, 5))
    wts = {k: r.normal(size=s) for k, s in {
        "conv": (3, 20), "convt": (2, 16), "dw": (3, 15), "dense": (5, 3), "pool": (3, 4),
        "unpool": (3, 12), "ew": (4, 6),
    }.items()}

    def wsum(node, key):
        return ad.sum_all(node * T(wts[key]))

    return [
        ("conv1d same", lambda: wsum(ad.conv1d(x2, f3, 1, "same"), "conv"), [x2, f3]),
        ("conv1d strided valid", lambda: ad.sum_all(ad.conv1d(x2, f3, 2, "valid") ** 2), [x2, f3]),
        ("conv_transpose1d", lambda: wsum(ad.conv_transpose1d(c, f3, 16, 2, "same"), "convt"), [c, f3]),
        ("depthwise_conv1d", lambda: wsum(ad.depthwise_conv1d(dw_x, dw_f, 1, "same", dw_b), "dw"), [dw_x, dw_f, dw_b]),
        ("dense", lambda: wsum(ad.dense(inp, w, bias), "dense"), [inp, w, bias]),
        ("softplus", lambda: wsum(ad.softplus(a), "ew"), [a]),
        ("abs", lambda: wsum(ad.abs_elem(a), "ew"), [a]),
        ("mul/div/pow/sub", lambda: wsum(ad.mul_elem(a, b) + ad.div_elem(a, b) - a ** 3 / b, "ew"), [a, b]),
        ("maxpool1d", lambda: wsum(ad.maxpool1d(m, 3)[0], "pool"), [m]),
        ("unpool window_start", lambda: wsum(ad.unpool_zero_insert(pooled, 3, 12), "unpool"), [pooled]),
        ("unpool recorded", lambda: wsum(ad.unpool_zero_insert(pooled, 3, 12, "recorded_indices", idx), "unpool"), [pooled]),
        ("reshape/transpose", lambda: wsum(ad.transpose(ad.reshape(a, (6, 4))), "ew"), [a]),
        ("sum/mean/dot", lambda: ad.mean_all(a * a) + ad.dot(v1, v2) ** 2 + ad.sum_all(v1), [a, v1, v2]),
        ("linear_map", lambda: ad.sum_all(ad.linear_map((lin_in,), lambda z: matrix @ z, lambda g: (matrix.T @ g,)) ** 2), [lin_in]),
        ("istft", lambda: ad.dot(istft_node(re_, im_, n_fft, hop, "hann", 40), T(probe)), [re_, im_]),
        ("mse_loss", lambda: mse_loss(v1, v2.data), [v1]),
        ("sdr_loss", lambda: sdr_loss(v1, v2.data), [v1]),
    ]


def _graph_cases():
    r = np.random.default_rng(21)
    x, target = r.normal(size=64), r.normal(size=64)
    cases = []
    for frontend in ("aet", "aet_orthogonal"):
        for loss in (sdr_loss, mse_loss):
            model = build_model(frontend, AetConfig(8, 16, 4, 5), 1, hidden=(16, 16, 16))
            model.aet_params.smoothing_bias.data[:] = r.normal(size=8) * 0.1
            cases.append((f"{frontend} graph ({loss.__name__})",
                          lambda m=model, fn=loss: fn(separate_forward(m, x), target),
                          list(model.named_parameters().values())))
    stft_model = build_model("stft", StftGeometry(16, 4), 1, hidden=(16, 16, 16))
    cases.append(("stft graph", lambda: sdr_loss(separate_forward(stft_model, x), target),
                  list(stft_model.named_parameters().values())))
    return cases


def test_criterion_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst_op, worst_graph = 0.0, 0.0
    for name, build, tensors in _op_cases(np.random.default_rng(7)):
        err = check_grads(build, tensors)
        worst_op = max(worst_op, err)
        if err >= 1e-4:
            verdict(f"{name} rel err {err:.2e}", False)
    for name, build, tensors in _graph_cases():
        err = check_grads(build, tensors)
        worst_graph = max(worst_graph, err)
        if err >= 1e-4:
            verdict(f"{name} rel err {err:.2e}", False)
    elapsed = time.perf_counter() - start
    verdict(f"worst op rel err {worst_op:.1e} < 1e-4", worst_op < 1e-4)
    verdict(f"worst full-graph rel err {worst_graph:.1e} < 1e-4", worst_graph < 1e-4)
    verdict(f"runtime {elapsed:.1f}s < 60s", elapsed < 60)
    verdict.conclude()


# ---------------------------------------------------------------- transforms

def test_criterion_2_transform_oracles(verdict):
    start = time.perf_counter()
    r = np.random.default_rng(8)
    worst = 0.0
    for n, hop, length in [(8, 1, 40), (16, 5, 90), (32, 7, 300), (64, 16, 500)]:
        x = r.normal(size=length)
        basis = dct2_basis(n)
        for window in ("rectangular", "hann"):
            w = make_window(window, n)
            worst = max(worst, np.abs(short_time_transform(x, basis, w, hop) - brute_force_transform(x, basis, w, hop)).max())
    verdict(f"short-time transform vs brute force {worst:.1e} <= 1e-12", worst <= 1e-12)

    x = r.uniform(-1, 1, 16000)
    spec = stft(x, 1024, 16, "hann")
    err = np.abs(istft(spec.real, spec.imag, 1024, 16, "hann", x.size) - x).max()
    verdict(f"istft(stft) hann 1024/16 error {err:.1e} < 1e-6", err < 1e-6)

    ortho = max(np.abs(dct2_basis(n) @ dct2_basis(n).T - np.eye(n)).max() for n in range(1, 65))
    verdict(f"DCT-II orthonormality (N<=64) {ortho:.1e} < 1e-10", ortho < 1e-10)
    elapsed = time.perf_counter() - start
    verdict(f"runtime {elapsed:.1f}s < 30s", elapsed < 30)
    verdict.conclude()


# ---------------------------------------------------------------- demodulation

def test_criterion_3_demodulation_identity(verdict):
    r = np.random.default_rng(9)
    worst, live_total = 0.0, 0
    for trial in range(40):
        cfg = AetConfig(int(r.integers(2, 17)), int(r.integers(2, 33)), int(r.integers(1, 9)), int(r.integers(1, 8)))
        params = init_params(cfg, trial)
        params.smoothing_bias.data[:] = r.normal(size=cfg.num_filters) * 2.0
        x = r.normal(size=int(r.integers(64, 400))) * 10.0 ** r.uniform(-3, 2)
        enc = encode(x, params, cfg)
        m = enc.magnitude.data
        live = m > 1e-8
        live_total += int(live.sum())
        worst = max(worst, float(np.abs(m * enc.phase.data - enc.coeffs.data)[live].max(initial=0.0)))
    verdict(f"max |M*P - X| {worst:.1e} <= 1e-12 over {live_total} bins", worst <= 1e-12 and live_total > 0)
    verdict.conclude()


# ---------------------------------------------------------------- SDR algebra

def test_criterion_4_sdr_algebra(verdict):
    r = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        x, y = r.normal(size=128), r.normal(size=128)
        alpha = 10.0 ** r.uniform(-3, 3) * r.choice([-1.0, 1.0])
        worst = max(worst, abs(sdr_db(alpha * x, y) - sdr_db(x, y)))
    verdict(f"scale invariance {worst:.1e} <= 1e-9", worst <= 1e-9)

    y = r.normal(size=256)
    cands = [y * r.uniform(0.1, 3) + r.uniform(0.01, 5) * r.normal(size=256) for _ in range(100)]
    losses = np.array([float(sdr_loss(ad.Tensor(c), y).data) for c in cands])
    scores = np.array([sdr_db(c, y) for c in cands])
    verdict("ranking by sdr_loss matches sdr_db over 100 candidates",
            np.array_equal(np.argsort(losses, kind="stable"), np.argsort(-scores, kind="stable")))

    guard = float(sdr_loss(ad.Tensor([1.0, 0.0]), [0.0, 1.0]).data)
    verdict(f"orthogonal guard {guard:.1e} finite >= 1e11", np.isfinite(guard) and guard >= 1e11)
    verdict.conclude()


# ---------------------------------------------------------------- BSS_EVAL

def _l1_oracle(est, s1, s2):
    target = (est @ s1) / (s1 @ s1) * s1
    gram = np.array([[s1 @ s1, s1 @ s2], [s2 @ s1, s2 @ s2]])
    coef = np.linalg.lstsq(gram, np.array([est @ s1, est @ s2]), rcond=None)[0]
    both = coef[0] * s1 + coef[1] * s2
    e_i, e_a = both - target, est - both
    db = lambda n, d: 10 * np.log10(n / d)
    return np.array([db(target @ target, (e_i + e_a) @ (e_i + e_a)), db(target @ target, e_i @ e_i), db(both @ both, e_a @ e_a)])


def test_criterion_5_bss_eval(verdict):
    r = np.random.default_rng(11)
    worst = 0.0
    for _ in range(50):
        s1, s2 = r.normal(size=400), r.normal(size=400)
        est = r.uniform(0.3, 2) * s1 + r.uniform(-1, 1) * s2 + r.uniform(0.05, 1) * r.normal(size=400)
        got = bss_eval(est, [s1, s2], 0, filter_len=1)
        worst = max(worst, np.abs(np.array(got[:3]) - _l1_oracle(est, s1, s2)).max())
    verdict(f"L=1 vs least-squares oracle on 50 instances {worst:.1e} dB <= 1e-9", worst <= 1e-9)

    s1, s2 = r.normal(size=300), r.normal(size=300)
    perfect = bss_eval(s1, [s1, s2], 0, filter_len=1)
    verdict("perfect estimate gives 300/300/300 dB", perfect[:3] == (DB_CAP, DB_CAP, DB_CAP))

    t = np.arange(512)
    o1, o2 = np.cos(2 * np.pi * 3 * t / 512), np.sin(2 * np.pi * 11 * t / 512)
    ortho = bss_eval(o1 + o2, [o1, o2], 0, filter_len=1)
    verdict(f"orthogonal equal-energy sum gives SDR {ortho.sdr_db:.0e}, SIR {ortho.sir_db:.0e}, SAR {ortho.sar_db:.0f}",
            abs(ortho.sdr_db) < 1e-12 and abs(ortho.sir_db) < 1e-12 and ortho.sar_db == DB_CAP)
    verdict.conclude()


# ---------------------------------------------------------------- smoke training

def _smoke_pair():
    r = np.random.default_rng(0)
    a = Waveform(band_noise(r, SMOKE_RATE, SMOKE_RATE, 200, 1000), SMOKE_RATE)
    b = Waveform(band_noise(r, SMOKE_RATE, SMOKE_RATE, 1500, 3500), SMOKE_RATE)
    return mix_at_0db(a, b, "smoke", "s0")


def _smoke_run(loss, out_dir):
    pair = _smoke_pair()
    model = build_model("aet_orthogonal", AetConfig(64, 128, 8, 5), 0, (512, 512, 512), SMOKE_RATE)
    save_checkpoint(model, out_dir / f"{loss}_initial.ckpt")
    config = TrainConfig(loss=loss, epochs=SMOKE_STEPS, batch_size=1, segment_len=SMOKE_RATE,
                         learning_rate=SMOKE_LR, seed=0)
    steps = []
    start = time.perf_counter()
    train(model, [pair], config, checkpoint_path=out_dir / f"{loss}_trained.ckpt",
          on_step=lambda i, v: steps.append(v))
    elapsed = time.perf_counter() - start
    estimate = separate_forward(model, pair.mixture.samples).data
    return {"sdr_db": sdr_db(estimate, pair.source_a.samples), "seconds": elapsed, "losses": steps,
            "dir": out_dir, "loss": loss}


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    return {loss: _smoke_run(loss, out) for loss in ("sdr", "mse")}


@pytest.mark.slow
def test_criterion_6_overfit_smoke(verdict, smoke):
    run = smoke["sdr"]
    verdict(f"{len(run['losses'])} Adam steps (<= 500)", len(run["losses"]) <= 500)
    verdict(f"sdr_db {run['sdr_db']:.2f} dB > 10 dB", run["sdr_db"] > 10)
    verdict(f"training loss {run['losses'][0]:.4g} -> {run['losses'][-1]:.4g} decreased",
            run["losses"][-1] < run["losses"][0])
    verdict(f"runtime {run['seconds']:.0f}s < 300s", run["seconds"] < 300)
    verdict.conclude()


@pytest.mark.slow
def test_criterion_7_loss_ordering(verdict, smoke):
    sdr, mse = smoke["sdr"]["sdr_db"], smoke["mse"]["sdr_db"]
    verdict(f"SDR-loss model {sdr:.2f} dB >= MSE-loss model {mse:.2f} dB (single mixture, not a statistical claim)",
            sdr >= mse)
    verdict.conclude()


# ---------------------------------------------------------------- protocol

def test_criterion_8_protocol_arithmetic(verdict, tmp_path):
    speakers = [f"F{i:03d}" for i in range(10)] + [f"M{i:03d}" for i in range(10)]
    root = make_corpus(tmp_path / "corpus", speakers, 10, length=64)
    manifest = build_manifest(root, 10, 10, seed=0)
    verdict(f"manifest {len(manifest.train)} train / {len(manifest.test)} test",
            (len(manifest.train), len(manifest.test)) == (80, 20))

    r = np.random.default_rng(12)
    worst = 0.0
    for _ in range(20):
        a = Waveform(r.normal(size=int(r.integers(500, 2000))) * r.uniform(0.01, 1), 16000)
        b = Waveform(r.normal(size=int(r.integers(500, 2000))) * r.uniform(0.01, 1), 16000)
        pair = mix_at_0db(a, b)
        worst = max(worst, abs(10 * np.log10(pair.source_a.rms ** 2 / pair.source_b.rms ** 2)))
    verdict(f"mixture source ratio |{worst:.1e}| dB <= 1e-9", worst <= 1e-9)

    model = build_model("aet", AetConfig(16, 32, 4, 5), 3, hidden=(32, 32, 32))
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    orig, loaded = model.named_parameters(), back.named_parameters()
    exact = orig.keys() == loaded.keys() and all(orig[k].data.tobytes() == loaded[k].data.tobytes() for k in orig)
    verdict("checkpoint round trip bitwise exact", exact)
    verdict.conclude()


# ---------------------------------------------------------------- basis inspection

@pytest.mark.slow
def test_criterion_9_basis_inspection(verdict, smoke):
    out = smoke["sdr"]["dir"]
    flat = {}
    for stage in ("initial", "trained"):
        target = out / f"inspect_{stage}"
        assert cli.main(["inspect", str(out / f"sdr_{stage}.ckpt"), str(target)]) == 0
        flat[stage] = json.loads((target / "summary.json").read_text())["mean_flatness"]
    bins = np.loadtxt(out / "inspect_trained" / "dominant_bins.csv", delimiter=",", skiprows=1, usecols=2)
    verdict("dominant bins non-decreasing", np.all(np.diff(bins) >= 0))
    verdict(f"mean spectral flatness {flat['trained']:.4f} (trained) < {flat['initial']:.4f} (initial)",
            flat["trained"] < flat["initial"])
    verdict.conclude()
