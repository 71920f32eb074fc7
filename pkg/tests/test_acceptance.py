"""Acceptance criteria, one test per criterion.

Each test records a one-line verdict; ``conftest.pytest_terminal_summary``
prints them at the end of the run.  Criteria 5-7 train twelve networks and
are marked ``slow`` (they still run by default).
"""

import os
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from specreg import analyze, data, linalg, nn, optim, regularize
from specreg.analyze import MetricsRecord
from specreg.regularize import KINDS, RegularizerConfig

from conftest import central_diff

VERDICTS: dict[int, str] = {}


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. power iteration vs exact SVD
# ---------------------------------------------------------------------------


def converged_sigma(W, rng, block=25, cap=20_000):
    st = linalg.PowerIterState.random(*W.shape, rng)
    prev, k = -1.0, 0
    while k < cap:
        sigma, st = linalg.spectral_norm(W, block, st, rng)
        k += block
        if abs(sigma - prev) <= 1e-15 * sigma:
            break
        prev = sigma
    return sigma


def test_c01_power_iteration_matches_svd():
    t0 = time.perf_counter()
    worst = 0.0
    for s in range(1000):
        r = np.random.default_rng([s, 0xA1])
        m, n = (int(v) for v in r.integers(1, 65, 2))
        if s % 4 == 3 and min(m, n) > 1:
            k = int(r.integers(1, min(m, n)))
            W = r.standard_normal((m, k)) @ r.standard_normal((k, n))
        else:
            W = r.standard_normal((m, n))
        ref = linalg.svd_exact(W).singular_values[0]
        worst = max(worst, abs(converged_sigma(W, r) - ref) / ref)
    dt = time.perf_counter() - t0
    verdict(1, worst <= 1e-8 and dt < 10, f"worst rel err {worst:.2e} over 1000 matrices, {dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradients of the four objectives
# ---------------------------------------------------------------------------


def objective_value(net, x, y, cfg, eta):
    w = nn.loss_and_grad(net, x, y).loss
    if cfg.kind == "decay":
        return w + regularize.decay_penalty(net, cfg.lam)
    if cfg.kind == "spectral":
        return w + 0.5 * cfg.lam * sum(np.linalg.norm(nn.weight_matrix(net, k), 2) ** 2 for k in net.weight_names)
    if cfg.kind == "adversarial":
        return cfg.alpha * w + (1 - cfg.alpha) * nn.loss_and_grad(net, x + eta, y).loss
    return w


def test_c02_objective_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    net = nn.init_network((10,), "dense:24,relu,dense:24,relu,dense:4", rng)
    assert net.num_params() <= 2000
    x, y = rng.standard_normal((16, 10)), rng.integers(0, 4, 16)
    theta = net.get_flat()
    worst = {}
    for kind in KINDS:
        cfg = RegularizerConfig.default_for(kind)
        states = regularize.init_spectral_states(net, rng)
        if kind == "spectral":
            cfg = RegularizerConfig("spectral", lam=0.01, power_iters=2000)
        eta = regularize.adversarial_batch(net, x, y, cfg.epsilon)[0] - x
        bundle, _, _ = regularize.objective_grad(net, x, y, cfg, states, rng)
        g = net.flatten_grads(bundle.param_grads)

        def f(t):
            w = net.copy()
            w.set_flat(t)
            return objective_value(w, x, y, cfg, eta)

        idx = rng.choice(theta.size, 50, replace=False)
        num = central_diff(f, theta, idx)
        rel = np.abs(g[idx] - num) / np.maximum(np.abs(num), 1e-6)
        worst[kind] = float(rel.max())
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and dt < 60
    verdict(2, ok, "worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. Lipschitz product bound
# ---------------------------------------------------------------------------


def test_c03_lipschitz_product_bound():
    bad = 0
    slack = np.inf
    for s in range(100):
        r = np.random.default_rng([s, 0xB3])
        d = int(r.integers(2, 12))
        hidden = ",".join(f"dense:{int(h)},relu" for h in r.integers(3, 20, int(r.integers(1, 4))))
        net = nn.init_network((d,), f"{hidden},dense:{int(r.integers(2, 6))}", r)
        x = r.standard_normal(d)
        probe = analyze.lipschitz_probe(net, x, 200, 1e-6, r)
        local = analyze.local_sigma(net, x)
        if not (probe.empirical_max_ratio <= local + 1e-8 and local <= probe.sigma_product + 1e-8):
            bad += 1
        slack = min(slack, probe.sigma_product - local)
    verdict(3, bad == 0, f"{100 - bad}/100 nets satisfy ratio <= local sigma <= product (min product slack {slack:.2e})")


# ---------------------------------------------------------------------------
# 4. the spectral gradient is rank one at every step
# ---------------------------------------------------------------------------


def test_c04_spectral_gradient_rank_one(monkeypatch):
    worst, calls = 0.0, 0
    real = regularize.apply_spectral

    def spy(bundle, net, lam, states, power_iters=1, rng=None):
        nonlocal worst, calls
        out, new = real(bundle, net, lam, states, power_iters, rng)
        for name in net.weight_names:
            st = new[name]
            added = nn.kernel_as_matrix(out.param_grads[name]) - nn.kernel_as_matrix(bundle.param_grads[name])
            exact = lam * linalg.spectral_sq_grad(nn.kernel_as_matrix(net.params[name]), st)
            for G in (added, exact):
                sv = linalg.svd_exact(G).singular_values
                worst = max(worst, sv[1] / sv[0] if len(sv) > 1 else 0.0)
        calls += 1
        return out, new

    monkeypatch.setattr(regularize, "apply_spectral", spy)
    spec = data.SyntheticSpec(num_classes=3, samples_per_class=30, input_dim=36, noise_std=1.0, seed=4)
    train, test = data.generate_synthetic(spec)
    as_img = lambda ds: data.Dataset(ds.inputs.reshape(-1, 1, 6, 6), ds.labels, ds.num_classes, ds.split)
    net = nn.init_network((1, 6, 6), "conv2d:4:3,relu,flatten,dense:16,relu,dense:3", np.random.default_rng(0))
    cfg = optim.TrainConfig(epochs=10, batch_size=16, base_lr=0.05, regularizer=RegularizerConfig("spectral", lam=0.01))
    optim.run_training(net, as_img(train), as_img(test), cfg)
    verdict(4, calls == 60 and worst <= 1e-10, f"{calls} steps x 3 matrices (incl. conv kernel), worst sigma2/sigma1 {worst:.1e}")


# ---------------------------------------------------------------------------
# 5-7. scaled-down comparison of the four objectives
# ---------------------------------------------------------------------------

TASK = dict(num_classes=10, samples_per_class=100, input_dim=30, noise_std=1.5, label_noise=0.2)
ARCH = "dense:128,relu,dense:128,relu,dense:{C}"
EPOCHS, BATCH, BASE_LR = 100, 64, 0.1
SEEDS = (0, 1, 2)
# Standard strengths for every objective: decay 1e-4, spectral 0.01, adversarial alpha 0.5 / eps 1.
OBJECTIVES = {k: RegularizerConfig.default_for(k) for k in ("vanilla", "decay", "adversarial", "spectral")}


def middle_flatness(net):
    spectra = list(analyze.singular_spectrum(net).values())
    sv = spectra[len(spectra) // 2]
    return float(sv[0] / np.median(sv))


def train_objective(seed, kind):
    t0 = time.perf_counter()
    train, test = data.generate_synthetic(data.SyntheticSpec("gaussian-mixture", seed=seed, **TASK))
    net = nn.init_network((TASK["input_dim"],), ARCH.format(C=TASK["num_classes"]), np.random.default_rng([seed, 0x1A7]))
    cfg = optim.TrainConfig(batch_size=BATCH, epochs=EPOCHS, base_lr=BASE_LR, regularizer=OBJECTIVES[kind], seed=seed)
    net, metrics, _ = optim.run_training(net, train, test, cfg)
    return dict(net=net, metrics=metrics, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def comparison():
    return {(s, k): train_objective(s, k) for s in SEEDS for k in OBJECTIVES}


def shared_alpha(runs):
    """Highest threshold every objective's run clears (just below the weakest peak)."""
    return min(max(m.test_acc for m in r["metrics"]) for r in runs.values()) - 1e-9


@pytest.mark.slow
def test_c05_spectrum_flattening(comparison):
    van, spe = comparison[(0, "vanilla")], comparison[(0, "spectral")]
    fv, fs = middle_flatness(van["net"]), middle_flatness(spe["net"])
    acc = (van["metrics"][-1].train_acc, spe["metrics"][-1].train_acc)
    dt = van["seconds"] + spe["seconds"]
    ok = fv >= 2 * fs and min(acc) >= 0.95 and dt < 600
    verdict(5, ok, f"middle-layer sigma_max/sigma_median vanilla {fv:.2f} spectral {fs:.2f} (ratio {fv / fs:.2f}), "
                   f"train acc {acc[0]:.3f}/{acc[1]:.3f}, {dt:.0f}s")


def per_seed_gaps(comparison):
    out = {}
    for s in SEEDS:
        runs = {k: comparison[(s, k)] for k in OBJECTIVES}
        alpha = shared_alpha(runs)
        out[s] = {k: analyze.generalization_gap(r["metrics"], alpha) for k, r in runs.items()}
    return out


@pytest.mark.slow
def test_c06_gap_ordering(comparison):
    gaps = per_seed_gaps(comparison)
    med = {k: float(np.median([gaps[s][k] for s in SEEDS])) for k in OBJECTIVES}
    dt = sum(r["seconds"] for r in comparison.values())
    ok = med["spectral"] < med["vanilla"] and med["decay"] < med["vanilla"] and dt < 2400
    verdict(6, ok, "median gap " + ", ".join(f"{k} {v:.3f}" for k, v in med.items()) + f", {dt:.0f}s total")


@pytest.mark.slow
def test_c07_sensitivity_correlation(comparison):
    gaps = per_seed_gaps(comparison)
    rhos, spectral_min = [], 0
    for s in SEEDS:
        norms = {k: comparison[(s, k)]["metrics"][-1].grad_norm_test for k in OBJECTIVES}
        rhos.append(spearmanr([norms[k] for k in OBJECTIVES], [gaps[s][k] for k in OBJECTIVES]).statistic)
        spectral_min += min(norms, key=norms.get) == "spectral"
    rho = float(np.mean(rhos))
    verdict(7, rho > 0 and spectral_min >= 2,
            f"Spearman rho per seed {[round(float(r), 2) for r in rhos]} (mean {rho:.2f}), spectral smallest in {spectral_min}/3")


# ---------------------------------------------------------------------------
# 8. Hessian estimator
# ---------------------------------------------------------------------------


def test_c08_hessian_estimator():
    t0 = time.perf_counter()
    quad = analyze.dominant_eig(lambda t: np.array([3.0, 1.0]) * t, np.array([0.3, -0.7]), iters=200)
    rng = np.random.default_rng(8)
    net = nn.init_network((3,), "dense:5,relu,dense:3", rng)
    x, y = rng.standard_normal((24, 3)), rng.integers(0, 3, 24)
    theta, work, h = net.get_flat(), net.copy(), 1e-4

    def grad(t):
        work.set_flat(t)
        return work.flatten_grads(nn.loss_and_grad(work, x, y).param_grads)

    H = np.column_stack([(grad(theta + h * e) - grad(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
    ev = np.linalg.eigvalsh(0.5 * (H + H.T))
    want = ev[np.argmax(np.abs(ev))]
    got = analyze.hessian_max_eig(net, x, y, iters=5000, tol=1e-13)
    rel = abs(got - want) / abs(want)
    dt = time.perf_counter() - t0
    ok = abs(quad - 3.0) <= 1e-6 and rel <= 1e-3 and dt < 30
    verdict(8, ok, f"quadratic {quad:.9f}, {theta.size}-param net {got:.6f} vs explicit {want:.6f} (rel {rel:.1e}), {dt:.1f}s")


# ---------------------------------------------------------------------------
# 9. determinism and resume, across processes
# ---------------------------------------------------------------------------

RUN_CFG = """\
seed = 21
epochs = 6
batch_size = 16
base_lr = 0.05
regularizer = spectral
layers = dense:16,relu,dense:16,relu,dense:3
synthetic.num_classes = 3
synthetic.samples_per_class = 40
synthetic.input_dim = 5
synthetic.label_noise = 0.1
checkpoint_every = 3
"""


def cli_run(*args):
    r = subprocess.run([sys.executable, "-m", "specreg.cli", *args], capture_output=True, text=True, env=dict(os.environ))
    assert r.returncode == 0, r.stderr
    return r


def test_c09_determinism(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(RUN_CFG)
    for d in ("a", "b"):
        cli_run("train", "--config", str(cfg), "--set", f"out_dir={tmp_path / d}")
    cli_run("train", "--config", str(cfg), "--set", f"out_dir={tmp_path / 'r'}", "--resume", str(tmp_path / "a/epoch0003.ckpt"))
    same = lambda x, y, f: (tmp_path / x / f).read_bytes() == (tmp_path / y / f).read_bytes()
    checks = {
        "repeat ckpt": same("a", "b", "final.ckpt"),
        "repeat csv": same("a", "b", "metrics.csv"),
        "resume ckpt": same("a", "r", "final.ckpt"),
        "resume csv": same("a", "r", "metrics.csv"),
    }
    verdict(9, all(checks.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in checks.items()))


# ---------------------------------------------------------------------------
# 10. definitions
# ---------------------------------------------------------------------------


def test_c10_definitions():
    rng = np.random.default_rng(10)
    net = nn.init_network((6,), "dense:12,relu,dense:4", rng)
    x, y = rng.standard_normal((200, 6)), rng.integers(0, 4, 200)
    x_adv, zero = regularize.adversarial_batch(net, x, y, 1.0)
    adv_err = float(np.max(np.abs(np.linalg.norm(x_adv - x, axis=1)[~zero] - 1.0)))
    imgs = data.Dataset(rng.uniform(0, 1, (50, 3, 8, 8)), np.zeros(50, dtype=np.int64), 2, "train")
    g = data.global_contrast_normalize(imgs).inputs.reshape(50, -1)
    mean_err, std_err = float(np.abs(g.mean(axis=1)).max()), float(np.abs(g.std(axis=1) - 1).max())
    recs = [MetricsRecord(i, 0, 0, tr, te, 0, 0, 0, ()) for i, (tr, te) in enumerate([(0.5, 0.4), (0.9, 0.8), (0.95, 0.82)])]
    gap = analyze.generalization_gap(recs, 0.75)
    ok = adv_err <= 1e-12 and mean_err <= 1e-12 and std_err <= 1e-12 and abs(gap - 0.10) <= 1e-12
    verdict(10, ok, f"|eta|-eps {adv_err:.1e}, GCN mean {mean_err:.1e} std {std_err:.1e}, gap fixture {gap:.12f}")
