"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line
that is printed in the pytest terminal summary.

Criteria 6 and 7 share one set of training runs (3 models x 5 seeds on the
default 600-point dataset); expect roughly a quarter of an hour on one core.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ndiv import cli, data, losses, metrics, nets, train
from ndiv import diffcore as dc
from ndiv.gradcheck import check_gradient, numerical_gradient, relative_error

SEEDS = range(5)


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
    assert ok, detail


# 1


def _mlp_loss(mlp):
    def build(ts):
        x, params = ts[0], ts[1:]
        ws, bs = params[0::2], params[1::2]
        if mlp.spectral_norm:
            ws = [nets.spectral_normalize(w, s, 0) for w, s in zip(ws, mlp.sn_states)]
        hidden = nets._HIDDEN[mlp.spec.hidden_activation]
        out = nets._OUTPUT[mlp.spec.output_activation]
        for k, (w, b) in enumerate(zip(ws, bs)):
            x = x @ w + b
            if k < len(ws) - 1:
                x = hidden(x)
        x = out(x) if out is not None else x
        return dc.sum(dc.square(x)) * 0.5

    return build


def _ndiv_frozen_error(rng, cfg):
    z, a = rng.uniform(0, 1, (6, 2)), rng.uniform(-2, 2, (6, 2))
    leaf = dc.Tensor(a, True)
    grad = dc.backward(losses.ndiv_from_samples(z, leaf, cfg)[0])[leaf]
    rz = losses.pairwise_distances(z).data.sum(axis=1, keepdims=True)
    ra = losses.pairwise_distances(a).data.sum(axis=1, keepdims=True)
    flags = np.zeros(6, dtype=bool)

    def frozen(x):
        dz = losses.NormalizedDistances(losses.pairwise_distances(z) / rz, flags)
        da = losses.NormalizedDistances(losses.pairwise_distances(x) / ra, flags)
        return losses.ndiv_loss(dz, da, cfg).item()

    return relative_error(grad, numerical_gradient(frozen, a))


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = {}
    loss_cases = {
        "hinge_discriminator_loss": lambda ts: losses.hinge_discriminator_loss(ts[0][:, 0], ts[1][:, 0]),
        "hinge_generator_loss": lambda ts: losses.hinge_generator_loss(ts[0][:, 1]),
        "reconstruction_loss": lambda ts: losses.reconstruction_loss(ts[0], ts[1]),
        "gaussian_kl": lambda ts: dc.sum(losses.gaussian_kl(ts[0], ts[1])),
        "vae_elbo_loss": lambda ts: losses.vae_elbo_loss(ts[0], ts[1], ts[0] * 0.5, ts[1] * 0.3),
    }
    for name, build in loss_cases.items():
        worst[name] = max(
            check_gradient(build, [rng.uniform(-2, 2, (6, 2)), rng.uniform(-2, 2, (6, 2))])
            for _ in range(100)
        )
    cfg = losses.NdivConfig(0.8, 6)
    worst["ndiv_loss"] = max(_ndiv_frozen_error(rng, cfg) for _ in range(100))
    layers = {
        "mlp relu": lambda: nets.Mlp(nets.MlpSpec((3, 5, 2)), rng),
        "mlp tanh/sigmoid": lambda: nets.Mlp(nets.MlpSpec((3, 4, 4, 2), "tanh", "sigmoid"), rng),
        "mlp relu/tanh out": lambda: nets.Mlp(nets.MlpSpec((3, 4, 2), "relu", "tanh"), rng),
        "mlp spectral": lambda: nets.Mlp(nets.MlpSpec((3, 6, 1)), rng, spectral_norm=True),
    }
    for name, make in layers.items():
        errs = []
        for _ in range(100):
            mlp = make()
            inputs = [rng.uniform(-2, 2, (4, mlp.spec.in_dim))] + [p.data.copy() for p in mlp.parameters]
            errs.append(check_gradient(_mlp_loss(mlp), inputs))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 30.0
    record(1, "gradient suite", ok, f"worst rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")


# 2


def test_criterion_2_stop_gradient_equivalence():
    rng = np.random.default_rng(1)
    cfg = losses.NdivConfig(0.8, 10)
    worst = 0.0
    for _ in range(100):
        z, a = rng.uniform(0, 1, (10, 2)), rng.normal(size=(10, 2))
        leaf = dc.Tensor(a, True)
        g_detach = dc.backward(losses.ndiv_from_samples(z, leaf, cfg)[0])[leaf]
        ref = dc.Tensor(a, True)
        const = losses.pairwise_distances(a).data.sum(axis=1, keepdims=True)
        dz = losses.normalize_rows(losses.pairwise_distances(z))
        da = losses.NormalizedDistances(losses.pairwise_distances(ref) / dc.Tensor(const), np.zeros(10, bool))
        g_const = dc.backward(losses.ndiv_loss(dz, da, cfg))[ref]
        worst = max(worst, relative_error(g_detach, g_const, floor=1e-300))
    record(2, "stop-gradient equivalence", worst < 1e-8, f"max rel err {worst:.2e} over 100 instances")


# 3


def brute_ndiv(z, a, alpha):
    n = len(z)

    def normalized(x):
        d = [[math.dist(x[i], x[j]) for j in range(n)] for i in range(n)]
        return [[v / sum(row) for v in row] for row in d]

    dz, da = normalized(z), normalized(a)
    total = sum(max(0.0, alpha * dz[i][j] - da[i][j]) for i in range(n) for j in range(n) if i != j)
    return total / (n * n - n)


def test_criterion_3_ndiv_values():
    z, a = [[0.0], [1.0], [2.0]], [[0.0], [1.0], [10.0]]
    oracle = brute_ndiv(z, a, 0.8)
    value = losses.ndiv_from_samples(z, a, losses.NdivConfig(0.8, 3))[0].item()
    rng = np.random.default_rng(3)
    zz = rng.uniform(size=(10, 2))
    zero_cases = [
        losses.ndiv_from_samples(zz, 4.0 * zz, losses.NdivConfig(1.0, 10))[0].item(),
        losses.ndiv_from_samples(zz, 0.25 * zz, losses.NdivConfig(0.8, 10))[0].item(),
        losses.ndiv_from_samples(zz, 3.7 * zz, losses.NdivConfig(0.5, 10))[0].item(),
    ]
    aa = rng.normal(size=(10, 2))
    base = losses.ndiv_from_samples(zz, aa, losses.NdivConfig(0.8, 10))[0].item()
    scaled = losses.ndiv_from_samples(2.0 * zz, 8.0 * aa, losses.NdivConfig(0.8, 10))[0].item()
    ok = abs(value - 0.08047) <= 1e-4 and abs(oracle - 0.08047) <= 1e-4
    ok = ok and all(v == 0.0 for v in zero_cases) and scaled == base
    record(
        3,
        "NDiv analytic values",
        ok,
        f"value {value:.6f}, oracle {oracle:.6f}, zero cases {zero_cases}, scale invariance exact={scaled == base}",
    )


# 4


def distinct_top_matrix(rng, shape=(8, 4), max_ratio=0.9):
    """Gaussian matrix whose top two singular values satisfy s2/s1 <= max_ratio.

    50 power iterations shrink the error in sigma like (s2/s1)^100; near-tied
    top singular values would need far more iterations.
    """
    while True:
        w = rng.normal(size=shape)
        s = np.linalg.svd(w, compute_uv=False)
        if s[1] / s[0] <= max_ratio:
            return w


def _normalized_top(w, rng):
    state = nets.SpectralNormState.init(w.shape[1], rng, power_iterations=50)
    return np.linalg.svd(nets.spectral_normalize(w, state).data, compute_uv=False)[0]


def test_criterion_4_spectral_normalization():
    rng = np.random.default_rng(4)
    sigmas = [_normalized_top(distinct_top_matrix(rng) * rng.uniform(0.1, 10.0), rng) for _ in range(100)]
    lo, hi = min(sigmas), max(sigmas)
    # unconditioned draws, reported for reference only
    raw = [_normalized_top(rng.normal(size=(8, 4)), rng) for _ in range(100)]
    outside = sum(not 0.999 <= v <= 1.001 for v in raw)
    record(
        4,
        "spectral normalization",
        0.999 <= lo and hi <= 1.001,
        f"top singular values in [{lo:.6f}, {hi:.6f}]; without the gap condition {outside}/100 fall outside",
    )


# 5


def test_criterion_5_metric_calibration():
    rng = np.random.default_rng(5)
    fd = metrics.frechet_distance_samples(
        rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2)) + np.array([3.0, 0.0])
    )
    left = rng.uniform(size=(1000, 2))
    jsd_disjoint = metrics.js_divergence(left, left + np.array([5.0, 0.0]))
    spec = data.StarSpec()
    self_jsd = metrics.js_divergence(
        data.sample_star_actions(spec, 10_000, np.random.default_rng(50)),
        data.sample_star_actions(spec, 10_000, np.random.default_rng(51)),
    )
    ok = 8.1 <= fd <= 9.9 and abs(jsd_disjoint - math.log(2)) <= 1e-4 and self_jsd < 0.05
    record(5, "metric calibration", ok, f"FD {fd:.3f}, disjoint JSD {jsd_disjoint:.6f}, self JSD {self_jsd:.4f}")


# 6 and 7


@pytest.fixture(scope="module")
def end_to_end():
    train_set, _ = data.generate_dataset(data.StarSpec(), 600, 1000, seed=0)
    results = {}
    start = time.perf_counter()
    for kind in ("ours", "gan", "vae"):
        for seed in SEEDS:
            cfg = train.TrainConfig(seed=seed)
            bundle, report = train.train_model(kind, train_set, cfg, with_forward=False)
            ev = train.evaluate(bundle, None, train_set.spec, n=10_000, seeds=1, base_seed=seed)
            results[kind, seed] = (ev, report)
    return results, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6_end_to_end_ordering(end_to_end):
    results, elapsed = end_to_end
    mean = {
        kind: (
            np.mean([results[kind, s][0].frechet_distance for s in SEEDS]),
            np.mean([results[kind, s][0].js_divergence for s in SEEDS]),
        )
        for kind in ("ours", "gan", "vae")
    }
    fd, jsd = {k: v[0] for k, v in mean.items()}, {k: v[1] for k, v in mean.items()}
    ok = (
        fd["ours"] < fd["vae"]
        and fd["ours"] < fd["gan"]
        and jsd["ours"] < jsd["vae"]
        and jsd["ours"] < jsd["gan"]
        and elapsed < 1800
    )
    detail = ", ".join(f"{k} FD {fd[k]:.4f} JSD {jsd[k]:.4f}" for k in fd) + f", {elapsed / 60:.1f} min"
    # reported, not asserted: mode dropping in the baseline shows up as a near-empty arm
    gan_min = " ".join(f"{min(results['gan', s][0].per_arm_mass):.3f}" for s in SEEDS)
    detail += f"; gan min arm mass per seed: {gan_min}"
    record(6, "end-to-end ordering", ok, detail)


@pytest.mark.slow
def test_criterion_7_anti_mode_collapse(end_to_end):
    results, _ = end_to_end
    spec = data.StarSpec()
    good = 0
    rows = []
    for s in SEEDS:
        ev = results["ours", s][0].per_seed[0]
        passed = ev.inside_fraction >= 0.85 and min(ev.per_arm_mass) >= 0.5 / spec.arms
        good += passed
        rows.append(f"{ev.inside_fraction:.3f}/{min(ev.per_arm_mass):.3f}")
    record(7, "anti-mode-collapse", good >= 4, f"{good}/5 seeds pass (inside/min arm: {' '.join(rows)})")


@pytest.mark.slow
def test_ours_has_no_late_collapse_warnings(end_to_end):
    results, _ = end_to_end
    assert all(results["ours", s][1].collapse_warnings_last_1000 == 0 for s in SEEDS)


# 8


@pytest.mark.slow
def test_criterion_8_forward_model():
    train_set, test_set = data.generate_dataset(data.StarSpec(), 600, 1000, seed=0)
    _, report = train.train_forward_model(train_set, train.TrainConfig(), test=test_set)
    err = report.extra["heldout_error"]
    record(8, "forward model", err < 0.05, f"held-out mean Euclidean error {err:.4f}")


# 9


def _pipeline(root):
    steps = ["--steps", "30", "--forward-steps", "30"]
    commands = [
        ["gen-data", "--seed", "11", "--out", root / "d"],
        ["train", "--model", "ours", "--data", root / "d", *steps, "--out", root / "ours"],
        ["train", "--model", "vae", "--data", root / "d", *steps, "--out", root / "vae"],
        ["sample", "--checkpoint", root / "ours" / "checkpoint.json", "--n", "200", "--out", root / "s.csv"],
        ["eval", "--checkpoint", root / "ours" / "checkpoint.json", "--data", root / "d", "--n", "500", "--seeds", "2", "--out", root / "e1"],
        ["eval", "--checkpoint", root / "vae" / "checkpoint.json", "--data", root / "d", "--n", "500", "--seeds", "2", "--out", root / "e2"],
        ["report", "--eval-dirs", root / "e1", root / "e2", "--out", root / "r"],
    ]
    codes = [cli.main([str(a) for a in c]) for c in commands]
    return codes, {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_criterion_9_determinism(tmp_path):
    codes_a, first = _pipeline(tmp_path / "a")
    codes_b, second = _pipeline(tmp_path / "b")
    ok = codes_a == codes_b == [0] * 7 and first == second and len(first) >= 8
    record(9, "determinism", ok, f"{len(first)} CSV files byte-identical across reruns: {first == second}")
