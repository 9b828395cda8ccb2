"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line as it finishes and adds it to the
summary printed at the end of the session. Tolerances and runtime budgets are
fixed here and never loosened.
"""

import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import brute_otsu, mann_whitney_auc, naive_prior

from hetcd import affinity as A
from hetcd import translators as T
from hetcd.change_extraction import otsu_threshold, threshold_map
from hetcd.metrics import roc_auc, scores_from_confusion
from hetcd.pipeline import PRESET_DEFAULTS, PipelineConfig, apply_overrides, run_pipeline
from hetcd.raster import Raster, normalize
from hetcd.synthetic import SceneSpec, make_scene, make_toy, sar_log
from hetcd.theory import TwoHypothesisModel, run_seeds

TESTS = Path(__file__).parent


@contextmanager
def criterion(n, title, capsys):
    """Record PASS when the block finishes and FAIL with the reason otherwise."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        _emit(n, title, "FAIL", f"{info['detail']} {reason}".strip(), capsys)
        raise
    _emit(n, title, "PASS", info["detail"], capsys)


def _emit(n, title, verdict, detail, capsys):
    ACCEPTANCE_LINES.append((n, title, verdict, detail))
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {verdict}: {title} ({detail})")


def test_1_toy_example_exactness(capsys):
    with criterion(1, "toy example exactness", capsys) as info:
        cfg = A.AffinityConfig(patch_size=8, stride=8, multiscale=False)
        exact, slowest = 0, 0.0
        for seed in range(10):
            t0 = time.perf_counter()
            x, y, truth = make_toy(seed)
            alpha = A.compute_prior(normalize(Raster(sar_log(x))), normalize(Raster(y)), cfg).alpha
            mask = threshold_map(alpha).mask
            slowest = max(slowest, time.perf_counter() - t0)
            exact += int(np.array_equal(mask, truth))
        info["detail"] = f"{exact}/10 seeds at 64/64 pixels, slowest run {slowest:.3f} s"
        assert exact >= 9
        assert slowest < 1.0


def test_2_patch_count(capsys):
    with criterion(2, "patch-count arithmetic", capsys) as info:
        n = A.patch_count(1520, 800, 20, 1)
        info["detail"] = f"|P| = {n:,}"
        assert n == 1_172_281


def test_3_prior_oracle(capsys):
    with criterion(3, "prior oracle equivalence", capsys) as info:
        rng = np.random.default_rng(0)
        x = Raster(rng.uniform(-1, 1, (8, 8, 2)))
        y = Raster(rng.uniform(-1, 1, (8, 8, 2)))
        cfg = A.AffinityConfig(patch_size=4, stride=1, multiscale=False)
        t0 = time.perf_counter()
        fast = A.compute_prior(x, y, cfg).alpha
        elapsed = time.perf_counter() - t0
        ref = naive_prior(x.data.astype(np.float64), y.data.astype(np.float64), 4, 1, cfg.knn())
        err = float(np.max(np.abs(fast - ref)))
        info["detail"] = f"max abs error {err:.2e}, engine {elapsed:.3f} s"
        assert err <= 1e-12
        assert elapsed < 1.0


GRADIENT_TESTS = [
    "test_nn.py::test_conv_gradients",
    "test_nn.py::test_dense_and_pool_gradients",
    "test_nn.py::test_dropout_gradient_uses_mask",
    "test_nn.py::test_end_to_end_two_layer_stack",
    "test_losses.py::test_loss_term_gradients",
    "test_losses.py::test_adversarial_and_lsgan_gradients",
    "test_losses.py::test_weight_decay_value_and_gradient_skip_biases",
    "test_losses.py::test_total_xnet_gradient_end_to_end",
    "test_translators.py::test_acenet_generator_gradient_end_to_end",
    "test_translators.py::test_discriminator_gradient_end_to_end",
]


def test_4_gradient_suite(capsys):
    with criterion(4, "gradient suite", capsys) as info:
        t0 = time.perf_counter()
        res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                              *[str(TESTS / t) for t in GRADIENT_TESTS]],
                             capture_output=True, text=True, cwd=TESTS.parent)
        elapsed = time.perf_counter() - t0
        summary = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
        info["detail"] = f"{summary}, {elapsed:.1f} s"
        assert res.returncode == 0
        assert elapsed < 30.0


def test_5_weighted_loss_equivalence(capsys):
    with criterion(5, "weighted-loss equivalence", capsys) as info:
        t0 = time.perf_counter()
        reports = run_seeds(TwoHypothesisModel(p_h0=0.8), 100_000, 10)
        elapsed = time.perf_counter() - t0
        mean_diff = float(np.mean([r.rel_diff for r in reports]))
        lo = min(r.psi_min for r in reports)
        hi = max(r.psi_max for r in reports)
        info["detail"] = f"mean rel diff {mean_diff:.3%}, psi in [{lo:.3g}, {hi:.6g}], {elapsed:.1f} s"
        assert mean_diff <= 0.02
        assert lo > 0 and hi <= 1 / 0.8
        assert all(r.psi_in_bounds for r in reports)
        assert elapsed < 20.0


def test_6_otsu_oracle(capsys):
    with criterion(6, "Otsu oracle", capsys) as info:
        rng = np.random.default_rng(6)
        t0 = time.perf_counter()
        mismatches = 0
        for i in range(50):
            n = int(rng.integers(100, 3000))
            kind = i % 3
            if kind == 0:
                d = rng.random(n)
            elif kind == 1:
                d = np.concatenate([rng.normal(0.2, 0.05, n), rng.normal(0.7, 0.1, n // 3)])
            else:
                d = np.round(rng.beta(0.5, 2.0, n), 2)
            mismatches += int(otsu_threshold(d)[0] != brute_otsu(d))
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{50 - mismatches}/50 exact, {elapsed:.2f} s"
        assert mismatches == 0
        assert elapsed < 5.0


def test_7_metrics_fixtures(capsys):
    with criterion(7, "metrics fixtures", capsys) as info:
        oa, f1, kappa = scores_from_confusion(40, 40, 10, 10)
        worst = max(abs(kappa - 0.6), abs(oa - 0.8), abs(f1 - 0.8))
        rng = np.random.default_rng(7)
        exact = 0
        for size in (8, 32, 64):
            truth = rng.random((size, size)) < 0.3
            d = np.round(rng.random((size, size)) + 0.4 * truth, 2)
            exact += int(roc_auc(d, truth) == mann_whitney_auc(d, truth))
        info["detail"] = f"max fixture error {worst:.1e}, AUC exact on {exact}/3 images"
        assert worst <= 1e-12
        assert exact == 3


ABLATION_SCENE = dict(looks=1.0, sigma_o=0.2)


def _ablation_config(seed):
    # the full 240-epoch schedule scaled to 60 epochs with proportional milestones
    return T.TrainConfig(epochs=60, batches_per_epoch=1, batch_size=4, patch_hw=32, lr=1e-3,
                         milestones=(20, 40), seed=seed)


@pytest.mark.slow
def test_8_ablation_trend(capsys):
    with criterion(8, "ablation trend", capsys) as info:
        t0 = time.perf_counter()
        proposed, no_alpha = [], []
        for seed in range(5):
            x, y, truth = make_scene(SceneSpec(seed=seed, **ABLATION_SCENE))
            xn, yn = normalize(Raster(sar_log(x))), normalize(Raster(y))
            alpha = A.prior(xn, yn, A.AffinityConfig()).alpha
            cfg = _ablation_config(seed)
            proposed.append(T.ablation_run("xnet", "proposed", xn, yn, alpha, cfg, truth=truth)["auc"])
            no_alpha.append(T.ablation_run("xnet", "no_alpha", xn, yn, alpha, cfg, truth=truth)["auc"])
        elapsed = time.perf_counter() - t0
        mp, mn = float(np.median(proposed)), float(np.median(no_alpha))
        info["detail"] = f"median AUC proposed {mp:.5f} vs no_alpha {mn:.5f}, {elapsed / 60:.1f} min"
        assert mp > mn
        assert elapsed <= 600.0


def test_9_determinism(tmp_path, capsys):
    with criterion(9, "determinism", capsys) as info:
        base = apply_overrides(PipelineConfig(), {**PRESET_DEFAULTS["scene"], "seed": "3", "epochs": "4",
                                                  "batches_per_epoch": "2", "batch_size": "2", "patch_hw": "24",
                                                  "milestones": "2", "lr": "1e-3"}).validate()
        x, y, truth = make_scene(SceneSpec(height=64, width=64, seed=3))
        for name in ("a", "b"):
            run_pipeline(Raster(x), Raster(y), truth, base, tmp_path / name)
        same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                for f in ("metrics.csv", "model.hcdm")}
        info["detail"] = ", ".join(f"{f} {'identical' if ok else 'differs'}" for f, ok in same.items())
        assert all(same.values())


def test_10_real_data_reproduction(capsys):
    _emit(10, "real-data reproduction", "MANUAL",
          "needs the Texas pair; run `hetcd run` with the full schedule, expect X-Net kappa in [0.70, 0.83]",
          capsys)
    pytest.skip("manual reproduction target; requires a user-supplied dataset")
