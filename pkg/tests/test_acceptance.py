"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are also collected and printed in the terminal summary (see
``conftest.py``), so ``pytest tests/test_acceptance.py`` ends with the full
table even without ``-s``.
"""

import time

import numpy as np
import pytest
from scipy import stats

from mrmae.baselines import TaskMLPConfig, TaskSpec, fit_linear, fit_task_mlp
from mrmae.cli import run as cli_run
from mrmae.dataset import LayeredDataset, compute_feature_means, normalize_layers, patch_average
from mrmae.ensemble import EnsembleConfig
from mrmae.evaluate import EnsemblePredictor, MAEPredictor, SweepConfig, TaskPredictor, accuracy, masking_sweep
from mrmae.importance import accumulate_loss_matrix, summarize
from mrmae.masking import MaskPolicy, make_rng, sample_mask_matrix, superset_mask_matrix
from mrmae.nnet import MlpModel, forward
from mrmae.semisup import build_pseudo_dataset, train_student
from mrmae.shift import accuracy_trend, pca_top, select_patches
from mrmae.synth import copy_plant_spec, planted_spec, synth_dataset
from mrmae.training import TrainConfig, train, train_on_matrix
from conftest import make_ds
from gradcheck import max_rel_error, random_net

SEEDS = range(20)
FRACTIONS = (0.0, 0.2, 0.4, 0.5, 0.6, 0.7, 0.8)
TASK = TaskSpec(("A", "B"), ("C",))


def _mae_cfg(policy, seed, epochs=200):
    return TrainConfig(epochs=epochs, learning_rate=3e-3, batch_size=64, policy=policy, seed=seed)


# ------------------------------------------------------------------ 1


def test_gradient_oracle(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = [max_rel_error(*random_net(rng, act)) for act in ("relu", "tanh", "identity") * 8]
    dt = time.perf_counter() - t0
    worst = max(errs)
    ok = len(errs) >= 20 and worst <= 1e-6 and dt < 10
    report(1, ok, f"{len(errs)} nets, max rel err {worst:.2e}, {dt:.1f}s")
    assert ok


# ------------------------------------------------------------------ 2


def _brute_patch(grid, ps):
    R, C = grid.shape[0] // ps, grid.shape[1] // ps
    out = np.empty((R, C))
    for r in range(R):
        for c in range(C):
            vals = [grid[r * ps + i, c * ps + j] for i in range(ps) for j in range(ps)]
            vals = [v for v in vals if not np.isnan(v)]
            out[r, c] = sum(vals) / len(vals) if vals else np.nan
    return out


def _brute_loss_matrix(model, X, means, policy, part, passes, seed):
    rng = make_rng(seed)
    n = X.shape[1]
    sums, counts = np.zeros((n, n)), np.zeros((n, n), dtype=int)
    for _ in range(passes):
        M = sample_mask_matrix(policy, n, part, rng, X.shape[0])
        for i in range(X.shape[0]):
            p = forward(model, np.array([means[j] if M[i, j] else X[i, j] for j in range(n)]))
            for a in range(n):
                for b in range(n):
                    if not M[i, a] and M[i, b]:
                        sums[a, b] += abs(p[b] - X[i, b])
                        counts[a, b] += 1
    return sums, counts


def _power_iteration_top2(cov):
    # deflated power iteration; independent of the jacobi solver
    vals = []
    A = cov.copy()
    for _ in range(2):
        v = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
        lam = 0.0
        for _ in range(20000):
            w = A @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            w /= nw
            if np.linalg.norm(w - v) < 1e-14:
                v = w
                break
            v = w
        lam = float(v @ A @ v)
        vals.append(lam)
        A = A - lam * np.outer(v, v)
    return vals


def _brute_nms(V):
    R, C = V.shape
    out = set()
    for r in range(R):
        for c in range(C):
            if np.isnan(V[r, c]):
                continue
            keep = True
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if (dr, dc) == (0, 0) or not (0 <= rr < R and 0 <= cc < C) or np.isnan(V[rr, cc]):
                        continue
                    if V[rr, cc] > V[r, c] or (V[rr, cc] == V[r, c] and (rr, cc) < (r, c)):
                        keep = False
            if keep:
                out.add((r, c))
    return out


def test_brute_force_equivalences(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    bad = {"patch_average": 0, "loss_matrix": 0, "pca_top": 0, "select_patches": 0}
    for _ in range(100):
        R, C, ps = rng.integers(1, 5, size=3)
        grid = rng.normal(size=(R * ps, C * ps))
        grid[rng.random(grid.shape) < 0.2] = np.nan
        if not np.allclose(patch_average(grid, int(ps)), _brute_patch(grid, int(ps)), rtol=0, atol=1e-12, equal_nan=True):
            bad["patch_average"] += 1
    for i in range(100):
        ds = make_ds(rng.normal(size=(3, 4)), [("A", 1, 2), ("B", 1, 2)])
        model = MlpModel.init([4, 5, 4], "tanh", seed=i)
        pol = MaskPolicy.uniform_fraction()
        lm = accumulate_loss_matrix(model, ds, pol, 2, seed=i)
        sums, counts = _brute_loss_matrix(model, ds.data, compute_feature_means(ds).means, pol, ds.layer_partition, 2, i)
        if not (np.array_equal(lm.counts, counts) and np.allclose(lm.sums, sums, rtol=0, atol=1e-12)):
            bad["loss_matrix"] += 1
    for _ in range(100):
        P = rng.normal(size=(30, 12)) * rng.uniform(0.1, 3.0, size=12)
        lam1, lam2, _ = pca_top(P)
        C0 = P - P.mean(axis=0)
        ref = _power_iteration_top2(C0.T @ C0 / 30)
        if not (abs(lam1 - ref[0]) <= 1e-8 * max(1.0, ref[0]) and abs(lam2 - ref[1]) <= 1e-6 * max(1.0, ref[0])):
            bad["pca_top"] += 1
    for i in range(100):
        V = rng.integers(0, 6, size=(12, 24)).astype(float) if i % 2 else rng.normal(size=(12, 24))
        V[rng.random(V.shape) < 0.05] = np.nan
        if select_patches(V) != _brute_nms(V):
            bad["select_patches"] += 1
    dt = time.perf_counter() - t0
    ok = not any(bad.values()) and dt < 60
    report(2, ok, f"100 instances each, mismatches {bad}, {dt:.1f}s")
    assert ok


# ------------------------------------------------------------------ 3


def test_masking_contracts(report):
    rng = np.random.default_rng(5)
    violations = 0
    draws = 10_000
    part = {"A": (0, 3), "B": (3, 7), "C": (7, 9), "D": (9, 12)}
    for i in range(draws):
        n = int(rng.integers(2, 40))
        p = float(rng.uniform(0.0, 0.99))
        m = sample_mask_matrix(MaskPolicy.fixed_fraction(p), n, None, make_rng(i), 1)[0]
        # independent restatement: round half up, never the whole vector
        violations += int(m.sum() != min(int(np.floor(p * n + 0.5 + 1e-9)), n - 1))
        base = rng.random(n) < rng.uniform(0, 0.9)
        if base.all():
            base[0] = False
        sup = superset_mask_matrix(base, MaskPolicy.fixed_fraction(float(rng.uniform(0, 0.99))), None, make_rng(i), 1, strict=False)[0]
        violations += int(not sup[base].all())
        L = sample_mask_matrix(MaskPolicy.layer_subset(float(rng.uniform(0.01, 0.99))), 12, part, make_rng(i), 1)[0]
        violations += int(any(L[a:b].any() != L[a:b].all() for a, b in part.values()))
    ok = violations == 0
    report(3, ok, f"{draws} draws per contract, {violations} violations")
    assert ok


# ------------------------------------------------------------------ 4-6


def _one_seed(seed):
    ds = normalize_layers(synth_dataset(planted_spec(seed, k=600), test_months=100))
    means = compute_feature_means(ds)
    ii, oi = TASK.input_index(ds), TASK.output_index(ds)
    mae, _ = train(ds, _mae_cfg(MaskPolicy.fixed_fraction(0.7, seed=seed), seed))
    umae, _ = train(ds, _mae_cfg(MaskPolicy.uniform_fraction(seed=seed), seed))
    mlp = fit_task_mlp(ds, TASK, mae.param_count, TaskMLPConfig(seed=seed))
    lin = fit_linear(ds, TASK)
    ens = EnsembleConfig(32, MaskPolicy.fixed_fraction(0.6), seed=seed, strict=False)
    preds = {
        "mae": MAEPredictor(mae, means, oi),
        "ens": EnsemblePredictor(mae, means, oi, ens),
        "umae": MAEPredictor(umae, means, oi),
        "mlp": TaskPredictor(mlp, means, ii, oi),
        "lin": TaskPredictor(lin, means, ii, oi),
    }
    res = masking_sweep(SweepConfig(fractions=FRACTIONS, trials=3, seed=seed), ds.test, ii, oi, preds)
    return {name: res.curve(name)[1] for name in preds}


@pytest.fixture(scope="module")
def planted_sweeps():
    t0 = time.perf_counter()
    curves = [_one_seed(s) for s in SEEDS]
    out = {name: np.array([c[name] for c in curves]) for name in curves[0]}
    return out, time.perf_counter() - t0


def test_ensemble_boost(report, planted_sweeps):
    curves, dt = planted_sweeps
    at0 = FRACTIONS.index(0.0)
    ens, mae, mlp = curves["ens"][:, at0], curves["mae"][:, at0], curves["mlp"][:, at0]
    p_mae = stats.ttest_1samp(ens - mae - 1.0, 0.0, alternative="greater").pvalue
    p_mlp = stats.ttest_1samp(ens - mlp + 2.0, 0.0, alternative="greater").pvalue
    ok = (ens - mae).mean() >= 1.0 and p_mae < 0.05 and (ens - mlp).mean() >= -2.0 and p_mlp < 0.05 and dt < 600
    report(4, ok, f"ens {ens.mean():.2f} vs MAE {mae.mean():.2f} (p={p_mae:.1e}) vs MLP {mlp.mean():.2f} (p={p_mlp:.1e}), "
                  f"{len(ens)} seeds, {dt:.0f}s")
    assert ok


def test_robustness_curve(report, planted_sweeps):
    curves, dt = planted_sweeps
    a0, a60 = FRACTIONS.index(0.0), FRACTIONS.index(0.6)
    drift = {k: curves[k][:, a60].mean() - curves[k][:, a0].mean() for k in ("umae", "mlp", "lin")}
    ok = abs(drift["umae"]) <= 2.0 and drift["mlp"] <= -10.0 and drift["lin"] <= -10.0 and dt < 600
    report(5, ok, "change 0%->60%: " + ", ".join(f"{k} {v:+.2f}" for k, v in drift.items()))
    assert ok


def test_peak_at_masking(report, planted_sweeps):
    curves, _ = planted_sweeps
    mean_curve = curves["mae"].mean(axis=0)
    peak = FRACTIONS[int(np.argmax(mean_curve))]
    ok = peak > 0
    report(6, ok, f"70%-trained MAE peaks at {peak:.0%} ({mean_curve.max():.2f} vs {mean_curve[0]:.2f} at 0%)")
    assert ok


# ------------------------------------------------------------------ 7


def test_importance_recovery(report):
    hits = 0
    for seed in SEEDS:
        ds = normalize_layers(synth_dataset(copy_plant_spec(seed), 0))
        pol = MaskPolicy.fixed_fraction(0.5, seed=seed)
        model, _ = train(ds, _mae_cfg(pol, seed, epochs=100))
        L = accumulate_loss_matrix(model, ds, pol, 20, seed=seed)
        a, b = ds.feature_index("A", 0, 1), ds.feature_index("B", 2, 2)
        imp = summarize(L, "feature", b).importance
        hits += int(np.nanargmax(imp) == a)
    ok = hits >= 18
    report(7, ok, f"source ranked first in {hits}/{len(SEEDS)} runs")
    assert ok


# ------------------------------------------------------------------ 8


def _semisup_gain(seed, n_train=150, n_unlabeled=250):
    raw = synth_dataset(planted_spec(seed, k=600, drift=(("A", 0.001), ("B", 0.001))), 0)
    is_train = np.zeros(600, bool)
    is_train[:n_train] = True
    ds = normalize_layers(LayeredDataset(raw.data, raw.layers, raw.timestamps, is_train))
    ii, oi = TASK.input_index(ds), TASK.output_index(ds)
    means = compute_feature_means(ds)
    Xu = ds.data[n_train : n_train + n_unlabeled].copy()
    Xu[:, oi] = np.nan
    teacher, _ = train_on_matrix(
        np.vstack([ds.train, Xu]), means, ds.layer_partition, _mae_cfg(MaskPolicy.fixed_fraction(0.7, seed=seed), seed)
    )
    pl = build_pseudo_dataset(ds, teacher, Xu, np.isnan(Xu), EnsembleConfig(32, MaskPolicy.fixed_fraction(0.6), seed=seed))
    student = train_student(pl, "linear", TASK)
    supervised = fit_linear(ds, TASK)
    Xt = ds.data[n_train + n_unlabeled :]
    return accuracy(Xt[:, oi], student.predict(Xt[:, ii])) - accuracy(Xt[:, oi], supervised.predict(Xt[:, ii]))


def test_semisupervised_direction(report):
    gains = np.array([_semisup_gain(s) for s in SEEDS])
    p = stats.ttest_1samp(gains - 3.0, 0.0, alternative="greater").pvalue
    ok = gains.mean() >= 3.0 and p < 0.05
    report(8, ok, f"student minus supervised {gains.mean():+.2f} +- {gains.std(ddof=1):.2f} (p={p:.1e}, {len(gains)} seeds)")
    assert ok


# ------------------------------------------------------------------ 9


def _trend(seed, slope):
    spec = planted_spec(seed, ar=0.0, drift=(("C", slope),) if slope else ())
    ds = normalize_layers(synth_dataset(spec, 120))
    oi = TASK.output_index(ds)
    model, _ = train(ds, _mae_cfg(MaskPolicy.fixed_fraction(0.7, seed=seed), seed, epochs=150))
    tr = accuracy_trend(MAEPredictor(model, compute_feature_means(ds), oi), ds.test, oi)
    return tr.slope, tr.p_value(10_000, seed, "less" if slope else "two-sided")


def test_drift_detection(report):
    rows = [(_trend(s, 0.006), _trend(s, 0.0)) for s in range(5)]
    drift_ok = all(sl < 0 and p < 0.05 for (sl, p), _ in rows)
    flat_ok = all(p >= 0.05 for _, (sl, p) in rows)
    ok = drift_ok and flat_ok
    worst_drift = max(p for (_, p), _ in rows)
    worst_flat = min(p for _, (_, p) in rows)
    report(9, ok, f"5 seeds: drift max p {worst_drift:.4f} (slopes all < 0: {all(r[0][0] < 0 for r in rows)}), "
                  f"no-drift min two-sided p {worst_flat:.3f}")
    assert ok


# ------------------------------------------------------------------ 10


def test_cli_determinism(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"epochs": 15, "learning_rate": 0.003, "batch_size": 32}')
    data = str(tmp_path / "data" / "manifest.json")
    ckpt = str(tmp_path / "mae" / "model.ckpt")
    lin = str(tmp_path / "lin" / "model.ckpt")
    commands = {
        "synth": ["synth", "--preset", "planted", "--k", "96"],
        "train": ["train", "--data", data, "--config", str(cfg), "--test-months", "24"],
        "train-linear": ["train", "--kind", "linear", "--data", data, "--test-months", "24", "--inputs", "A,B", "--outputs", "C"],
        "predict": ["predict", "--data", data, "--model", ckpt, "--mask-layers", "C", "--mask-frac", "0.3"],
        "ensemble": ["ensemble", "--data", data, "--model", ckpt, "--mask-layers", "C", "--iters", "4", "--dump-members", "m.csv"],
        "importance": ["importance", "--data", data, "--model", ckpt, "--iterations", "3", "--mode", "layer", "--target", "C"],
        "shift": ["shift", "--data", data, "--patch", "A,0,0", "--model", ckpt, "--outputs", "C", "--permutations", "200"],
        "select-patches": ["select-patches", "--data", data, "--combine"],
        "pseudo-label": ["pseudo-label", "--data", data, "--teacher", ckpt, "--unlabeled", data, "--unknown-layers", "C",
                         "--iters", "2", "--student", "linear"],
        "evaluate": ["evaluate", "--data", data, "--model", f"mae={ckpt}", "--model", f"lin={lin}", "--inputs", "A,B",
                     "--outputs", "C", "--sweep", "--fractions", "0,0.5", "--trials", "2"],
    }
    outdirs = {"synth": tmp_path / "data", "train": tmp_path / "mae", "train-linear": tmp_path / "lin"}
    failed = []
    for name, argv in commands.items():
        first = outdirs.get(name, tmp_path / name)
        second = tmp_path / f"{name}-rerun"
        if cli_run(["--seed", "4", "--out", str(first), *argv]) != 0 or cli_run(["--out", str(second), "rerun", str(first / "run.json")]) != 0:
            failed.append(f"{name} (exit)")
            continue
        names = sorted(p.name for p in first.iterdir())
        if names != sorted(p.name for p in second.iterdir()) or any(
            (first / f).read_bytes() != (second / f).read_bytes() for f in names
        ):
            failed.append(name)
    ok = not failed
    report(10, ok, f"{len(commands)} command runs rerun byte-identical" if ok else f"differences in {failed}")
    assert ok
