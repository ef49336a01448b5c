"""Acceptance suite: one PASS/FAIL line per criterion with its tolerance and runtime.

Run ``pytest tests/test_acceptance.py -v`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from speclk import cli
from speclk import gradcheck as G
from speclk import losses as L
from speclk import specdec as S
from speclk import toyfit as T
from speclk import train as TR

FIXTURES = Path(__file__).parent / "fixtures"
RESULTS: list[str] = []


def report(label, ok, detail, elapsed, budget=None):
    timing = f"{elapsed:.1f} s" + (f" < {budget:g} s" if budget else "")
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail} ({timing})"
    RESULTS.append(line)
    print(line)
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# 1 -----------------------------------------------------------------------------


def test_c1_gradient_oracle():
    with Timer() as t:
        rep = G.check_all_gradients(1000, (2, 64), rng=np.random.default_rng(0), tolerance=1e-5)
    ok = rep.passed and rep.trials == 1000 and t.elapsed < 30
    report(
        "C1 gradient oracle",
        ok,
        f"max rel error {rep.max_rel_error:.2e} <= 1e-05 over {rep.checks} checks, "
        f"{rep.skipped_coords} tie/kink coordinates skipped",
        t.elapsed,
        30,
    )
    assert ok


# 2 -----------------------------------------------------------------------------


def _lk_grad_by_indicator(p, q):
    # d(-log alpha)/dz through dalpha/dq_i = [q_i < p_i]
    alpha = np.minimum(p, q).sum()
    m = (q < p).astype(float)
    return -q * (m - (q * m).sum()) / alpha


def test_c2_identities():
    rng = np.random.default_rng(1)
    n = 10_000
    worst = {"alpha+tv": 0.0, "lk_grad": 0.0, "one_hot": 0.0, "lambda": 0.0}
    with Timer() as t:
        for _ in range(n):
            v = int(rng.integers(2, 65))
            p = rng.dirichlet(np.full(v, 0.7))
            z = rng.normal(0, 1.5, v)
            q = np.exp(z - z.max())
            q /= q.sum()
            worst["alpha+tv"] = max(worst["alpha+tv"], abs(L.acceptance_rate(p, q) + L.tv(p, q) - 1.0))
            g = L.loss_lk_alpha(p, q).grad
            ref = L.grad_tv(p, q) / L.acceptance_rate(p, q)
            ind = _lk_grad_by_indicator(p, q)
            scale = max(1.0, np.abs(ref).max())
            worst["lk_grad"] = max(worst["lk_grad"], np.abs(g - ref).max() / scale, np.abs(g - ind).max() / scale)
            x = int(rng.integers(v))
            onehot = np.zeros(v)
            onehot[x] = 1.0
            worst["one_hot"] = max(worst["one_hot"], abs(L.loss_lk_alpha(onehot, q).value + math.log(q[x])))
            eta = float(rng.uniform(0.1, 10.0))
            worst["lambda"] = max(
                worst["lambda"],
                abs(L.lambda_schedule(0.0, eta) - 1.0),
                abs(L.lambda_schedule(1.0, eta) - math.exp(-eta)),
            )
    ok = all(v <= 1e-12 for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("C2 identity suite", ok, f"{n} instances, worst deviations {detail} <= 1e-12", t.elapsed)
    assert ok


# 3 -----------------------------------------------------------------------------


def test_c3_magnitude_regimes():
    V = 100_000
    notes, ok = [], True
    with Timer() as t:
        for k in (1, 10, 100):
            spec = G.RegimeSpec(V, k)
            for name, (measured, predicted) in G.magnitude_report(spec).items():
                ok &= 0.5 <= measured / predicted <= 2.0
            c = G.component_table(spec)
            ok &= 0.5 <= c["forward_kl"]["on_support"] / (-1.0 / k) <= 2.0
            ok &= 0.5 <= c["lk_alpha"]["on_support"] / (-1.0 / k) <= 2.0
            ok &= 0.5 <= c["tv"]["on_support"] / (-1.0 / V) <= 2.0
            ok &= 0.5 <= c["forward_kl"]["off_support"] / (1.0 / V) <= 2.0
            ok &= abs(c["tv"]["off_support"]) <= 0.01 / V
            notes.append(f"k={k} |grad TV|={G.magnitude_report(spec)['tv'][0]:.2e}")
    ok &= t.elapsed < 5
    report("C3 magnitude regimes", ok, f"V=1e5, norms within factor 2 and component signs match; {'; '.join(notes)}", t.elapsed, 5)
    assert ok


# 4 -----------------------------------------------------------------------------


def test_c4_losslessness():
    worst, greedy_mismatch = 0.0, 0
    with Timer() as t:
        for i in range(100):
            r = np.random.default_rng([4, i])
            V, K = int(r.integers(2, 5)), int(r.integers(1, 4))
            seeds = r.integers(0, 2**31, size=2)
            target = S.HashedDirichletModel(V, int(seeds[0]), 1.0)
            draft = S.HashedDirichletModel(V, int(seeds[1]), 1.0)
            ref = S.target_marginal(target, (), 2, V)
            got = S.exactness_enumerate(target, draft, (), K, S.STOCHASTIC, 2, V)
            worst = max(worst, float(np.abs(got - ref).max()))
            greedy = S.exactness_enumerate(target, draft, (), K, S.GREEDY, 2, V)
            greedy_mismatch += np.abs(greedy - ref).max() > 1e-9
    ok = worst <= 1e-12 and greedy_mismatch >= 1 and t.elapsed < 10
    report(
        "C4 losslessness",
        ok,
        f"100 instances (V<=4, K<=3, two-token joint): stochastic max error {worst:.1e} <= 1e-12; "
        f"greedy differs from target on {greedy_mismatch}/100",
        t.elapsed,
        10,
    )
    assert ok


# 5 -----------------------------------------------------------------------------


def _enumerated_round_moments(p_tab, q_tab, K, greedy):
    """Mean and variance of tokens emitted per round, by enumerating every round outcome."""
    out = S._round_outcomes(S.PositionalModel(p_tab), S.PositionalModel(q_tab), (), K, greedy)
    lengths = np.array([len(seq) for seq in out])
    probs = np.array(list(out.values()))
    mean = float((lengths * probs).sum())
    return mean, float((lengths**2 * probs).sum()) - mean**2


def test_c5_tau_consistency():
    rounds = 100_000
    worst_z, bounded, lines = 0.0, True, []
    greedy_worst = 0.0
    with Timer() as t:
        rng = np.random.default_rng(5)
        V = 4
        p_tab = rng.dirichlet(np.full(V, 0.6), size=4)
        q_tab = rng.dirichlet(np.full(V, 0.6), size=3)
        for K in (1, 2, 3):
            for mode in (S.STOCHASTIC, S.GREEDY):
                exact, var = _enumerated_round_moments(p_tab[: K + 1], q_tab[:K], K, mode == S.GREEDY)
                res = S.simulate_stationary(p_tab[: K + 1], q_tab[:K], rounds, np.random.default_rng([5, K, len(mode)]), mode)
                tau = S.tau(res.metrics)
                se = math.sqrt(var / rounds)
                z = abs(tau - exact) / se
                worst_z = max(worst_z, z)
                bounded &= bool(np.all((res.accepted_count >= 0) & (res.accepted_count <= K))) and 1 <= tau <= K + 1
                lines.append(f"{mode[0]}K={K} z={z:.2f}")
                if mode == S.GREEDY:
                    for i in range(K):
                        n = int(res.metrics.verified[i])
                        a = float(p_tab[i, np.argmax(q_tab[i])])
                        if n and 0 < a < 1:
                            greedy_worst = max(greedy_worst, abs(res.metrics.per_position_alpha()[i] - a) / math.sqrt(a * (1 - a) / n))
    ok = worst_z <= 3 and greedy_worst <= 3 and bounded
    report(
        "C5 tau consistency",
        ok,
        f"1e5 rounds per cell, worst |tau - exact| = {worst_z:.2f} SE <= 3; tau in [1, K+1]: {bounded}; "
        f"greedy alpha vs p(argmax q) worst {greedy_worst:.2f} sigma <= 3 [{', '.join(lines)}]",
        t.elapsed,
    )
    assert ok


# 6 -----------------------------------------------------------------------------


def test_c6_gaussian_demo():
    with Timer() as t:
        target = T.CANONICAL_MIXTURE
        search = T.SearchConfig()
        grid = T.search_grid(target, search)
        fits = {obj: T.fit_gaussian(target, obj, grid, search) for obj in T.CONTINUOUS_OBJECTIVES}
    a = {k: v[1] for k, v in fits.items()}
    kl, rkl, tvf = fits["forward_kl"][0], fits["reverse_kl"][0], fits["tv"][0]
    modes = [c[1] for c in target.components]
    rkl_dist = min(abs(rkl.mu - m) for m in modes)
    ok = (
        a["tv"] >= a["reverse_kl"]
        and a["tv"] >= a["forward_kl"]
        and a["tv"] - a["forward_kl"] >= 0.05
        and abs(kl.mu) < 0.05
        and kl.sigma > tvf.sigma
        and rkl_dist < 0.5
        and t.elapsed < 60
    )
    report(
        "C6 Gaussian demo",
        ok,
        f"alpha KL {a['forward_kl']:.3f} / RKL {a['reverse_kl']:.3f} / TV {a['tv']:.3f}, "
        f"TV-KL gap {100 * (a['tv'] - a['forward_kl']):.1f} pp >= 5; KL mu {kl.mu:.1e} sigma {kl.sigma:.2f} > TV sigma {tvf.sigma:.2f}; "
        f"RKL {rkl_dist:.3f} from a mode < 0.5",
        t.elapsed,
        60,
    )
    assert ok


# 7 -----------------------------------------------------------------------------

TOY_CFG = dict(learning_rate=0.05, warmup_steps=20)


def test_c7_capacity_experiment():
    hybrid, kl = L.LossKind.hybrid_adaptive(3.0), L.LossKind.forward_kl()
    with Timer() as t:
        cfg = TR.TrainConfig(**TOY_CFG)
        h_alpha, k_alpha = [], []
        for seed in range(20):
            task = T.make_capacity_task(16, 8, 0.3, seed=seed)
            h_alpha.append(TR.train_draft(task, hybrid, cfg)[1].final_alpha())
            k_alpha.append(TR.train_draft(task, kl, cfg)[1].final_alpha())
        gaps = []
        for path in sorted(FIXTURES.glob("task_v4_c3_seed*.json")):
            task = T.ToyTask.load(path)
            star = T.brute_force_optimal_alpha(task)[1]
            gaps.append(star - TR.train_draft(task, hybrid, cfg)[1].final_alpha())
    ok = np.mean(h_alpha) >= np.mean(k_alpha) and len(gaps) == 5 and max(gaps) <= 0.02 and t.elapsed < 300
    report(
        "C7 capacity experiment",
        ok,
        f"20 tasks V=16 C=8: mean alpha hybrid {np.mean(h_alpha):.4f} >= KL {np.mean(k_alpha):.4f}; "
        f"{len(gaps)} V=4 C=3 fixtures: max gap to alpha* {max(gaps):.4f} <= 0.02",
        t.elapsed,
        300,
    )
    assert ok


# 8 -----------------------------------------------------------------------------


def test_c8_tv_from_scratch():
    cfg_kw = dict(TOY_CFG, epochs=300, early_stop_window=None, init_std=0.01)
    rows = []
    with Timer() as t:
        for seed in range(5):
            task = T.make_capacity_task(1024, 32, 0.05, seed=seed, family="linear", n_features=8)
            cfg = TR.TrainConfig(**cfg_kw, seed=seed)
            tv_a = TR.train_draft(task, L.LossKind.tv(), cfg)[1].final_alpha()
            hy_a = TR.train_draft(task, L.LossKind.hybrid_adaptive(3.0), cfg)[1].final_alpha()
            rows.append((tv_a, hy_a))
    ok = all(a <= b for a, b in rows) and t.elapsed < 300
    detail = ", ".join(f"{a:.3f}<={b:.3f}" for a, b in rows)
    report("C8 TV from scratch", ok, f"V=1024, 5 seeds, 300 equal steps, TV vs hybrid alpha: {detail}", t.elapsed, 300)
    assert ok


# 9 -----------------------------------------------------------------------------

SMALL = {
    "gradcheck": ["--trials", "50"],
    "gaussian-demo": ["--set", "n_mu=13", "--set", "n_sigma=10", "--set", "landscape_resolution=12", "--set", "grid_n=4001"],
    "capacity-exp": ["--set", "tasks=3", "--set", "epochs=40"],
    "specdec-sim": ["--set", "rounds=20000", "--set", "exactness_instances=10"],
    "train": ["--set", "epochs=20", "--set", "heads=2"],
}


def _snapshot(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_c9_determinism(tmp_path):
    checked, ok = [], True
    with Timer() as t:
        for command, extra in SMALL.items():
            out = tmp_path / command
            assert cli.main([command, "--out", str(out), *extra]) == 0
            first = _snapshot(out)
            manifest = out / f"manifest-{command}.json"
            # twice more from the written manifest, in place
            for _ in range(2):
                ok &= cli.main([command, "--config", str(manifest)]) == 0
                ok &= _snapshot(out) == first
            checked.append(f"{command} ({len(first)} files)")
        out = tmp_path / "gradcheck"
        assert cli.main(["report", "--out", str(out)]) == 0
        snap = _snapshot(out)
        shutil.copy(out / "manifest-report.json", tmp_path / "report-manifest.json")
        ok &= cli.main(["report", "--config", str(tmp_path / "report-manifest.json")]) == 0
        ok &= _snapshot(out) == snap
        checked.append("report")
    report("C9 determinism", ok, f"byte-identical reruns from manifest, twice each: {', '.join(checked)}", t.elapsed)
    assert ok


if __name__ == "__main__":
    import tempfile

    for name, fn in list(globals().items()):
        if name.startswith("test_c") and callable(fn):
            try:
                if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                pass
