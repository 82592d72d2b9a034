"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line."""
import math

import numpy as np
import pytest

from neurosdp import bell, cli, csvio, moments, neural, oracle
from neurosdp.linalg import eig_min, grad_min_eig

from .test_bell import random_behaviors
from .test_neural import finite_difference_check, small_net

Q_STAR = 1 / math.sqrt(2)

# Desk-scale schedule: 100 rounds x 2000 samples.  The learning rates are
# raised from the full-schedule values because the run is 40x shorter.
DESK = dict(rounds=100, samples_per_round=2000, minibatch=100)
DESK_PRIMAL_LR = 0.02
DESK_DUAL_LR = 0.005


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return _report


@pytest.fixture(scope="session")
def q1_primal():
    cfg = neural.TrainConfig.for_mode("primal", lr0=DESK_PRIMAL_LR, seed=1, **DESK)
    return neural.train("Q1", "primal", cfg)


@pytest.fixture(scope="session")
def q1_dual():
    cfg = neural.TrainConfig.for_mode("dual", lr0=DESK_DUAL_LR, seed=1, **DESK)
    return neural.train("Q1", "dual", cfg)


def test_1_layout_anchors(report):
    expect = {"Q1": (5, 2), "Q1AB": (9, 8), "Q2": (13, 22), "Q3": (25, 52)}
    got = {lv: (moments.build_layout(lv).m, moments.build_layout(lv).free_count) for lv in expect}
    report(1, got == expect, f"(side, free) = {got}")


def crossing(level, lo=0.6, hi=0.8, tol=1e-4):
    """Bisection for the sign change of the oracle value along the isotropic line."""
    L = moments.build_layout(level)
    t = lambda q: oracle.max_min_eig(L, bell.isotropic(q)).t_star
    assert t(lo) > 0 > t(hi)
    while hi - lo > tol:
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if t(mid) > 0 else (lo, mid)
    return (lo + hi) / 2


def test_2_tsirelson_crossing(report):
    found = {lv: crossing(lv) for lv in moments.LEVELS}
    ok = all(abs(found[lv] - 0.7071) <= (0.01 if lv == "Q3" else 0.005) for lv in found)
    report(2, ok, "crossings " + ", ".join(f"{lv} {q:.5f}" for lv, q in found.items()))


def test_3_gradient_suite(report):
    rng = np.random.default_rng(0)
    n_eig = 0
    worst_eig = 0.0
    for k, level in enumerate(moments.LEVELS):
        L = moments.build_layout(level)
        groups = [L.free_positions[j] for j in range(L.free_count)]
        for b in random_behaviors(300 + k, 40):
            M = moments.assemble_primal(L, b, rng.normal(scale=0.3, size=L.free_count))
            if eig_min(M).gap < 1e-3:
                continue
            g, _ = grad_min_eig(M, groups)
            h = 1e-5
            fd = []
            for cells in groups:
                D = np.zeros_like(M)
                for i, j in cells:
                    D[i, j] = D[j, i] = 1.0
                fd.append((eig_min(M + h * D).value - eig_min(M - h * D).value) / (2 * h))
            fd = np.array(fd)
            worst_eig = max(worst_eig, np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3)))
            n_eig += 1
    n_net = 0
    L = moments.build_layout("Q1")
    for mode in neural.MODES:
        for i in range(60):
            m = small_net(mode, L, width=3, depth=2, seed=500 + i)
            p = random_behaviors(900 + i, 1)
            x = rng.normal(size=(1, 8))
            M = neural.constraint_matrices(L, p, neural.forward(m, x), mode)
            if eig_min(M[0]).gap < 1e-4:
                continue
            finite_difference_check(m, x, p, L, mode, activity_l2=1e-3 if mode == "dual" else 0.0)
            n_net += 1
    ok = n_eig >= 100 and n_net >= 100 and worst_eig <= 1e-4
    report(3, ok, f"{n_eig} eigenvalue-gradient instances (worst rel. err {worst_eig:.1e}), "
                  f"{n_net} network-gradient instances within 1e-4")


def test_4_certificate_soundness(report, q1_primal, q1_dual):
    probs = np.concatenate([bell.Sampler("hitrun", 77, chains=100).draw(5000),
                            bell.Sampler("vertex", 78).draw(5000)])
    tags, lp, ld = oracle.verdict_batch(q1_primal, q1_dual, probs)  # raises on double certification
    certified = np.flatnonzero(tags != oracle.INCONCLUSIVE)
    t = np.array([r.t_star for r in oracle.solve_many("Q1", probs[certified])])
    false_feas = int(np.sum((tags[certified] == oracle.FEASIBLE) & (t < -oracle.TRUTH_TOL)))
    false_inf = int(np.sum((tags[certified] == oracle.INFEASIBLE) & (t > oracle.TRUTH_TOL)))
    ok = false_feas == 0 and false_inf == 0
    report(4, ok, f"{len(probs)} behaviors, {np.sum(tags == oracle.FEASIBLE)} Feasible, "
                  f"{np.sum(tags == oracle.INFEASIBLE)} Infeasible, false certificates "
                  f"{false_feas}/{false_inf}, no double certification")


def test_5_desk_scale_training(report, q1_primal, q1_dual):
    test = bell.Sampler("hitrun", 12345, chains=100).draw(4000)
    t = np.array([r.t_star for r in oracle.solve_many("Q1", test)])
    feasible = test[t > oracle.TRUTH_TOL][:2000]
    _, lam = neural.predict(q1_primal, feasible)
    primal_rate = float(np.mean(lam >= -oracle.CERT_TOL))
    qs = np.linspace(0.85, 1.0, 16)
    _, lam_d = neural.predict(q1_dual, bell.isotropic_batch(qs))
    dual_rate = float(np.mean(lam_d >= -oracle.CERT_TOL))
    ok = len(feasible) == 2000 and primal_rate >= 0.9 and dual_rate >= 0.9
    report(5, ok, f"primal certifies {primal_rate:.1%} of {len(feasible)} feasible samples, "
                  f"dual certifies {dual_rate:.1%} of the isotropic grid on [0.85, 1]")


def test_6_speed(report, tmp_path):
    ratios = {}
    for level in ("Q1", "Q2"):
        cfg = neural.TrainConfig.for_mode("primal", rounds=1, samples_per_round=200,
                                          calibration_samples=10_000, chains=10)
        path = tmp_path / f"{level}.json"
        neural.train(level, "primal", cfg).save(path)
        out = tmp_path / f"{level}.csv"
        assert cli.main(["bench", "--model", str(path), "--n", "100", "--oracle-method", "subgradient",
                         "--oracle-iters", "20000", "--out", str(out)]) == 0
        header, rows = csvio.read_table(out)
        ratios[level] = float(rows[0][header.index("ratio")])
    ok = all(r >= 10 for r in ratios.values())
    report(6, ok, "oracle/NN time ratio " + ", ".join(f"{k} {v:.0f}x" for k, v in ratios.items()))


def test_7_determinism(report, tmp_path):
    same = []
    for sampler in bell.SAMPLERS:
        files = []
        for run in ("a", "b"):
            f = tmp_path / f"{sampler}_{run}.csv"
            cli.main(["sample", "--sampler", sampler, "--n", "500", "--seed", "4", "--out", str(f)])
            files.append(f.read_bytes())
        same.append(files[0] == files[1])
    for mode in neural.MODES:
        outs = []
        for run in ("a", "b"):
            f = tmp_path / f"{mode}_{run}.json"
            cli.main(["train", "--level", "q1", "--mode", mode, "--rounds", "5", "--samples-per-round",
                      "500", "--calibration-samples", "10000", "--seed", "9", "--out", str(f)])
            outs.append((f.read_bytes(), f.with_suffix(".loss.csv").read_bytes()))
        same.append(outs[0] == outs[1])
    report(7, all(same), f"{sum(same)}/{len(same)} artifacts byte-identical across two runs")


def test_8_sampler_validity(report):
    n = 10_000
    checks = {}
    for kind in bell.SAMPLERS:
        p = bell.Sampler(kind, 21).draw(n)
        bell.check_behaviors(p, atol=1e-10)
        # hit-and-run draws already sit in the canonical region; others are relabeled first
        s = bell.chsh_value(p if kind == "hitrun" else bell.canonicalize_batch(p)[0])
        checks[kind] = (p.shape == (n, 16), s.min(), s.max())
    ok = (all(c[0] for c in checks.values())
          and checks["hitrun"][1] >= 2 - 1e-10
          and checks["quantum"][2] <= 2 * math.sqrt(2) + 1e-9)
    report(8, ok, "; ".join(f"{k}: CHSH in [{lo:.4f}, {hi:.4f}]" for k, (_, lo, hi) in checks.items()))
