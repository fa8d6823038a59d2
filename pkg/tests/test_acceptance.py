"""End-to-end acceptance checks, one group per numbered criterion.

The summary at the end of the pytest run lists one PASS/FAIL line per
criterion (see conftest.py).  Criteria 9 to 11 run the full Monte Carlo
experiments from configs/ and take several minutes each.
"""

import math
import os
import time

import numpy as np
import pytest
import yaml
from scipy import integrate

from besovnet import besov_synth as bs
from besovnet import harness as hs
from besovnet.cli import main as cli_main
from besovnet.constructive_approx import (
    GadgetBudget,
    affine_compose,
    approx_rate_sweep,
    assemble_approximant,
    bspline_net_certified,
    bspline_reference,
    composite_assemble,
    full_plan,
    gadget_error_budget,
    hyperparams_for_n,
    mult_gadget,
    plan_index_selection,
    sample_size_budget,
)
from besovnet.inference import (
    ChainConfig,
    Dataset,
    batch_means_se,
    run_adaptive_sampler,
    run_shrinkage_sampler,
    run_spike_slab_sampler,
)
from besovnet.priors import (
    AdaptivePrior,
    NetShape,
    ShrinkagePrior,
    SigmaPrior,
    Slab,
    SpikeSlabPrior,
    check_conditions,
    hyperprior_pmf,
    sample_prior,
)
from besovnet.relu_net import Network, clip01_gadget, clip_gadget, lipschitz_param_bound, param_count
from besovnet.spline_core import BesovParams, SplineCoefficients, bspline_eval, enumerate_index_set, sequence_norm

CONFIGS = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")
THREADS = min(8, os.cpu_count() or 1)


def load(name):
    with open(os.path.join(CONFIGS, name)) as fh:
        return yaml.safe_load(fh)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def r_squared(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - np.polyval(coef, x)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        # constant y is an exact affine relation with zero slope
        return 1.0
    return 1.0 - ss_res / ss_tot


# 1


@pytest.mark.criterion(1, "spline substrate")
def test_spline_substrate(record_property):
    with Timer() as t:
        pou = 0.0
        for m in range(5):
            x = np.linspace(m, m + 1, 200)
            total = sum(bspline_eval(m, x - j) for j in range(-2, m + 3))
            pou = max(pou, float(np.max(np.abs(total - 1))))
        conv = 0.0
        for m in (1, 2, 3, 4):
            for x in np.linspace(-0.5, m + 1.5, 31):
                ref = integrate.quad(lambda u: bspline_eval(m - 1, x - u), 0.0, 1.0, limit=200,
                                     points=[x - j for j in range(m + 1) if 0 < x - j < 1])[0]
                conv = max(conv, abs(bspline_eval(m, x) - ref))
        homog = 0.0
        rng = np.random.default_rng(0)
        for p, q in [(2, 2), (1, math.inf), (math.inf, 1), (0.5, 3)]:
            params = BesovParams(p, q, (0.5, 1.0), 2)
            pool = [i for k in range(4) for i in enumerate_index_set(params, k)]
            c = SplineCoefficients(params, {pool[i]: rng.normal() for i in rng.choice(len(pool), 40, replace=False)})
            for lam in (0.5, 2.0, 10.0):
                a, b = sequence_norm(c), sequence_norm(c.scaled(lam))
                homog = max(homog, abs(b - lam * a) / max(1.0, b))
    record_property("detail", f"pou {pou:.1e}, conv {conv:.1e}, homog {homog:.1e}, {t.seconds:.1f}s")
    assert pou <= 1e-10 and conv <= 1e-6 and homog <= 1e-12
    assert t.seconds < 10


# 2


@pytest.mark.criterion(2, "gadget exactness")
def test_gadget_exactness(record_property):
    with Timer() as t:
        rng = np.random.default_rng(1)
        x = rng.uniform(-5, 5, size=(1000, 1))
        clip_err = max(float(np.max(np.abs(clip_gadget(F)(x) - np.clip(x[:, 0], -F, F)))) for F in (0.5, 1.0, 3.0))
        clip_err = max(clip_err, float(np.max(np.abs(clip01_gadget()(x) - np.clip(x[:, 0], 0, 1)))))
        eps = 2.0**-12
        xy = rng.uniform(-1, 1, size=(10_000, 2))
        mult_err = float(np.max(np.abs(mult_gadget(GadgetBudget(eps), 1.0)(xy) - xy[:, 0] * xy[:, 1])))
    record_property("detail", f"clip {clip_err:.1e}, mult {mult_err:.2e} <= {eps:.2e}, {t.seconds:.1f}s")
    assert clip_err <= 1e-12 and mult_err <= eps
    assert t.seconds < 30


# 3


@pytest.mark.criterion(3, "B-spline network compile")
def test_bspline_compile(record_property):
    details = []
    with Timer() as t:
        for d, m in [(1, 1), (2, 2)]:
            net, cert = bspline_net_certified(d, m, GadgetBudget(1e-3))
            per_axis = 2001 if d == 1 else 141
            X = bs.grid_points(d, per_axis) * (m + 1)
            err = float(np.max(np.abs(net(X) - bspline_reference(d, m, X))))
            W = bs.grid_points(d, per_axis) * (m + 3) - 1
            off = np.any((W < 0) | (W > m + 1), axis=1)
            outside = float(np.max(np.abs(net(W[off]))))
            depths = [bspline_net_certified(d, m, GadgetBudget(e))[1].L for e in (1e-2, 1e-3, 1e-4)]
            r2 = r_squared(np.log([1e2, 1e3, 1e4]), depths)
            details.append(f"(d,m)=({d},{m}) err {err:.1e} outside {outside} depths {depths} R2 {r2:.3f}")
            assert err <= 1e-3
            assert outside == 0.0
            assert r2 >= 0.95
    record_property("detail", ", ".join(details) + f", {t.seconds:.1f}s")
    assert t.seconds < 300


# 4


@pytest.mark.criterion(4, "N-term approximation rate")
def test_approximation_rate(record_property):
    cfg = load("approx_rate.yaml")
    params = BesovParams.from_dict(cfg["params"])
    assert params.d == 2 and params.s.s_tilde == pytest.approx(1 / 3)
    with Timer() as t:
        coeffs = bs.sample_besov_ball(np.random.default_rng(cfg["seed"]), params, cfg["K"])
        target = bs.spline_series(coeffs, normalize=True)
        rows = approx_rate_sweep(coeffs.scaled(target.scale), cfg["N_grid"], r=cfg["r"],
                                 n_points=cfg["n_points"], seed=cfg["seed"])
    N = np.array([r["N"] for r in rows], float)
    err = np.array([r["error_L2"] for r in rows])
    slope = float(np.polyfit(np.log(N), np.log(err), 1)[0])
    ratio = [r["S"] / (r["N"] * math.log(r["N"])) for r in rows]
    record_property("detail", f"slope {slope:.3f} (need <= {-1 / 3 + 0.15:.3f}), "
                              f"S/(N log N) {ratio[0]:.0f}..{ratio[-1]:.0f}, {t.seconds:.0f}s")
    assert list(N) == [4, 8, 16, 32, 64]
    assert slope <= -1 / 3 + 0.15
    # bounded: the ratio never exceeds its starting value by more than a factor 2
    assert max(ratio) <= 2 * ratio[0]
    assert t.seconds < 600


# 5


def _remainder(coeffs, plan):
    keep = set(plan.E_N)
    return coeffs.restricted([i for i, _ in coeffs if i not in keep])


@pytest.mark.criterion(5, "additive and rotated assembly")
def test_assembly(record_property):
    eps = 1e-4
    with Timer() as t:
        rng = np.random.default_rng(5)
        p1 = BesovParams(2, math.inf, (1.0,), 2)
        g = [bs.sample_besov_ball(rng, p1, 4) for _ in range(2)]
        f_add = bs.make_additive([c.scaled(1 / max(1.0, c.sup_bound())) for c in g])
        chain = bs.additive_chain(f_add)
        comps, outer = bs.chain_layers(chain)
        plans = [[plan_index_selection(c.coeffs, 8, 2.0) for c in comps], [full_plan(outer[0].coeffs)]]
        net = composite_assemble(chain, plans=plans, budget=GadgetBudget(eps))
        # layer 2 maps u to scale * sum(2 u_i - 1) exactly, so layer-1 errors scale by 2 * scale
        budget_add = 2 * f_add.scale * sum(_remainder(c.coeffs, pl).sup_bound() +
                                           gadget_error_budget(c.coeffs, pl, eps)["local"]
                                           for c, pl in zip(comps, plans[0]))
        X = bs.grid_points(2, 101)
        err_add = float(np.max(np.abs(net(X) - f_add(X))))

        p2 = BesovParams(2, math.inf, (1.0, 1.0), 2)
        c = bs.sample_besov_ball(rng, p2, 3)
        c = c.scaled(1 / max(1.0, c.sup_bound()))
        plan = plan_index_selection(c, 16, 2.0)
        inner = assemble_approximant(c, plan, GadgetBudget(eps))
        A, b = bs.rotation_map(2, math.pi / 4)
        folded = affine_compose(A, b, inner)
        f_rot = bs.make_rotated(bs.spline_series(c), math.pi / 4)
        budget_rot = _remainder(c, plan).sup_bound() + gadget_error_budget(c, plan, eps)["local"]
        err_rot = float(np.max(np.abs(folded(X) - f_rot(X))))
        P = np.random.default_rng(6).uniform(size=(1000, 2))
        fold_err = float(np.max(np.abs(folded(P) - inner(P @ A.T + b))))
    record_property("detail", f"additive {err_add:.3g} <= {budget_add:.3g}, rotated {err_rot:.3g} <= "
                              f"{budget_rot:.3g}, fold {fold_err:.1e}, {t.seconds:.0f}s")
    assert err_add <= budget_add
    assert err_rot <= budget_rot
    assert fold_err <= 1e-10
    assert t.seconds < 300


# 6


@pytest.mark.criterion(6, "parameter perturbation bound")
def test_perturbation_bound(record_property):
    rng = np.random.default_rng(6)
    violations, worst = 0, 0.0
    with Timer() as t:
        X = rng.uniform(size=(1000, 3))
        for _ in range(100):
            L, D = int(rng.integers(1, 5)), int(rng.integers(1, 7))
            B, eps = float(rng.uniform(0.3, 2.0)), float(10 ** rng.uniform(-5, -1))
            widths = (3,) + (D,) * L + (1,)
            theta = rng.uniform(-B, B, size=param_count(L, D, 3))
            other = np.clip(theta + rng.uniform(-eps, eps, size=theta.shape), -B, B)
            gap = float(np.max(np.abs(Network.from_flat(widths, theta)(X) - Network.from_flat(widths, other)(X))))
            bound = lipschitz_param_bound(L + 1, D, B, eps)
            violations += gap > bound
            worst = max(worst, gap / bound)
    record_property("detail", f"{violations} violations, largest gap/bound {worst:.3f}, {t.seconds:.1f}s")
    assert violations == 0
    assert t.seconds < 60


# 7


@pytest.mark.criterion(7, "prior tail, floor and spike checks")
def test_prior_conditions(record_property):
    sig = SigmaPrior(0.05, 1.0)
    margins = []
    with Timer() as t:
        for n in (10**3, 10**4):
            budget = hyperparams_for_n(n, 1.0, {}, d=2)
            shape, Nn = NetShape(2, budget.L, budget.D), sample_size_budget(n, 1.0)
            for slab in (Slab("uniform", 2.0), Slab("gaussian", 1.0)):
                res = check_conditions(SpikeSlabPrior(slab, sig), shape, n, Nn, B1=budget.B)
                assert [r.name for r in res] == ["tail", "floor"]
                assert all(r.passed for r in res), [r.to_dict() for r in res]
                res = check_conditions(ShrinkagePrior(slab, sig, C_v=1.0, spike="gaussian"), shape, n, Nn, B1=budget.B)
                assert [r.name for r in res] == ["tail", "floor", "spike"]
                assert all(r.passed for r in res), [r.to_dict() for r in res]
                margins.append(f"n={n} {slab.kind} ratio {res[2].constant:.2e}")
    record_property("detail", ", ".join(margins) + f", {t.seconds:.1f}s")
    assert t.seconds < 60


# 8


def _within(chain_vals, direct_vals):
    chain_vals, direct_vals = np.asarray(chain_vals, float), np.asarray(direct_vals, float)
    se = math.hypot(batch_means_se(chain_vals), direct_vals.std(ddof=1) / math.sqrt(len(direct_vals)))
    return abs(chain_vals.mean() - direct_vals.mean()), 3 * se


@pytest.mark.criterion(8, "sampler correctness")
def test_sampler_correctness(record_property):
    sig = SigmaPrior(0.1, 1.0)
    shape = NetShape(2, 1, 3)
    empty = Dataset.empty(2)
    n_direct = 10**5
    lines = []
    with Timer() as t:
        moves = {"swap": 0.4, "walk": 0.3, "sigma": 0.1, "refresh": 0.1, "shape": 0.1}
        spec = SpikeSlabPrior(Slab("uniform", 2.0), sig, 4)
        res = run_spike_slab_sampler(empty, shape, spec, ChainConfig(20000, 2000, moves=moves, seed=1))
        rng = np.random.default_rng(2)
        direct = [sample_prior(rng, spec, shape) for _ in range(n_direct)]
        for name, stat in [("|theta|", lambda s: np.abs(s[0][s[1]]).mean()), ("sigma", lambda s: s[2])]:
            gap, tol = _within([stat((s.theta, s.gamma, s.sigma)) for s in res], [stat(d) for d in direct])
            lines.append(f"spike-slab {name} {gap:.4f}/{tol:.4f}")
            assert gap <= tol

        spec = ShrinkagePrior(Slab("gaussian", 1.0), sig, C_v=0.1)
        res = run_shrinkage_sampler(empty, shape, spec, ChainConfig(20000, 2000, moves=moves, seed=3))
        draws = spec.sample(rng, shape, (n_direct, shape.T))
        gap, tol = _within([np.abs(s.theta).mean() for s in res], np.abs(draws).mean(axis=1))
        lines.append(f"shrinkage |theta| {gap:.4f}/{tol:.4f}")
        assert gap <= tol
        gap, tol = _within([s.sigma for s in res], rng.uniform(0.1, 1.0, n_direct))
        assert gap <= tol

        spec = AdaptivePrior(SpikeSlabPrior(Slab("gaussian", 1.0), sig), 0.5, 0.05, 0.2, 10, 200)
        res = run_adaptive_sampler(empty, spec, ChainConfig(30000, 3000, moves={**moves, "shape": 0.4, "swap": 0.1},
                                                            seed=4), n=100)
        Ds = np.array([s.shape_D for s in res])
        pD = hyperprior_pmf("D", 0.5, 10)
        direct_D = rng.choice(10, size=n_direct, p=pD) + 1
        for D in (1, 2, 3):
            gap, tol = _within((Ds == D).astype(float), (direct_D == D).astype(float))
            lines.append(f"adaptive P(D={D}) {gap:.4f}/{tol:.4f}")
            assert gap <= tol

        # conjugate check: f(x) = w x + b observed at x = 0, Gaussian slab, known noise
        y = 0.8 + 0.5 * np.random.default_rng(7).normal(size=5)
        data = Dataset(np.zeros((5, 1)), y)
        res = run_spike_slab_sampler(data, NetShape(1, 0, 1), SpikeSlabPrior(Slab("gaussian", 1.0), sig, 2),
                                     ChainConfig(40000, 4000, moves={"walk": 1.0}, seed=8, walk_block=1,
                                                 collapse=False), sigma_fixed=0.5)
        b = np.array([s.theta[1] for s in res])
        prec = 5 / 0.25 + 1.0
        mean, var = y.sum() / 0.25 / prec, 1 / prec
        lines.append(f"conjugate mean {abs(b.mean() - mean):.4f}/{3 * batch_means_se(b):.4f}")
        assert abs(b.mean() - mean) <= 3 * batch_means_se(b)
        assert abs(b.var() - var) <= 3 * batch_means_se((b - mean) ** 2)
    record_property("detail", ", ".join(lines) + f", {t.seconds:.0f}s")
    assert t.seconds < 300


# 9 and 10


@pytest.fixture(scope="module")
def fixed_shape_run():
    cfg = hs.ExperimentConfig.from_dict(load("contraction_fixed.yaml"))
    with Timer() as t:
        res = hs.run_contraction_experiment(cfg, threads=THREADS)
    return res, t.seconds


@pytest.mark.slow
@pytest.mark.criterion(9, "contraction, fixed shape")
def test_contraction_fixed_shape(fixed_shape_run, record_property):
    res, seconds = fixed_shape_run
    fit = hs.fit_rate(res.rows)
    inversions = hs.count_inversions(fit["means"])
    means = ", ".join(f"{v:.4f}" for v in fit["means"].values())
    record_property("detail", f"slope {fit['slope']:.3f}, inversions {inversions}, means [{means}], {seconds:.0f}s")
    assert sorted(fit["means"]) == [250, 500, 1000, 2000, 4000] and len(res.rows) == 15
    assert inversions <= 1
    assert fit["slope"] <= -0.20
    assert seconds <= 2 * 3600


@pytest.mark.slow
@pytest.mark.criterion(10, "contraction, adaptive prior")
def test_contraction_adaptive(fixed_shape_run, record_property):
    doc = load("contraction_adaptive.yaml")
    assert "shape" not in doc and "s_tilde" not in doc
    cfg = hs.ExperimentConfig.from_dict(doc)
    with Timer() as t:
        res = hs.run_contraction_experiment(cfg, threads=THREADS)
    fixed = fixed_shape_run[0].slope
    record_property("detail", f"adaptive slope {res.slope:.3f} vs fixed {fixed:.3f}, {t.seconds:.0f}s")
    assert abs(res.slope - fixed) <= 0.1
    assert t.seconds <= 2 * 3600


# 11


@pytest.mark.slow
@pytest.mark.criterion(11, "classification")
def test_classification(record_property):
    with Timer() as t:
        rng = np.random.default_rng(11)
        held = 0
        for _ in range(20):
            D = int(rng.integers(2, 6))
            theta = rng.normal(scale=1.5, size=param_count(1, D, 2))
            f = Network.from_flat((2, D, 1), theta)
            c = bs.sample_besov_ball(rng, BesovParams(2, math.inf, (1.0, 1.0), 2), 2)
            f0 = bs.spline_series(c.scaled(3.0 / max(1.0, c.sup_bound())))
            held += hs.metric_misclass_excess(f, f0, 20000, rng).bound_holds
        cfg = hs.ExperimentConfig.from_dict(load("classification.yaml"))
        res = hs.run_contraction_experiment(cfg, threads=THREADS)
    means = hs.fit_rate(res.rows)["means"]
    record_property("detail", f"bound held {held}/20, prob. error n=500 {means[500]:.4f} -> n=2000 "
                              f"{means[2000]:.4f}, {t.seconds:.0f}s")
    assert held == 20
    assert means[2000] < means[500]
    assert t.seconds < 1800


# 12


def _snapshot(directory):
    return {name: open(os.path.join(directory, name), "rb").read() for name in sorted(os.listdir(directory))}


@pytest.mark.criterion(12, "CLI determinism")
def test_cli_determinism(tmp_path, capsys, record_property):
    rate = tmp_path / "rate.yaml"
    rate.write_text(yaml.safe_dump({**load("approx_rate.yaml"), "K": 5, "N_grid": [4, 8], "n_points": 2000}))
    contract = tmp_path / "contract.yaml"
    contract.write_text(yaml.safe_dump({**load("contract_smoke.yaml"), "n_grid": [60, 120], "replicates": 2}))
    commands = {
        "synth": ["synth", "--config", os.path.join(CONFIGS, "synth.yaml")],
        "bspline-net": ["bspline-net", "--d", "2", "--m", "1", "--eps", "1e-3"],
        "approx-rate": ["approx-rate", "--config", str(rate)],
        "contract": ["contract", "--config", str(contract)],
        "priorcheck": ["priorcheck", "--config", os.path.join(CONFIGS, "priorcheck.yaml")],
    }
    differing = []
    for name, argv in list(commands.items()) + [("report", None)]:
        seen = []
        for run, threads in enumerate((1, 1, 4)):
            out_dir = tmp_path / f"{name}-{run}"
            if name == "report":
                argv = ["report", str(tmp_path / f"contract-{run}" / "results.csv")]
            assert cli_main(argv + ["--seed", "3", "--threads", str(threads), "--out", str(out_dir)]) == 0
            seen.append((capsys.readouterr().out, _snapshot(out_dir)))
        if not seen[0] == seen[1] == seen[2]:
            differing.append(name)
    record_property("detail", f"6 subcommands x (2 runs + 4 threads), differing: {differing or 'none'}")
    assert not differing
