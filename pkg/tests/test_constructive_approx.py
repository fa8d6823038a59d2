import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from besovnet import besov_synth as bs
from besovnet.constructive_approx import (
    ApproxPlan,
    BudgetInfeasible,
    CodomainViolation,
    GadgetBudget,
    RegimeViolation,
    affine_compose,
    affine_norm_report,
    approx_error,
    approx_rate_sweep,
    assemble_approximant,
    bspline_net,
    bspline_net_certified,
    bspline_reference,
    composite_assemble,
    full_plan,
    gadget_error_budget,
    hyperparams_for_n,
    lemma_dims,
    mult_gadget,
    plan_index_selection,
    power_gadget,
    power_gadget_certified,
    sample_size_budget,
    square_error,
    square_gadget,
)
from besovnet.spline_core import (
    BesovParams,
    SplineCoefficients,
    SplineIndex,
    enumerate_index_set,
    expansion_eval,
)


class TestSquare:
    def test_endpoints(self):
        net = square_gadget(GadgetBudget(1e-3))
        assert net(np.array([0.0])) == 0.0
        assert net(np.array([1.0])) == 1.0

    def test_eight_levels(self):
        net = square_gadget(GadgetBudget(1.0, levels=8))
        x = np.linspace(0, 1, 100001)[:, None]
        err = np.max(np.abs(net(x) - x[:, 0] ** 2))
        assert err <= 2.0**-16
        # the sawtooth interpolant misses x**2 by exactly 2**(-2 levels - 2) at mid-cells
        assert err == pytest.approx(square_error(8), rel=1e-6)

    @given(st.floats(1e-8, 0.5))
    @settings(max_examples=20, deadline=None)
    def test_meets_budget(self, eps):
        net = square_gadget(GadgetBudget(eps))
        x = np.linspace(0, 1, 4097)[:, None]
        assert np.max(np.abs(net(x) - x[:, 0] ** 2)) <= eps

    def test_infeasible(self):
        with pytest.raises(BudgetInfeasible):
            square_gadget(GadgetBudget(1e-30, max_levels=10))


class TestMult:
    def test_zero_factor_and_endpoint(self):
        eps = 2.0**-12
        net = mult_gadget(GadgetBudget(eps), 1.0)
        x = np.column_stack([np.linspace(-1, 1, 101), np.zeros(101)])
        assert np.max(np.abs(net(x))) <= eps
        assert abs(net(np.array([1.0, 1.0])) - 1.0) <= eps

    def test_random_pairs(self):
        eps = 2.0**-12
        net = mult_gadget(GadgetBudget(eps), 2.0)
        xy = np.random.default_rng(0).uniform(-2, 2, size=(10_000, 2))
        assert np.max(np.abs(net(xy) - xy[:, 0] * xy[:, 1])) <= eps

    def test_bad_bound(self):
        with pytest.raises(ValueError):
            mult_gadget(GadgetBudget(0.1), 0.0)


class TestPower:
    def test_linear_is_relu(self):
        net = power_gadget(1, GadgetBudget(1e-3))
        x = np.linspace(-2, 2, 101)[:, None]
        assert np.array_equal(net(x), np.maximum(x[:, 0], 0))

    def test_square_at_one(self):
        eps = 1e-3
        assert abs(power_gadget(2, GadgetBudget(eps))(np.array([1.0])) - 1.0) <= eps

    @pytest.mark.parametrize("m", [2, 3, 4])
    def test_grid(self, m):
        eps = 1e-3
        net, cert = power_gadget_certified(m, GadgetBudget(eps))
        x = np.linspace(-1, m + 1, 20001)[:, None]
        err = np.max(np.abs(net(x) - np.maximum(x[:, 0], 0) ** m))
        assert err <= cert <= eps

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            power_gadget(0, GadgetBudget(0.1))


def grid(d, lo, hi, per_axis):
    return bs.grid_points(d, per_axis) * (hi - lo) + lo


class TestBsplineNet:
    def test_formulas(self):
        assert lemma_dims(2, 2)["D0"] == 100
        assert lemma_dims(2, 2)["B0"] == 12
        assert lemma_dims(1, 1, 5)["S0"] == 5 * 20**2

    def test_indicator_interior_exact(self):
        net = bspline_net(1, 0, GadgetBudget(1e-2))
        x = np.linspace(0.02, 0.98, 97)[:, None]
        assert np.array_equal(net(x), np.ones(97))

    @pytest.mark.parametrize("d,m,eps", [(1, 1, 1e-3), (1, 2, 1e-3), (1, 3, 1e-2), (2, 1, 1e-3), (2, 2, 1e-3)])
    def test_error_and_support(self, d, m, eps):
        net, cert = bspline_net_certified(d, m, GadgetBudget(eps))
        X = grid(d, 0, m + 1, 141 if d == 1 else 61)
        err = np.max(np.abs(net(X) - bspline_reference(d, m, X)))
        assert err <= cert.certified_error + 1e-12
        assert err <= eps
        W = grid(d, -1, m + 2, 121 if d == 1 else 41)
        off = np.any((W < 0) | (W > m + 1), axis=1)
        assert np.all(net(W[off]) == 0.0)
        assert cert.L == net.depth and cert.S == net.sparsity

    def test_hat_is_exact(self):
        net = bspline_net(1, 1, GadgetBudget(1e-6))
        x = np.linspace(-1, 3, 4001)[:, None]
        assert np.max(np.abs(net(x) - bspline_reference(1, 1, x))) < 1e-14

    def test_caps(self):
        with pytest.raises(BudgetInfeasible):
            bspline_net(7, 1, GadgetBudget(0.1))


def series_1d(m, K, seed):
    p = BesovParams(2, 2, (1.0,), m)
    rng = np.random.default_rng(seed)
    return SplineCoefficients(p, {i: rng.normal() for k in range(K + 1) for i in enumerate_index_set(p, k)})


class TestPlan:
    def test_budget_level(self):
        c = series_1d(1, 4, 0)
        assert plan_index_selection(c, 4, 2).K == 2

    def test_full_when_N_large(self):
        c = series_1d(1, 3, 0)
        plan = plan_index_selection(c, 10**6, 2)
        assert set(plan.E_N) == set(c.entries)

    def test_tail_sizes(self):
        p = BesovParams(1.0, 2.0, (2.0, 2.0), 2)
        c = bs.sample_besov_ball(np.random.default_rng(1), p, 6)
        plan = plan_index_selection(c, 16, 2)
        nu = (p.s.s_tilde - 0.5) / (2 * 0.5)
        assert plan.nu == pytest.approx(nu) and plan.delta == plan.nu
        assert plan.K_star == math.ceil(plan.K * (1 + 1 / nu))
        counts = {}
        for i in plan.E_N:
            counts[i.k] = counts.get(i.k, 0) + 1
        NK = p.budget(plan.K)
        for k, n in counts.items():
            if k <= plan.K:
                assert n == p.index_set_size(k)
            else:
                assert n == min(p.index_set_size(k), math.ceil(NK ** (1 + nu) * p.budget(k) ** (-nu)))
        assert max(counts) <= plan.K_star

    def test_top_magnitude(self):
        p = BesovParams(1.0, 2.0, (2.0, 2.0), 1)
        c = bs.sample_besov_ball(np.random.default_rng(2), p, 5)
        plan = plan_index_selection(c, 4, 2)
        kept = set(plan.E_N)
        for k in range(plan.K + 1, plan.K_star + 1):
            lvl = [(abs(a), i) for i, a in c if i.k == k]
            if not lvl:
                continue
            smallest_kept = min((a for a, i in lvl if i in kept), default=math.inf)
            largest_dropped = max((a for a, i in lvl if i not in kept), default=0.0)
            assert smallest_kept >= largest_dropped

    def test_no_tail_when_p_below_r(self):
        c = series_1d(1, 4, 0)
        plan = plan_index_selection(c, 4, 2)
        assert plan.K_star == plan.K and plan.omega == 0

    def test_regime_violation(self):
        p = BesovParams(0.5, 2.0, (1.0, 1.0), 2)
        c = SplineCoefficients(p, {SplineIndex(0, (0, 0)): 1.0})
        with pytest.raises(RegimeViolation):
            plan_index_selection(c, 4, math.inf)


class TestAssemble:
    def test_empty_plan(self):
        c = series_1d(1, 1, 0)
        net = assemble_approximant(c, ApproxPlan(1, 0, 0, (), 0, 0, 0), GadgetBudget(1e-3))
        assert np.all(net(np.random.default_rng(0).uniform(size=(10, 1))) == 0)

    def test_single_index(self):
        p = BesovParams(2, 2, (0.5, 1.0), 2)
        idx = SplineIndex(2, (1, 0))
        c = SplineCoefficients(p, {idx: 0.7})
        body = bspline_net(2, 2, GadgetBudget(1e-3))
        net = assemble_approximant(c, ApproxPlan(1, 2, 2, (idx,), 0, 0, 0), GadgetBudget(1e-3), body=body)
        X = np.random.default_rng(0).uniform(size=(100, 2))
        ref = 0.7 * body(X * [4.0, 2.0] - [1.0, 0.0])
        assert np.max(np.abs(net(X) - ref)) < 1e-12

    def test_piecewise_linear_exact(self):
        c = series_1d(1, 3, 4).scaled(0.1)
        net = assemble_approximant(c, full_plan(c), GadgetBudget(1e-6))
        x = np.linspace(0, 1, 1001)[:, None]
        assert np.max(np.abs(net(x) - expansion_eval(c, x))) < 1e-12

    def test_budget_composes(self):
        p = BesovParams(2, math.inf, (0.5, 1.0), 2)
        c = bs.sample_besov_ball(np.random.default_rng(3), p, 2)
        c = c.scaled(1 / max(1, c.sup_bound()))
        plan, eps = full_plan(c), 1e-3
        net = assemble_approximant(c, plan, GadgetBudget(eps))
        X = bs.grid_points(2, 81)
        err = np.max(np.abs(net(X) - expansion_eval(c, X)))
        budget = gadget_error_budget(c, plan, eps)
        assert err <= budget["local"] <= budget["total"]
        assert net.sparsity <= net.n_params and net.sup_norm <= 20

    def test_target_B(self):
        c = series_1d(2, 1, 0).scaled(0.2)
        net = assemble_approximant(c, full_plan(c), GadgetBudget(1e-2), target_B=50.0)
        assert net.sup_norm <= 50.0


def small_additive(seed=0, K=2):
    rng = np.random.default_rng(seed)
    p1 = BesovParams(2, math.inf, (1.0,), 2)
    g = [bs.sample_besov_ball(rng, p1, K) for _ in range(2)]
    return bs.make_additive([c.scaled(1 / max(1, c.sup_bound())) for c in g])


class TestComposite:
    def test_single_layer_matches_assemble(self):
        p = BesovParams(2, math.inf, (1.0, 1.0), 1)
        c = bs.sample_besov_ball(np.random.default_rng(0), p, 1)
        chain = bs.composite_chain([[((0, 1), c)]], 2)
        a = composite_assemble(chain, budget=GadgetBudget(1e-3))
        b = assemble_approximant(c, full_plan(c), GadgetBudget(1e-3))
        X = np.random.default_rng(1).uniform(size=(100, 2))
        assert np.max(np.abs(a(X) - b(X))) < 1e-10

    def test_additive(self):
        f = small_additive()
        eps = 1e-3
        net = composite_assemble(bs.additive_chain(f), budget=GadgetBudget(eps))
        X = np.random.default_rng(2).uniform(size=(100, 2))
        # two first-layer blocks and an exact hat outer layer
        comps = f.payload["components"]
        budget = sum(gadget_error_budget(c, full_plan(c), eps)["local"] for c in comps) * f.scale
        assert np.max(np.abs(net(X) - f(X))) <= budget

    def test_identity_outer_layer(self):
        p1 = BesovParams(2, math.inf, (1.0,), 1)
        g = bs.sample_besov_ball(np.random.default_rng(3), p1, 1)
        g = g.scaled(0.5 / g.sup_bound())
        ident = bs._affine_level0(np.array([1.0]), 0.0, (2.0,))
        chain = bs.composite_chain([[((0,), g)], [((0,), ident)]], 1)
        net = composite_assemble(chain, budget=GadgetBudget(1e-3))
        x = np.linspace(0, 1, 201)[:, None]
        ref = np.clip(expansion_eval(g, x), 0, 1)
        assert np.max(np.abs(net(x) - ref)) < 1e-12


class TestAffine:
    def test_identity(self):
        net = bspline_net(2, 1, GadgetBudget(1e-3))
        X = np.random.default_rng(0).uniform(size=(100, 2))
        assert np.array_equal(affine_compose(np.eye(2), np.zeros(2), net)(X), net(X))

    def test_rotation_fold(self):
        p = BesovParams(2, math.inf, (1.0, 1.0), 2)
        c = bs.sample_besov_ball(np.random.default_rng(1), p, 1)
        inner = assemble_approximant(c, full_plan(c), GadgetBudget(1e-3))
        A, b = bs.rotation_map(2, math.pi / 4)
        folded = affine_compose(A, b, inner)
        X = np.random.default_rng(2).uniform(size=(100, 2))
        assert np.max(np.abs(folded(X) - inner(X @ A.T + b))) <= 1e-10
        rep = affine_norm_report(A, b, inner, folded)
        assert rep["B_3"] == pytest.approx(rep["C_A"] * 3 * rep["B_1"])

    def test_shift_changes_bias_only(self):
        net = bspline_net(2, 1, GadgetBudget(1e-3))
        out = affine_compose(np.eye(2) * 0.5, np.array([0.25, 0.5]), net)
        assert np.allclose(out.layers[0][0], np.asarray(net.layers[0][0]) * 0.5)
        out = affine_compose(np.eye(2), np.zeros(2) + 0.0, net)
        assert all(np.array_equal(a[1], b[1]) for a, b in zip(out.layers, net.layers))

    def test_codomain(self):
        net = bspline_net(2, 1, GadgetBudget(1e-3))
        with pytest.raises(CodomainViolation):
            affine_compose(np.eye(2), np.array([0.5, 0.0]), net)


class TestSchedules:
    def test_sample_size_budget(self):
        assert sample_size_budget(1000, 1.0) == 10
        assert sample_size_budget(1, 0.7) == 1

    @given(st.integers(2, 10**6), st.floats(0.1, 5), st.floats(0.1, 5))
    def test_monotone_in_s(self, n, s, t):
        a, b = sorted((s, t))
        assert sample_size_budget(n, b) <= sample_size_budget(n, a)

    def test_shape(self):
        b = hyperparams_for_n(1000, 1.0, {"C_L": 1.0, "C_D": 2.0, "C_S": 1.0, "C_B": 3.0})
        assert (b.L, b.D, b.S, b.B) == (math.ceil(math.log(1000)), 20, math.ceil(10 * math.log(1000)), 3.0)
        assert hyperparams_for_n(1000, 1.0, d=2).S <= b.n_params(2) + 10**6


class TestApproxError:
    def test_exact_copy(self):
        c = series_1d(1, 2, 0).scaled(0.1)
        net = assemble_approximant(c, full_plan(c), GadgetBudget(1e-6))
        v, se = approx_error(bs.spline_series(c), net, 2, 5000, np.random.default_rng(0))
        assert v < 1e-12

    def test_constant_offset(self):
        f = bs.spline_series(SplineCoefficients(BesovParams(2, 2, (1.0,), 1)))
        from besovnet.relu_net import affine_network

        net = affine_network([[0.0]], [0.3])
        for r in (1, 2, math.inf):
            assert approx_error(f, net, r, 2000, np.random.default_rng(0))[0] == pytest.approx(0.3)

    def test_against_quadrature(self):
        from scipy import integrate

        c = series_1d(2, 2, 5).scaled(0.2)
        net = assemble_approximant(c, full_plan(c), GadgetBudget(1e-2))
        f = bs.spline_series(c)
        v, se = approx_error(f, net, 2, 200_000, np.random.default_rng(1))
        x = np.linspace(0, 1, 200_001)
        ref = math.sqrt(integrate.trapezoid((f(x) - net(x[:, None])) ** 2, x))
        assert abs(v - ref) <= 2 * se + 1e-9


class TestRateSweep:
    def test_small_sweep(self):
        p = BesovParams(2, math.inf, (0.5, 1.0), 2)
        c = bs.sample_besov_ball(np.random.default_rng(0), p, 3)
        c = c.scaled(1 / max(1, c.sup_bound()))
        rows = approx_rate_sweep(c, [2, 4], n_points=2000)
        assert [r["N"] for r in rows] == [2, 4]
        assert rows[1]["error_L2"] < rows[0]["error_L2"]
        assert all(r["seconds"] == 0.0 for r in rows)
        assert rows == approx_rate_sweep(c, [2, 4], n_points=2000)
