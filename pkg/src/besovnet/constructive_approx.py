"""Compile B-spline expansions into sparse, bounded ReLU networks.

Squaring uses the sawtooth construction: x**2 on [0, 1] is approximated by
``x - sum_s g_s(x) / 4**s`` with ``g_s`` the s-fold tooth map, one hidden
layer per level and error ``2**(-2 levels - 2)``.  Products follow from
``xy = ((x + y)**2 - x**2 - y**2) / 2`` and powers from a balanced tree of
products.  Every builder tracks a certified error bound through the
Lipschitz constants of the operations it chains.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .relu_net import (
    Network,
    ShapeBudget,
    affine_network,
    clip01_gadget,
    compose,
    parallel,
    postcompose_affine,
    precompose_affine,
    rescale_weights,
)
from .spline_core import SplineIndex, bspline_eval

MAX_LEVELS = 40
DEFAULT_CAPS = {"d": 6, "m": 4}


class BudgetInfeasible(ValueError):
    """The error target cannot be met within the configured depth."""


@dataclass(frozen=True)
class GadgetBudget:
    eps_target: float
    levels: int | None = None
    max_levels: int = MAX_LEVELS

    def __post_init__(self):
        if not self.eps_target > 0:
            raise ValueError("eps_target must be positive")
        if self.levels is not None and self.levels < 1:
            raise ValueError("levels must be at least 1")


def square_error(levels):
    return 2.0 ** (-2 * levels - 2)


def _levels_for(eps, scale, max_levels):
    """Fewest sawtooth levels with scale * 2**(-2l-2) <= eps."""
    lv = max(1, math.ceil((math.log2(scale / eps) - 2) / 2))
    while scale * square_error(lv) > eps:
        lv += 1
    if lv > max_levels:
        raise BudgetInfeasible(f"error {eps:g} needs {lv} squaring levels (cap {max_levels})")
    return lv


def _square_net(levels):
    """x -> approx x**2 for x in [0, 1]; inputs outside are clipped first."""
    tri = np.array([[1.0], [1.0], [1.0]])
    knots = np.array([0.0, -0.5, -1.0])
    tooth = np.array([2.0, -4.0, 2.0])
    layers = [(tri, knots)]
    # acc tracks clip(x) - sum_{t<s} g_t / 4**t; it is >= 0 so one ReLU carries it
    acc_from_prev = np.array([1.0, 0.0, -1.0])
    for s in range(1, levels):
        prev = layers[-1][0].shape[0]
        W = np.zeros((4, prev))
        W[0:3, 0:3] = np.outer(np.ones(3), tooth)
        W[3, :prev] = acc_from_prev
        W[3, 0:3] -= tooth / 4**s
        layers.append((W, np.array([0.0, -0.5, -1.0, 0.0])))
        acc_from_prev = np.zeros(4)
        acc_from_prev[3] = 1.0
    last_in = layers[-1][0].shape[0]
    out = np.zeros((1, last_in))
    out[0, :3] = (acc_from_prev[:3] if last_in == 3 else 0.0) - tooth / 4**levels
    if last_in == 4:
        out[0, 3] = 1.0
    layers.append((out, np.zeros(1)))
    return Network(layers)


def square_gadget(budget):
    """Network with sup_{[0,1]} |out - x**2| <= budget.eps_target (exact at 0 and 1)."""
    levels = budget.levels or _levels_for(budget.eps_target, 1.0, budget.max_levels)
    if square_error(levels) > budget.eps_target:
        raise BudgetInfeasible(f"{levels} levels give error {square_error(levels):g} > {budget.eps_target:g}")
    return _square_net(levels)


def _scaled_square(levels, bound):
    """y -> approx y**2 for |y| <= bound via bound**2 * sq(|y| / bound)."""
    sq = _square_net(levels)
    absnet = Network([(np.array([[1.0 / bound], [-1.0 / bound]]), np.zeros(2)),
                      (np.array([[1.0, 1.0]]), np.zeros(1))])
    return postcompose_affine(compose(sq, absnet), [[bound**2]], [0.0])


def _mult_net(levels, bound):
    M = float(bound)
    W1 = np.array([[1, 1], [-1, -1], [1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)
    W1 *= np.array([0.5 / M, 0.5 / M, 1 / M, 1 / M, 1 / M, 1 / M])[:, None]
    fold = np.array([[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]], dtype=float)
    absnet = Network([(W1, np.zeros(6)), (fold, np.zeros(3))])
    sq = _square_net(levels)
    squares = parallel([precompose_affine(sq, np.eye(3)[i:i + 1], [0.0]) for i in range(3)], sparse=False)
    net = compose(squares, absnet)
    return postcompose_affine(net, [[2 * M**2, -M**2 / 2, -M**2 / 2]], [0.0])


def mult_error(levels, bound):
    return 3 * bound**2 * square_error(levels)


def mult_gadget(budget, bound):
    """(x, y) -> approx x*y with error <= eps_target for |x|, |y| <= bound."""
    if not bound > 0:
        raise ValueError("bound must be positive")
    levels = budget.levels or _levels_for(budget.eps_target, 3 * bound**2, budget.max_levels)
    if mult_error(levels, bound) > budget.eps_target:
        raise BudgetInfeasible(f"{levels} levels give error {mult_error(levels, bound):g}")
    return _mult_net(levels, bound)


@dataclass
class _Piece:
    net: Network
    err: float
    bound: float  # bound on the exact value


def _power_piece(k, R, delta, max_levels):
    """Approximate y**k for y in [0, R] (input already non-negative)."""
    if k == 1:
        return _Piece(affine_network([[1.0]], [0.0]), 0.0, R)
    if k % 2 == 0:
        a = _power_piece(k // 2, R, delta, max_levels)
        M = a.bound + a.err
        lv = _levels_for(delta, M**2, max_levels)
        net = compose(_scaled_square(lv, M), a.net)
        err = M**2 * square_error(lv) + (2 * a.bound + a.err) * a.err
        return _Piece(net, err, a.bound**2)
    a = _power_piece((k + 1) // 2, R, delta, max_levels)
    b = _power_piece(k // 2, R, delta, max_levels)
    M = max(a.bound + a.err, b.bound + b.err)
    lv = _levels_for(delta, 3 * M**2, max_levels)
    net = compose(_mult_net(lv, M), parallel([a.net, b.net], sparse=False))
    err = mult_error(lv, M) + a.bound * b.err + b.bound * a.err + a.err * b.err
    return _Piece(net, err, a.bound * b.bound)


def _calibrate(build, eps):
    """Halve the per-gadget target until the composed certificate meets eps."""
    delta = eps
    for _ in range(80):
        piece = build(delta)
        if piece.err <= eps:
            return piece
        delta /= 2
    raise BudgetInfeasible(f"could not certify error {eps:g}")


def _relu_in(piece):
    relu = Network([(np.array([[1.0]]), np.zeros(1)), (np.array([[1.0]]), np.zeros(1))])
    return _Piece(compose(piece.net, relu), piece.err, piece.bound)


def power_gadget(m, budget, R=None):
    """Network for relu(x)**m with error <= eps_target on [0, R] (R = m + 1 by default)."""
    if m < 1:
        raise ValueError("exponent must be at least 1")
    R = float(m + 1 if R is None else R)
    piece = _calibrate(lambda dl: _power_piece(m, R, dl, budget.max_levels), budget.eps_target)
    return _relu_in(piece).net


def power_gadget_certified(m, budget, R=None):
    R = float(m + 1 if R is None else R)
    piece = _calibrate(lambda dl: _power_piece(m, R, dl, budget.max_levels), budget.eps_target)
    return _relu_in(piece).net, piece.err


def _factor_piece(m, delta, max_levels, ramp):
    """1-D factor z -> approx psi_m(z) from truncated powers of clipped shifts."""
    if m == 0:
        w = ramp
        W = np.array([[1 / w], [1 / w], [1 / w], [1 / w]])
        b = np.array([0.0, -1.0, -(1 - w) / w, -1 / w])
        net = Network([(W, b), (np.array([[1.0, -1.0, -1.0, 1.0]]), np.zeros(1))])
        # error is measured against the trapezoid, which equals psi_0 off the ramps
        return _Piece(net, 0.0, 1.0)
    # y_j = relu(z - j) - relu(z - m - 1) = clip(z, 0, m+1) - j clipped below at 0
    W = np.ones((m + 2, 1))
    b = -np.arange(m + 2, dtype=float)
    b[-1] = -(m + 1)
    fold = np.hstack([np.eye(m + 1), -np.ones((m + 1, 1))])
    shifts = Network([(W, b), (fold, np.zeros(m + 1))])
    coef = np.array([(-1) ** j * math.comb(m + 1, j) / math.factorial(m) for j in range(m + 1)])
    if m == 1:
        return _Piece(postcompose_affine(shifts, coef[None, :], [0.0]), 0.0, 1.0)
    p = _power_piece(m, float(m + 1), delta, max_levels)
    pows = parallel([precompose_affine(p.net, np.eye(m + 1)[j:j + 1], [0.0]) for j in range(m + 1)], sparse=False)
    net = postcompose_affine(compose(pows, shifts), coef[None, :], [0.0])
    return _Piece(net, float(np.sum(np.abs(coef))) * p.err, 1.0)


def _product_piece(pieces, delta, max_levels):
    """Product of d factor outputs (d inputs) via a balanced tree of mult gadgets."""
    d = len(pieces)

    def build(lo, hi):
        if hi - lo == 1:
            sel = np.zeros((1, d))
            sel[0, lo] = 1.0
            f = pieces[lo]
            return _Piece(affine_network(sel, [0.0]), f.err, f.bound)
        mid = (lo + hi + 1) // 2
        a, b = build(lo, mid), build(mid, hi)
        M = max(a.bound + a.err, b.bound + b.err)
        lv = _levels_for(delta, 3 * M**2, max_levels)
        net = compose(_mult_net(lv, M), parallel([a.net, b.net], sparse=False))
        err = mult_error(lv, M) + a.bound * b.err + b.bound * a.err + a.err * b.err
        return _Piece(net, err, a.bound * b.bound)

    return build(0, d)


def _gate_net(d, m, slope):
    """z -> slope * min_i min(z_i, m+1-z_i); negative exactly off [0, m+1]^d."""
    eye = np.eye(d)
    W = np.vstack([eye, -eye, 2 * eye])
    b = np.concatenate([np.zeros(2 * d), -(m + 1) * np.ones(d)])
    fold = slope * np.hstack([eye, -eye, -eye])
    net = Network([(W, b), (fold, np.zeros(d))])
    while net.out_dim > 1:
        k = net.out_dim
        pairs = k // 2
        rows, cols = [], []
        # min(a, b) = a - relu(a - b); a is carried as relu(a) - relu(-a)
        W = np.zeros((3 * pairs + 2 * (k % 2), k))
        out = np.zeros((pairs + k % 2, W.shape[0]))
        for p in range(pairs):
            a, bb = 2 * p, 2 * p + 1
            W[3 * p, a], W[3 * p + 1, a] = 1.0, -1.0
            W[3 * p + 2, a], W[3 * p + 2, bb] = 1.0, -1.0
            out[p, 3 * p:3 * p + 3] = [1.0, -1.0, -1.0]
        if k % 2:
            r = 3 * pairs
            W[r, k - 1], W[r + 1, k - 1] = 1.0, -1.0
            out[pairs, r:r + 2] = [1.0, -1.0]
        net = compose(Network([(W, np.zeros(W.shape[0])), (out, np.zeros(out.shape[0]))]), net)
    return net


_FINAL_GATE = Network([
    (np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, -1.0]]), np.zeros(3)),
    (np.array([[1.0, -1.0, -1.0]]), np.zeros(1)),
    (np.array([[1.0]]), np.zeros(1)),
])


@dataclass(frozen=True)
class BsplineNetCertificate:
    d: int
    m: int
    eps_target: float
    certified_error: float
    L: int
    D: int
    S: int
    B: float
    formula: dict = field(default_factory=dict)


def lemma_dims(d, m, L0=None):
    """Reference orders D0 = 6dm(m+2) + 2d, B0 = 2(m+1)m, S0 = L0 D0**2."""
    D0 = 6 * d * m * (m + 2) + 2 * d
    B0 = 2 * (m + 1) * m
    out = {"D0": D0, "B0": B0}
    if L0 is not None:
        out["L0"] = L0
        out["S0"] = L0 * D0**2
    return out


def _bspline_piece(d, m, delta, max_levels, ramp):
    f = _factor_piece(m, delta, max_levels, ramp)
    factors = [_Piece(precompose_affine(f.net, np.eye(d)[i:i + 1], [0.0]), f.err, f.bound) for i in range(d)]
    prod = _product_piece(factors, delta, max_levels)
    body = compose(prod.net, parallel([p.net for p in factors], sparse=False))
    return _Piece(body, prod.err, prod.bound)


def bspline_net_certified(d, m, budget, caps=None):
    caps = caps or DEFAULT_CAPS
    if d < 1 or m < 0:
        raise ValueError("need d >= 1 and m >= 0")
    if d > caps["d"] or m > caps["m"]:
        raise BudgetInfeasible(f"(d, m) = ({d}, {m}) exceeds the caps {caps}")
    eps = budget.eps_target
    ramp = min(0.5, eps)
    piece = _calibrate(lambda dl: _bspline_piece(d, m, dl, budget.max_levels, ramp), eps)
    gate = _gate_net(d, m, 1.0 / ramp if m == 0 else 1.0)
    both = parallel([piece.net, gate], sparse=False)
    net = compose(_FINAL_GATE, both)
    cert = BsplineNetCertificate(d, m, eps, piece.err, net.depth, net.width, net.sparsity, net.sup_norm,
                                 lemma_dims(d, m, net.depth))
    return net, cert


def bspline_net(d, m, budget, caps=None):
    """Network approximating M(x) = prod_i psi_m(x_i) within eps_target.

    The output is exactly zero off [0, m+1]^d: the approximate product is
    passed through relu(min(p, G)) where G = min_i min(x_i, m+1-x_i) is a
    ReLU-exact tent that dominates M and is negative outside the support.
    For m = 0 the factor is a trapezoid of ramp width eps (exact on the
    interior), since the indicator itself is discontinuous.
    """
    return bspline_net_certified(d, m, budget, caps)[0]


def bspline_reference(d, m, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.ones(len(x))
    for i in range(d):
        out *= bspline_eval(m, x[:, i])
    return out


# index selection


@dataclass(frozen=True)
class ApproxPlan:
    N: int
    K: int
    K_star: int
    E_N: tuple
    delta: float
    nu: float
    omega: float

    @property
    def size(self):
        return len(self.E_N)


class RegimeViolation(ValueError):
    pass


def plan_index_selection(coeffs, N, r):
    """Choose the basis functions kept by an N-term approximant in L^r.

    All stored coefficients up to level K (largest with N(K) <= N) are kept;
    levels K < k <= K* keep the largest-magnitude coefficients, at most
    ceil(N(K)**(1+delta) N(k)**(-delta)) of them, with delta = nu.
    Coefficients not stored are zero and need no block.
    """
    params = coeffs.params
    if not params.regime_ok(r):
        raise RegimeViolation(f"(1/p - 1/r)_+ = {params.omega(r)} is not below s_tilde = {params.s.s_tilde}")
    if N < 1:
        raise ValueError("budget N must be at least 1")
    K = 0
    while params.budget(K + 1) <= N:
        K += 1
    omega = params.omega(r)
    nu = params.nu(r)
    if omega == 0:
        K_star, delta = K, math.inf
    else:
        K_star, delta = math.ceil(K * (1 + 1 / nu)), nu
    by_level = {}
    for idx, a in coeffs:
        by_level.setdefault(idx.k, []).append((idx, a))
    chosen = []
    NK = params.budget(K)
    for k in sorted(by_level):
        items = by_level[k]
        if k <= K:
            chosen.extend(idx for idx, _ in items)
        elif k <= K_star:
            cap = math.ceil(NK ** (1 + delta) * params.budget(k) ** (-delta))
            cap = min(params.index_set_size(k), cap)
            top = sorted(items, key=lambda t: (-abs(t[1]), t[0].j))[:cap]
            chosen.extend(idx for idx, _ in top)
    chosen.sort(key=lambda i: (i.k, i.j))
    return ApproxPlan(int(N), K, K_star, tuple(chosen), delta, nu, omega)


def full_plan(coeffs):
    keys = tuple(sorted((idx for idx, _ in coeffs), key=lambda i: (i.k, i.j)))
    return ApproxPlan(len(keys), coeffs.K, coeffs.K, keys, math.inf, math.inf, 0.0)


# assembly


def _blocks_network(body, scales, shifts, weights):
    """Parallel copies of ``body`` on inputs diag(scale) x - shift, summed with ``weights``.

    Built layer by layer with Kronecker products: hidden blocks share the
    body's weights exactly, only the first and last layers differ per block.
    """
    nb = len(weights)
    W1, b1 = body.layers[0]
    W1 = np.asarray(W1.toarray() if sp.issparse(W1) else W1)
    first_W = sp.vstack([sp.csr_matrix(W1 * s[None, :]) for s in scales], format="csr")
    first_b = np.concatenate([b1 - W1 @ j for j in shifts])
    layers = [(first_W, first_b)]
    if body.depth == 0:
        raise ValueError("body must have a hidden layer")
    for W, b in body.layers[1:-1]:
        layers.append((sp.kron(sp.identity(nb, format="csr"), sp.csr_matrix(W), format="csr"), np.tile(b, nb)))
    WL, bL = body.layers[-1]
    WL = sp.csr_matrix(WL)
    w = np.asarray(weights, dtype=float)
    layers.append((sp.kron(sp.csr_matrix(w[None, :]), WL, format="csr"), np.array([float(w @ np.full(nb, bL[0]))])))
    return Network(layers)


def zero_network(d, clip_output=True):
    return Network([(np.zeros((1, d)), np.zeros(1))], clip_output)


def assemble_approximant(coeffs, plan, budget, target_B=None, clip_output=True, body=None):
    """Sum of alpha_{k,j} times a shared B-spline block on 2**a_k x - j.

    ``budget`` is the per-block gadget error; the network is weight-rescaled to
    the smallest achievable sup-norm (or to ``target_B``) and its output is
    clipped to [-1, 1] unless ``clip_output`` is false.
    """
    params = coeffs.params
    d = params.d
    entries = coeffs.entries
    keys = [idx for idx in plan.E_N if entries.get(idx, 0.0) != 0.0]
    if not keys:
        return zero_network(d, clip_output)
    if body is None:
        body = bspline_net(d, params.m, budget)
    scales = [2.0 ** np.asarray(params.level_exponents(idx.k), dtype=float) for idx in keys]
    shifts = [np.asarray(idx.j, dtype=float) for idx in keys]
    net = _blocks_network(body, scales, shifts, [entries[idx] for idx in keys])
    net = rescale_weights(net)
    if target_B is not None:
        net = rescale_weights(net, target_B)
    return net.with_clip(clip_output)


def gadget_error_budget(coeffs, plan, eps_block):
    """Triangle-inequality bounds on the gadget part of the error.

    ``total`` sums |alpha| over the plan; ``local`` uses that at most
    (m+1)**d blocks per level are non-zero at any point.
    """
    entries = coeffs.entries
    alphas = [abs(entries.get(i, 0.0)) for i in plan.E_N]
    per_level = {}
    for i in plan.E_N:
        per_level[i.k] = max(per_level.get(i.k, 0.0), abs(entries.get(i, 0.0)))
    m, d = coeffs.params.m, coeffs.params.d
    local = (m + 1) ** d * sum(per_level.values()) * eps_block
    return {"total": float(sum(alphas)) * eps_block, "local": min(local, float(sum(alphas)) * eps_block)}


def _selector(n_in, idx):
    A = np.zeros((len(idx), n_in))
    for r, i in enumerate(idx):
        A[r, i] = 1.0
    return A


def composite_assemble(chain, plans=None, budget=None, target_B=None):
    """Stack per-layer approximants of a composite chain.

    Each component reads only its own input coordinates; outputs of every
    layer but the last pass through the exact [0, 1] clip.
    """
    from .besov_synth import chain_layers

    layers = chain_layers(chain)
    budget = budget or GadgetBudget(1e-3)
    net = None
    for h, comps in enumerate(layers):
        blocks = []
        for c, comp in enumerate(comps):
            plan = plans[h][c] if plans is not None else full_plan(comp.coeffs)
            sub = assemble_approximant(comp.coeffs, plan, budget, clip_output=False)
            d_in = chain.payload["d_circ"][h]
            blocks.append(precompose_affine(sub, _selector(d_in, comp.indices), np.zeros(len(comp.indices))))
        stage = parallel(blocks, sparse=True)
        if h < len(layers) - 1:
            stage = compose(clip01_gadget(stage.out_dim), stage)
        if net is not None:
            if net.out_dim != stage.in_dim:
                raise ValueError(f"layer {h} expects {stage.in_dim} inputs, previous layer gives {net.out_dim}")
            stage = compose(stage, net)
        net = stage
    net = rescale_weights(net)
    if target_B is not None:
        net = rescale_weights(net, target_B)
    return net.with_clip(True)


class CodomainViolation(ValueError):
    pass


def affine_compose(A, b, inner_net, tol=1e-12):
    """inner_net(A x + b) with the map folded into the first layer.

    Every corner of [0,1]^{d0} must land in [0,1]^{d1}; since the image of the
    cube is the hull of its corners this certifies the whole domain.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    d0 = A.shape[1]
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=d0)))
    img = corners @ A.T + b
    if np.any(img < -tol) or np.any(img > 1 + tol):
        raise CodomainViolation("the affine map sends part of the unit cube outside [0,1]^d")
    return precompose_affine(inner_net, A, b)


def affine_norm_report(A, b, inner_net, folded):
    C_A = max(float(np.max(np.abs(A))), float(np.max(np.abs(b))) if np.size(b) else 0.0)
    d1 = np.atleast_2d(A).shape[0]
    return {"C_A": C_A, "B_1": inner_net.sup_norm, "B_3": C_A * (d1 + 1) * inner_net.sup_norm,
            "realized": folded.sup_norm}


# schedules and error estimates


def _ceil(x):
    return math.ceil(round(x, 9))


def hyperparams_for_n(n, s_tilde, constants=None, d=None):
    """Network shape from the sample size: N_n = ceil(n**(1/(2 s_tilde + 1))),
    L = ceil(C_L log n), D = ceil(C_D N_n), S = ceil(C_S N_n log n), B = C_B.

    L and S are kept at least 1; with ``d`` given, S is capped by the
    parameter count of the shape.
    """
    c = {"C_L": 1.0, "C_D": 1.0, "C_S": 1.0, "C_B": 1.0}
    c.update(constants or {})
    if n < 1 or not s_tilde > 0:
        raise ValueError("need n >= 1 and s_tilde > 0")
    Nn = _ceil(n ** (1.0 / (2 * s_tilde + 1))) if math.isfinite(s_tilde) else 1
    logn = math.log(n)
    L = max(1, _ceil(c["C_L"] * logn))
    D = max(1, _ceil(c["C_D"] * Nn))
    S = max(1, _ceil(c["C_S"] * Nn * logn))
    if d is not None:
        from .relu_net import param_count

        S = min(S, param_count(L, D, d))
    return ShapeBudget(L, D, S, float(c["C_B"]))


def sample_size_budget(n, s_tilde):
    return _ceil(n ** (1.0 / (2 * s_tilde + 1)))


def _evaluate(f, X):
    return np.asarray(f.evaluate(X) if hasattr(f, "evaluate") else f(X), dtype=float)


def approx_error(target, net, r, n_points, rng):
    """L^r error on [0,1]^d: Monte Carlo with standard error for finite r,
    regular-grid maximum (standard error 0) for r = inf."""
    d = net.in_dim
    if math.isinf(r):
        per_axis = max(2, int(round(n_points ** (1.0 / d))))
        axis = np.linspace(0.0, 1.0, per_axis)
        X = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
        return float(np.max(np.abs(_evaluate(target, X) - net(X)))), 0.0
    X = rng.uniform(size=(n_points, d))
    g = np.abs(_evaluate(target, X) - net(X)) ** r
    mean = float(np.mean(g))
    se_mean = float(np.std(g, ddof=1) / math.sqrt(n_points)) if n_points > 1 else 0.0
    value = mean ** (1.0 / r)
    se = (value / (r * mean)) * se_mean if mean > 0 else 0.0
    return value, se


RATE_COLUMNS = ("N", "K", "E_N", "L", "D", "S", "B", "error_L2", "error_sup", "seconds")


def block_budget(coeffs, plan):
    """Per-block gadget error for an N-term approximant: the local triangle
    bound is kept below N**(-s_tilde) / max(log N, 1)."""
    params = coeffs.params
    amax = max((abs(coeffs.entries.get(i, 0.0)) for i in plan.E_N), default=0.0)
    if amax == 0:
        return 1.0
    N = plan.N
    local = (params.m + 1) ** params.d * (plan.K_star + 1) * amax
    return N ** (-params.s.s_tilde) / (max(math.log(N), 1.0) * local)


def approx_rate_sweep(coeffs, N_grid, r=2.0, n_points=20000, seed=0, timing=False, grid_per_axis=101):
    """Build the N-term approximant for each N and measure its error.

    ``coeffs`` are taken as the target itself (already scaled into [-1, 1]).
    Each N gets fresh inputs from ``SeedSequence(seed, spawn_key=(N,))``.
    Rows carry the keys of RATE_COLUMNS; ``seconds`` is 0 unless ``timing``.
    """
    from .spline_core import expansion_eval

    def target(X):
        return expansion_eval(coeffs, X)

    d = coeffs.params.d
    axis = np.linspace(0.0, 1.0, grid_per_axis)
    grid = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
    f_grid = target(grid)
    rows = []
    for N in N_grid:
        t0 = time.perf_counter()
        plan = plan_index_selection(coeffs, N, r)
        net = assemble_approximant(coeffs, plan, GadgetBudget(block_budget(coeffs, plan)))
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(N),)))
        err, _ = approx_error(target, net, r, n_points, rng)
        sup = float(np.max(np.abs(f_grid - net(grid))))
        rows.append({"N": int(N), "K": plan.K, "E_N": plan.size, "L": net.depth, "D": net.width,
                     "S": net.sparsity, "B": net.sup_norm, "error_L2": err, "error_sup": sup,
                     "seconds": time.perf_counter() - t0 if timing else 0.0})
    return rows
