"""Ground-truth targets: random Besov-ball members and structured examples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .serial import DocumentError, decode_real, encode_real, require
from .spline_core import (
    BesovParams,
    SmoothnessVector,
    SplineCoefficients,
    SplineIndex,
    _as_points,
    enumerate_index_set,
    expansion_eval,
    sequence_norm,
)

KINDS = ("spline_series", "additive", "multiplicative", "rotated", "piecewise",
         "figure1_f1", "figure1_f2", "composite_chain")


@dataclass(frozen=True)
class ChainComponent:
    indices: tuple
    coeffs: SplineCoefficients


class TargetFunction:
    """A deterministic function on [0,1]^d described by a kind and a payload.

    ``scale`` multiplies the raw expression so that ``|f| <= bound``.
    """

    def __init__(self, kind, d, payload, bound, scale=1.0):
        if kind not in KINDS:
            raise ValueError(f"unknown target kind {kind!r}")
        self.kind = kind
        self.d = int(d)
        self.payload = payload
        self.bound = float(bound)
        self.scale = float(scale)

    def __call__(self, x):
        return self.evaluate(x)

    def evaluate(self, x):
        X, single = _as_points(x, self.d)
        out = self.scale * _EVAL[self.kind](self, X)
        return float(out[0]) if single else out

    def to_dict(self):
        doc = {"kind": self.kind, "d": self.d, "bound": encode_real(self.bound), "scale": self.scale}
        doc.update(_ENCODE[self.kind](self.payload))
        return doc

    @classmethod
    def from_dict(cls, doc, field=""):
        kind = require(doc, "kind", field)
        if kind not in KINDS:
            raise DocumentError(f"{field}.kind" if field else "kind", f"unknown kind {kind!r}")
        d = require(doc, "d", field)
        if isinstance(d, bool) or not isinstance(d, int) or d < 1:
            raise DocumentError(f"{field}.d" if field else "d", "expected a positive integer")
        payload = _DECODE[kind](doc, field)
        return cls(kind, d, payload, decode_real(require(doc, "bound", field), "bound"),
                   decode_real(doc.get("scale", 1.0), "scale"))

    def __eq__(self, other):
        return isinstance(other, TargetFunction) and self.to_dict() == other.to_dict()


def _eval_series(f, X):
    return expansion_eval(f.payload["coeffs"], X)


def _eval_additive(f, X):
    out = np.zeros(len(X))
    for i, g in enumerate(f.payload["components"]):
        out += expansion_eval(g, X[:, i:i + 1])
    return out


def _eval_multiplicative(f, X):
    out = np.ones(len(X))
    for i, g in enumerate(f.payload["components"]):
        out *= expansion_eval(g, X[:, i:i + 1])
    return out


def _eval_rotated(f, X):
    A, b = f.payload["A"], f.payload["b"]
    return f.payload["inner"].evaluate(X @ A.T + b)


def _branch(g, X):
    if isinstance(g, TargetFunction):
        return g.evaluate(X)
    return np.full(len(X), float(g))


def _eval_piecewise(f, X):
    out = np.zeros(len(X))
    for (lo, hi), g in zip(f.payload["boxes"], f.payload["components"]):
        upper = np.where(hi >= 1.0, X <= hi, X < hi)
        inside = np.all((X >= lo) & upper, axis=1)
        if inside.any():
            out[inside] += _branch(g, X[inside])
    return out


def _eval_f1(f, X):
    return (X[:, 0] >= 0.5).astype(float) + np.sin(2 * np.pi * X[:, 1])


def _eval_f2(f, X):
    return np.abs(X[:, 0] - 0.5) + (X[:, 1] - 0.5) ** 2


def _eval_chain(f, X):
    layers = f.payload["layers"]
    h = X
    for n, comps in enumerate(layers):
        nxt = np.stack([expansion_eval(c.coeffs, h[:, list(c.indices)]) for c in comps], axis=1)
        h = np.clip(nxt, 0.0, 1.0) if n < len(layers) - 1 else nxt
    return h[:, 0]


_EVAL = {
    "spline_series": _eval_series, "additive": _eval_additive,
    "multiplicative": _eval_multiplicative, "rotated": _eval_rotated,
    "piecewise": _eval_piecewise, "figure1_f1": _eval_f1, "figure1_f2": _eval_f2,
    "composite_chain": _eval_chain,
}


def _enc_coeff_list(payload):
    return {"components": [g.to_dict() for g in payload["components"]]}


def _dec_coeff_list(doc, field):
    comps = require(doc, "components", field)
    if not isinstance(comps, list):
        raise DocumentError(f"{field}.components", "expected a list")
    return {"components": [SplineCoefficients.from_dict(g, f"{field}.components[{i}]") for i, g in enumerate(comps)]}


def _enc_rotated(payload):
    return {"tau": payload["tau"], "A": payload["A"].tolist(), "b": payload["b"].tolist(),
            "inner": payload["inner"].to_dict()}


def _dec_rotated(doc, field):
    inner = TargetFunction.from_dict(require(doc, "inner", field), f"{field}.inner")
    try:
        A = np.asarray(require(doc, "A", field), dtype=float)
        b = np.asarray(require(doc, "b", field), dtype=float)
    except (TypeError, ValueError) as exc:
        raise DocumentError(f"{field}.A", str(exc)) from exc
    if A.shape != (inner.d, inner.d) or b.shape != (inner.d,):
        raise DocumentError(f"{field}.A", "affine map does not match the inner dimension")
    return {"tau": decode_real(require(doc, "tau", field), "tau"), "A": A, "b": b, "inner": inner}


def _enc_piecewise(payload):
    comps = [g.to_dict() if isinstance(g, TargetFunction) else float(g) for g in payload["components"]]
    boxes = [{"lo": lo.tolist(), "hi": hi.tolist()} for lo, hi in payload["boxes"]]
    return {"boxes": boxes, "components": comps}


def _dec_piecewise(doc, field):
    boxes = [(np.asarray(require(b, "lo", field), dtype=float), np.asarray(require(b, "hi", field), dtype=float))
             for b in require(doc, "boxes", field)]
    comps = []
    for i, g in enumerate(require(doc, "components", field)):
        comps.append(TargetFunction.from_dict(g, f"{field}.components[{i}]") if isinstance(g, dict)
                      else decode_real(g, f"{field}.components[{i}]"))
    return {"boxes": boxes, "components": comps}


def _enc_chain(payload):
    return {
        "d_circ": list(payload["d_circ"]),
        "t_circ": list(payload["t_circ"]),
        "layers": [[{"indices": list(c.indices), "coeffs": c.coeffs.to_dict()} for c in comps]
                   for comps in payload["layers"]],
    }


def _dec_chain(doc, field):
    layers = []
    for h, comps in enumerate(require(doc, "layers", field)):
        row = []
        for j, c in enumerate(comps):
            path = f"{field}.layers[{h}][{j}]"
            row.append(ChainComponent(tuple(int(i) for i in require(c, "indices", path)),
                                      SplineCoefficients.from_dict(require(c, "coeffs", path), f"{path}.coeffs")))
        layers.append(row)
    try:
        return _chain_payload(layers, require(doc, "d_circ", field)[0])
    except ValueError as exc:
        raise DocumentError(field or "<root>", str(exc)) from exc


_ENCODE = {
    "spline_series": lambda p: {"coeffs": p["coeffs"].to_dict()},
    "additive": _enc_coeff_list, "multiplicative": _enc_coeff_list,
    "rotated": _enc_rotated, "piecewise": _enc_piecewise,
    "figure1_f1": lambda p: {}, "figure1_f2": lambda p: {},
    "composite_chain": _enc_chain,
}

_DECODE = {
    "spline_series": lambda doc, field: {"coeffs": SplineCoefficients.from_dict(require(doc, "coeffs", field), "coeffs")},
    "additive": _dec_coeff_list, "multiplicative": _dec_coeff_list,
    "rotated": _dec_rotated, "piecewise": _dec_piecewise,
    "figure1_f1": lambda doc, field: {}, "figure1_f2": lambda doc, field: {},
    "composite_chain": _dec_chain,
}


# constructors


def spline_series(coeffs, normalize=False):
    """Target given by a spline expansion; with ``normalize`` it is scaled into [-1, 1]."""
    bound = coeffs.sup_bound()
    scale = 1.0 / bound if normalize and bound > 1 else 1.0
    return TargetFunction("spline_series", coeffs.params.d, {"coeffs": coeffs}, bound * scale, scale)


def _level_scale(params, k):
    inv_p = params.inv_p
    return 2.0 ** (-params.norm_log2_weight(k)) * params.index_set_size(k) ** (-inv_p)


def sample_besov_ball(rng, params, K, radius=1.0, r=None):
    """Random coefficients on levels 0..K with sequence norm exactly ``radius``.

    Level k draws magnitudes uniformly in [0, 1] with random signs, scaled by
    the inverse level weight and |J(k)|**(-1/p) so that every level carries a
    comparable share of the norm.  ``r`` optionally names the error norm whose
    approximation regime must hold.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if r is not None and not params.regime_ok(r):
        raise ValueError(f"(1/p - 1/r)_+ is not below s_tilde for r = {r}")
    entries = {}
    for k in range(K + 1):
        idx = enumerate_index_set(params, k)
        mags = rng.uniform(0.0, 1.0, size=len(idx))
        signs = rng.choice([-1.0, 1.0], size=len(idx))
        scale = _level_scale(params, k)
        for i, a, sg in zip(idx, mags, signs):
            entries[i] = sg * a * scale
    raw = SplineCoefficients(params, entries)
    norm = sequence_norm(raw)
    return raw.scaled(radius / norm) if norm > 0 else raw


def _check_univariate(g):
    for c in g:
        if c.params.d != 1:
            raise ValueError("components must be univariate expansions")


def make_additive(g):
    """f(x) = sum_i g_i(x_i), shrunk by the summed sup bounds when they exceed 1."""
    g = list(g)
    _check_univariate(g)
    total = sum(c.sup_bound() for c in g)
    scale = 1.0 / total if total > 1 else 1.0
    return TargetFunction("additive", len(g), {"components": g}, total * scale, scale)


def make_multiplicative(g):
    g = list(g)
    _check_univariate(g)
    total = math.prod(c.sup_bound() for c in g)
    scale = 1.0 / total if total > 1 else 1.0
    return TargetFunction("multiplicative", len(g), {"components": g}, total * scale, scale)


def rotation_map(d, tau):
    """A = R_tau / sqrt(d) and b = (I - A) c with c the cube centre.

    The rotation acts on the first two coordinates.  The centre is a fixed
    point and ||A||_inf <= sqrt(2/d) <= 1, so the cube maps into itself.
    """
    if d < 2:
        raise ValueError("rotation needs d >= 2")
    R = np.eye(d)
    c, s = math.cos(tau), math.sin(tau)
    R[:2, :2] = [[c, -s], [s, c]]
    A = R / math.sqrt(d)
    b = (np.eye(d) - A) @ np.full(d, 0.5)
    return A, b


def make_rotated(g, tau):
    A, b = rotation_map(g.d, tau)
    return TargetFunction("rotated", g.d, {"tau": float(tau), "A": A, "b": b, "inner": g}, g.bound)


def make_piecewise(rects, g):
    """sum_i 1{x in A_i} g_i(x) over axis-aligned boxes (lo, hi); overlaps add."""
    rects = [(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)) for lo, hi in rects]
    g = list(g)
    if len(rects) != len(g) or not rects:
        raise ValueError("need one branch per box")
    d = len(rects[0][0])
    for lo, hi in rects:
        if lo.shape != (d,) or hi.shape != (d,) or np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
            raise ValueError("boxes must lie in the unit cube with lo <= hi")
    bound = sum(gi.bound if isinstance(gi, TargetFunction) else abs(float(gi)) for gi in g)
    return TargetFunction("piecewise", d, {"boxes": rects, "components": g}, bound)


def figure1_functions(which):
    if which == 1:
        return TargetFunction("figure1_f1", 2, {}, 2.0)
    if which == 2:
        return TargetFunction("figure1_f2", 2, {}, 0.75)
    raise ValueError("which must be 1 or 2")


# composite chains


def _chain_payload(layers, d_in):
    d_circ = [int(d_in)] + [len(comps) for comps in layers]
    if d_circ[-1] != 1:
        raise ValueError("the last layer must have a single component")
    t_circ = []
    for h, comps in enumerate(layers):
        t = {len(c.indices) for c in comps}
        if len(t) != 1:
            raise ValueError(f"layer {h + 1} mixes components with different input counts")
        t = t.pop()
        if not 1 <= t <= d_circ[h]:
            raise ValueError(f"layer {h + 1} reads {t} inputs from a {d_circ[h]}-dimensional layer")
        for c in comps:
            if any(not 0 <= i < d_circ[h] for i in c.indices) or len(set(c.indices)) != t:
                raise ValueError(f"layer {h + 1} has invalid input indices {c.indices}")
            if c.coeffs.params.d != t:
                raise ValueError(f"layer {h + 1} component dimension does not match its indices")
        t_circ.append(t)
    return {"d_circ": d_circ, "t_circ": t_circ, "layers": [list(c) for c in layers]}


def composite_chain(layers, d):
    """f = f_H o ... o f_1 where each layer lists (indices, coeffs) components.

    Intermediate layer outputs are clipped into [0, 1] on evaluation.
    """
    layers = [[c if isinstance(c, ChainComponent) else ChainComponent(tuple(c[0]), c[1]) for c in comps]
              for comps in layers]
    payload = _chain_payload(layers, d)
    bound = layers[-1][0].coeffs.sup_bound()
    return TargetFunction("composite_chain", d, payload, bound)


def chain_layers(chain):
    if chain.kind != "composite_chain":
        raise ValueError("not a composite chain")
    return chain.payload["layers"]


def _affine_level0(coef, const, s):
    """Level-0 order-1 tensor spline equal to const + coef . u on [0,1]^t (exact by
    multilinear interpolation of an affine function)."""
    t = len(coef)
    params = BesovParams(math.inf, math.inf, SmoothnessVector(tuple(s)), 1)
    entries = {}
    for node in np.ndindex(*(2,) * t):
        entries[SplineIndex(0, tuple(n - 1 for n in node))] = const + float(np.dot(coef, node))
    return SplineCoefficients(params, entries)


def _shifted_half(g):
    """(g + 1) / 2 as a spline: the level-0 shifts sum to one on [0, 1]."""
    params = g.params
    entries = {i: v / 2 for i, v in g}
    for idx in enumerate_index_set(params, 0):
        entries[idx] = entries.get(idx, 0.0) + 0.5
    return SplineCoefficients(params, entries)


def additive_chain(f, s_outer=(2.0, 2.0)):
    """Rewrite an additive target as a two-layer composite chain.

    Layer 1 maps x_i to u_i = (g_i(x_i) + 1) / 2 (in [0, 1] when |g_i| <= 1);
    layer 2 is the affine map u -> scale * sum_i (2 u_i - 1).
    """
    if f.kind != "additive":
        raise ValueError("expected an additive target")
    g = f.payload["components"]
    if any(c.sup_bound() > 1 + 1e-12 for c in g):
        raise ValueError("components must be bounded by 1")
    d = len(g)
    s_outer = tuple(s_outer) if len(s_outer) == d else (float(s_outer[0]),) * d
    first = [ChainComponent((i,), _shifted_half(c)) for i, c in enumerate(g)]
    outer = _affine_level0(np.full(d, 2 * f.scale), -d * f.scale, s_outer)
    return composite_chain([first, [ChainComponent(tuple(range(d)), outer)]], d)


@dataclass(frozen=True)
class CompositeRateParams:
    t_star_layers: tuple
    s_star_layers: tuple
    h_star: int
    t_star: float
    s_star: float


def composite_rate_params(d_circ, t_circ, s_circ, p):
    """Layerwise effective exponents of a composition; h_star is 1-based and
    ties go to the smallest layer."""
    d_circ, t_circ = list(d_circ), list(t_circ)
    H = len(t_circ)
    if len(d_circ) != H + 1 or len(s_circ) != H:
        raise ValueError("need len(d_circ) = H + 1 and one smoothness vector per layer")
    if d_circ[-1] != 1:
        raise ValueError("the last layer must be scalar")
    for h in range(H):
        if not 1 <= t_circ[h] <= d_circ[h]:
            raise ValueError(f"layer {h + 1}: need 1 <= t <= {d_circ[h]}, got {t_circ[h]}")
    svecs = [s if isinstance(s, SmoothnessVector) else SmoothnessVector(tuple(s)) for s in s_circ]
    for h, s in enumerate(svecs):
        if s.d != t_circ[h]:
            raise ValueError(f"layer {h + 1}: smoothness vector has length {s.d}, expected {t_circ[h]}")
    inv_p = 0.0 if math.isinf(p) else 1.0 / p
    t_star = [s.s_min / s.s_tilde for s in svecs]
    s_star = []
    for h in range(H):
        factor = 1.0
        for k in range(h + 1, H):
            factor *= min(svecs[k].s_min - t_star[k] * inv_p, 1.0)
        s_star.append(svecs[h].s_tilde * factor)
    h_star = min(range(H), key=lambda h: (s_star[h], h))
    return CompositeRateParams(tuple(t_star), tuple(s_star), h_star + 1, t_star[h_star], s_star[h_star])


def grid_points(d, per_axis):
    axis = np.linspace(0.0, 1.0, per_axis)
    return np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
