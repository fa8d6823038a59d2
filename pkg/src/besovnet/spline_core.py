"""Cardinal B-splines, anisotropic tensor bases and the Besov sequence norm.

Resolution levels are indexed so that level ``k`` refines coordinate ``i`` by
``2**floor(k * s_min / s_i)``.  The coarsest-smoothness direction therefore
doubles at every level while smoother directions refine more slowly.  With
this indexing the number of basis functions at level ``K`` grows like the
budget ``N(K) = 2**sum_i floor(K s_min / s_i)`` and one level costs a factor
``2**(-s_min)`` in approximation error, which is what the norm weights below
encode.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .serial import DocumentError, decode_real, encode_real, require

DEFAULT_INDEX_CAP = 5_000_000


class IndexSetTooLarge(ValueError):
    """An index set would exceed the configured size cap."""


class EmbeddingError(ValueError):
    """The requested Besov embedding does not hold."""


def _floor_ratio(x):
    # guard against 2.9999999999 style floors from float division
    return int(math.floor(x + 1e-9))


@dataclass(frozen=True)
class SmoothnessVector:
    s: tuple

    def __post_init__(self):
        s = tuple(float(v) for v in np.atleast_1d(self.s))
        if not s:
            raise ValueError("smoothness vector must be non-empty")
        if any(not (v > 0 and math.isfinite(v)) for v in s):
            raise ValueError(f"smoothness entries must be positive and finite, got {s}")
        object.__setattr__(self, "s", s)

    @property
    def d(self):
        return len(self.s)

    @property
    def s_min(self):
        return min(self.s)

    @property
    def s_max(self):
        return max(self.s)

    @property
    def s_tilde(self):
        return 1.0 / sum(1.0 / v for v in self.s)

    @property
    def d_star(self):
        return self.s_min / self.s_tilde

    def scaled(self, c):
        return SmoothnessVector(tuple(c * v for v in self.s))


@dataclass(frozen=True)
class BesovParams:
    p: float
    q: float
    s: SmoothnessVector
    m: int

    def __post_init__(self):
        if not isinstance(self.s, SmoothnessVector):
            object.__setattr__(self, "s", SmoothnessVector(self.s))
        p, q = float(self.p), float(self.q)
        if not (p > 0 and q > 0):
            raise ValueError("p and q must be positive")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        if int(self.m) != self.m or self.m < 0:
            raise ValueError("spline order m must be a non-negative integer")
        object.__setattr__(self, "m", int(self.m))

    @property
    def d(self):
        return self.s.d

    @property
    def inv_p(self):
        return 0.0 if math.isinf(self.p) else 1.0 / self.p

    def omega(self, r):
        inv_r = 0.0 if math.isinf(r) else 1.0 / r
        return max(self.inv_p - inv_r, 0.0)

    def nu(self, r):
        w = self.omega(r)
        return math.inf if w == 0 else (self.s.s_tilde - w) / (2 * w)

    def regime_ok(self, r):
        return self.omega(r) < self.s.s_tilde

    @property
    def order_ok(self):
        return 0 < self.s.s_max < min(self.m, self.m - 1 + self.inv_p)

    def level_exponents(self, k):
        """Per-coordinate dyadic refinement exponents at level k."""
        smin = self.s.s_min
        return tuple(_floor_ratio(k * smin / si) for si in self.s.s)

    def level_shape(self, k):
        """Number of admissible shifts per coordinate, j_i in -m..2**a_i."""
        return tuple(2**a + self.m + 1 for a in self.level_exponents(k))

    def index_set_size(self, k):
        return math.prod(self.level_shape(k))

    def budget(self, k):
        """Basis budget N(k) attached to resolution k."""
        return 2 ** sum(self.level_exponents(k))

    def norm_log2_weight(self, k):
        """log2 of the level-k weight in the sequence norm."""
        return k * self.s.s_min - sum(self.level_exponents(k)) * self.inv_p

    def to_dict(self):
        return {"p": encode_real(self.p), "q": encode_real(self.q), "m": self.m, "s": list(self.s.s)}

    @classmethod
    def from_dict(cls, doc, field=""):
        try:
            s = [decode_real(v, f"{field}.s") for v in require(doc, "s", field)]
            m = require(doc, "m", field)
            if isinstance(m, bool) or not isinstance(m, int):
                raise DocumentError(f"{field}.m", "expected an integer")
            return cls(decode_real(require(doc, "p", field), f"{field}.p"),
                       decode_real(require(doc, "q", field), f"{field}.q"),
                       SmoothnessVector(tuple(s)), m)
        except DocumentError:
            raise
        except (TypeError, ValueError) as exc:
            raise DocumentError(field or "<root>", str(exc)) from exc


@dataclass(frozen=True)
class SplineIndex:
    k: int
    j: tuple

    def __post_init__(self):
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "j", tuple(int(v) for v in self.j))

    def valid_for(self, params):
        if self.k < 0 or len(self.j) != params.d:
            return False
        return all(-params.m <= ji <= 2**a for ji, a in zip(self.j, params.level_exponents(self.k)))


def bspline_eval(m, x):
    """Cardinal B-spline of order m (degree m, support [0, m+1]).

    Uses the truncated-power form.  Order 0 is the indicator of [0, 1) so that
    integer shifts form an exact partition of unity.
    """
    if m < 0:
        raise ValueError("order must be non-negative")
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = (x >= 0) & (x < m + 1)
    if m == 0:
        out[inside] = 1.0
        return out if out.ndim else float(out)
    xi = x[inside]
    acc = np.zeros_like(xi)
    for j in range(m + 1):
        t = np.maximum(xi - j, 0.0)
        acc += (-1) ** j * math.comb(m + 1, j) * t**m
    out[inside] = acc / math.factorial(m)
    return out if out.ndim else float(out)


def _as_points(x, d):
    """Normalise to an (n, d) array; a 1-D input of length d is one point
    unless d == 1, where it is read as a column of points."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 0 or (x.ndim == 1 and (d > 1 or x.size == 1))
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(1, -1) if d > 1 else x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {x.shape}")
    return x, single


def tensor_basis_eval(params, idx, x):
    x, single = _as_points(x, params.d)
    if len(idx.j) != params.d:
        raise ValueError("index dimension does not match the smoothness vector")
    val = np.ones(len(x))
    for i, a in enumerate(params.level_exponents(idx.k)):
        val *= bspline_eval(params.m, 2.0**a * x[:, i] - idx.j[i])
    return float(val[0]) if single else val


def enumerate_index_set(params, k, cap=DEFAULT_INDEX_CAP):
    if k < 0:
        raise ValueError("resolution must be non-negative")
    size = params.index_set_size(k)
    if size > cap:
        raise IndexSetTooLarge(f"|J({k})| = {size} exceeds the cap {cap}")
    ranges = [range(-params.m, 2**a + 1) for a in params.level_exponents(k)]
    return [SplineIndex(k, j) for j in itertools.product(*ranges)]


class SplineCoefficients:
    """Sparse coefficients of a tensor B-spline expansion, keyed by (k, j)."""

    def __init__(self, params, entries=None):
        self.params = params
        clean = {}
        for key, val in (entries or {}).items():
            idx = key if isinstance(key, SplineIndex) else SplineIndex(*key)
            if not idx.valid_for(params):
                raise ValueError(f"index {idx} is outside J({idx.k})")
            val = float(val)
            if not math.isfinite(val):
                raise ValueError(f"coefficient at {idx} is not finite")
            clean[idx] = val
        self._entries = dict(sorted(clean.items(), key=lambda kv: (kv[0].k, kv[0].j)))

    @property
    def entries(self):
        return dict(self._entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries.items())

    def __eq__(self, other):
        return (isinstance(other, SplineCoefficients) and self.params == other.params
                and self._entries == other._entries)

    @property
    def K(self):
        return max((idx.k for idx in self._entries), default=0)

    def levels(self):
        return sorted({idx.k for idx in self._entries})

    def scaled(self, c):
        return SplineCoefficients(self.params, {i: c * v for i, v in self._entries.items()})

    def restricted(self, keep):
        keep = set(keep)
        return SplineCoefficients(self.params, {i: v for i, v in self._entries.items() if i in keep})

    @cached_property
    def _level_arrays(self):
        m = self.params.m
        arrays = {}
        for idx, val in self._entries.items():
            arr = arrays.get(idx.k)
            if arr is None:
                arr = arrays[idx.k] = np.zeros(self.params.level_shape(idx.k))
            arr[tuple(ji + m for ji in idx.j)] = val
        return arrays

    def level_array(self, k):
        """Dense coefficient array of level k, offset so that j = -m sits at 0."""
        arr = self._level_arrays.get(k)
        return np.zeros(self.params.level_shape(k)) if arr is None else arr

    def sup_bound(self):
        """Rigorous bound on sup|f|: the shifted splines at one level sum to at most 1."""
        return sum(float(np.max(np.abs(a))) for a in self._level_arrays.values())

    def lipschitz_bounds(self):
        """Per-coordinate bounds on |df/dx_i| from differences of neighbouring coefficients."""
        m = self.params.m
        if m == 0:
            return [math.inf] * self.params.d
        out = [0.0] * self.params.d
        for k, arr in self._level_arrays.items():
            a = self.params.level_exponents(k)
            for i in range(self.params.d):
                padded = np.pad(arr, [(1, 1) if ax == i else (0, 0) for ax in range(arr.ndim)])
                jump = np.max(np.abs(np.diff(padded, axis=i)))
                out[i] += 2.0 ** a[i] * float(jump)
        return out

    def to_dict(self):
        doc = self.params.to_dict()
        doc["entries"] = [{"k": i.k, "j": list(i.j), "alpha": v} for i, v in self._entries.items()]
        return doc

    @classmethod
    def from_dict(cls, doc, field=""):
        params = BesovParams.from_dict(doc, field)
        raw = require(doc, "entries", field)
        if not isinstance(raw, list):
            raise DocumentError(f"{field}.entries", "expected a list")
        entries = {}
        for n, e in enumerate(raw):
            path = f"{field}.entries[{n}]"
            try:
                idx = SplineIndex(require(e, "k", path), tuple(require(e, "j", path)))
            except (TypeError, ValueError) as exc:
                raise DocumentError(path, str(exc)) from exc
            if not idx.valid_for(params):
                raise DocumentError(path, f"index {idx} outside J({idx.k})")
            entries[idx] = decode_real(require(e, "alpha", path), f"{path}.alpha")
        return cls(params, entries)


def sequence_norm(coeffs):
    params = coeffs.params
    p, q = params.p, params.q
    level_terms = []
    for k in coeffs.levels():
        vals = np.abs(coeffs.level_array(k)).ravel()
        if math.isinf(p):
            lp = float(vals.max())
        else:
            lp = float(np.sum(vals**p)) ** (1.0 / p)
        level_terms.append(2.0 ** params.norm_log2_weight(k) * lp)
    if not level_terms:
        return 0.0
    terms = np.asarray(level_terms)
    if math.isinf(q):
        return float(terms.max())
    return float(np.sum(terms**q)) ** (1.0 / q)


def expansion_eval(coeffs, x):
    """Evaluate sum_{k,j} alpha_{k,j} M_{k,j}(x), visiting only the (m+1)**d
    shifts per level whose support contains x."""
    params = coeffs.params
    d, m = params.d, params.m
    x, single = _as_points(x, d)
    out = np.zeros(len(x))
    offsets = list(itertools.product(range(m + 1), repeat=d))
    for k in coeffs.levels():
        arr = coeffs.level_array(k)
        scale = 2.0 ** np.asarray(params.level_exponents(k), dtype=float)
        z = x * scale
        base = np.floor(z).astype(np.int64)
        for off in offsets:
            j = base - np.asarray(off)
            pos = j + m
            ok = np.all((pos >= 0) & (pos < np.asarray(arr.shape)), axis=1)
            if not ok.any():
                continue
            val = np.ones(int(ok.sum()))
            for i in range(d):
                val *= bspline_eval(m, z[ok, i] - j[ok, i])
            out[ok] += arr[tuple(pos[ok].T)] * val
    return float(out[0]) if single else out


def difference_modulus(f, r, t, p, grid, n_steps=11):
    """Grid estimate of the r-th order anisotropic modulus of smoothness.

    ``f`` maps an (n, d) array to n values.  The supremum over steps h with
    |h_i| <= t_i is replaced by a maximum over an ``n_steps``-per-axis lattice,
    and the L^p norm over [0,1]^d by an average over a ``grid``-per-axis
    lattice.  This is a diagnostic estimate, not a certified norm.
    """
    if r < 1:
        raise ValueError("difference order must be at least 1")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t <= 0):
        raise ValueError("step bounds must be positive")
    d = len(t)
    axis = np.linspace(0.0, 1.0, grid)
    pts = np.stack(np.meshgrid(*[axis] * d, indexing="ij"), -1).reshape(-1, d)
    steps = [np.linspace(-ti, ti, n_steps) for ti in t]
    weights = [math.comb(r, j) * (-1) ** (r - j) for j in range(r + 1)]
    tol = 1e-12
    best = 0.0
    for h in itertools.product(*steps):
        h = np.asarray(h)
        end = pts + r * h
        ok = np.all((end >= -tol) & (end <= 1 + tol), axis=1)
        diff = np.zeros(len(pts))
        if ok.any():
            acc = np.zeros(int(ok.sum()))
            for j, w in enumerate(weights):
                acc += w * np.asarray(f(np.clip(pts[ok] + j * h, 0.0, 1.0)), dtype=float)
            diff[ok] = acc
        if math.isinf(p):
            val = float(np.max(np.abs(diff)))
        else:
            val = float(np.mean(np.abs(diff) ** p)) ** (1.0 / p)
        best = max(best, val)
    return best


def embedding_exponent(p1, p2, s):
    """Smoothness retention factor for the embedding from L^p1 into L^p2 Besov scales.

    The embedded smoothness vector is ``s.scaled(gamma)``.
    """
    if not (0 < p1 <= p2):
        raise EmbeddingError("need 0 < p1 <= p2")
    gap = max((0.0 if math.isinf(p1) else 1.0 / p1) - (0.0 if math.isinf(p2) else 1.0 / p2), 0.0)
    if gap >= s.s_tilde:
        raise EmbeddingError(f"(1/p1 - 1/p2)_+ = {gap} is not below s_tilde = {s.s_tilde}")
    return 1.0 - gap / s.s_tilde
