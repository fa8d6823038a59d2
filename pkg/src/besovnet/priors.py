"""Priors over network parameters and numeric checks of their tail conditions.

Three families are supported: spike-and-slab with an exact sparsity level,
a continuous spike/slab mixture whose spike narrows with depth and size, and
an adaptive layer that puts hyperpriors on width and sparsity.  All share a
bounded prior on the noise scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special, stats

from .relu_net import param_count
from .serial import DocumentError, decode_real, require

LOG_HALF = math.log(0.5)


@dataclass(frozen=True)
class NetShape:
    d: int
    L: int
    D: int

    def __post_init__(self):
        if self.d < 1 or self.L < 0 or self.D < 1:
            raise ValueError(f"invalid shape {self}")

    @property
    def widths(self):
        return (self.d,) + (self.D,) * self.L + (1,)

    @property
    def T(self):
        return param_count(self.L, self.D, self.d)


@dataclass(frozen=True)
class Slab:
    """Continuous slab: ``uniform`` on [-param, param] or ``gaussian`` with variance param."""

    kind: str
    param: float

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown slab kind {self.kind!r}")
        if not self.param > 0:
            raise ValueError("slab parameter must be positive")

    @property
    def std(self):
        return math.sqrt(self.param) if self.kind == "gaussian" else self.param / math.sqrt(3)

    def logpdf(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            return np.where(np.abs(u) <= self.param, -math.log(2 * self.param), -np.inf)
        return -0.5 * u**2 / self.param - 0.5 * math.log(2 * math.pi * self.param)

    def sample(self, rng, size=None):
        if self.kind == "uniform":
            return rng.uniform(-self.param, self.param, size=size)
        return rng.normal(0.0, self.std, size=size)

    def log_tail(self, K):
        """log P(|u| > K)."""
        if self.kind == "uniform":
            return math.log1p(-K / self.param) if K < self.param else -math.inf
        return math.log(2.0) + float(stats.norm.logsf(K / self.std))

    def log_inf(self, B):
        """log of the smallest density value on [-B, B]."""
        return float(self.logpdf(B))

    def to_dict(self):
        return {"kind": self.kind, "param": self.param}


@dataclass(frozen=True)
class SigmaPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError("need 0 < lo < hi for the noise-scale prior")

    def logpdf(self, sigma):
        return -math.log(self.hi - self.lo) if self.lo <= sigma <= self.hi else -math.inf

    def sample(self, rng):
        return float(rng.uniform(self.lo, self.hi))

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi}


def sigma_prior_logpdf(sigma, spec):
    return spec.sigma.logpdf(sigma)


@dataclass(frozen=True)
class SpikeSlabPrior:
    """Exactly S active coordinates chosen uniformly, each drawn from the slab.

    ``S = None`` defers the sparsity level to the network-shape schedule.
    """

    slab: Slab
    sigma: SigmaPrior
    S: int | None = None
    family: str = field(default="spike_slab", init=False)

    def with_S(self, S):
        return replace(self, S=int(S))


@dataclass(frozen=True)
class ShrinkagePrior:
    """Independent two-component mixture per coordinate: a narrow spike with
    weight 1 - 1/T and the slab with weight 1/T.

    The spike scale is exp(-C_v L**2) (log T)**(-k); ``spike`` is ``gaussian``
    (k = 1/2) or ``laplace`` (k = 1).
    """

    slab: Slab
    sigma: SigmaPrior
    C_v: float = 1.0
    spike: str = "gaussian"
    family: str = field(default="shrinkage", init=False)

    def __post_init__(self):
        if self.spike not in ("gaussian", "laplace"):
            raise ValueError(f"unknown spike family {self.spike!r}")
        if not self.C_v > 0:
            raise ValueError("C_v must be positive")

    @property
    def k(self):
        return 0.5 if self.spike == "gaussian" else 1.0

    def weights(self, T):
        pi2 = 1.0 / T
        return 1.0 - pi2, pi2

    def log_spike_scale(self, shape):
        return -self.C_v * shape.L**2 - self.k * math.log(math.log(shape.T))

    def spike_scale(self, shape):
        return math.exp(self.log_spike_scale(shape))

    def _spike_logpdf(self, u, log_scale):
        z = np.asarray(u, dtype=float) * math.exp(-log_scale)
        if self.spike == "gaussian":
            return -0.5 * z**2 - 0.5 * math.log(2 * math.pi) - log_scale
        return -np.abs(z) - math.log(2.0) - log_scale

    def _spike_log_tail(self, K, log_scale):
        z = K * math.exp(-log_scale)
        if self.spike == "gaussian":
            return math.log(2.0) + float(stats.norm.logsf(z))
        return -z

    def logpdf(self, u, shape):
        pi1, pi2 = self.weights(shape.T)
        ls = self.log_spike_scale(shape)
        return np.logaddexp(math.log(pi1) + self._spike_logpdf(u, ls), math.log(pi2) + self.slab.logpdf(u))

    def sample(self, rng, shape, size):
        pi1, _ = self.weights(shape.T)
        scale = self.spike_scale(shape)
        spike = (rng.normal(size=size) if self.spike == "gaussian" else rng.laplace(size=size)) * scale
        slab = self.slab.sample(rng, size)
        return np.where(rng.uniform(size=size) < pi1, spike, slab)

    def log_tail(self, K, shape):
        pi1, pi2 = self.weights(shape.T)
        ls = self.log_spike_scale(shape)
        return float(np.logaddexp(math.log(pi1) + self._spike_log_tail(K, ls), math.log(pi2) + self.slab.log_tail(K)))


@dataclass(frozen=True)
class AdaptivePrior:
    """Hyperpriors pi_D(N) ~ exp(-lambda_N N log(N)**3) and
    pi_S(H) ~ exp(-lambda_H H log(H)**2) over a base prior at depth
    ceil(C_L log n).

    Both pmfs are truncated at ``D_max`` and ``S_max``; S is further limited
    to the parameter count of the drawn width and renormalized given D, so
    the width marginal is exactly the truncated pi_D.
    """

    base: SpikeSlabPrior | ShrinkagePrior
    lambda_N: float = 1.0
    lambda_H: float = 1.0
    C_L: float = 1.0
    D_max: int = 128
    S_max: int = 4096
    family: str = field(default="adaptive", init=False)

    def __post_init__(self):
        if not (self.lambda_N > 0 and self.lambda_H > 0 and self.C_L > 0):
            raise ValueError("lambda_N, lambda_H and C_L must be positive")
        if self.D_max < 1 or self.S_max < 1:
            raise ValueError("truncation limits must be positive")

    @property
    def sigma(self):
        return self.base.sigma

    @property
    def slab(self):
        return self.base.slab

    @property
    def with_sparsity(self):
        return self.base.family == "spike_slab"

    def depth(self, n):
        return max(1, math.ceil(round(self.C_L * math.log(n), 9))) if n > 1 else 1

    def log_pmf_D(self, D):
        return hyperprior_logpmf("D", D, self.lambda_N, self.D_max)

    def _log_pmf_S_table(self, limit):
        return _log_pmf_table("S", self.lambda_H, limit)

    def log_pmf_S_given_D(self, S, D, d, L):
        limit = min(self.S_max, param_count(L, D, d))
        if not 1 <= S <= limit:
            return -math.inf
        return float(self._log_pmf_S_table(limit)[S - 1])


def _log_unnorm(kind, value, lam):
    if value == 1:
        return 0.0
    power = 3 if kind == "D" else 2
    return -lam * value * math.log(value) ** power


_TABLE_CACHE = {}


def _log_pmf_table(kind, lam, max_value):
    key = (kind, float(lam), int(max_value))
    table = _TABLE_CACHE.get(key)
    if table is None:
        v = np.arange(1, max_value + 1, dtype=float)
        power = 3 if kind == "D" else 2
        logu = -lam * v * np.log(v) ** power
        table = logu - special.logsumexp(logu)
        table.setflags(write=False)
        if len(_TABLE_CACHE) < 256:
            _TABLE_CACHE[key] = table
    return table


def hyperprior_logpmf(kind, value, lam, max_value):
    """log pmf of the truncated width (``D``) or sparsity (``S``) hyperprior."""
    if kind not in ("D", "S"):
        raise ValueError("kind must be 'D' or 'S'")
    if not 1 <= value <= max_value:
        return -math.inf
    return float(_log_pmf_table(kind, lam, max_value)[int(value) - 1])


def hyperprior_pmf(kind, lam, max_value):
    return np.exp(_log_pmf_table(kind, lam, max_value))


# log densities


def log_prior_spike_slab(theta, gamma, shape, spec):
    theta = np.asarray(theta, dtype=float)
    gamma = np.asarray(gamma, dtype=bool)
    T = shape.T
    if theta.shape != (T,) or gamma.shape != (T,):
        raise ValueError(f"expected parameter vectors of length {T}")
    S = spec.S
    if int(gamma.sum()) != S or np.any(theta[~gamma] != 0):
        return -math.inf
    log_choose = special.gammaln(T + 1) - special.gammaln(S + 1) - special.gammaln(T - S + 1)
    return float(-log_choose + np.sum(spec.slab.logpdf(theta[gamma])))


def log_prior_shrinkage(theta, shape, spec):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (shape.T,):
        raise ValueError(f"expected a parameter vector of length {shape.T}")
    return float(np.sum(spec.logpdf(theta, shape)))


def sample_prior(rng, spec, shape=None, n=None, d=None):
    """One prior draw: (theta, gamma or None, sigma, shape).

    Fixed-shape families need ``shape``.  The adaptive family draws its own
    width (and sparsity) and needs ``n`` for the depth and ``d``.
    """
    if spec.family == "adaptive":
        if n is None or d is None:
            raise ValueError("adaptive draws need the sample size n and input dimension d")
        L = spec.depth(n)
        pD = hyperprior_pmf("D", spec.lambda_N, spec.D_max)
        D = int(rng.choice(len(pD), p=pD)) + 1
        shape = NetShape(d, L, D)
        base = spec.base
        if spec.with_sparsity:
            limit = min(spec.S_max, shape.T)
            pS = np.exp(spec._log_pmf_S_table(limit))
            S = int(rng.choice(limit, p=pS / pS.sum())) + 1
            base = base.with_S(S)
        theta, gamma, sigma, _ = sample_prior(rng, base, shape)
        return theta, gamma, sigma, shape
    if shape is None:
        raise ValueError("fixed-shape priors need a network shape")
    T = shape.T
    if spec.family == "spike_slab":
        if spec.S is None or not 1 <= spec.S <= T:
            raise ValueError(f"sparsity S = {spec.S} must lie in [1, {T}]")
        gamma = np.zeros(T, dtype=bool)
        gamma[rng.choice(T, size=spec.S, replace=False)] = True
        theta = np.zeros(T)
        theta[gamma] = spec.slab.sample(rng, spec.S)
        return theta, gamma, spec.sigma.sample(rng), shape
    theta = spec.sample(rng, shape, T)
    return theta, None, spec.sigma.sample(rng), shape


# condition checks


@dataclass(frozen=True)
class ConditionResult:
    name: str
    passed: bool
    constant: float
    detail: dict

    def to_dict(self):
        from .serial import encode_real

        return {"name": self.name, "passed": bool(self.passed), "constant": encode_real(self.constant),
                "detail": {k: encode_real(v) if isinstance(v, float) else v for k, v in self.detail.items()}}


TAIL_POINTS = (10.0, 100.0, 1000.0)


def _tail_check(log_tail_fn, name):
    consts = {}
    for K in TAIL_POINTS:
        lt = log_tail_fn(K)
        consts[f"K={int(K)}"] = math.inf if lt == -math.inf else -lt / K
    values = list(consts.values())
    # a tail of order exp(-cK) keeps -log(tail)/K bounded away from 0 as K grows
    passed = min(values) > 0 and values[-1] >= values[0] * (1 - 1e-9)
    return ConditionResult(name, passed, min(values), consts)


def _floor_check(log_inf, n, name, c_max):
    c = math.inf if log_inf == -math.inf else max(-log_inf, 0.0) / math.log(n) ** 2
    return ConditionResult(name, c <= c_max, c, {"log_inf": log_inf, "c_max": c_max})


def _mass_outside_log(spec, shape, a_n):
    return spec.log_tail(a_n, shape)


def _min_passing_C_v(spec, shape, n, N_n, L):
    log_target = -math.log(N_n * math.log(n) ** 2)
    a = math.exp(-L * math.log(n))

    def ok(C_v):
        return _mass_outside_log(replace(spec, C_v=C_v), shape, a) < log_target

    hi = 1e-3
    while not ok(hi):
        hi *= 2
        if hi > 1e6:
            return math.inf
    lo = hi / 2 if hi > 1e-3 else 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def check_conditions(spec, shape, n, N_n, B1=1.0, c_max=1.0):
    """Numeric verification of the prior's tail, floor and spike conditions.

    Spike-and-slab priors get ``tail`` (mass beyond K decays like exp(-cK)
    for K in 10, 100, 1000) and ``floor`` (log inf of the density on
    [-B1, B1] is at least -c (log n)**2 with c <= c_max).  Shrinkage priors
    get the same two plus ``spike``: the mass outside [-a_n, a_n], with
    a_n = exp(-L log n), must be below 1 / (N_n (log n)**2).  The spike check
    reports the ratio of the two and the smallest C_v that passes.
    """
    if spec.family == "adaptive":
        spec = spec.base
    results = []
    if spec.family == "spike_slab":
        results.append(_tail_check(spec.slab.log_tail, "tail"))
        results.append(_floor_check(spec.slab.log_inf(B1), n, "floor", c_max))
        return results
    results.append(_tail_check(lambda K: spec.log_tail(K, shape), "tail"))
    results.append(_floor_check(float(spec.logpdf(B1, shape)), n, "floor", c_max))
    a_n = math.exp(-shape.L * math.log(n))
    log_mass = _mass_outside_log(spec, shape, a_n)
    log_target = -math.log(N_n * math.log(n) ** 2)
    ratio = math.exp(log_mass - log_target)
    results.append(ConditionResult("spike", ratio < 1, ratio, {
        "log_mass_outside": log_mass, "log_threshold": log_target, "a_n": a_n,
        "min_C_v": _min_passing_C_v(spec, shape, n, N_n, shape.L), "T": shape.T,
    }))
    return results


# configuration documents


def _slab_from(doc, field):
    kind = require(doc, "kind", field)
    try:
        return Slab(kind, decode_real(require(doc, "param", field), f"{field}.param"))
    except ValueError as exc:
        if isinstance(exc, DocumentError):
            raise
        raise DocumentError(field, str(exc)) from exc


def prior_from_dict(doc, field="prior"):
    """Build a prior from a configuration block.

    Keys: family (spike_slab | shrinkage | adaptive), S, slab {kind, param},
    spike, C_v, lambda_N, lambda_H, C_L, D_max, S_max, base (family of the
    adaptive base), sigma {lo, hi}.
    """
    family = require(doc, "family", field)
    sig = require(doc, "sigma", field)
    try:
        sigma = SigmaPrior(decode_real(require(sig, "lo", f"{field}.sigma")),
                           decode_real(require(sig, "hi", f"{field}.sigma")))
        slab = _slab_from(require(doc, "slab", field), f"{field}.slab")
        base_family = doc.get("base", "spike_slab") if family == "adaptive" else family
        if base_family == "spike_slab":
            S = doc.get("S")
            base = SpikeSlabPrior(slab, sigma, None if S is None else int(S))
        elif base_family == "shrinkage":
            base = ShrinkagePrior(slab, sigma, float(doc.get("C_v", 1.0)), doc.get("spike", "gaussian"))
        else:
            raise DocumentError(f"{field}.family", f"unknown prior family {base_family!r}")
        if family == "adaptive":
            return AdaptivePrior(base, float(doc.get("lambda_N", 1.0)), float(doc.get("lambda_H", 1.0)),
                                 float(doc.get("C_L", 1.0)), int(doc.get("D_max", 128)), int(doc.get("S_max", 4096)))
        return base
    except DocumentError:
        raise
    except (TypeError, ValueError) as exc:
        raise DocumentError(field, str(exc)) from exc
