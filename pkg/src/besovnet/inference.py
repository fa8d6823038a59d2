"""Likelihoods, synthetic data and Metropolis-within-Gibbs posterior samplers.

Every move proposes a new state and is accepted with the full MH ratio,
both proposal directions included.  With a Gaussian slab in regression the
output layer is conjugate; the samplers then integrate it out of the
likelihood and draw it from its Gaussian full conditional only when a
sample is recorded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .priors import NetShape, hyperprior_logpmf, sample_prior
from .relu_net import Network

LOG_2PI = math.log(2 * math.pi)
MOVES = ("swap", "walk", "sigma", "shape", "refresh")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    kind: str = "regression"

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise ValueError("X must be (n, d) with one response per row")
        if self.kind not in ("regression", "classification"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if X.size and (X.min() < 0 or X.max() > 1):
            raise ValueError("inputs must lie in the unit cube")
        if self.kind == "classification" and not np.all((Y == 0) | (Y == 1)):
            raise ValueError("classification labels must be 0 or 1")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @classmethod
    def empty(cls, d, kind="regression"):
        return cls(np.zeros((0, d)), np.zeros(0), kind)


def sigmoid(z):
    return special.expit(z)


def synth_data(rng, f0, n, sigma0=0.0, kind="regression"):
    """X uniform on [0,1]^d; Y = f0(X) + N(0, sigma0**2) or Y ~ Bernoulli(sigmoid(f0(X)))."""
    X = rng.uniform(size=(n, f0.d))
    fx = np.asarray(f0.evaluate(X), dtype=float)
    if kind == "regression":
        noise = rng.normal(size=n)
        return Dataset(X, fx + sigma0 * noise if sigma0 > 0 else fx.copy(), kind)
    if kind == "classification":
        return Dataset(X, (rng.uniform(size=n) < sigmoid(fx)).astype(float), kind)
    raise ValueError(f"unknown model kind {kind!r}")


def _loglik_values(fx, sigma, data):
    if data.kind == "regression":
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        n = data.n
        resid = data.Y - fx
        return -n * math.log(sigma) - float(resid @ resid) / (2 * sigma**2) - 0.5 * n * LOG_2PI
    # log sigmoid(+-f) = -log(1 + e^{-+f}), stable at large |f|
    return -float(np.sum(np.logaddexp(0.0, (1.0 - 2.0 * data.Y) * fx)))


def loglik(net, sigma, data):
    fx = net(data.X) if data.n else np.zeros(0)
    return _loglik_values(fx, sigma, data)


@dataclass(frozen=True)
class ChainConfig:
    """Chain length, move mix and tuning.

    Move probabilities must sum to 1.  A sampler renormalises over the moves
    it supports: ``swap`` only applies to spike-and-slab, ``refresh`` (redraw
    a coordinate from its prior) only to shrinkage, ``shape`` only to the
    adaptive sampler.
    """

    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    moves: dict = field(default_factory=lambda: {"swap": 0.4, "walk": 0.3, "sigma": 0.1, "shape": 0.1, "refresh": 0.1})
    steps: dict = field(default_factory=lambda: {"walk": 0.1, "sigma": 0.05})
    seed: int = 0
    walk_block: int = 3
    temper: bool = True
    tune: bool = True
    collapse: bool = True
    target_accept: float = 0.3

    def __post_init__(self):
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.walk_block < 1:
            raise ValueError("thin and walk_block must be positive")
        unknown = set(self.moves) - set(MOVES)
        if unknown:
            raise ValueError(f"unknown moves {sorted(unknown)}")
        if any(v < 0 for v in self.moves.values()) or abs(sum(self.moves.values()) - 1) > 1e-9:
            raise ValueError("move probabilities must be non-negative and sum to 1")

    def move_table(self, supported):
        names = [m for m in MOVES if m in supported and self.moves.get(m, 0) > 0]
        probs = np.array([self.moves[m] for m in names])
        if not names:
            raise ValueError("no supported move has positive probability")
        return names, probs / probs.sum()

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in doc.items() if k in known})


@dataclass(frozen=True)
class PosteriorSample:
    theta: np.ndarray
    gamma: np.ndarray | None
    sigma: float
    log_posterior: float
    shape: NetShape
    S: int | None = None

    @property
    def shape_D(self):
        return self.shape.D

    @property
    def shape_S(self):
        return self.S

    def network(self):
        mask = None if self.gamma is None else self.gamma.astype(np.int8)
        return Network.from_flat(self.shape.widths, self.theta, mask=mask)


@dataclass
class ChainResult:
    samples: list
    acceptance: dict
    steps: dict
    iterations: int

    def __iter__(self):
        return iter(self.samples)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def diagnostics(self):
        return {"acceptance": dict(self.acceptance), "steps": dict(self.steps), "iterations": self.iterations,
                "retained": len(self.samples)}


# flat parameter layout helpers


def _layer_slices(widths):
    out, pos = [], 0
    for l in range(1, len(widths)):
        r, c = widths[l], widths[l - 1]
        out.append((slice(pos, pos + r * c), slice(pos + r * c, pos + r * c + r), r, c))
        pos += r * c + r
    return out


def _features(theta, widths, X):
    """Inputs to the output layer: last hidden activations (the raw X when L = 0)."""
    h = X
    for ws, bs, r, c in _layer_slices(widths)[:-1]:
        h = np.maximum(h @ theta[ws].reshape(r, c).T + theta[bs], 0.0)
    return h


def _embed_index(shape_small, shape_big):
    """Positions in the bigger flat vector of each coordinate of the smaller one
    (units are appended at the end of every hidden layer)."""
    ws, wb = shape_small.widths, shape_big.widths
    idx, pos = [], 0
    for l in range(1, len(wb)):
        r, c = wb[l], wb[l - 1]
        rs, cs = ws[l], ws[l - 1]
        rows = np.arange(rs)[:, None] * c + np.arange(cs)[None, :]
        idx.append(pos + rows.ravel())
        idx.append(pos + r * c + np.arange(rs))
        pos += r * c + r
    return np.concatenate(idx)


# state and target


@dataclass
class _State:
    shape: NetShape
    theta: np.ndarray
    gamma: np.ndarray | None
    sigma: float
    H: np.ndarray | None = None
    G: np.ndarray | None = None
    r: np.ndarray | None = None
    loglik: float = 0.0
    logprior: float = 0.0

    def copy(self):
        return _State(self.shape, self.theta.copy(), None if self.gamma is None else self.gamma.copy(),
                      self.sigma, self.H, self.G, self.r, self.loglik, self.logprior)

    @property
    def n_out(self):
        return self.shape.widths[-2] + 1

    @property
    def S(self):
        return int(self.gamma.sum())


class _Model:
    """Log target pieces for one prior family on one dataset."""

    def __init__(self, data, prior, collapse, adaptive=None, sigma_free=True):
        self.data = data
        self.prior = prior
        self.adaptive = adaptive
        self.spike_slab = prior.family == "spike_slab"
        self.collapsed = bool(collapse and self.spike_slab and prior.slab.kind == "gaussian"
                              and data.kind == "regression")
        self.v = prior.slab.param if prior.slab.kind == "gaussian" else None
        self.yy = float(data.Y @ data.Y)
        self.sigma_free = sigma_free
        self.beta = 1.0

    def explicit(self, st):
        """Boolean mask of coordinates whose values are stored (not integrated out)."""
        T = st.shape.T
        ex = np.ones(T, dtype=bool)
        if self.collapsed:
            ex[T - st.n_out:] = False
        return ex

    def refresh_features(self, st):
        X = self.data.X
        H = _features(st.theta, st.shape.widths, X)
        Phi = np.hstack([H, np.ones((len(X), 1))])
        st.H = Phi
        st.G = Phi.T @ Phi
        st.r = Phi.T @ self.data.Y

    def _marginal(self, st):
        n, sigma, v = self.data.n, st.sigma, self.v
        if n == 0:
            return 0.0
        base = -0.5 * n * LOG_2PI - n * math.log(sigma)
        T = st.shape.T
        act = np.flatnonzero(st.gamma[T - st.n_out:])
        if act.size == 0:
            return base - self.yy / (2 * sigma**2)
        G = st.G[np.ix_(act, act)]
        r = st.r[act]
        M = G + (sigma**2 / v) * np.eye(act.size)
        cf = linalg.cho_factor(M, lower=True)
        logdet = 2 * float(np.sum(np.log(np.diag(cf[0])))) + act.size * math.log(v / sigma**2)
        quad = float(r @ linalg.cho_solve(cf, r))
        return base - 0.5 * logdet - (self.yy - quad) / (2 * sigma**2)

    def compute_loglik(self, st):
        if self.collapsed:
            return self._marginal(st)
        if self.data.n == 0:
            return 0.0
        theta = st.theta
        T = st.shape.T
        out = theta[T - st.n_out:]
        fx = st.H @ out
        return _loglik_values(fx, st.sigma, self.data)

    def compute_logprior(self, st):
        prior = self.prior
        lp = prior.sigma.logpdf(st.sigma) if self.sigma_free else 0.0
        if lp == -math.inf:
            return lp
        shape = st.shape
        T = shape.T
        if self.spike_slab:
            S = st.S
            lp -= special.gammaln(T + 1) - special.gammaln(S + 1) - special.gammaln(T - S + 1)
            use = st.gamma & self.explicit(st)
            lp += float(np.sum(prior.slab.logpdf(st.theta[use])))
        else:
            lp += float(np.sum(prior.logpdf(st.theta, shape)))
        if self.adaptive is not None:
            lp += self.adaptive.log_pmf_D(shape.D)
            if self.spike_slab:
                lp += self.adaptive.log_pmf_S_given_D(st.S, shape.D, shape.d, shape.L)
        return lp

    def evaluate(self, st, features=True):
        if features:
            self.refresh_features(st)
        st.logprior = self.compute_logprior(st)
        st.loglik = self.compute_loglik(st) if st.logprior > -math.inf else -math.inf
        return st

    def target(self, st):
        return st.logprior + self.beta * st.loglik

    def draw_output(self, rng, st):
        """Full conditional draw of the integrated-out output weights."""
        theta = st.theta.copy()
        T = st.shape.T
        act = np.flatnonzero(st.gamma[T - st.n_out:])
        theta[T - st.n_out:] = 0.0
        if act.size:
            sigma, v = st.sigma, self.v
            M = st.G[np.ix_(act, act)] + (sigma**2 / v) * np.eye(act.size)
            Lc = np.linalg.cholesky(M)
            mean = linalg.cho_solve((Lc, True), st.r[act])
            z = rng.normal(size=act.size)
            # covariance sigma^2 M^{-1}: solve L^T x = z
            dev = sigma * linalg.solve_triangular(Lc.T, z, lower=False)
            theta[T - st.n_out + act] = mean + dev
        return theta


# moves: each returns (proposal, log q(old|new) - log q(new|old)) or None to skip


def _touches_hidden(model, st, coords):
    T = st.shape.T
    return np.any(np.asarray(coords) < T - st.n_out)


def _move_swap(rng, model, st, steps, cfg):
    T, S = st.shape.T, st.S
    if S == 0 or S == T:
        return None
    act = np.flatnonzero(st.gamma)
    ina = np.flatnonzero(~st.gamma)
    i = int(act[rng.integers(len(act))])
    j = int(ina[rng.integers(len(ina))])
    new = st.copy()
    ex = model.explicit(st)
    log_q = 0.0
    new.gamma[i], new.gamma[j] = False, True
    if ex[i]:
        log_q += float(model.prior.slab.logpdf(st.theta[i]))
    new.theta[i] = 0.0
    if ex[j]:
        new.theta[j] = float(model.prior.slab.sample(rng))
        log_q -= float(model.prior.slab.logpdf(new.theta[j]))
    return new, log_q, (_touches_hidden(model, st, [i, j]) or not model.collapsed)


def _move_walk(rng, model, st, steps, cfg):
    if model.spike_slab:
        pool = np.flatnonzero(st.gamma & model.explicit(st))
    else:
        pool = np.arange(st.shape.T)
    if pool.size == 0:
        return None
    k = min(cfg.walk_block, pool.size)
    pick = rng.choice(pool, size=k, replace=False)
    new = st.copy()
    new.theta[pick] += steps["walk"] * rng.normal(size=k)
    return new, 0.0, (_touches_hidden(model, st, pick) or not model.collapsed)


def _reflect(x, lo, hi):
    width = hi - lo
    y = (x - lo) % (2 * width)
    return lo + (y if y <= width else 2 * width - y)


def _move_sigma(rng, model, st, steps, cfg):
    lo, hi = model.prior.sigma.lo, model.prior.sigma.hi
    new = st.copy()
    new.sigma = _reflect(st.sigma + steps["sigma"] * rng.normal(), lo, hi)
    return new, 0.0, False


def _move_refresh(rng, model, st, steps, cfg):
    T = st.shape.T
    k = min(cfg.walk_block, T)
    pick = rng.choice(T, size=k, replace=False)
    new = st.copy()
    new.theta[pick] = model.prior.sample(rng, st.shape, k)
    log_q = float(np.sum(model.prior.logpdf(st.theta[pick], st.shape)) -
                  np.sum(model.prior.logpdf(new.theta[pick], st.shape)))
    return new, log_q, True


def _resize(model, st, D_new):
    shape = st.shape
    big, small = (NetShape(shape.d, shape.L, D_new), shape) if D_new > shape.D else (shape, NetShape(shape.d, shape.L, D_new))
    idx = _embed_index(small, big)
    return big, small, idx


def _move_width(rng, model, st, up):
    shape = st.shape
    ad = model.adaptive
    if shape.L == 0:
        return None
    D_new = shape.D + (1 if up else -1)
    if D_new < 1 or D_new > ad.D_max:
        return "reject"
    big, small, idx = _resize(model, st, D_new)
    new = st.copy()
    log_q = 0.0
    extra = np.ones(big.T, dtype=bool)
    extra[idx] = False
    if up:
        theta = np.zeros(big.T)
        theta[idx] = st.theta
        if model.spike_slab:
            gamma = np.zeros(big.T, dtype=bool)
            gamma[idx] = st.gamma
            new.gamma = gamma
        else:
            u = model.prior.sample(rng, big, int(extra.sum()))
            theta[extra] = u
            log_q -= float(np.sum(model.prior.logpdf(u, big)))
        new.shape, new.theta = big, theta
    else:
        if model.spike_slab:
            if np.any(st.gamma[extra]):
                return "reject"
            new.gamma = st.gamma[idx].copy()
        else:
            log_q += float(np.sum(model.prior.logpdf(st.theta[extra], big)))
        new.shape, new.theta = small, st.theta[idx].copy()
    return new, log_q, True


def _move_sparsity(rng, model, st, up):
    T, S = st.shape.T, st.S
    ex = model.explicit(st)
    new = st.copy()
    slab = model.prior.slab
    if up:
        ina = np.flatnonzero(~st.gamma)
        if ina.size == 0:
            return "reject"
        j = int(ina[rng.integers(ina.size)])
        new.gamma[j] = True
        log_q = math.log(T - S) - math.log(S + 1)
        if ex[j]:
            new.theta[j] = float(slab.sample(rng))
            log_q -= float(slab.logpdf(new.theta[j]))
        touched = [j]
    else:
        if S <= 1:
            return "reject"
        act = np.flatnonzero(st.gamma)
        i = int(act[rng.integers(act.size)])
        new.gamma[i] = False
        log_q = math.log(S) - math.log(T - S + 1)
        if ex[i]:
            log_q += float(slab.logpdf(st.theta[i]))
        new.theta[i] = 0.0
        touched = [i]
    return new, log_q, (_touches_hidden(model, st, touched) or not model.collapsed)


def _move_shape(rng, model, st, steps, cfg):
    up = bool(rng.integers(2))
    if model.spike_slab and rng.integers(2):
        return _move_sparsity(rng, model, st, up)
    return _move_width(rng, model, st, up)


_MOVE_FNS = {"swap": _move_swap, "walk": _move_walk, "sigma": _move_sigma, "refresh": _move_refresh,
             "shape": _move_shape}


def _batch_se(x, n_batches=20):
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2 * n_batches:
        return float(np.std(x, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    b = n // n_batches
    means = x[: b * n_batches].reshape(n_batches, b).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


def batch_means_se(x, n_batches=20):
    """Monte Carlo standard error of a chain average by non-overlapping batch means."""
    return _batch_se(x, n_batches)


def _run(data, prior, shape, cfg, supported, adaptive=None, init=None, sigma_fixed=None):
    rng = np.random.default_rng(cfg.seed)
    sigma_free = data.kind == "regression" and sigma_fixed is None
    if not sigma_free:
        supported = [m for m in supported if m != "sigma"]
    model = _Model(data, prior, cfg.collapse, adaptive, sigma_free)
    names, probs = cfg.move_table(supported)

    if init is None:
        theta, gamma, sigma, _ = sample_prior(rng, prior, shape)
    else:
        theta, gamma, sigma = init
    if sigma_fixed is not None:
        sigma = float(sigma_fixed)
    elif data.kind == "classification":
        sigma = 1.0
    st = _State(shape, np.asarray(theta, dtype=float).copy(), None if gamma is None else np.asarray(gamma, bool).copy(),
                float(sigma))
    if model.collapsed:
        st.theta[st.shape.T - st.n_out:] = 0.0
    model.evaluate(st)

    steps = dict(cfg.steps)
    log_steps = {k: math.log(v) for k, v in steps.items()}
    window = {m: [0, 0] for m in names}
    totals = {m: [0, 0] for m in names}
    samples = []
    for t in range(cfg.iterations):
        burning = t < cfg.burn_in
        if cfg.temper and burning and data.n:
            model.beta = min(1.0, 0.1 + 0.9 * t / max(1, cfg.burn_in // 2))
        else:
            model.beta = 1.0
        cur = model.target(st)
        move = names[int(rng.choice(len(names), p=probs))]
        prop = _MOVE_FNS[move](rng, model, st, steps, cfg)
        if prop is None:
            pass
        else:
            accepted = False
            if prop != "reject":
                new, log_q, refresh = prop
                model.evaluate(new, features=refresh or new.H is None)
                if not refresh:
                    new.H, new.G, new.r = st.H, st.G, st.r
                log_a = model.target(new) - cur + log_q
                if math.log(rng.uniform()) < log_a:
                    st = new
                    accepted = True
            window[move][0] += accepted
            window[move][1] += 1
            totals[move][0] += accepted
            totals[move][1] += 1
            if cfg.tune and burning and move in log_steps and window[move][1] >= 50:
                rate = window[move][0] / window[move][1]
                cap = math.log(model.prior.sigma.hi - model.prior.sigma.lo) if move == "sigma" else math.log(10.0)
                log_steps[move] = min(log_steps[move] + rate - cfg.target_accept, cap)
                steps[move] = math.exp(log_steps[move])
                window[move] = [0, 0]
        if not burning and (t - cfg.burn_in) % cfg.thin == 0:
            theta = model.draw_output(rng, st) if model.collapsed else st.theta.copy()
            gamma = None if st.gamma is None else st.gamma.copy()
            samples.append(PosteriorSample(theta, gamma, st.sigma, model.target(st), st.shape,
                                           st.S if st.gamma is not None else None))
    acceptance = {m: (a / p if p else math.nan) for m, (a, p) in totals.items()}
    return ChainResult(samples, acceptance, steps, cfg.iterations)


def run_spike_slab_sampler(data, shape, spec, chain, init=None, sigma_fixed=None):
    """Fixed-shape spike-and-slab posterior: swap, walk and sigma moves."""
    if spec.family != "spike_slab" or spec.S is None:
        raise ValueError("need a spike-and-slab prior with a set sparsity level")
    if shape.d != data.d:
        raise ValueError("network input dimension does not match the data")
    return _run(data, spec, shape, chain, ("swap", "walk", "sigma"), init=init, sigma_fixed=sigma_fixed)


def run_shrinkage_sampler(data, shape, spec, chain, init=None, sigma_fixed=None):
    """Continuous shrinkage posterior: blockwise walk, prior refresh and sigma moves."""
    if spec.family != "shrinkage":
        raise ValueError("need a shrinkage prior")
    if shape.d != data.d:
        raise ValueError("network input dimension does not match the data")
    return _run(data, spec, shape, chain, ("walk", "refresh", "sigma"), init=init, sigma_fixed=sigma_fixed)


def run_adaptive_sampler(data, spec, chain, n=None, init_D=None, init_S=None, sigma_fixed=None):
    """Posterior over width (and sparsity) with hyperpriors at a fixed depth.

    Width changes add or remove the last unit of every hidden layer.  With
    spike-and-slab the new unit is inactive (all zeros) and a unit can only
    be removed when it is inactive; with shrinkage the new coordinates are
    drawn from the prior and that density enters the acceptance ratio.
    ``n`` sets the depth ceil(C_L log n) and defaults to the data size.
    """
    if spec.family != "adaptive":
        raise ValueError("need an adaptive prior")
    n_depth = max(data.n if n is None else n, 1)
    L = spec.depth(n_depth)
    rng = np.random.default_rng(chain.seed)
    base = spec.base
    if init_D is None:
        # start from a hyperprior draw so the chain begins at stationarity
        theta, gamma, sigma, shape = sample_prior(rng, spec, n=n_depth, d=data.d)
        if spec.with_sparsity:
            base = base.with_S(int(gamma.sum()))
    else:
        shape = NetShape(data.d, L, init_D)
        if spec.with_sparsity:
            base = base.with_S(min(init_S or 1, shape.T))
        theta, gamma, sigma, _ = sample_prior(rng, base, shape)
    supported = ("swap", "walk", "sigma", "shape") if spec.with_sparsity else ("walk", "refresh", "sigma", "shape")
    return _run(data, base, shape, chain, supported, adaptive=spec, init=(theta, gamma, sigma),
                sigma_fixed=sigma_fixed)


def posterior_summary(samples, x_grid, quantiles=(0.1, 0.5, 0.9), clip=False):
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to summarise")
    x_grid = np.atleast_2d(np.asarray(x_grid, dtype=float))
    preds = np.stack([s.network().with_clip(clip)(x_grid) for s in samples])
    qs = np.quantile(preds, quantiles, axis=0)
    return {
        "mean": preds.mean(axis=0),
        "quantiles": {float(q): qs[i] for i, q in enumerate(quantiles)},
        "mean_sigma": float(np.mean([s.sigma for s in samples])),
        "mean_sigma_sq": float(np.mean([s.sigma**2 for s in samples])),
    }


def posterior_mean_function(samples, clip=False):
    nets = [s.network().with_clip(clip) for s in samples]

    def f(x):
        return np.mean([net(x) for net in nets], axis=0)

    return f
