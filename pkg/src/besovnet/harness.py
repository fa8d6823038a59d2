"""Error metrics, contraction-rate experiments and rate-slope fitting."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import besov_synth as bs
from .constructive_approx import hyperparams_for_n
from .inference import (
    ChainConfig,
    run_adaptive_sampler,
    run_shrinkage_sampler,
    run_spike_slab_sampler,
    sigmoid,
    synth_data,
)
from .priors import NetShape, prior_from_dict
from .serial import DocumentError, decode_real, require
from .spline_core import BesovParams, SmoothnessVector

CSV_COLUMNS = ("n", "replicate", "error_l2_px", "error_empirical", "error_sigma_sq", "error_misclass",
               "epsilon_n", "ratio", "seconds")


def _values(f, X):
    return np.asarray(f.evaluate(X) if hasattr(f, "evaluate") else f(X), dtype=float)


def _root_mean_square(sq):
    """sqrt(mean) of squared gaps with a delta-method standard error."""
    mean = float(np.mean(sq))
    value = math.sqrt(mean)
    if len(sq) < 2 or mean == 0:
        return value, 0.0
    se_mean = float(np.std(sq, ddof=1)) / math.sqrt(len(sq))
    return value, se_mean / (2 * value)


def metric_l2_px(f, f0, n_mc, rng):
    """Monte Carlo L2(P_X) distance under uniform P_X: (value, standard error)."""
    d = f0.d
    X = rng.uniform(size=(n_mc, d))
    return _root_mean_square((_values(f, X) - _values(f0, X)) ** 2)


def metric_empirical(f, f0, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    gap = _values(f, X) - _values(f0, X)
    return float(np.sqrt(np.mean(gap**2)))


@dataclass(frozen=True)
class MisclassReport:
    excess: float
    se: float
    bound: float
    bound_se: float

    @property
    def bound_holds(self):
        return self.excess <= self.bound + 3 * math.hypot(self.se, self.bound_se)


def metric_misclass_excess(f, f0, n_mc, rng):
    """Excess misclassification risk of x -> 1{sigmoid(f(x)) >= 1/2} over the
    Bayes classifier of f0, with the right-hand side 2 ||sigmoid(f) - sigmoid(f0)||.

    Both are computed from the same inputs: the excess at x is
    |2 eta0(x) - 1| when the two classifiers disagree and 0 otherwise.
    """
    X = rng.uniform(size=(n_mc, f0.d))
    eta = sigmoid(_values(f, X))
    eta0 = sigmoid(_values(f0, X))
    disagree = (eta >= 0.5) != (eta0 >= 0.5)
    gap = np.where(disagree, np.abs(2 * eta0 - 1), 0.0)
    excess = float(gap.mean())
    se = float(gap.std(ddof=1) / math.sqrt(n_mc)) if n_mc > 1 else 0.0
    l2, l2_se = _root_mean_square((eta - eta0) ** 2)
    return MisclassReport(excess, se, 2 * l2, 2 * l2_se)


def epsilon_n(n, s_tilde):
    return n ** (-s_tilde / (2 * s_tilde + 1)) * math.log(n) ** 1.5


def theoretical_exponent(s_tilde):
    return -s_tilde / (2 * s_tilde + 1)


# configuration


def target_from_config(doc, field="target"):
    """A target from either a full document or a generator block.

    Generators: ``additive`` (random univariate Besov-ball components of
    smoothness s0), ``spline_series`` (a random d-dimensional ball member),
    ``figure1`` (which = 1 | 2) and ``zero``.  An optional ``amplitude``
    multiplies the generated function (useful to strengthen the signal in
    classification).  Returns (target, s_tilde).
    """
    target, s_tilde = _target_from_config(doc, field)
    amp = decode_real(doc.get("amplitude", 1.0), f"{field}.amplitude")
    if amp != 1.0:
        if not (math.isfinite(amp) and amp > 0):
            raise DocumentError(f"{field}.amplitude", "expected a positive finite number")
        target = bs.TargetFunction(target.kind, target.d, target.payload, target.bound * amp, target.scale * amp)
    return target, s_tilde


def _target_from_config(doc, field):
    if "document" in doc:
        target = bs.TargetFunction.from_dict(doc["document"], f"{field}.document")
        return target, decode_real(require(doc, "s_tilde", field), f"{field}.s_tilde")
    gen = require(doc, "generator", field)
    seed = int(doc.get("seed", 0))
    rng = np.random.default_rng(seed)
    p = decode_real(doc.get("p", 2.0), f"{field}.p")
    q = decode_real(doc.get("q", "inf"), f"{field}.q")
    m = int(doc.get("m", 2))
    K = int(doc.get("K", 4))
    if gen == "additive":
        d = int(require(doc, "d", field))
        s0 = float(doc.get("s0", 1.0))
        params = BesovParams(p, q, SmoothnessVector((s0,)), m)
        g = []
        for _ in range(d):
            c = bs.sample_besov_ball(rng, params, K, float(doc.get("radius", 1.0)))
            g.append(c.scaled(1.0 / max(1.0, c.sup_bound())))
        return bs.make_additive(g), s0
    if gen == "spline_series":
        s = tuple(float(v) for v in require(doc, "s", field))
        params = BesovParams(p, q, SmoothnessVector(s), m)
        c = bs.sample_besov_ball(rng, params, K, float(doc.get("radius", 1.0)))
        return bs.spline_series(c, normalize=True), params.s.s_tilde
    if gen == "figure1":
        return bs.figure1_functions(int(doc.get("which", 2))), float(doc.get("s_tilde", 0.5))
    if gen == "zero":
        d = int(require(doc, "d", field))
        params = BesovParams(math.inf, math.inf, SmoothnessVector((1.0,) * d), 1)
        from .spline_core import SplineCoefficients

        return bs.spline_series(SplineCoefficients(params, {})), float(doc.get("s_tilde", 1.0))
    raise DocumentError(f"{field}.generator", f"unknown generator {gen!r}")


@dataclass
class ExperimentConfig:
    target: bs.TargetFunction
    s_tilde: float
    model: str
    n_grid: tuple
    replicates: int
    prior: object
    chain: ChainConfig
    sigma0: float = 0.2
    shape_constants: dict = field(default_factory=dict)
    n_mc: int = 20000
    seed: int = 0

    def __post_init__(self):
        grid = tuple(int(n) for n in self.n_grid)
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 2:
            raise ValueError("n_grid must be strictly increasing with entries >= 2")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.model not in ("regression", "classification"):
            raise ValueError(f"unknown model {self.model!r}")
        self.n_grid = grid

    @classmethod
    def from_dict(cls, doc):
        try:
            target, s_tilde = target_from_config(require(doc, "target"))
            chain = ChainConfig.from_dict(doc.get("chain", {}))
            return cls(
                target=target,
                s_tilde=float(doc.get("s_tilde", s_tilde)),
                model=doc.get("model", "regression"),
                n_grid=tuple(require(doc, "n_grid")),
                replicates=int(doc.get("replicates", 1)),
                prior=prior_from_dict(require(doc, "prior")),
                chain=chain,
                sigma0=float(doc.get("sigma0", 0.2)),
                shape_constants=dict(doc.get("shape", {})),
                n_mc=int(doc.get("n_mc", 20000)),
                seed=int(doc.get("seed", 0)),
            )
        except DocumentError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise DocumentError("<config>", str(exc)) from exc


@dataclass
class ExperimentResult:
    rows: list
    slope: float
    intercept: float
    stderr: float
    theoretical: float

    def to_summary(self, tolerance=0.15):
        return summary_document(self.rows, tolerance)


# experiment driver


def _fmt(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_rows(text):
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise DocumentError("header", f"expected columns {','.join(CSV_COLUMNS)}")
    for line in reader:
        row = {}
        for c in CSV_COLUMNS:
            v = line[c]
            if c in ("n", "replicate"):
                row[c] = int(v)
            else:
                row[c] = float(v) if v != "" else None
        rows.append(row)
    return rows


def _job_rng(seed, i, r):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, r)))


def _shape_for(cfg, n):
    budget = hyperparams_for_n(n, cfg.s_tilde, cfg.shape_constants, d=cfg.target.d)
    return NetShape(cfg.target.d, budget.L, budget.D), budget


def _posterior_fns(samples, kind):
    nets = [s.network() for s in samples]
    if kind == "regression":
        return lambda X: np.mean([net(X) for net in nets], axis=0)
    # averaged probability, returned on the logit scale so metrics can apply sigmoid again
    def logit_of_mean(X):
        eta = np.mean([sigmoid(net(X)) for net in nets], axis=0)
        eta = np.clip(eta, 1e-12, 1 - 1e-12)
        return np.log(eta) - np.log1p(-eta)
    return logit_of_mean


def run_job(cfg, i, r, timing=False):
    n = cfg.n_grid[i]
    start = time.perf_counter()
    rng = _job_rng(cfg.seed, i, r)
    data = synth_data(rng, cfg.target, n, cfg.sigma0 if cfg.model == "regression" else 0.0, cfg.model)
    chain_seed = int(rng.integers(2**63))
    chain = ChainConfig(**{**cfg.chain.__dict__, "seed": chain_seed})
    prior = cfg.prior
    if prior.family == "adaptive":
        res = run_adaptive_sampler(data, prior, chain)
    else:
        shape, budget = _shape_for(cfg, n)
        if prior.family == "spike_slab":
            S = prior.S if prior.S is not None else budget.S
            res = run_spike_slab_sampler(data, shape, prior.with_S(min(S, shape.T)), chain)
        else:
            res = run_shrinkage_sampler(data, shape, prior, chain)
    fhat = _posterior_fns(res.samples, cfg.model)
    row = {"n": n, "replicate": r}
    if cfg.model == "regression":
        row["error_l2_px"] = metric_l2_px(fhat, cfg.target, cfg.n_mc, rng)[0]
        row["error_empirical"] = metric_empirical(fhat, cfg.target, data.X)
        sig2 = float(np.mean([s.sigma**2 for s in res.samples]))
        row["error_sigma_sq"] = abs(sig2 - cfg.sigma0**2)
        row["error_misclass"] = None
    else:
        # distances between class probabilities
        eta_hat = lambda X: sigmoid(fhat(X))
        eta0 = lambda X: sigmoid(cfg.target.evaluate(X))
        X = rng.uniform(size=(cfg.n_mc, cfg.target.d))
        row["error_l2_px"] = float(np.sqrt(np.mean((eta_hat(X) - eta0(X)) ** 2)))
        row["error_empirical"] = float(np.sqrt(np.mean((eta_hat(data.X) - eta0(data.X)) ** 2)))
        row["error_sigma_sq"] = None
        row["error_misclass"] = metric_misclass_excess(fhat, cfg.target, cfg.n_mc, rng).excess
    row["epsilon_n"] = epsilon_n(n, cfg.s_tilde)
    row["ratio"] = row["error_l2_px"] / row["epsilon_n"]
    row["seconds"] = time.perf_counter() - start if timing else 0.0
    return row


def _failed_row(cfg, i, r, exc):
    n = cfg.n_grid[i]
    return {"n": n, "replicate": r, "error_l2_px": math.nan, "error_empirical": math.nan,
            "error_sigma_sq": math.nan, "error_misclass": None, "epsilon_n": epsilon_n(n, cfg.s_tilde),
            "ratio": math.nan, "seconds": 0.0, "failure": f"{type(exc).__name__}: {exc}"}


def run_contraction_experiment(cfg, threads=1, out_csv=None, timing=False, log=None):
    """Run every (n, replicate) job; rows are appended to ``out_csv + '.partial'``
    as they finish and the sorted CSV is written at the end.

    Each job draws from its own generator keyed by (seed, grid index,
    replicate), so results do not depend on the thread count.
    """
    jobs = [(i, r) for i in range(len(cfg.n_grid)) for r in range(cfg.replicates)]
    partial = None
    if out_csv is not None:
        partial = out_csv + ".partial"
        with open(partial, "w") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")

    def work(job):
        i, r = job
        try:
            row = run_job(cfg, i, r, timing)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            row = _failed_row(cfg, i, r, exc)
            if log:
                log(f"job n={cfg.n_grid[i]} replicate={r} failed: {row['failure']}")
        if partial is not None:
            line = rows_to_csv([row]).split("\n", 1)[1]
            with open(partial, "a") as fh:
                fh.write(line)
                fh.flush()
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, jobs))
    else:
        rows = [work(j) for j in jobs]
    rows.sort(key=lambda r: (r["n"], r["replicate"]))
    if out_csv is not None:
        tmp = out_csv + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(rows_to_csv(rows))
        os.replace(tmp, out_csv)
        os.remove(partial)
    theory = theoretical_exponent(cfg.s_tilde)
    try:
        fit = fit_rate(rows)
    except ValueError:
        # a single sample size, or too many failed jobs to fit a line
        return ExperimentResult(rows, math.nan, math.nan, math.nan, theory)
    return ExperimentResult(rows, fit["slope"], fit["intercept"], fit["stderr"], theory)


# rate fitting


def _exponent_from_epsilon(rows):
    """Recover -s/(2s+1) from the epsilon_n column (log eps = a log n + 1.5 log log n)."""
    pts = {(r["n"], r["epsilon_n"]) for r in rows if r.get("epsilon_n")}
    vals = [(math.log(e) - 1.5 * math.log(math.log(n))) / math.log(n) for n, e in pts if n > 1]
    return float(np.mean(vals)) if vals else math.nan


def fit_rate(rows, column="error_l2_px"):
    """Least-squares slope of log(mean error) on log(n) over the per-n replicate means."""
    by_n = {}
    for r in rows:
        v = r.get(column)
        if v is None or not math.isfinite(v):
            continue
        by_n.setdefault(int(r["n"]), []).append(v)
    ns = sorted(by_n)
    if len(ns) < 2:
        raise ValueError("need at least two sample sizes to fit a slope")
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray([np.mean(by_n[n]) for n in ns]))
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    resid = y - A @ coef
    if len(ns) > 2:
        s2 = float(resid @ resid) / (len(ns) - 2)
        stderr = math.sqrt(s2 / float(np.sum((x - x.mean()) ** 2)))
    else:
        stderr = math.nan
    return {"slope": slope, "intercept": intercept, "stderr": stderr,
            "theoretical": _exponent_from_epsilon(rows), "means": {n: float(np.mean(by_n[n])) for n in ns}}


def count_inversions(means):
    """Number of consecutive increases in a sequence ordered by n."""
    vals = [means[n] for n in sorted(means)]
    return sum(b > a for a, b in zip(vals, vals[1:]))


def summary_document(rows, tolerance=0.15):
    from .serial import encode_real

    fit = fit_rate(rows)
    ok = math.isfinite(fit["slope"]) and fit["slope"] <= fit["theoretical"] + tolerance
    return {
        "slope": fit["slope"],
        "stderr": encode_real(fit["stderr"]) if math.isfinite(fit["stderr"]) else None,
        "theoretical_exponent": fit["theoretical"],
        "pass": bool(ok),
        "intercept": fit["intercept"],
        "inversions": count_inversions(fit["means"]),
        "ratio_by_n": {str(n): float(np.mean([r["ratio"] for r in rows if r["n"] == n and r["ratio"] is not None]))
                       for n in fit["means"]},
    }
