"""Layered ReLU networks, exact clipping gadgets, parameter accounting and
the computable perturbation and covering-number bounds.

A network with ``L`` hidden layers is a list of ``L + 1`` affine maps with a
ReLU between consecutive maps and none after the last one.  Weight matrices
are dense arrays for sampler-sized networks; compiled approximants with
thousands of parallel blocks keep them as ``scipy.sparse`` CSR matrices,
which changes storage only, never the computed function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .serial import DocumentError, require

_AUTO_SPARSE_WIDTH = 512


def _freeze(a):
    if sp.issparse(a):
        a = sp.csr_matrix(a, dtype=float)
        a.sort_indices()
        return a
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a)


def _abs_max(a):
    if sp.issparse(a):
        return float(np.max(np.abs(a.data))) if a.nnz else 0.0
    return float(np.max(np.abs(a))) if a.size else 0.0


def _nnz(a):
    return int(a.count_nonzero()) if sp.issparse(a) else int(np.count_nonzero(a))


class Network:
    """Immutable ReLU network ``x -> A_{L+1} relu(... relu(A_1 x))``.

    ``layers`` is a sequence of ``(W, b)`` pairs, ``W`` of shape
    ``(d_l, d_{l-1})``.  With ``clip_output`` the result is clipped to [-1, 1].
    ``mask`` is an optional 0/1 vector over the flattened parameters (see
    :meth:`flat_params`) marking the active coordinates.
    """

    def __init__(self, layers, clip_output=False, mask=None):
        if len(layers) == 0:
            raise ValueError("a network needs at least one affine layer")
        frozen = []
        for n, (W, b) in enumerate(layers):
            W = _freeze(W)
            b = np.array(b, dtype=float).reshape(-1)
            b.setflags(write=False)
            if W.ndim != 2 or W.shape[0] != b.shape[0]:
                raise ValueError(f"layer {n}: weight shape {W.shape} and bias length {b.shape[0]} disagree")
            if frozen and frozen[-1][0].shape[0] != W.shape[1]:
                raise ValueError(f"layer {n}: expects {W.shape[1]} inputs, previous layer gives {frozen[-1][0].shape[0]}")
            frozen.append((W, b))
        self.layers = tuple(frozen)
        self.clip_output = bool(clip_output)
        if mask is not None:
            mask = np.asarray(mask, dtype=np.int8).reshape(-1)
            if mask.shape[0] != self.n_params:
                raise ValueError(f"mask has length {mask.shape[0]}, expected {self.n_params}")
            if not np.all((mask == 0) | (mask == 1)):
                raise ValueError("mask entries must be 0 or 1")
            if np.any(self.flat_params()[mask == 0] != 0):
                raise ValueError("parameters outside the mask must be exactly zero")
            mask.setflags(write=False)
        self.mask = mask

    # shape accounting
    @property
    def in_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def depth(self):
        """Number of hidden layers L."""
        return len(self.layers) - 1

    @property
    def widths(self):
        return [self.in_dim] + [W.shape[0] for W, _ in self.layers]

    @property
    def width(self):
        """D: the largest hidden width (0 for an affine map)."""
        return max(self.widths[1:-1], default=0)

    @property
    def n_params(self):
        w = self.widths
        return sum(w[l] * (w[l - 1] + 1) for l in range(1, len(w)))

    @property
    def sparsity(self):
        return sum(_nnz(W) + int(np.count_nonzero(b)) for W, b in self.layers)

    @property
    def sup_norm(self):
        return max(max(_abs_max(W), _abs_max(b)) for W, b in self.layers)

    @property
    def is_sparse(self):
        return any(sp.issparse(W) for W, _ in self.layers)

    def conforms(self, L=None, D=None, S=None, B=None):
        """Membership check in Theta(L, D, S, B) for the declared budgets."""
        return ((L is None or self.depth <= L) and (D is None or self.width <= D)
                and (S is None or self.sparsity <= S) and (B is None or self.sup_norm <= B))

    # evaluation
    def hidden(self, x):
        """Activations of the last hidden layer, shape (n, d_L)."""
        h = np.asarray(x, dtype=float)
        for W, b in self.layers[:-1]:
            h = np.maximum(_affine(W, b, h), 0.0)
        return h

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected inputs of dimension {self.in_dim}, got shape {x.shape}")
        W, b = self.layers[-1]
        out = _affine(W, b, self.hidden(x))
        if self.clip_output:
            out = np.clip(out, -1.0, 1.0)
        if self.out_dim == 1:
            out = out[:, 0]
        return out[0] if single else out

    __call__ = forward

    # parameter vector views
    def flat_params(self):
        parts = []
        for W, b in self.layers:
            parts.append(_dense(W).ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, widths, theta, clip_output=False, mask=None):
        theta = np.asarray(theta, dtype=float)
        layers, pos = [], 0
        for l in range(1, len(widths)):
            r, c = widths[l], widths[l - 1]
            W = theta[pos:pos + r * c].reshape(r, c)
            pos += r * c
            layers.append((W, theta[pos:pos + r]))
            pos += r
        if pos != theta.shape[0]:
            raise ValueError(f"parameter vector has length {theta.shape[0]}, widths need {pos}")
        return cls(layers, clip_output, mask)

    def with_clip(self, clip_output):
        return Network(self.layers, clip_output, self.mask)

    def to_dense(self):
        return Network([(_dense(W), b) for W, b in self.layers], self.clip_output, self.mask)

    def to_sparse(self):
        return Network([(sp.csr_matrix(_dense(W)), b) for W, b in self.layers], self.clip_output, self.mask)

    # documents
    def to_dict(self):
        doc = {
            "d": self.in_dim,
            "L": self.depth,
            "widths": self.widths,
            "clip": self.clip_output,
            "layers": [{"W": _dense(W).tolist(), "b": b.tolist()} for W, b in self.layers],
        }
        if self.mask is not None:
            doc["mask"] = self.mask.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc):
        d = require(doc, "d")
        L = require(doc, "L")
        widths = require(doc, "widths")
        clip = require(doc, "clip")
        raw = require(doc, "layers")
        if not isinstance(clip, bool):
            raise DocumentError("clip", "expected true or false")
        if not (isinstance(widths, list) and all(isinstance(w, int) and w > 0 for w in widths)):
            raise DocumentError("widths", "expected a list of positive integers")
        if not isinstance(raw, list) or len(raw) != len(widths) - 1:
            raise DocumentError("layers", f"expected {len(widths) - 1} layers")
        if L != len(widths) - 2 or d != widths[0]:
            raise DocumentError("widths", "inconsistent with d and L")
        layers = []
        for n, layer in enumerate(raw):
            path = f"layers[{n}]"
            try:
                W = np.array(require(layer, "W", path), dtype=float)
                b = np.array(require(layer, "b", path), dtype=float)
            except (TypeError, ValueError) as exc:
                raise DocumentError(path, f"non-numeric entries ({exc})") from exc
            if W.shape != (widths[n + 1], widths[n]) or b.shape != (widths[n + 1],):
                raise DocumentError(path, f"shape {W.shape}/{b.shape} does not match widths")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise DocumentError(path, "non-finite entries")
            layers.append((W, b))
        mask = doc.get("mask")
        try:
            return cls(layers, clip, mask)
        except ValueError as exc:
            raise DocumentError("mask", str(exc)) from exc


def _affine(W, b, h):
    if sp.issparse(W):
        return np.asarray((W @ h.T).T) + b
    return h @ W.T + b


def _vstack(mats, sparse):
    return sp.vstack(mats, format="csr") if sparse else np.vstack([_dense(m) for m in mats])


def _hstack(mats, sparse):
    return sp.hstack(mats, format="csr") if sparse else np.hstack([_dense(m) for m in mats])


def _block_diag(mats, sparse):
    if sparse:
        return sp.block_diag(mats, format="csr")
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = _dense(m)
        r += m.shape[0]
        c += m.shape[1]
    return out


def _matmul(A, B):
    if sp.issparse(A) or sp.issparse(B):
        return sp.csr_matrix(sp.csr_matrix(A) @ sp.csr_matrix(B))
    return A @ B


# building blocks


def affine_network(A, b):
    """Depth-0 network x -> A x + b."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return Network([(A, np.asarray(b, dtype=float).reshape(-1))])


def identity_network(dim, depth=1):
    """Exact identity through ``depth`` hidden layers via y = relu(y) - relu(-y)."""
    if depth == 0:
        return affine_network(np.eye(dim), np.zeros(dim))
    eye = np.eye(dim)
    first = (np.vstack([eye, -eye]), np.zeros(2 * dim))
    mid = [(np.eye(2 * dim), np.zeros(2 * dim))] * (depth - 1)
    last = (np.hstack([eye, -eye]), np.zeros(dim))
    return Network([first, *mid, last])


def compose(outer, inner):
    """outer(inner(x)); the adjoining affine maps are merged, so depth adds."""
    if outer.in_dim != inner.out_dim:
        raise ValueError(f"cannot feed {inner.out_dim} outputs into {outer.in_dim} inputs")
    (Wo, bo), (Wi, bi) = outer.layers[0], inner.layers[-1]
    W = _matmul(Wo, Wi)
    b = _affine(Wo, bo, bi[None, :])[0]
    layers = list(inner.layers[:-1]) + [(W, b)] + list(outer.layers[1:])
    return Network(layers, outer.clip_output)


def pad_depth(net, depth):
    """Append identity hidden layers so the network has exactly ``depth`` of them."""
    if net.depth > depth:
        raise ValueError("cannot shorten a network")
    if net.depth == depth:
        return net
    out = compose(identity_network(net.out_dim, depth - net.depth), net)
    return Network(out.layers, net.clip_output)


def parallel(nets, sparse=None):
    """Run networks side by side on the same input; outputs are concatenated.

    Shallower networks are padded with identity layers to the common depth.
    """
    nets = list(nets)
    if not nets:
        raise ValueError("need at least one network")
    d = nets[0].in_dim
    if any(n.in_dim != d for n in nets):
        raise ValueError("parallel networks must share the input dimension")
    depth = max(n.depth for n in nets)
    nets = [pad_depth(n, depth) for n in nets]
    if sparse is None:
        sparse = any(n.is_sparse for n in nets) or sum(n.width for n in nets) > _AUTO_SPARSE_WIDTH
    if len(nets) == 1:
        return nets[0].to_sparse() if sparse and not nets[0].is_sparse else nets[0]
    layers = []
    for l in range(depth + 1):
        Ws = [n.layers[l][0] for n in nets]
        if sparse:
            Ws = [sp.csr_matrix(W) for W in Ws]
        b = np.concatenate([n.layers[l][1] for n in nets])
        W = _vstack(Ws, sparse) if l == 0 else _block_diag(Ws, sparse)
        layers.append((W, b))
    return Network(layers)


def precompose_affine(net, A, b):
    """net(A x + b) with (A, b) folded into the first layer."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    W1, b1 = net.layers[0]
    if A.shape[0] != W1.shape[1]:
        raise ValueError("affine map output does not match the network input")
    W = _matmul(W1, A) if sp.issparse(W1) else W1 @ A
    layers = [(W, _affine(W1, b1, b[None, :])[0])] + list(net.layers[1:])
    return Network(layers, net.clip_output)


def postcompose_affine(net, C, c):
    """C net(x) + c folded into the last layer."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    WL, bL = net.layers[-1]
    W = _matmul(C, WL) if sp.issparse(WL) else C @ WL
    layers = list(net.layers[:-1]) + [(W, C @ bL + np.asarray(c, dtype=float).reshape(-1))]
    return Network(layers, net.clip_output)


def clip_gadget(F):
    """Exact Clip_F(x) = F[relu(x/F + 1) - relu(x/F - 1)] - F with two ReLUs."""
    if not F > 0:
        raise ValueError("clip level must be positive")
    F = float(F)
    return Network([(np.array([[1.0 / F], [1.0 / F]]), np.array([1.0, -1.0])),
                    (np.array([[F, -F]]), np.array([-F]))])


def clip01_gadget(dim=1):
    """Exact coordinatewise clipping to [0, 1]: relu(x) - relu(x - 1)."""
    eye = np.eye(dim)
    return Network([(np.vstack([eye, eye]), np.concatenate([np.zeros(dim), -np.ones(dim)])),
                    (np.hstack([eye, -eye]), np.zeros(dim))])


def param_count(L, D, d):
    widths = [d] + [D] * L + [1]
    return sum(widths[l] * (widths[l - 1] + 1) for l in range(1, len(widths)))


# bounds


def log_lipschitz_param_bound(L, D, B, eps):
    if eps == 0:
        return -math.inf
    return math.log(eps) + math.log(L) + (L - 1) * math.log(max(B, 1.0)) + L * math.log(D + 1)


def lipschitz_param_bound(L, D, B, eps):
    """Sup-norm change of f_theta when every parameter moves by at most eps.

    Here L counts the affine maps of the network (hidden layers + 1), which is
    how the bound is derived; pass ``net.depth + 1``.
    """
    if eps < 0 or L < 1 or D < 0:
        raise ValueError("need eps >= 0, L >= 1, D >= 0")
    lg = log_lipschitz_param_bound(L, D, B, eps)
    if lg == -math.inf:
        return 0.0
    return math.exp(lg) if lg < 709 else math.inf


@dataclass(frozen=True)
class CoveringBound:
    value: float
    valid: bool
    margin_valid: bool | None = None


def covering_bound(eps, L, D, S, B, margin=None):
    """log covering number bound (S+1) log(2 eps^-1 L (B v 1)^L (D+1)^{2L}).

    ``valid`` flags the D >= 3, L >= 3 hypothesis.  With ``margin`` = a, the
    margin variant's condition eps >= 2 a L (B v 1)^{L-1} (D+1)^L is reported
    in ``margin_valid``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    Bv = max(B, 1.0)
    inner = math.log(2) - math.log(eps) + math.log(L) + L * math.log(Bv) + 2 * L * math.log(D + 1)
    margin_valid = None
    if margin is not None:
        margin_valid = bool(margin == 0 or math.log(eps) >= math.log(2 * margin) + math.log(L)
                            + (L - 1) * math.log(Bv) + L * math.log(D + 1))
    return CoveringBound((S + 1) * inner, D >= 3 and L >= 3, margin_valid)


def vc_covering_bound(eps, L, S, p, C_V1=1.0, C_V2=1.0, K=1.0):
    """C_V1 L S log S log(K / eps^p) + log(C_V2 L S log S); constants are caller-supplied."""
    lss = L * S * math.log(S)
    return C_V1 * lss * (math.log(K) - p * math.log(eps)) + math.log(C_V2 * lss)


class RescaleInfeasible(ValueError):
    def __init__(self, target_B, min_B):
        self.target_B = target_B
        self.min_B = min_B
        super().__init__(f"cannot reach sup-norm {target_B}; the smallest achievable is {min_B:.6g}")


def _min_sup_norm_scales(net):
    """Solve for log cumulative scales y_1..y_L minimising the largest layer norm.

    Layer l's weights scale by exp(y_l - y_{l-1}) and its bias by exp(y_l),
    with y_0 = y_{L+1} = 0, which leaves the computed function unchanged.
    """
    L = net.depth
    rows, rhs = [], []
    for l, (W, b) in enumerate(net.layers, start=1):
        for norm, with_prev in ((_abs_max(W), True), (_abs_max(b), False)):
            if norm == 0:
                continue
            row = np.zeros(L + 1)
            row[L] = -1.0
            if l <= L:
                row[l - 1] += 1.0
            if with_prev and l >= 2:
                row[l - 2] -= 1.0
            rows.append(row)
            rhs.append(-math.log(norm))
    if not rows:
        return np.zeros(L), 0.0
    c = np.zeros(L + 1)
    c[L] = 1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(None, None)] * (L + 1),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"rescaling program failed: {res.message}")
    return res.x[:L], float(res.x[L])


def rescale_weights(net, target_B=None):
    """Redistribute layer scales (positive homogeneity of ReLU) to shrink the sup-norm.

    Returns ``net`` unchanged when it already meets ``target_B``.  Otherwise the
    per-layer factors minimise the largest layer sup-norm, which equalises the
    layers geometrically.  Raises :class:`RescaleInfeasible` with the smallest
    achievable sup-norm when the target cannot be met.
    """
    if target_B is not None and net.sup_norm <= target_B:
        return net
    if net.depth == 0:
        if target_B is None:
            return net
        raise RescaleInfeasible(target_B, net.sup_norm)
    y, t = _min_sup_norm_scales(net)
    min_B = math.exp(t)
    if target_B is not None and min_B > target_B * (1 + 1e-12):
        raise RescaleInfeasible(target_B, min_B)
    ys = np.concatenate([[0.0], y, [0.0]])
    layers = []
    for l, (W, b) in enumerate(net.layers, start=1):
        wf = math.exp(ys[l] - ys[l - 1])
        layers.append((W * wf, b * math.exp(ys[l])))
    return Network(layers, net.clip_output, net.mask)


@dataclass(frozen=True)
class ShapeBudget:
    """Target network shape (L, D, S, B) from a hyperparameter schedule."""

    L: int
    D: int
    S: int
    B: float

    def __post_init__(self):
        if min(self.L, self.D, self.S) < 1 or not self.B > 0:
            raise ValueError(f"shape budget entries must be positive, got {self}")

    def n_params(self, d):
        return param_count(self.L, self.D, d)
