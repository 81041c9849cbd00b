"""Learning unions of unitary sparsifying transforms with joint clustering.

Training alternates two exact block updates of

    sum_k sum_{i in C_k} ||W_k y_i - z_i||^2 + eta^2 ||z_i||_0,   W_k^T W_k = I

* clustering and sparse coding: each vector goes to the transform with the
  lowest thresholding cost and its code is the hard-thresholded transform;
* transform update: each class solves an orthogonal Procrustes problem.

Both steps can only lower the objective, so the recorded trace is
non-increasing.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from . import _parallel
from .core_types import (DimensionError, MaterialImagePair, MultraModel, PatchConfig,
                         TransformUnion, UnionKind, UnitaryTransform, ValidationError,
                         _ParamsMixin)
from .patch_ops import extract_channel, extract_patches, hard_threshold, sparsify_cost

log = logging.getLogger(__name__)


class Init(str, enum.Enum):
    DCT_ROTATIONS = "dct_rotations"
    RANDOM_ORTHONORMAL = "random_orthonormal"


@dataclass(frozen=True)
class LearningParams(_ParamsMixin):
    K: int
    eta: float
    iterations: int = 2000
    seed: int = 0
    init: str = Init.DCT_ROTATIONS.value

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("K must be >= 1")
        if not self.eta > 0:
            raise ValidationError("eta must be > 0")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        Init(self.init)


# Published training settings for the two unions.
COMMON_DEFAULTS = LearningParams(K=15, eta=0.21)
CROSS_DEFAULTS = LearningParams(K=10, eta=0.17)


@dataclass(frozen=True, eq=False)
class LearningTrace:
    """P1 objective after each clustering step and after each transform step."""

    after_clustering: np.ndarray
    after_update: np.ndarray
    empty_reseeds: int = 0

    def interleaved(self) -> np.ndarray:
        out = np.empty(2 * len(self.after_update))
        out[0::2] = self.after_clustering
        out[1::2] = self.after_update
        return out

    @property
    def final(self) -> float:
        return float(self.after_update[-1]) if len(self.after_update) else float(
            self.after_clustering[-1])


# ---------------------------------------------------------------------------
# initialization

def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``D`` with ``D @ x == dct(x, norm='ortho')``."""
    return dct(np.eye(n), norm="ortho", axis=0)


def separable_dct(side: int, channels: int = 1) -> np.ndarray:
    """Separable DCT acting on row-major ``side x side`` patches.

    With ``channels=2`` an extra 2-point DCT runs across the stacked
    materials.
    """
    d = np.kron(dct_matrix(side), dct_matrix(side))
    if channels > 1:
        d = np.kron(dct_matrix(channels), d)
    return d


def random_givens(d: int, rng: np.random.Generator, n_rot: int | None = None,
                  max_angle: float = np.pi / 4) -> np.ndarray:
    """Product of ``n_rot`` (default ``d``) Givens rotations in random planes."""
    g = np.eye(d)
    if d < 2:
        return g
    for _ in range(d if n_rot is None else n_rot):
        i, j = rng.choice(d, size=2, replace=False)
        t = rng.uniform(-max_angle, max_angle)
        c, s = np.cos(t), np.sin(t)
        ri, rj = g[i].copy(), g[j].copy()
        g[i] = c * ri - s * rj
        g[j] = s * ri + c * rj
    return g


def random_orthonormal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def initial_transforms(d: int, K: int, seed: int, init=Init.DCT_ROTATIONS) -> np.ndarray:
    """Seeded ``(K, d, d)`` stack of distinct unitary starting transforms."""
    rng = np.random.default_rng(seed)
    init = Init(init)
    if init is Init.RANDOM_ORTHONORMAL:
        return np.stack([random_orthonormal(d, rng) for _ in range(K)])
    side = int(round(np.sqrt(d)))
    if side * side == d:
        base = separable_dct(side)
    elif d % 2 == 0 and (s := int(round(np.sqrt(d // 2)))) ** 2 == d // 2:
        base = separable_dct(s, channels=2)
    else:
        base = dct_matrix(d)
    return np.stack([random_givens(d, rng) @ base for _ in range(K)])


# ---------------------------------------------------------------------------
# the two block updates

def _best_transform(Y: np.ndarray, stack: np.ndarray, eta: float):
    """Per-row argmin of the thresholding cost; returns (assign, cost, best U)."""
    def work(a, b):
        y = Y[a:b]
        best = np.full(b - a, np.inf)
        assign = np.zeros(b - a, dtype=np.int64)
        best_u = np.empty_like(y)
        for k in range(stack.shape[0]):
            u = y @ stack[k].T
            c = sparsify_cost(u, eta)
            better = c < best  # strict, so ties keep the lowest class index
            best[better] = c[better]
            assign[better] = k
            best_u[better] = u[better]
        return assign, best, best_u

    parts = _parallel.map_chunks(work, Y.shape[0])
    if not parts:
        return (np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros((0, stack.shape[1])))
    return tuple(np.concatenate(p) for p in zip(*parts))


def cluster_and_code(Y, union, eta: float, return_costs: bool = False):
    """Assign each vector to its best transform and hard-threshold its code.

    Parameters
    ----------
    Y : (n, d) array_like
        Training vectors, one per row.
    union : TransformUnion or (K, d, d) array
    eta : float
        Sparsity threshold.

    Returns
    -------
    assign : (n,) int array
        Zero-based class index; ties go to the lowest index.
    Z : (n, d) array
        ``hard_threshold(W_assign @ y, eta)`` per row.
    costs : (n,) array, optional
        Per-vector minimum cost, returned when ``return_costs`` is set.
    """
    stack = union.stack() if isinstance(union, TransformUnion) else np.asarray(union)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] != stack.shape[-1]:
        raise DimensionError(
            f"vectors of shape {Y.shape} do not match transform dim {stack.shape[-1]}")
    assign, costs, best_u = _best_transform(Y, stack, eta)
    Z = hard_threshold(best_u, eta)
    return (assign, Z, costs) if return_costs else (assign, Z)


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    # make the largest-magnitude entry of each column positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def _procrustes(M: np.ndarray) -> np.ndarray:
    """Unitary ``W`` maximizing ``trace(W @ M)``, i.e. ``V @ U.T`` for ``M = U S V^T``."""
    U, s, Vt = np.linalg.svd(M)
    V = Vt.T
    tol = s[0] * max(M.shape) * np.finfo(float).eps if s.size and s[0] > 0 else 0.0
    null = s <= tol
    if np.any(null):
        U[:, null] = _sign_fix(U[:, null])
        V[:, null] = _sign_fix(V[:, null])
    return V @ U.T


def procrustes_update(Y_k, Z_k) -> UnitaryTransform:
    """Closed-form unitary minimizer of ``||W Y_k - Z_k||_F^2``.

    Parameters
    ----------
    Y_k, Z_k : (d, n) array_like
        Data and codes of one cluster, one vector per column.
    """
    Y_k = np.asarray(Y_k, dtype=np.float64)
    Z_k = np.asarray(Z_k, dtype=np.float64)
    if Y_k.shape != Z_k.shape or Y_k.ndim != 2:
        raise DimensionError("data and codes must be equally shaped d x n matrices")
    return UnitaryTransform(_procrustes(Y_k @ Z_k.T))


def _reseed(W: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Reflect ``W`` so that ``y`` becomes 1-sparse under it."""
    u = W @ y
    norm = np.linalg.norm(u)
    if norm == 0:
        return W
    i = int(np.argmax(np.abs(u)))
    target = np.zeros_like(u)
    target[i] = norm if u[i] >= 0 else -norm
    v = u - target
    vv = v @ v
    if vv <= (1e-14 * norm) ** 2:
        return W
    return W - np.outer(v, (2.0 / vv) * (v @ W))


def p1_objective(Y, stack, assign, Z, eta) -> float:
    """Total P1 cost of a clustering with given codes."""
    def work(a, b):
        tot = 0.0
        for k in np.unique(assign[a:b]):
            sel = np.flatnonzero(assign[a:b] == k) + a
            r = Y[sel] @ stack[k].T - Z[sel]
            tot += float(np.sum(r * r))
        return tot + eta * eta * float(np.count_nonzero(Z[a:b]))
    return float(sum(_parallel.map_chunks(work, Y.shape[0])))


def _transform_step(Y, stack, assign, Z, costs):
    K = stack.shape[0]
    members = [np.flatnonzero(assign == k) for k in range(K)]

    def update(k):
        idx = members[k]
        if idx.size == 0:
            return None
        return _procrustes(Y[idx].T @ Z[idx])

    new = _parallel.map_items(update, list(range(K)))
    empty = [k for k in range(K) if new[k] is None]
    out = stack.copy()
    for k in range(K):
        if new[k] is not None:
            out[k] = new[k]
    if empty:
        order = np.argsort(-costs, kind="stable")
        for k, i in zip(empty, order):
            out[k] = _reseed(stack[k], Y[i])
    return out, len(empty)


def learn_union(Y, params: LearningParams, kind=None, return_trace: bool = False):
    """Learn a union of ``params.K`` unitary transforms from training vectors.

    Parameters
    ----------
    Y : (n, d) array_like
        Training vectors (rows).  ``n >= K`` is required.
    params : LearningParams
    kind : UnionKind, optional
        Inferred from ``d`` when omitted: ``common_2d`` if ``d`` is a perfect
        square, else ``cross_3d``.
    return_trace : bool
        Also return the :class:`LearningTrace`.

    Notes
    -----
    A class that receives no vectors keeps its (irrelevant) transform but is
    reflected so the currently worst-fit vector becomes 1-sparse under it;
    the next clustering step may then move that vector over.  This never
    raises the objective.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise DimensionError("training data must be an (n, d) array")
    n, d = Y.shape
    if n < params.K:
        raise ValidationError(f"need at least K={params.K} training vectors, got {n}")
    if kind is None:
        kind = UnionKind.COMMON_2D if int(round(np.sqrt(d))) ** 2 == d else UnionKind.CROSS_3D
    stack = initial_transforms(d, params.K, params.seed, params.init)
    eta = params.eta
    after_c, after_u = [], []
    reseeds = 0
    for it in range(params.iterations):
        assign, Z, costs = cluster_and_code(Y, stack, eta, return_costs=True)
        after_c.append(float(np.sum(costs)))
        stack, ne = _transform_step(Y, stack, assign, Z, costs)
        reseeds += ne
        after_u.append(p1_objective(Y, stack, assign, Z, eta))
        if it % 100 == 0 or it == params.iterations - 1:
            log.debug("P1 iter %d: %.6g", it, after_u[-1])
    if not after_c:
        _, _, costs = cluster_and_code(Y, stack, eta, return_costs=True)
        after_c.append(float(np.sum(costs)))
    union = TransformUnion.from_stack(kind, stack, eta=eta, seed=params.seed)
    if return_trace:
        return union, LearningTrace(np.array(after_c), np.array(after_u), reseeds)
    return union


def training_vectors(training, cfg: PatchConfig, subsample: int = 1):
    """Pool training patches: per-material m-vectors and stacked 2m-vectors.

    Water patches of every pair come first, then bone patches.  ``subsample``
    keeps every ``subsample``-th patch of each image.
    """
    stacks = [t.stacked() if isinstance(t, MaterialImagePair) else np.asarray(t, float)
              for t in training]
    if not stacks:
        raise ValidationError("training set is empty")
    common = [extract_channel(x[c], cfg)[::subsample] for c in (0, 1) for x in stacks]
    cross = [extract_patches(x, cfg)[::subsample] for x in stacks]
    return np.concatenate(common), np.concatenate(cross)


def learn_multra_model(training, cfg: PatchConfig | None = None,
                       common_params: LearningParams = COMMON_DEFAULTS,
                       cross_params: LearningParams = CROSS_DEFAULTS,
                       subsample: int = 1, return_traces: bool = False):
    """Train the common-material and cross-material unions of a mixed model.

    Parameters
    ----------
    training : sequence of MaterialImagePair or (2, H, W) arrays
    cfg : PatchConfig
        Defaults to 8x8 patches at stride 1.
    common_params, cross_params : LearningParams
    subsample : int
        Keep every ``subsample``-th training patch.
    """
    cfg = cfg or PatchConfig()
    Y1, Y2 = training_vectors(training, cfg, subsample)
    common, t1 = learn_union(Y1, common_params, UnionKind.COMMON_2D, return_trace=True)
    cross, t2 = learn_union(Y2, cross_params, UnionKind.CROSS_3D, return_trace=True)
    model = MultraModel(common, cross, cfg)
    return (model, (t1, t2)) if return_traces else model


def learn_st_transforms(training, cfg: PatchConfig | None = None,
                        water_params: LearningParams = LearningParams(K=1, eta=0.12),
                        bone_params: LearningParams = LearningParams(K=1, eta=0.15),
                        subsample: int = 1, return_traces: bool = False):
    """One unitary transform per material, each trained on its own patches."""
    cfg = cfg or PatchConfig()
    stacks = [t.stacked() if isinstance(t, MaterialImagePair) else np.asarray(t, float)
              for t in training]
    if not stacks:
        raise ValidationError("training set is empty")
    out, traces = [], []
    for c, params in ((0, water_params), (1, bone_params)):
        Y = np.concatenate([extract_channel(x[c], cfg)[::subsample] for x in stacks])
        u, t = learn_union(Y, params, UnionKind.COMMON_2D, return_trace=True)
        out.append(u)
        traces.append(t)
    return (tuple(out), tuple(traces)) if return_traces else tuple(out)
