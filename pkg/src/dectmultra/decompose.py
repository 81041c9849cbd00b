"""Image-domain material decomposition solvers.

All regularized solvers minimize

    1/2 ||y - A x||_W^2 + R(x)

over stacked water/bone images ``x``.  ``A`` acts independently per pixel
through the 2x2 mass attenuation matrix, so every quadratic subproblem
separates into 2x2 solves.

The patch-based solvers (mixed union, cross-only union, one transform per
material) share a single block coordinate descent engine driven by a
:class:`Regularizer`; they differ only in which transform sets are active
and how the weights are assigned.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _parallel
from .core_types import (AttenuationPair, DecompositionParams, DimensionError,
                         MassAttenuationMatrix, MaterialImagePair, MultraModel, NoiseWeights,
                         ObjectiveTrace, PatchConfig, SparseCodeSet, TransformUnion,
                         UnitaryTransform, ValidationError, _check_positive, _ParamsMixin)
from .patch_ops import aggregate_channel, coverage, extract_patches, hard_threshold

log = logging.getLogger(__name__)


class SingularSystemError(ArithmeticError):
    """A per-pixel 2x2 system could not be solved."""


class InconsistentCodesError(ValueError):
    """Sparse codes do not match the patch geometry or the model."""


@dataclass(frozen=True)
class DecompositionSystem:
    """Forward model and patch geometry shared by all solvers."""

    A0: MassAttenuationMatrix
    weights: NoiseWeights
    patch: PatchConfig = field(default_factory=PatchConfig)
    dims: tuple[int, int] | None = None

    @property
    def gram(self) -> np.ndarray:
        """``A0^T W_j A0``"""
        a = self.A0.matrix
        return a.T @ self.weights.matrix @ a

    def check_dims(self, shape):
        if self.dims is not None and tuple(shape) != tuple(self.dims):
            raise DimensionError(f"image shape {tuple(shape)} != system dims {self.dims}")


@dataclass(frozen=True)
class StParams(_ParamsMixin):
    """Per-material weights and thresholds of the single-transform model."""

    beta_water: float = 50.0
    beta_bone: float = 70.0
    gamma_water: float = 0.03
    gamma_bone: float = 0.04
    iterations: int = 500

    def __post_init__(self):
        _check_positive(self, ["beta_water", "beta_bone", "gamma_water", "gamma_bone",
                               "iterations"])


@dataclass(frozen=True)
class EpParams(_ParamsMixin):
    """Edge-preserving baseline: hyperbola potential on 8-neighbour differences.

    ``curvature`` selects the surrogate curvature: ``"max"`` uses the global
    bound 1 of the potential's second derivative, ``"huber"`` the tighter
    ``psi'(t)/t`` at the current iterate.  Both are monotone.
    """

    beta_water: float = 2.0 ** 8
    beta_bone: float = 2.0 ** 8.5
    delta_water: float = 0.01
    delta_bone: float = 0.02
    iterations: int = 500
    curvature: str = "max"

    def __post_init__(self):
        _check_positive(self, ["beta_water", "beta_bone", "delta_water", "delta_bone",
                               "iterations"])
        if self.curvature not in ("max", "huber"):
            raise ValidationError(f"unknown curvature rule {self.curvature!r}")


MULTRA_DEFAULTS = DecompositionParams()
CULTRA_DEFAULTS = DecompositionParams(beta1=np.inf, beta2=70.0, gamma2=0.07)
ST_DEFAULTS = StParams()
EP_DEFAULTS = EpParams()


def _stack_of(y, cls):
    if isinstance(y, cls):
        return y.stacked()
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[0] != 2:
        raise DimensionError(f"expected a (2, H, W) stack, got shape {y.shape}")
    return y


def _attn(y) -> np.ndarray:
    return _stack_of(y, AttenuationPair)


def _dens(x) -> np.ndarray:
    return _stack_of(x, MaterialImagePair)


# ---------------------------------------------------------------------------
# baselines

def direct_inversion(y, A0: MassAttenuationMatrix) -> MaterialImagePair:
    """Per-pixel ``A0^{-1} y_j``; the unregularized weighted LS solution."""
    if not isinstance(A0, MassAttenuationMatrix):
        A0 = MassAttenuationMatrix.from_matrix(A0)
    y = _attn(y)
    return MaterialImagePair.from_stack(np.einsum("ab,bhw->ahw", A0.inverse(), y))


def _solve2x2(h11, h12, h22, r1, r2):
    det = h11 * h22 - h12 * h12
    if not np.all(det > 0):
        raise SingularSystemError("per-pixel Hessian is not positive definite")
    return np.stack([(h22 * r1 - h12 * r2) / det, (h11 * r2 - h12 * r1) / det])


def fidelity(x: np.ndarray, y: np.ndarray, system: DecompositionSystem) -> float:
    """``1/2 sum_j (y_j - A0 x_j)^T W_j (y_j - A0 x_j)``"""
    r = y - np.einsum("ab,bhw->ahw", system.A0.matrix, x)
    w = system.weights
    return 0.5 * (float(np.sum(r[0] * r[0])) / w.sigma2_high
                  + float(np.sum(r[1] * r[1])) / w.sigma2_low)


def _data_rhs(y: np.ndarray, system: DecompositionSystem) -> np.ndarray:
    aw = system.A0.matrix.T @ system.weights.matrix
    return np.einsum("ab,bhw->ahw", aw, y)


def ep_potential(t, delta: float):
    """Hyperbola potential ``delta^2/3 (sqrt(1 + 3 (t/delta)^2) - 1)``."""
    a = 3.0 * (np.asarray(t, dtype=np.float64) / delta) ** 2
    # sqrt(1+a) - 1 written without cancellation for small a
    return delta * delta / 3.0 * a / (np.sqrt(1.0 + a) + 1.0)


def ep_potential_derivative(t, delta: float):
    t = np.asarray(t, dtype=np.float64)
    return t / np.sqrt(1.0 + 3.0 * (t / delta) ** 2)


def _ep_weight(t, delta: float):
    # psi'(t)/t, which bounds the potential's curvature from above at t
    return 1.0 / np.sqrt(1.0 + 3.0 * (np.asarray(t) / delta) ** 2)


# row/column offsets; together with their negatives they form the 8-neighbourhood
NEIGHBOR_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _slices(di, dj, shape):
    h, w = shape
    a = (slice(0, h - di), slice(max(0, -dj), w - max(0, dj)))
    b = (slice(di, h), slice(max(0, dj), w - max(0, -dj)))
    return a, b


def finite_differences(img: np.ndarray) -> list[np.ndarray]:
    """``C x``: one difference image per neighbour offset (valid region only)."""
    out = []
    for di, dj in NEIGHBOR_OFFSETS:
        a, b = _slices(di, dj, img.shape)
        out.append(img[b] - img[a])
    return out


def finite_differences_adjoint(diffs, shape) -> np.ndarray:
    out = np.zeros(shape)
    for (di, dj), d in zip(NEIGHBOR_OFFSETS, diffs):
        a, b = _slices(di, dj, shape)
        out[b] += d
        out[a] -= d
    return out


def ep_objective(x, y, ep: EpParams, system: DecompositionSystem):
    """Return ``(total, fidelity, regularizer)`` of the edge-preserving problem."""
    x, y = _dens(x), _attn(y)
    fid = fidelity(x, y, system)
    reg = 0.0
    for c, beta, delta in ((0, ep.beta_water, ep.delta_water), (1, ep.beta_bone, ep.delta_bone)):
        reg += beta * float(sum(np.sum(ep_potential(d, delta)) for d in finite_differences(x[c])))
    return fid + reg, fid, reg


def decompose_ep(y, ep: EpParams, system: DecompositionSystem, x_init):
    """Edge-preserving PWLS by separable quadratic surrogates.

    Each iteration majorizes every potential by a quadratic, bounds the
    resulting difference penalty by a pixel-separable one, and solves the
    per-pixel 2x2 surrogate exactly.  The objective never increases.

    Returns
    -------
    MaterialImagePair, ObjectiveTrace
    """
    y = _attn(y)
    x = _dens(x_init).copy()
    if x.shape != y.shape:
        raise DimensionError(f"initial image {x.shape} and data {y.shape} differ")
    system.check_dims(y.shape[1:])
    g = system.gram
    shape = y.shape[1:]
    totals, fids, regs = [], [], []

    def record(xx):
        t, f, r = ep_objective(xx, y, ep, system)
        totals.append(t), fids.append(f), regs.append(r)

    record(x)
    rhs = _data_rhs(y, system)
    per_mat = ((0, ep.beta_water, ep.delta_water), (1, ep.beta_bone, ep.delta_bone))
    max_curv = None
    if ep.curvature == "max":
        ones = [np.ones_like(d) for d in finite_differences(np.zeros(shape))]
        # |C|^T |C| 1 = 2 * (number of differences touching each pixel)
        max_curv = 2.0 * _abs_adjoint(ones, shape)
    for _ in range(ep.iterations):
        grad = np.einsum("ab,bhw->ahw", g, x) - rhs
        curv = np.empty_like(x)
        for c, beta, delta in per_mat:
            diffs = finite_differences(x[c])
            grad[c] += beta * finite_differences_adjoint(
                [ep_potential_derivative(d, delta) for d in diffs], shape)
            if max_curv is not None:
                curv[c] = beta * max_curv
            else:
                curv[c] = beta * 2.0 * _abs_adjoint([_ep_weight(d, delta) for d in diffs], shape)
        step = _solve2x2(g[0, 0] + curv[0], g[0, 1], g[1, 1] + curv[1], grad[0], grad[1])
        x = x - step
        record(x)
    trace = ObjectiveTrace(np.array(totals), np.array(fids), np.array(regs))
    return MaterialImagePair.from_stack(x), trace


def _abs_adjoint(diffs, shape) -> np.ndarray:
    out = np.zeros(shape)
    for (di, dj), d in zip(NEIGHBOR_OFFSETS, diffs):
        a, b = _slices(di, dj, shape)
        out[b] += d
        out[a] += d
    return out


# ---------------------------------------------------------------------------
# patch-based regularizers

@dataclass(frozen=True, eq=False)
class Regularizer:
    """Active transform sets and weights of a patch-based regularizer.

    ``water`` and ``bone`` are the ``(K, m, m)`` candidate transforms for
    each material half under model 1 (the same stack for the mixed union);
    ``cross`` is the ``(K2, 2m, 2m)`` stack for model 2.  A missing stack or
    an infinite weight disables that model.
    """

    patch: PatchConfig
    water: np.ndarray | None
    bone: np.ndarray | None
    cross: np.ndarray | None
    beta_water: float
    beta_bone: float
    beta_cross: float
    gamma_water: float
    gamma_bone: float
    gamma_cross: float

    @property
    def common_enabled(self) -> bool:
        return (self.water is not None and np.isfinite(self.beta_water)
                and np.isfinite(self.beta_bone))

    @property
    def cross_enabled(self) -> bool:
        return self.cross is not None and np.isfinite(self.beta_cross)


def multra_regularizer(model: MultraModel, params: DecompositionParams) -> Regularizer:
    c = model.common.stack()
    return Regularizer(model.patch, c, c, model.cross.stack(), params.beta1, params.beta1,
                       params.beta2, params.gamma1_water, params.gamma1_bone, params.gamma2)


def cultra_regularizer(cross: TransformUnion, params: DecompositionParams,
                       patch: PatchConfig) -> Regularizer:
    return Regularizer(patch, None, None, cross.stack(), np.inf, np.inf, params.beta2,
                       params.gamma1_water, params.gamma1_bone, params.gamma2)


def st_regularizer(water: UnitaryTransform, bone: UnitaryTransform, params: StParams,
                   patch: PatchConfig) -> Regularizer:
    return Regularizer(patch, water.matrix[None], bone.matrix[None], None, params.beta_water,
                       params.beta_bone, np.inf, params.gamma_water, params.gamma_bone, 1.0)


def _best(X: np.ndarray, stack: np.ndarray, gamma: float):
    best = np.full(X.shape[0], np.inf)
    k_best = np.zeros(X.shape[0], dtype=np.int64)
    u_best = np.zeros_like(X)
    g2 = gamma * gamma
    for k in range(stack.shape[0]):
        u = X @ stack[k].T
        c = np.minimum(u * u, g2).sum(axis=1)
        better = c < best
        best[better] = c[better]
        k_best[better] = k
        u_best[better] = u[better]
    return best, k_best, u_best


def _code_chunk(X: np.ndarray, reg: Regularizer):
    n, m2 = X.shape
    m = m2 // 2
    model = np.ones(n, dtype=np.int8)
    classes = np.full((n, 2), -1, dtype=np.int64)
    codes = np.zeros_like(X)
    cost1 = np.full(n, np.inf)
    cost2 = np.full(n, np.inf)
    if reg.common_enabled:
        cw, kw, uw = _best(X[:, :m], reg.water, reg.gamma_water)
        cb, kb, ub = _best(X[:, m:], reg.bone, reg.gamma_bone)
        cost1 = reg.beta_water * cw + reg.beta_bone * cb
    if reg.cross_enabled:
        c2, k2, u2 = _best(X, reg.cross, reg.gamma_cross)
        cost2 = reg.beta_cross * c2
    if not (reg.common_enabled or reg.cross_enabled):
        raise ValidationError("regularizer has no active model")
    use1 = cost1 <= cost2  # ties prefer the common model
    if reg.common_enabled:
        classes[use1, 0] = kw[use1]
        classes[use1, 1] = kb[use1]
        codes[use1, :m] = hard_threshold(uw[use1], reg.gamma_water)
        codes[use1, m:] = hard_threshold(ub[use1], reg.gamma_bone)
    use2 = ~use1
    if np.any(use2):
        model[use2] = 2
        classes[use2, 0] = k2[use2]
        codes[use2] = hard_threshold(u2[use2], reg.gamma_cross)
    return model, classes, codes, np.where(use1, cost1, cost2)


def _code(x: np.ndarray, reg: Regularizer):
    P = extract_patches(x, reg.patch)
    parts = _parallel.map_chunks(lambda a, b: _code_chunk(P[a:b], reg), P.shape[0])
    model, classes, codes, costs = (np.concatenate(p) for p in zip(*parts))
    return SparseCodeSet(model, classes, codes), costs


def sparse_code_and_cluster(x, model: MultraModel | Regularizer,
                            params: DecompositionParams | None = None,
                            return_costs: bool = False):
    """Exact sparse coding and clustering of every patch of ``x``.

    For model 1 the best common transform is searched separately for the
    water and bone halves; for model 2 the best cross transform for the full
    patch.  The cheaper weighted cost wins, ties resolving to model 1 and
    then to the lowest class index.

    Returns
    -------
    SparseCodeSet
        Plus the ``(N,)`` per-patch weighted costs when ``return_costs``.
    """
    reg = model if isinstance(model, Regularizer) else multra_regularizer(model, params)
    codes, costs = _code(_dens(x), reg)
    return (codes, costs) if return_costs else codes


def _check_codes(codes: SparseCodeSet, reg: Regularizer, dims):
    n = reg.patch.count(dims)
    if len(codes) != n or codes.m != reg.patch.m:
        raise InconsistentCodesError(
            f"codes for {len(codes)} patches of size {2 * codes.m} do not match "
            f"{n} patches of size {2 * reg.patch.m}")
    if np.any(codes.model == 1) and not reg.common_enabled:
        raise InconsistentCodesError("codes use the common model, which is disabled")
    if np.any(codes.model == 2) and not reg.cross_enabled:
        raise InconsistentCodesError("codes use the cross model, which is disabled")
    for stack, col, sel in ((reg.water, 0, codes.model == 1), (reg.bone, 1, codes.model == 1),
                            (reg.cross, 0, codes.model == 2)):
        if np.any(sel):
            k = codes.classes[sel, col]
            if k.min() < 0 or k.max() >= stack.shape[0]:
                raise InconsistentCodesError("class index out of range")


def _groups(codes: SparseCodeSet, reg: Regularizer):
    """(rows, column slice, transform) triples covering every patch half."""
    m = codes.m
    out = []
    one = codes.model == 1
    if np.any(one):
        for stack, col, sl in ((reg.water, 0, slice(0, m)), (reg.bone, 1, slice(m, 2 * m))):
            ks = codes.classes[:, col]
            for k in np.unique(ks[one]):
                out.append((np.flatnonzero(one & (ks == k)), sl, stack[k]))
    two = ~one
    if np.any(two):
        ks = codes.classes[:, 0]
        for k in np.unique(ks[two]):
            out.append((np.flatnonzero(two & (ks == k)), slice(0, 2 * m), reg.cross[k]))
    return out


def _patch_betas(codes: SparseCodeSet, reg: Regularizer):
    one = codes.model == 1
    bw = np.where(one, reg.beta_water, reg.beta_cross)
    bb = np.where(one, reg.beta_bone, reg.beta_cross)
    return bw, bb


def _regularizer_value(x: np.ndarray, codes: SparseCodeSet, reg: Regularizer) -> float:
    P = extract_patches(x, reg.patch)
    m = codes.m
    groups = _groups(codes, reg)

    def err(g):
        rows, sl, W = g
        r = P[rows, sl] @ W.T - codes.codes[rows, sl]
        return np.sum(r * r, axis=1)

    resid_w = np.zeros(len(codes))
    resid_b = np.zeros(len(codes))
    for (rows, sl, _), e in zip(groups, _parallel.map_items(err, groups)):
        if sl.start == m:
            resid_b[rows] = e
        else:
            resid_w[rows] = e
    one = codes.model == 1
    nnz_w = np.count_nonzero(codes.codes[:, :m], axis=1)
    nnz_b = np.count_nonzero(codes.codes[:, m:], axis=1)
    gw = np.where(one, reg.gamma_water, reg.gamma_cross) ** 2
    gb = np.where(one, reg.gamma_bone, reg.gamma_cross) ** 2
    bw, bb = _patch_betas(codes, reg)
    val1 = reg.beta_water * (resid_w + gw * nnz_w) + reg.beta_bone * (resid_b + gb * nnz_b) \
        if reg.common_enabled else np.zeros(len(codes))
    val2 = reg.beta_cross * (resid_w + resid_b + gw * (nnz_w + nnz_b)) \
        if reg.cross_enabled else np.zeros(len(codes))
    return float(np.sum(np.where(one, val1, val2)))


def regularizer_objective(x, y, codes: SparseCodeSet, reg: Regularizer,
                          system: DecompositionSystem):
    """``(total, fidelity, regularizer)`` for any patch-based regularizer."""
    x, y = _dens(x), _attn(y)
    _check_codes(codes, reg, x.shape[1:])
    f = fidelity(x, y, system)
    r = _regularizer_value(x, codes, reg)
    return f + r, f, r


def objective_p0(x, y, codes: SparseCodeSet, model: MultraModel, params: DecompositionParams,
                 system: DecompositionSystem):
    """Full mixed-union objective at ``x`` for the given codes and clustering."""
    return regularizer_objective(x, y, codes, multra_regularizer(model, params), system)


def _image_update(y: np.ndarray, codes: SparseCodeSet, reg: Regularizer,
                  system: DecompositionSystem) -> np.ndarray:
    dims = y.shape[1:]
    m = codes.m
    groups = _groups(codes, reg)
    back = np.empty_like(codes.codes)

    def project(g):
        rows, sl, W = g
        return codes.codes[rows, sl] @ W

    for (rows, sl, _), v in zip(groups, _parallel.map_items(project, groups)):
        back[rows, sl] = v
    bw, bb = _patch_betas(codes, reg)
    b_w = aggregate_channel(back[:, :m] * bw[:, None], reg.patch, dims)
    b_b = aggregate_channel(back[:, m:] * bb[:, None], reg.patch, dims)
    c_w = coverage(reg.patch, dims, bw)
    c_b = coverage(reg.patch, dims, bb)
    g = system.gram
    rhs = _data_rhs(y, system)
    return _solve2x2(g[0, 0] + 2.0 * c_w, g[0, 1], g[1, 1] + 2.0 * c_b,
                     rhs[0] + 2.0 * b_w, rhs[1] + 2.0 * b_b)


def image_update(y, codes: SparseCodeSet, model: MultraModel | Regularizer,
                 params: DecompositionParams | None, system: DecompositionSystem
                 ) -> MaterialImagePair:
    """Exact minimizer over ``x`` of the objective with codes held fixed.

    Unitarity turns the patch term's Hessian into a diagonal of weighted
    coverage counts, so the update is a closed-form 2x2 solve per pixel.
    """
    reg = model if isinstance(model, Regularizer) else multra_regularizer(model, params)
    y = _attn(y)
    system.check_dims(y.shape[1:])
    _check_codes(codes, reg, y.shape[1:])
    return MaterialImagePair.from_stack(_image_update(y, codes, reg, system))


def run_bcd(y, reg: Regularizer, system: DecompositionSystem, x_init, iterations: int,
            record_half_steps: bool = False):
    """Alternate image updates and sparse coding/clustering.

    Returns
    -------
    MaterialImagePair, SparseCodeSet, ObjectiveTrace
        The trace has ``iterations + 1`` rows; row 0 is at ``x_init``.
    """
    y = _attn(y)
    x = _dens(x_init)
    if x.shape != y.shape:
        raise DimensionError(f"initial image {x.shape} and data {y.shape} differ")
    system.check_dims(y.shape[1:])
    codes, costs = _code(x, reg)
    fid = fidelity(x, y, system)
    totals, fids, regs, half = [fid + float(np.sum(costs))], [fid], [float(np.sum(costs))], []
    for it in range(iterations):
        x = _image_update(y, codes, reg, system)
        if record_half_steps:
            half.append(fidelity(x, y, system) + _regularizer_value(x, codes, reg))
        codes, costs = _code(x, reg)
        fid = fidelity(x, y, system)
        r = float(np.sum(costs))
        totals.append(fid + r), fids.append(fid), regs.append(r)
        if it % 50 == 0:
            log.debug("iter %d objective %.8g", it, totals[-1])
    trace = ObjectiveTrace(np.array(totals), np.array(fids), np.array(regs),
                           np.array(half) if record_half_steps else None)
    return MaterialImagePair.from_stack(x), codes, trace


def decompose_multra(y, model: MultraModel, params: DecompositionParams,
                     system: DecompositionSystem, x_init, record_half_steps: bool = False):
    """Mixed common/cross union of learned transforms."""
    if model.patch != system.patch:
        raise DimensionError(f"model patch {model.patch} != system patch {system.patch}")
    return run_bcd(y, multra_regularizer(model, params), system, x_init, params.iterations,
                   record_half_steps)


def decompose_cultra(y, cross_union: TransformUnion, params: DecompositionParams,
                     system: DecompositionSystem, x_init, record_half_steps: bool = False):
    """Cross-material union only; uses ``params.beta2`` and ``params.gamma2``."""
    if cross_union.dim != 2 * system.patch.m:
        raise DimensionError("cross transforms do not match the patch size")
    return run_bcd(y, cultra_regularizer(cross_union, params, system.patch), system, x_init,
                   params.iterations, record_half_steps)


def decompose_st(y, water_transform: UnitaryTransform, bone_transform: UnitaryTransform,
                 params: StParams, system: DecompositionSystem, x_init,
                 record_half_steps: bool = False):
    """One fixed transform per material with per-material weights."""
    for t in (water_transform, bone_transform):
        if t.dim != system.patch.m:
            raise DimensionError("transform does not match the patch size")
    return run_bcd(y, st_regularizer(water_transform, bone_transform, params, system.patch),
                   system, x_init, params.iterations, record_half_steps)


# ---------------------------------------------------------------------------
# cluster maps

@dataclass(frozen=True, eq=False)
class ClusterMap:
    """Per-pixel majority label among the patches covering each pixel.

    ``model`` is 1 or 2 (0 for uncovered pixels); ``classes`` holds
    ``(k_water, k_bone)`` for model 1 and ``(k, -1)`` for model 2.
    """

    model: np.ndarray
    classes: np.ndarray

    def label_image(self, K_common: int) -> np.ndarray:
        """Flat integer labels: model-1 pairs first, then model-2 classes; -1 uncovered."""
        kc = K_common
        lab = np.where(self.model == 1, self.classes[..., 0] * kc + self.classes[..., 1],
                       kc * kc + self.classes[..., 0])
        return np.where(self.model == 0, -1, lab)


def pixel_cluster_map(codes: SparseCodeSet, cfg: PatchConfig, dims) -> ClusterMap:
    """Label each pixel with the plurality ``(r, k)`` of its covering patches.

    Ties resolve to the lexicographically lowest label.
    """
    n = cfg.count(dims)
    if len(codes) != n:
        raise InconsistentCodesError(f"{len(codes)} codes for {n} patches")
    keys = np.stack([codes.model.astype(np.int64), codes.classes[:, 0], codes.classes[:, 1]], 1)
    labels, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    best = np.zeros(dims)
    best_lab = np.full(dims, -1, dtype=np.int64)
    for i in range(labels.shape[0]):
        cnt = coverage(cfg, dims, (inverse == i).astype(np.float64))
        better = cnt > best
        best[better] = cnt[better]
        best_lab[better] = i
    model = np.where(best_lab >= 0, labels[best_lab, 0], 0)
    classes = np.where(best_lab[..., None] >= 0, labels[best_lab, 1:], -1)
    return ClusterMap(model, classes)
