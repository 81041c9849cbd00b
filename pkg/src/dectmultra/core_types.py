"""Shared value types for image-domain dual-energy decomposition.

Images are held as ``(height, width)`` float64 arrays (row-major, so the
flattened layout matches the on-disk format).  Every type is a frozen
dataclass and the arrays it owns are marked read-only, so instances can be
shared freely between threads.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

UNITARY_TOL = 1e-10
DET_TOL = 1e-12


class ValidationError(ValueError):
    """A value object was constructed with data violating its invariants."""


class DimensionError(ValueError):
    """Array or image shapes are incompatible with the requested operation."""


class Unit(str, enum.Enum):
    DENSITY = "density_g_per_cm3"
    ATTENUATION = "attenuation_per_cm"
    DIMENSIONLESS = "dimensionless"


def _frozen_array(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """A single-channel 2D image.

    Parameters
    ----------
    values : (height, width) array_like
        Pixel values; a flat array is accepted when ``width`` and ``height``
        are given.
    unit : Unit
    """

    values: np.ndarray
    unit: Unit = Unit.DIMENSIONLESS

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"image must be a nonempty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image contains non-finite values")
        object.__setattr__(self, "values", _frozen_array(arr))
        object.__setattr__(self, "unit", Unit(self.unit))

    @classmethod
    def from_flat(cls, flat, width: int, height: int, unit=Unit.DIMENSIONLESS) -> "ImageGrid":
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if width <= 0 or height <= 0:
            raise ValidationError("width and height must be positive")
        if flat.size != width * height:
            raise ValidationError(
                f"values length {flat.size} != width*height = {width * height}")
        return cls(flat.reshape(height, width), unit)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return self.unit == other.unit and np.array_equal(self.values, other.values)


class _ChannelPair:
    """Mixin for two equally sized channels stored as a ``(2, H, W)`` stack."""

    _names: tuple[str, str]

    def _check_pair(self, unit):
        for name in self._names:
            img = getattr(self, name)
            if not isinstance(img, ImageGrid):
                object.__setattr__(self, name, ImageGrid(img, unit))
        a, b = (getattr(self, n) for n in self._names)
        if a.shape != b.shape:
            raise ValidationError(f"channel shapes differ: {a.shape} vs {b.shape}")

    @property
    def shape(self) -> tuple[int, int]:
        return getattr(self, self._names[0]).shape

    def stacked(self) -> np.ndarray:
        """Return a fresh writable ``(2, H, W)`` float64 array."""
        return np.stack([getattr(self, n).values for n in self._names])

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(getattr(self, n) == getattr(other, n) for n in self._names)


@dataclass(frozen=True, eq=False)
class MaterialImagePair(_ChannelPair):
    """Water and bone density maps in g/cm^3."""

    water: ImageGrid
    bone: ImageGrid
    _names = ("water", "bone")

    def __post_init__(self):
        self._check_pair(Unit.DENSITY)

    @classmethod
    def from_stack(cls, x) -> "MaterialImagePair":
        x = np.asarray(x)
        return cls(ImageGrid(x[0], Unit.DENSITY), ImageGrid(x[1], Unit.DENSITY))


@dataclass(frozen=True, eq=False)
class AttenuationPair(_ChannelPair):
    """High- and low-energy attenuation maps in 1/cm."""

    high: ImageGrid
    low: ImageGrid
    _names = ("high", "low")

    def __post_init__(self):
        self._check_pair(Unit.ATTENUATION)

    @classmethod
    def from_stack(cls, y) -> "AttenuationPair":
        y = np.asarray(y)
        return cls(ImageGrid(y[0], Unit.ATTENUATION), ImageGrid(y[1], Unit.ATTENUATION))


@dataclass(frozen=True)
class MassAttenuationMatrix:
    """The 2x2 material-to-attenuation map ``[[phi_1H, phi_2H], [phi_1L, phi_2L]]``.

    Index 1 is water and index 2 is bone; entries are in cm^2/g.
    """

    phi_1H: float
    phi_2H: float
    phi_1L: float
    phi_2L: float

    def __post_init__(self):
        vals = [self.phi_1H, self.phi_2H, self.phi_1L, self.phi_2L]
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise ValidationError(f"mass attenuation entries must be positive, got {vals}")
        if abs(self.det) <= DET_TOL:
            raise ValidationError(f"mass attenuation matrix is singular (det={self.det!r})")

    @classmethod
    def from_matrix(cls, a) -> "MassAttenuationMatrix":
        a = np.asarray(a, dtype=float).reshape(2, 2)
        return cls(float(a[0, 0]), float(a[0, 1]), float(a[1, 0]), float(a[1, 1]))

    @property
    def det(self) -> float:
        return self.phi_1H * self.phi_2L - self.phi_2H * self.phi_1L

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.phi_1H, self.phi_2H], [self.phi_1L, self.phi_2L]])

    def inverse(self) -> np.ndarray:
        d = self.det
        return np.array([[self.phi_2L, -self.phi_2H], [-self.phi_1L, self.phi_1H]]) / d


@dataclass(frozen=True)
class NoiseWeights:
    """Per-pixel noise variances of the high and low attenuation images."""

    sigma2_high: float
    sigma2_low: float

    def __post_init__(self):
        if not (self.sigma2_high > 0 and self.sigma2_low > 0):
            raise ValidationError("noise variances must be strictly positive")

    @property
    def matrix(self) -> np.ndarray:
        """The 2x2 statistical weight ``diag(sigma_H^2, sigma_L^2)^-1``."""
        return np.diag([1.0 / self.sigma2_high, 1.0 / self.sigma2_low])


def _as_pair(stride) -> tuple[int, int]:
    if np.isscalar(stride):
        return int(stride), int(stride)
    sy, sx = stride
    return int(sy), int(sx)


@dataclass(frozen=True)
class PatchConfig:
    """Square ``side x side`` patches taken fully inside the image.

    ``stride`` is an int or a ``(row, column)`` pair.
    """

    side: int = 8
    stride: tuple[int, int] = (1, 1)

    def __post_init__(self):
        object.__setattr__(self, "stride", _as_pair(self.stride))
        if self.side < 1 or min(self.stride) < 1:
            raise ValidationError("patch side and stride must be positive")

    @property
    def m(self) -> int:
        return self.side * self.side

    def grid(self, dims: tuple[int, int]) -> tuple[int, int]:
        """Number of patches along each axis for an image of shape ``dims``."""
        h, w = dims
        if self.side > min(h, w):
            raise DimensionError(
                f"patch side {self.side} exceeds image dimensions {h}x{w}")
        return (h - self.side) // self.stride[0] + 1, (w - self.side) // self.stride[1] + 1

    def count(self, dims: tuple[int, int]) -> int:
        ny, nx = self.grid(dims)
        return ny * nx


@dataclass(frozen=True, eq=False)
class UnitaryTransform:
    matrix: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.matrix, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise ValidationError(f"transform must be square, got shape {a.shape}")
        err = np.max(np.abs(a.T @ a - np.eye(a.shape[0])))
        if not err <= UNITARY_TOL:
            raise ValidationError(f"transform is not unitary (max |W^T W - I| = {err:.3e})")
        object.__setattr__(self, "matrix", _frozen_array(a))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __eq__(self, other):
        if not isinstance(other, UnitaryTransform):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)


class UnionKind(str, enum.Enum):
    COMMON_2D = "common_2d"
    CROSS_3D = "cross_3d"


@dataclass(frozen=True, eq=False)
class TransformUnion:
    """An ordered collection of equally sized unitary transforms.

    ``eta`` and ``seed`` record the training settings and travel with the
    model file; they are ``None`` for hand-built unions.
    """

    kind: UnionKind
    transforms: tuple[UnitaryTransform, ...]
    eta: float | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", UnionKind(self.kind))
        ts = tuple(t if isinstance(t, UnitaryTransform) else UnitaryTransform(t)
                   for t in self.transforms)
        if not ts:
            raise ValidationError("transform union must be nonempty")
        if len({t.dim for t in ts}) != 1:
            raise ValidationError("all transforms in a union must share one dimension")
        object.__setattr__(self, "transforms", ts)
        stack = np.stack([t.matrix for t in ts])
        stack.setflags(write=False)
        object.__setattr__(self, "_stack", stack)

    @classmethod
    def from_stack(cls, kind, stack, eta=None, seed=None) -> "TransformUnion":
        return cls(kind, tuple(UnitaryTransform(a) for a in np.asarray(stack)), eta, seed)

    @property
    def dim(self) -> int:
        return self.transforms[0].dim

    @property
    def K(self) -> int:
        return len(self.transforms)

    def stack(self) -> np.ndarray:
        """Read-only ``(K, dim, dim)`` array of the transform matrices."""
        return self._stack

    def __len__(self):
        return len(self.transforms)

    def __eq__(self, other):
        if not isinstance(other, TransformUnion):
            return NotImplemented
        return (self.kind == other.kind and self.eta == other.eta and self.seed == other.seed
                and np.array_equal(self._stack, other._stack))


@dataclass(frozen=True, eq=False)
class MultraModel:
    """Common-material (m x m) and cross-material (2m x 2m) transform unions.

    The K^2 block-diagonal combinations of common transforms are never
    formed; the solver searches each material half independently.
    """

    common: TransformUnion
    cross: TransformUnion
    patch: PatchConfig = field(default_factory=PatchConfig)

    def __post_init__(self):
        if self.common.kind is not UnionKind.COMMON_2D or self.cross.kind is not UnionKind.CROSS_3D:
            raise ValidationError("model needs a common_2d and a cross_3d union")
        if self.cross.dim != 2 * self.common.dim:
            raise ValidationError(
                f"cross dim {self.cross.dim} must be twice common dim {self.common.dim}")
        if self.common.dim != self.patch.m:
            raise ValidationError(
                f"common dim {self.common.dim} does not match patch side {self.patch.side}")

    def __eq__(self, other):
        if not isinstance(other, MultraModel):
            return NotImplemented
        return (self.common == other.common and self.cross == other.cross
                and self.patch == other.patch)


@dataclass(frozen=True, eq=False)
class SparseCodeSet:
    """Per-patch cluster assignments and sparse codes.

    Attributes
    ----------
    model : (N,) int array
        1 for the common-material model, 2 for the cross-material model.
    classes : (N, 2) int array
        For model 1 the pair ``(k_water, k_bone)`` of common-transform
        indices; for model 2 ``(k, -1)``.  Indices are zero based.
    codes : (N, 2m) float array
        Sparse codes; the first m entries belong to water, the last m to bone
        when the patch uses the common model.
    """

    model: np.ndarray
    classes: np.ndarray
    codes: np.ndarray

    def __post_init__(self):
        model = _frozen_array(self.model, np.int8)
        classes = _frozen_array(self.classes, np.int64)
        codes = _frozen_array(self.codes)
        n = model.shape[0]
        if model.ndim != 1 or classes.shape != (n, 2) or codes.ndim != 2 or codes.shape[0] != n:
            raise ValidationError("inconsistent sparse code set shapes")
        if codes.shape[1] % 2:
            raise ValidationError("code length must be even (two materials)")
        if not np.all((model == 1) | (model == 2)):
            raise ValidationError("model ids must be 1 or 2")
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "codes", codes)

    def __len__(self):
        return self.model.shape[0]

    @property
    def m(self) -> int:
        return self.codes.shape[1] // 2

    def __eq__(self, other):
        if not isinstance(other, SparseCodeSet):
            return NotImplemented
        return (np.array_equal(self.model, other.model)
                and np.array_equal(self.classes, other.classes)
                and np.array_equal(self.codes, other.codes))


class _ParamsMixin:
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        return cls(**d)


def _check_positive(obj, names: Sequence[str]):
    for n in names:
        v = getattr(obj, n)
        if not v > 0:
            raise ValidationError(f"{n} must be > 0, got {v!r}")


@dataclass(frozen=True)
class DecompositionParams(_ParamsMixin):
    """Weights and thresholds of the mixed-union regularizer.

    Defaults are the published settings for the phantom study.  A weight of
    ``inf`` disables its model: no patch will ever be assigned to it.
    """

    beta1: float = 50.0
    beta2: float = 50.0
    gamma1_water: float = 0.13
    gamma1_bone: float = 0.13
    gamma2: float = 0.09
    iterations: int = 500

    def __post_init__(self):
        _check_positive(self, ["beta1", "beta2", "gamma1_water", "gamma1_bone", "gamma2",
                               "iterations"])


@dataclass(frozen=True, eq=False)
class ObjectiveTrace:
    """Objective values recorded once per outer iteration.

    Entry 0 is the objective at the initial image (with its optimal codes).
    ``after_image_update`` holds, when recorded, the total objective right
    after each image update, i.e. between the two half-steps.
    """

    total: np.ndarray
    fidelity: np.ndarray
    regularizer: np.ndarray
    after_image_update: np.ndarray | None = None

    def __post_init__(self):
        for n in ("total", "fidelity", "regularizer"):
            object.__setattr__(self, n, _frozen_array(getattr(self, n)))
        if self.after_image_update is not None:
            object.__setattr__(self, "after_image_update", _frozen_array(self.after_image_update))
        if not (self.total.shape == self.fidelity.shape == self.regularizer.shape):
            raise ValidationError("trace columns must have equal length")
        parts = self.fidelity + self.regularizer
        scale = np.maximum(np.abs(self.total), np.finfo(float).tiny)
        if np.any(np.abs(self.total - parts) > 1e-9 * scale):
            raise ValidationError("trace total != fidelity + regularizer")

    def __len__(self):
        return self.total.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ObjectiveTrace):
            return NotImplemented
        a, b = self.after_image_update, other.after_image_update
        same_half = (a is None and b is None) or (
            a is not None and b is not None and np.array_equal(a, b))
        return (same_half and np.array_equal(self.total, other.total)
                and np.array_equal(self.fidelity, other.fidelity)
                and np.array_equal(self.regularizer, other.regularizer))

    def interleaved(self) -> np.ndarray:
        """Totals in half-step order: x0, after image update 1, after coding 1, ..."""
        if self.after_image_update is None:
            return self.total.copy()
        out = [self.total[0]]
        for half, full in zip(self.after_image_update, self.total[1:]):
            out += [half, full]
        return np.array(out)
