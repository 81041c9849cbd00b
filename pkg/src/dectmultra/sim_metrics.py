"""Synthetic phantoms, image-domain noise simulation, and quality metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_types import (AttenuationPair, DimensionError, MassAttenuationMatrix,
                         MaterialImagePair, NoiseWeights, ValidationError)

WATER_DENSITY = 1.0
BONE_DENSITY = 1.92


@dataclass(frozen=True)
class Shape:
    """An ellipse or axis-aligned rectangle filled with one material.

    Coordinates are in pixels; pixel ``(i, j)`` has its centre at row ``i``,
    column ``j``.  For ellipses ``size`` holds the two semi-axes; for
    rectangles it holds the full (height, width).  ``angle`` (radians)
    rotates ellipses about their centre.
    Filling a pixel sets the shape's material to ``density`` and the other
    material to zero.
    """

    kind: str
    center: tuple[float, float]
    size: tuple[float, float]
    material: str
    density: float
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ellipse", "rectangle"):
            raise ValidationError(f"unknown shape kind {self.kind!r}")
        if self.material not in ("water", "bone"):
            raise ValidationError(f"unknown material {self.material!r}")
        if min(self.size) <= 0:
            raise ValidationError("shape size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        return cls(d["kind"], tuple(d["center"]), tuple(d["size"]), d["material"],
                   float(d["density"]), float(d.get("angle", 0.0)))

    def mask(self, dims) -> np.ndarray:
        h, w = dims
        rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
        dr, dc = rr - self.center[0], cc - self.center[1]
        if self.kind == "rectangle":
            return (np.abs(dr) <= self.size[0] / 2) & (np.abs(dc) <= self.size[1] / 2)
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = ca * dr + sa * dc
        v = -sa * dr + ca * dc
        return (u / self.size[0]) ** 2 + (v / self.size[1]) ** 2 <= 1.0

    def in_bounds(self, dims) -> bool:
        h, w = dims
        r = max(self.size)
        if self.kind == "rectangle":
            r = 0.5 * np.hypot(*self.size)
        return (self.center[0] - r >= -0.5 and self.center[0] + r <= h - 0.5
                and self.center[1] - r >= -0.5 and self.center[1] + r <= w - 0.5)


def default_scene(dims, seed: int = 0) -> list[Shape]:
    """Water body with soft-tissue inserts, a bone ring, and bone insets.

    Insert positions, sizes and densities (0.9 to 1.1 g/cm^3) are drawn from
    ``seed``.
    """
    h, w = dims
    rng = np.random.default_rng(seed)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    R = 0.45 * min(h, w)
    shapes = [Shape("ellipse", (cy, cx), (R, 0.95 * R), "water", WATER_DENSITY),
              # bone ring near the outer edge, hollowed back to water
              Shape("ellipse", (cy, cx), (0.82 * R, 0.78 * R), "bone", BONE_DENSITY),
              Shape("ellipse", (cy, cx), (0.72 * R, 0.68 * R), "water", WATER_DENSITY)]
    for _ in range(6):
        rad = rng.uniform(0.05, 0.12) * R
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.15, 0.5) * R
        shapes.append(Shape("ellipse", (cy + dist * np.sin(ang), cx + dist * np.cos(ang)),
                            (rad, rng.uniform(0.6, 1.0) * rad), "water",
                            float(rng.uniform(0.9, 1.1)), float(rng.uniform(0, np.pi))))
    for _ in range(6):
        rad = rng.uniform(0.04, 0.09) * R
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.0, 0.55) * R
        shapes.append(Shape("ellipse", (cy + dist * np.sin(ang), cx + dist * np.cos(ang)),
                            (rad, rad), "bone", BONE_DENSITY))
    shapes.append(Shape("rectangle", (cy + 0.3 * R, cx), (0.12 * R, 0.3 * R), "bone",
                        BONE_DENSITY))
    return shapes


def generate_phantom(scene: Sequence[Shape | dict] | None, dims, seed: int = 0
                     ) -> MaterialImagePair:
    """Rasterize a scene into ground-truth water/bone density images.

    ``scene=None`` uses :func:`default_scene` (which depends on ``seed``);
    an explicit scene is rasterized deterministically and ignores ``seed``.
    Later shapes overwrite earlier ones.  Shapes extending past the image
    produce a warning and are clipped.
    """
    h, w = int(dims[0]), int(dims[1])
    if h <= 0 or w <= 0:
        raise DimensionError("phantom dimensions must be positive")
    shapes = default_scene((h, w), seed) if scene is None else [
        s if isinstance(s, Shape) else Shape.from_dict(s) for s in scene]
    x = np.zeros((2, h, w))
    for s in shapes:
        if not s.in_bounds((h, w)):
            warnings.warn(f"shape {s} extends beyond the {h}x{w} image", stacklevel=2)
        mk = s.mask((h, w))
        c = 0 if s.material == "water" else 1
        x[c][mk] = s.density
        x[1 - c][mk] = 0.0
    return MaterialImagePair.from_stack(x)


def simulate_attenuation(x_true, A0: MassAttenuationMatrix, weights: NoiseWeights | None,
                         seed: int = 0) -> AttenuationPair:
    """``y_j = A0 x_j + eps_j`` with independent Gaussian noise per channel.

    ``weights=None`` gives noiseless data.
    """
    x = x_true.stacked() if isinstance(x_true, MaterialImagePair) else np.asarray(x_true, float)
    y = np.einsum("ab,bhw->ahw", A0.matrix, x)
    if weights is not None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(y.shape)
        y = y + noise * np.sqrt([weights.sigma2_high, weights.sigma2_low])[:, None, None]
    return AttenuationPair.from_stack(y)


def disk_roi(dims, radius: float | None = None, center=None) -> np.ndarray:
    """Boolean disk mask; defaults to a centred disk of radius ``0.45*min(dims)``."""
    h, w = dims
    cy, cx = ((h - 1) / 2, (w - 1) / 2) if center is None else center
    r = 0.45 * min(h, w) if radius is None else radius
    rr, cc = np.mgrid[0:h, 0:w]
    return (rr - cy) ** 2 + (cc - cx) ** 2 <= r * r


def _values(img) -> np.ndarray:
    return img.values if hasattr(img, "values") else np.asarray(img, dtype=np.float64)


def rmse(x_hat, x_star, roi=None) -> float:
    """Root mean square error over the pixels selected by ``roi``.

    ``roi`` defaults to :func:`disk_roi`.
    """
    a, b = _values(x_hat), _values(x_star)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    roi = disk_roi(a.shape) if roi is None else np.asarray(roi, dtype=bool)
    if roi.shape != a.shape:
        raise DimensionError("ROI mask shape does not match the images")
    n = int(np.count_nonzero(roi))
    if n == 0:
        raise ValidationError("ROI is empty")
    d = a[roi] - b[roi]
    return float(np.sqrt(np.sum(d * d) / n))


def nps(error, origin: tuple[int, int], size: int = 30) -> np.ndarray:
    """Noise power spectrum of a square ROI of an error image.

    The ROI is shifted to zero mean and the result is the squared magnitude
    of its unnormalized 2D DFT, so ``nps(f).sum() == size**2 * sum(f**2)``.
    """
    e = _values(error)
    r0, c0 = int(origin[0]), int(origin[1])
    if r0 < 0 or c0 < 0 or r0 + size > e.shape[0] or c0 + size > e.shape[1]:
        raise DimensionError(f"{size}x{size} ROI at {origin} does not fit image {e.shape}")
    f = e[r0:r0 + size, c0:c0 + size]
    # shifting by one entry first makes the offset exact for constant blocks
    f = f - f[0, 0]
    f = f - f.mean()
    F = np.fft.fft2(f)
    return F.real ** 2 + F.imag ** 2
