"""Patch extraction and aggregation, and l0 hard thresholding.

A patch of a two-material image is the water ``p x p`` block flattened
row-major followed by the bone block at the same location, giving a vector
of length ``2m`` with ``m = p*p``.  Patches are ordered row-major by their
top-left corner and never wrap around the image border.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core_types import DimensionError, MaterialImagePair, PatchConfig


def _as_stack(pair) -> np.ndarray:
    if isinstance(pair, MaterialImagePair):
        return pair.stacked()
    x = np.asarray(pair, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    return x


def extract_channel(img: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """Patches of one ``(H, W)`` channel as an ``(N, m)`` array."""
    cfg.grid(img.shape)
    sy, sx = cfg.stride
    win = sliding_window_view(img, (cfg.side, cfg.side))[::sy, ::sx]
    return win.reshape(-1, cfg.m)


def extract_patches(pair, cfg: PatchConfig) -> np.ndarray:
    """Extract all two-material patches.

    Parameters
    ----------
    pair : MaterialImagePair or (2, H, W) array
    cfg : PatchConfig

    Returns
    -------
    (N, 2m) ndarray
        Row ``j`` is patch ``j``; water entries first, then bone.

    Raises
    ------
    DimensionError
        If the patch side exceeds either image dimension.
    """
    x = _as_stack(pair)
    return np.concatenate([extract_channel(c, cfg) for c in x], axis=1)


def _aggregate_channel(vals: np.ndarray, cfg: PatchConfig, dims, out: np.ndarray) -> None:
    # vals: (ny, nx, p, p).  Offsets are visited in descending order so that
    # each pixel accumulates its covering patches in ascending patch index.
    p = cfg.side
    sy, sx = cfg.stride
    ny, nx = vals.shape[:2]
    for di in range(p - 1, -1, -1):
        for dj in range(p - 1, -1, -1):
            out[di:di + sy * (ny - 1) + 1:sy, dj:dj + sx * (nx - 1) + 1:sx] += vals[:, :, di, dj]


def aggregate_channel(contribs: np.ndarray, cfg: PatchConfig, dims) -> np.ndarray:
    """Adjoint of :func:`extract_channel`: sum ``(N, m)`` patches into an image."""
    ny, nx = cfg.grid(dims)
    contribs = np.asarray(contribs, dtype=np.float64)
    if contribs.shape != (ny * nx, cfg.m):
        raise DimensionError(
            f"expected {(ny * nx, cfg.m)} patch contributions, got {contribs.shape}")
    out = np.zeros(dims)
    _aggregate_channel(contribs.reshape(ny, nx, cfg.side, cfg.side), cfg, dims, out)
    return out


def coverage(cfg: PatchConfig, dims, weights=None) -> np.ndarray:
    """Number of patches covering each pixel, optionally weighted per patch.

    ``weights`` is a length-N vector of per-patch weights (ones if omitted).
    """
    n = cfg.count(dims)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise DimensionError(f"expected {n} patch weights, got shape {w.shape}")
    ny, nx = cfg.grid(dims)
    vals = np.broadcast_to(w.reshape(ny, nx, 1, 1), (ny, nx, cfg.side, cfg.side))
    out = np.zeros(dims)
    _aggregate_channel(vals, cfg, dims, out)
    return out


def aggregate_patches(contribs, cfg: PatchConfig, dims) -> tuple[np.ndarray, np.ndarray]:
    """Sum two-material patch vectors back into images.

    Parameters
    ----------
    contribs : (N, 2m) array_like
    cfg : PatchConfig
    dims : (height, width)

    Returns
    -------
    acc : (2, H, W) ndarray
        Per-material sum of every patch entry landing on each pixel.
    counts : (2, H, W) ndarray
        Number of patches covering each pixel (identical for both materials).
    """
    contribs = np.asarray(contribs, dtype=np.float64)
    n, m = cfg.count(dims), cfg.m
    if contribs.shape != (n, 2 * m):
        raise DimensionError(f"expected {(n, 2 * m)} patch vectors, got {contribs.shape}")
    acc = np.stack([aggregate_channel(contribs[:, :m], cfg, dims),
                    aggregate_channel(contribs[:, m:], cfg, dims)])
    cov = coverage(cfg, dims)
    return acc, np.stack([cov, cov])


def hard_threshold(u, gamma: float) -> np.ndarray:
    """Zero the entries of ``u`` whose magnitude is below ``gamma``.

    Entries with ``|u_i| == gamma`` are kept.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    u = np.asarray(u, dtype=np.float64)
    return np.where(np.abs(u) < gamma, 0.0, u)


def sparsify_cost(u, gamma: float, axis=-1):
    """Optimal value of ``||u - z||^2 + gamma^2 ||z||_0`` over ``z``.

    Equals ``sum_i min(u_i^2, gamma^2)``; reduced along ``axis`` so a batch
    of transformed patches ``(N, d)`` yields ``N`` costs.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    u = np.asarray(u, dtype=np.float64)
    return np.minimum(u * u, gamma * gamma).sum(axis=axis)
