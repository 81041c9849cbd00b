"""On-disk formats for images, transform models, traces and codes.

Image
    ``<name>.raw`` holds the little-endian pixel payload, row-major, and
    ``<name>.json`` the header ``{width, height, unit, dtype, layout}``.
    ``dtype`` is ``"f32"`` by default; ``"f64"`` is accepted for lossless
    storage.

Model
    One file of consecutive sections.  Each section is a single JSON header
    line ``{kind, K, dim, eta, seed, patch_side, stride, role}`` followed by
    ``K*dim*dim`` little-endian float64 values (the matrices row-major, in
    class order).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core_types import (ImageGrid, MaterialImagePair, MultraModel, ObjectiveTrace,
                         PatchConfig, SparseCodeSet, TransformUnion, Unit, UnionKind,
                         ValidationError)

_DTYPES = {"f32": "<f4", "f64": "<f8"}


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in ("", ".json"):
        p = p.with_suffix(".raw")
    return p, p.with_suffix(".json")


def write_image(path, img: ImageGrid, dtype: str = "f32") -> Path:
    """Write ``img`` as payload + sidecar header; returns the payload path."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    raw, hdr = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(img.values, dtype=_DTYPES[dtype]).tobytes())
    header = {"width": img.width, "height": img.height, "unit": img.unit.value,
              "dtype": dtype, "layout": "row-major"}
    hdr.write_text(json.dumps(header, indent=1) + "\n")
    return raw


def read_image(path) -> ImageGrid:
    raw, hdr = _paths(path)
    try:
        header = json.loads(hdr.read_text())
        w, h = int(header["width"]), int(header["height"])
        dt = _DTYPES[header.get("dtype", "f32")]
        if header.get("layout", "row-major") != "row-major":
            raise FormatError(f"{hdr}: unsupported layout {header['layout']!r}")
        unit = Unit(header.get("unit", Unit.DIMENSIONLESS.value))
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{hdr}: malformed image header ({exc})") from exc
    data = np.frombuffer(raw.read_bytes(), dtype=dt)
    if data.size != w * h:
        raise FormatError(f"{raw}: expected {w * h} pixels, found {data.size}")
    return ImageGrid.from_flat(data.astype(np.float64), w, h, unit)


def write_pair(prefix, pair: MaterialImagePair, dtype: str = "f32") -> tuple[Path, Path]:
    prefix = Path(prefix)
    return (write_image(prefix.parent / f"{prefix.name}_water.raw", pair.water, dtype),
            write_image(prefix.parent / f"{prefix.name}_bone.raw", pair.bone, dtype))


def read_pair(water_path, bone_path) -> MaterialImagePair:
    w, b = read_image(water_path), read_image(bone_path)
    return MaterialImagePair(ImageGrid(w.values, Unit.DENSITY), ImageGrid(b.values, Unit.DENSITY))


# ---------------------------------------------------------------------------
# models

def _section(union: TransformUnion, patch: PatchConfig, role: str) -> bytes:
    header = {"kind": union.kind.value, "K": union.K, "dim": union.dim, "eta": union.eta,
              "seed": union.seed, "patch_side": patch.side, "stride": list(patch.stride),
              "role": role}
    payload = np.ascontiguousarray(union.stack(), dtype="<f8").tobytes()
    return (json.dumps(header, sort_keys=True) + "\n").encode() + payload


def write_unions(path, sections) -> Path:
    """Write ``[(role, union, patch), ...]`` as one model file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(_section(u, p, role) for role, u, p in sections))
    return path


def read_unions(path) -> list[tuple[str, TransformUnion, PatchConfig]]:
    buf = Path(path).read_bytes()
    pos, out = 0, []
    while pos < len(buf):
        nl = buf.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: truncated section header")
        try:
            h = json.loads(buf[pos:nl])
            K, dim = int(h["K"]), int(h["dim"])
            kind = UnionKind(h["kind"])
            patch = PatchConfig(int(h["patch_side"]), tuple(h["stride"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"{path}: malformed section header ({exc})") from exc
        n = K * dim * dim * 8
        body = buf[nl + 1:nl + 1 + n]
        if len(body) != n:
            raise FormatError(f"{path}: truncated matrix payload")
        stack = np.frombuffer(body, dtype="<f8").reshape(K, dim, dim).astype(np.float64)
        try:
            union = TransformUnion.from_stack(kind, stack, h.get("eta"), h.get("seed"))
        except ValidationError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        out.append((h.get("role", kind.value), union, patch))
        pos = nl + 1 + n
    if not out:
        raise FormatError(f"{path}: no model sections")
    return out


def write_model(path, model: MultraModel) -> Path:
    return write_unions(path, [("common", model.common, model.patch),
                               ("cross", model.cross, model.patch)])


def read_model(path) -> MultraModel:
    sections = {role: (u, p) for role, u, p in read_unions(path)}
    if "common" not in sections or "cross" not in sections:
        raise FormatError(f"{path}: not a mixed-union model (roles {sorted(sections)})")
    (common, patch), (cross, _) = sections["common"], sections["cross"]
    return MultraModel(common, cross, patch)


# ---------------------------------------------------------------------------
# traces and codes

def write_trace(path, trace: ObjectiveTrace) -> Path:
    """Comma-separated ``iteration,total,fidelity,regularizer`` with exact floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["iteration,total,fidelity,regularizer"]
    for i, (t, f, r) in enumerate(zip(trace.total, trace.fidelity, trace.regularizer)):
        lines.append(f"{i},{float(t)!r},{float(f)!r},{float(r)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trace(path) -> ObjectiveTrace:
    rows = Path(path).read_text().strip().splitlines()[1:]
    vals = np.array([[float(v) for v in r.split(",")[1:]] for r in rows]).reshape(-1, 3)
    return ObjectiveTrace(vals[:, 0], vals[:, 1], vals[:, 2])


def write_codes(path, codes: SparseCodeSet) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, model=codes.model, classes=codes.classes, codes=codes.codes)
    return path


def read_codes(path) -> SparseCodeSet:
    with np.load(path) as z:
        return SparseCodeSet(z["model"], z["classes"], z["codes"])


def params_to_json(params) -> str:
    return json.dumps(params.to_dict(), sort_keys=True)


def params_from_json(cls, text: str):
    return cls.from_dict(json.loads(text))
