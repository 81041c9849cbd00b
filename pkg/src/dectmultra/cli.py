"""Command line front end.

Every subcommand reads one flat JSON config; relative paths inside it are
resolved against the config file's directory.  Exit codes: 0 success,
1 usage or configuration error, 2 I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import _parallel
from . import io as dio
from .core_types import (AttenuationPair, DecompositionParams, DimensionError, ImageGrid,
                         MassAttenuationMatrix, MaterialImagePair, MultraModel, NoiseWeights,
                         PatchConfig, Unit, ValidationError)
from .decompose import (CULTRA_DEFAULTS, DecompositionSystem, EpParams, SingularSystemError,
                        StParams, decompose_cultra, decompose_ep, decompose_multra,
                        decompose_st, direct_inversion, pixel_cluster_map,
                        sparse_code_and_cluster)
from .sim_metrics import disk_roi, generate_phantom, nps, rmse, simulate_attenuation
from .transform_learning import LearningParams, learn_multra_model, learn_st_transforms

log = logging.getLogger("dectmultra")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
METHODS = ("direct", "ep", "st", "cultra", "multra")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Config(dict):
    """Flat JSON config with path resolution and typed lookups."""

    def __init__(self, path):
        self.path = Path(path)
        try:
            data = json.loads(self.path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{self.path}: malformed config: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{self.path}: config must be a JSON object")
        super().__init__(data)

    def require(self, key):
        if key not in self:
            raise UsageError(f"{self.path}: missing required key {key!r}")
        return self[key]

    def file(self, key, default=None) -> Path | None:
        v = self.get(key, default)
        if v is None:
            return None
        p = Path(v)
        return p if p.is_absolute() else self.path.parent / p

    def section(self, prefix: str) -> dict:
        """Keys ``prefix.name`` collected as ``{name: value}``."""
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.items() if k.startswith(pre)}


def _params(cls, cfg: Config, prefix: str, base=None):
    vals = base.to_dict() if base is not None else {}
    sec = cfg.section(prefix)
    if "gamma1" in sec:
        g = sec.pop("gamma1")
        sec.setdefault("gamma1_water", g)
        sec.setdefault("gamma1_bone", g)
    vals.update(sec)
    try:
        return cls.from_dict(vals)
    except (TypeError, ValidationError) as exc:
        raise UsageError(f"{cfg.path}: bad {prefix}.* settings: {exc}") from exc


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# train

def _training_pairs(cfg: Config) -> list[MaterialImagePair]:
    pairs = []
    for i, entry in enumerate(cfg.get("training", [])):
        try:
            w, b = entry["water"], entry["bone"]
        except (KeyError, TypeError) as exc:
            raise UsageError(f"{cfg.path}: training[{i}] needs 'water' and 'bone'") from exc
        rp = lambda p: Path(p) if Path(p).is_absolute() else cfg.path.parent / p  # noqa: E731
        pairs.append(dio.read_pair(rp(w), rp(b)))
    if "phantom_seeds" in cfg:
        dims = tuple(cfg.require("dims"))
        pairs += [generate_phantom(None, dims, int(s)) for s in cfg["phantom_seeds"]]
    if not pairs:
        raise UsageError(f"{cfg.path}: no training data ('training' or 'phantom_seeds')")
    return pairs


def cmd_train(cfg: Config, args) -> int:
    out = cfg.file("output") or (cfg.path.parent / "model.bin")
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    pairs = _training_pairs(cfg)
    patch = PatchConfig(int(cfg.get("patch_side", 8)), cfg.get("stride", 1))
    iters = int(cfg.get("iterations", 2000))
    seed = int(cfg.get("seed", 0))
    init = cfg.get("init", "dct_rotations")
    sub = int(cfg.get("subsample", 1))
    kind = cfg.get("model", "multra")
    try:
        if kind == "multra":
            p1 = LearningParams(int(cfg.get("K_common", 15)), float(cfg.get("eta_common", 0.21)),
                                iters, seed, init)
            p2 = LearningParams(int(cfg.get("K_cross", 10)), float(cfg.get("eta_cross", 0.17)),
                                iters, seed + 1, init)
        elif kind == "st":
            p1 = LearningParams(1, float(cfg.get("eta_water", 0.12)), iters, seed, init)
            p2 = LearningParams(1, float(cfg.get("eta_bone", 0.15)), iters, seed + 1, init)
        else:
            raise UsageError(f"{cfg.path}: unknown model type {kind!r}")
    except ValidationError as exc:
        raise UsageError(f"{cfg.path}: {exc}") from exc
    if kind == "multra":
        model, (t1, t2) = learn_multra_model(pairs, patch, p1, p2, sub, return_traces=True)
        dio.write_model(out, model)
        finals = {"common": t1.final, "cross": t2.final}
    else:
        (wu, bu), (t1, t2) = learn_st_transforms(pairs, patch, p1, p2, sub, return_traces=True)
        dio.write_unions(out, [("water", wu, patch), ("bone", bu, patch)])
        finals = {"water": t1.final, "bone": t2.final}
    _emit({"model": str(out), "final_objective": finals})
    return 0


# ---------------------------------------------------------------------------
# simulate

def _a0(cfg: Config, manifest: dict | None = None) -> MassAttenuationMatrix:
    vals = cfg.get("A0", (manifest or {}).get("A0"))
    if vals is None:
        raise UsageError(f"{cfg.path}: missing 'A0' = [phi_1H, phi_2H, phi_1L, phi_2L]")
    try:
        return MassAttenuationMatrix(*map(float, vals))
    except (TypeError, ValidationError) as exc:
        raise UsageError(f"{cfg.path}: bad A0: {exc}") from exc


def cmd_simulate(cfg: Config, args) -> int:
    out = cfg.file("output_dir") or cfg.path.parent
    manifest_path = out / "manifest.json"
    names = ("truth_water", "truth_bone", "high", "low")
    if not args.force and (manifest_path.exists()
                           or any((out / f"{n}.raw").exists() for n in names)):
        raise UsageError(f"{out} already holds simulation outputs; pass --force to overwrite")
    dims = tuple(int(v) for v in cfg.require("dims"))
    seed = int(cfg.get("seed", 0))
    noise_seed = int(cfg.get("noise_seed", seed + 1))
    A0 = _a0(cfg)
    s2 = (float(cfg.get("sigma2_high", 0.0)), float(cfg.get("sigma2_low", 0.0)))
    if min(s2) < 0:
        raise UsageError(f"{cfg.path}: noise variances must be >= 0")
    if s2 == (0.0, 0.0):
        weights = None
    elif min(s2) > 0:
        weights = NoiseWeights(*s2)
    else:
        raise UsageError(f"{cfg.path}: set both noise variances or neither")
    dtype = cfg.get("dtype", "f32")
    scene = cfg.get("scene")
    truth = generate_phantom(scene, dims, seed)
    y = simulate_attenuation(truth, A0, weights, noise_seed)
    out.mkdir(parents=True, exist_ok=True)
    dio.write_image(out / "truth_water.raw", truth.water, dtype)
    dio.write_image(out / "truth_bone.raw", truth.bone, dtype)
    dio.write_image(out / "high.raw", y.high, dtype)
    dio.write_image(out / "low.raw", y.low, dtype)
    manifest = {"dims": list(dims), "seed": seed, "noise_seed": noise_seed,
                "A0": [A0.phi_1H, A0.phi_2H, A0.phi_1L, A0.phi_2L],
                "sigma2_high": s2[0], "sigma2_low": s2[1], "dtype": dtype,
                "scene": "default" if scene is None else scene,
                "files": {n: f"{n}.raw" for n in names}}
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    _emit({"manifest": str(manifest_path)})
    return 0


# ---------------------------------------------------------------------------
# decompose

def _load_manifest(cfg: Config) -> tuple[dict | None, Path | None]:
    p = cfg.file("manifest")
    if p is None:
        return None, None
    return json.loads(Path(p).read_text()), p.parent


def _system(cfg: Config, manifest, patch: PatchConfig) -> DecompositionSystem:
    m = manifest or {}
    s2h = cfg.get("sigma2_high", m.get("sigma2_high"))
    s2l = cfg.get("sigma2_low", m.get("sigma2_low"))
    if s2h is None or s2l is None:
        raise UsageError(f"{cfg.path}: missing noise variances sigma2_high / sigma2_low")
    try:
        weights = NoiseWeights(float(s2h), float(s2l))
    except ValidationError as exc:
        raise UsageError(f"{cfg.path}: {exc}") from exc
    return DecompositionSystem(_a0(cfg, manifest), weights, patch)


def _inputs(cfg: Config, manifest, mdir):
    def pick(key, default_name):
        p = cfg.file(key)
        if p is None and manifest is not None:
            p = mdir / manifest["files"][default_name]
        if p is None:
            raise UsageError(f"{cfg.path}: missing input {key!r}")
        return p
    hi, lo = dio.read_image(pick("high", "high")), dio.read_image(pick("low", "low"))
    return AttenuationPair(ImageGrid(hi.values, Unit.ATTENUATION),
                           ImageGrid(lo.values, Unit.ATTENUATION))


def _model_sections(cfg: Config, method: str):
    path = cfg.file("model")
    if path is None:
        raise UsageError(f"method {method!r} needs a 'model' file")
    sections = {role: (u, p) for role, u, p in dio.read_unions(path)}
    need = {"multra": ("common", "cross"), "cultra": ("cross",), "st": ("water", "bone")}[method]
    missing = [r for r in need if r not in sections]
    if missing:
        raise UsageError(
            f"model {path} has sections {sorted(sections)}; method {method!r} needs {missing}")
    return sections


def cmd_decompose(cfg: Config, args) -> int:
    method = args.method or cfg.get("method", "multra")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    out = cfg.file("output_dir") or cfg.path.parent
    if (out / "x_water.raw").exists() and not args.force:
        raise UsageError(f"{out / 'x_water.raw'} exists; pass --force to overwrite")
    manifest, mdir = _load_manifest(cfg)
    sections = _model_sections(cfg, method) if method in ("st", "cultra", "multra") else {}
    patch = next(iter(sections.values()))[1] if sections else PatchConfig(
        int(cfg.get("patch_side", 8)), cfg.get("stride", 1))
    system = _system(cfg, manifest, patch)
    y = _inputs(cfg, manifest, mdir)
    dtype = cfg.get("dtype", "f32")

    x0 = direct_inversion(y, system.A0)
    trace = None
    codes = None
    if method == "direct":
        x = x0
    else:
        if cfg.get("init_water") is not None:
            init = dio.read_pair(cfg.file("init_water"), cfg.file("init_bone"))
        elif method == "ep":
            init = x0
        else:
            init, _ = decompose_ep(y, _params(EpParams, cfg, "ep"), system, x0)
        if method == "ep":
            x, trace = decompose_ep(y, _params(EpParams, cfg, "ep"), system, init)
        elif method == "multra":
            model = MultraModel(sections["common"][0], sections["cross"][0], patch)
            params = _params(DecompositionParams, cfg, "multra")
            x, codes, trace = decompose_multra(y, model, params, system, init)
        elif method == "cultra":
            params = _params(DecompositionParams, cfg, "cultra", CULTRA_DEFAULTS)
            x, codes, trace = decompose_cultra(y, sections["cross"][0], params, system, init)
        else:
            (wu, _), (bu, _) = sections["water"], sections["bone"]
            x, codes, trace = decompose_st(y, wu.transforms[0], bu.transforms[0],
                                           _params(StParams, cfg, "st"), system, init)
    files = dio.write_pair(out / "x", x, dtype)
    report = {"method": method, "water": str(files[0]), "bone": str(files[1])}
    if trace is not None:
        report["trace"] = str(dio.write_trace(out / "trace.csv", trace))
        report["final_objective"] = float(trace.total[-1])
    if codes is not None and cfg.get("cluster_map", False):
        report["cluster_map"] = str(_write_cluster_map(out, codes, patch, x.shape, sections))
    _emit(report)
    return 0


def _write_cluster_map(out: Path, codes, patch, dims, sections) -> Path:
    cmap = pixel_cluster_map(codes, patch, dims)
    kc = sections["common"][0].K if "common" in sections else 1
    labels = cmap.label_image(kc).astype(np.float64)
    return dio.write_image(out / "cluster_map.raw", ImageGrid(labels, Unit.DIMENSIONLESS), "f32")


def cmd_cluster_map(cfg: Config, args) -> int:
    sections = _model_sections(cfg, "multra")
    patch = sections["common"][1]
    model = MultraModel(sections["common"][0], sections["cross"][0], patch)
    x = dio.read_pair(cfg.file("water") or cfg.require("water"),
                      cfg.file("bone") or cfg.require("bone"))
    params = _params(DecompositionParams, cfg, "multra")
    codes = sparse_code_and_cluster(x, model, params)
    out = cfg.file("output_dir") or cfg.path.parent
    path = _write_cluster_map(out, codes, patch, x.shape, sections)
    hist = Counter(int(v) for v in codes.model)
    _emit({"cluster_map": str(path), "patches_common": hist.get(1, 0),
           "patches_cross": hist.get(2, 0)})
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(cfg: Config, args) -> int:
    metric = args.metric or cfg.get("metric")
    if metric not in ("rmse", "nps"):
        raise UsageError(f"unknown metric {metric!r}; choose rmse or nps")
    est = dio.read_image(cfg.file("estimate") or cfg.require("estimate"))
    truth_path = cfg.file("truth")
    if truth_path is None and metric == "rmse":
        raise UsageError(f"{cfg.path}: rmse needs 'truth'")
    truth = dio.read_image(truth_path) if truth_path is not None else None
    if truth is not None and truth.shape != est.shape:
        raise DimensionError(f"truth {truth.shape} and estimate {est.shape} differ")
    if metric == "rmse":
        roi = disk_roi(est.shape, cfg.get("roi_radius"), cfg.get("roi_center"))
        _emit({"metric": "rmse", "value": rmse(est, truth, roi),
               "roi_pixels": int(roi.sum())})
        return 0
    if "roi" not in cfg:
        raise UsageError(f"{cfg.path}: nps needs 'roi' = [row, col] of the block origin")
    size = int(cfg.get("size", 30))
    err = est.values - truth.values if truth is not None else est.values
    spec = nps(err, tuple(cfg["roi"]), size)
    report = {"metric": "nps", "size": size, "total_power": float(spec.sum())}
    if args.check_parseval or cfg.get("check_parseval", False):
        r0, c0 = cfg["roi"]
        f = err[r0:r0 + size, c0:c0 + size]
        f = f - f.mean()
        expected = size * size * float(np.sum(f * f))
        rel = abs(float(spec.sum()) - expected) / max(expected, np.finfo(float).tiny)
        report["parseval_rel_error"] = rel
        report["parseval_ok"] = bool(rel <= 1e-9)
    if cfg.get("output") is not None:
        report["output"] = str(dio.write_image(
            cfg.file("output"), ImageGrid(spec, Unit.DIMENSIONLESS), cfg.get("dtype", "f64")))
    _emit(report)
    if report.get("parseval_ok") is False:
        return EXIT_NUMERIC
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dectmultra", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("train", "learn transform unions"),
                           ("simulate", "phantom + noisy attenuation images"),
                           ("decompose", "material decomposition"),
                           ("eval", "RMSE / NPS metrics"),
                           ("cluster-map", "pixel-level cluster labels")):
        usage = ("dectmultra eval [-h] [--force] [--check-parseval] [rmse|nps] config"
                 if name == "eval" else None)
        sp = sub.add_parser(name, help=helptext, usage=usage)
        if name == "eval":
            # optional metric before the config; split in main() because
            # argparse cannot interleave these positionals with flags
            sp.add_argument("config", nargs="+", metavar="[rmse|nps] config",
                            help="metric (else taken from the config) and config path")
        else:
            sp.add_argument("config", type=Path)
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name == "decompose":
            sp.add_argument("--method", choices=METHODS)
        if name == "eval":
            sp.add_argument("--check-parseval", action="store_true",
                            help="verify the NPS energy identity; exit 3 if it fails")
    return p


COMMANDS = {"train": cmd_train, "simulate": cmd_simulate, "decompose": cmd_decompose,
            "eval": cmd_eval, "cluster-map": cmd_cluster_map}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and (args.command != "eval" or any(e.startswith("-") for e in extra)):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if args.command == "eval":
        args.config += extra
        if len(args.config) > 2 or (len(args.config) == 2
                                    and args.config[0] not in ("rmse", "nps")):
            parser.error("eval takes an optional metric (rmse|nps) and one config path")
        args.metric = args.config[0] if len(args.config) == 2 else None
        args.config = Path(args.config[-1])
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("dectmultra: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _parallel.threads(args.threads):
            cfg = Config(args.config)
            return COMMANDS[args.command](cfg, args)
    except (UsageError, ValidationError, DimensionError) as exc:
        print(f"dectmultra: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, dio.FormatError) as exc:
        name = getattr(exc, "filename", None)
        msg = f"{exc.strerror}: {name}" if name else str(exc)
        print(f"dectmultra: I/O error: {msg}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, SingularSystemError, np.linalg.LinAlgError) as exc:
        print(f"dectmultra: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
