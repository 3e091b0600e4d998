"""Command-line entry points: estimate, render, errmap, make-box."""

from __future__ import annotations

import argparse
import json
import logging
import platform
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, fields, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .envmap import EnvironmentMap, build_light_distribution, equirect_image
from .estimator import DegenerateProblem, ObjectiveConfig, estimate_lights, view_seed
from .io import (ConfigError, FormatError, SceneConfig, error_map, load_image, load_mask,
                 load_mesh, load_reference, load_scene_config, save_image)
from .scene import GeometryError, build_accel
from .tracer import TraceConfig, apply_jacobian, set_threads, trace_jacobian

log = logging.getLogger("envlight")

EXIT_OK, EXIT_INVALID, EXIT_CAPPED = 0, 1, 2
INPUT_ERRORS = (ConfigError, FormatError, GeometryError, DegenerateProblem, FileNotFoundError,
                ValueError)


class OutputDir:
    """Stage files in a sibling temp dir; publish into ``path`` only on success."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.files: list[str] = []

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=".envlight-", dir=self.path.parent))
        return self

    def file(self, name: str) -> Path:
        self.files.append(name)
        return self.stage / name

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.path.mkdir(parents=True, exist_ok=True)
                for name in self.files:
                    shutil.move(str(self.stage / name), str(self.path / name))
        finally:
            shutil.rmtree(self.stage, ignore_errors=True)
        return False


def _versions() -> dict:
    out = {"envlight": __version__, "python": platform.python_version()}
    for pkg in ("numpy", "numba", "scipy", "Pillow"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            pass
    return out


def _apply_overrides(cfg: SceneConfig, args) -> SceneConfig:
    trace = dict(cfg.trace)
    objective = dict(cfg.objective)
    for flag, key in (("spp", "samples_per_pixel"), ("bounces", "max_bounces"),
                      ("seed", "rng_seed")):
        if getattr(args, flag, None) is not None:
            trace[key] = getattr(args, flag)
    for flag, key in (("alpha", "alpha"), ("alpha_rel", "alpha_rel"), ("beta", "beta"),
                      ("cauchy_c", "cauchy_c"), ("max_smc", "max_smc_iters")):
        if getattr(args, flag, None) is not None:
            objective[key] = getattr(args, flag)
    rings = args.rings if getattr(args, "rings", None) is not None else cfg.rings
    render_spp = args.render_spp if getattr(args, "render_spp", None) is not None else cfg.render_spp
    threads = args.threads if getattr(args, "threads", None) is not None else cfg.threads
    return replace(cfg, trace=trace, objective=objective, rings=rings, render_spp=render_spp,
                   threads=threads)


def _configs(cfg: SceneConfig) -> tuple[TraceConfig, ObjectiveConfig]:
    known_t = {f.name for f in fields(TraceConfig)}
    known_o = {f.name for f in fields(ObjectiveConfig)}
    bad = (set(cfg.trace) - known_t) | (set(cfg.objective) - known_o)
    if bad:
        raise ConfigError(f"unknown settings: {sorted(bad)}")
    try:
        return TraceConfig(**cfg.trace), ObjectiveConfig(**cfg.objective)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _resolved(cfg: SceneConfig, trace: TraceConfig, objective: ObjectiveConfig) -> dict:
    doc = cfg.to_json()
    doc["mesh"] = str(Path(doc["mesh"]).resolve())
    for v, view in zip(doc["views"], cfg.views):
        v["image"] = str(Path(view.image).resolve())
        if view.mask:
            v["mask"] = str(Path(view.mask).resolve())
    doc["trace"] = asdict(trace)
    doc["objective"] = asdict(objective)
    return doc


def render_views(accel, env: EnvironmentMap, cameras, trace: TraceConfig, spp: int) -> list:
    """Forward renders used by both ``estimate`` and ``render`` (same seeds, same output)."""
    dist = build_light_distribution(env, trace.floor_weight)
    out = []
    for k, cam in enumerate(cameras):
        cfg = replace(trace, samples_per_pixel=spp, rng_seed=view_seed(trace.rng_seed, k))
        out.append(apply_jacobian(trace_jacobian(accel, env, cam, cfg, dist), env.radiance))
    return out


def _write_render(out: OutputDir, k: int, img) -> None:
    save_image(out.file(f"view{k}_render.pfm"), img)
    save_image(out.file(f"view{k}_render.png"), img)


def _manifest(command: str, argv, resolved: dict, trace: TraceConfig, n_views: int,
              timings: dict, outputs: list) -> dict:
    return {
        "command": command,
        "argv": list(argv),
        "resolved_config": resolved,
        "seeds": {"rng_seed": int(trace.rng_seed),
                  "view_seeds": [view_seed(trace.rng_seed, k) for k in range(n_views)]},
        "versions": _versions(),
        "timings": timings,
        "outputs": outputs,
    }


def _finite(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    return x


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(_finite(doc), indent=2))


def cmd_estimate(args) -> int:
    t_start = time.perf_counter()
    cfg = _apply_overrides(load_scene_config(args.config), args)
    trace, objective = _configs(cfg)
    set_threads(cfg.threads)
    accel = build_accel(load_mesh(cfg.mesh))
    refs = [load_reference(v, accel) for v in cfg.views]
    cameras = [v.camera for v in cfg.views]
    t_load = time.perf_counter() - t_start

    env, report = estimate_lights(accel, refs, cameras, objective, trace, cfg.rings)
    t_est = time.perf_counter() - t_start - t_load
    renders = render_views(accel, env, cameras, trace, cfg.render_spp)
    t_render = time.perf_counter() - t_start - t_load - t_est

    with OutputDir(args.out) as out:
        env.save(out.file("env_map.json"))
        save_image(out.file("env_map.pfm"), equirect_image(env))
        stats = []
        for k, (ref, img) in enumerate(zip(refs, renders)):
            _write_render(out, k, img)
            err = error_map(ref.image, img, args.err_scale, ref.mask)
            save_image(out.file(f"view{k}_error.pfm"), err)
            save_image(out.file(f"view{k}_error.png"), err)
            diff = (img - ref.image)[ref.mask]
            stats.append({"view": k, "masked_rmse": float(np.sqrt(np.mean(diff ** 2))),
                          "reference_mean": float(ref.image[ref.mask].mean()),
                          "valid_pixels": int(ref.mask.sum())})
        doc = report.to_json(env)
        doc["views"] = stats
        _dump(out.file("report.json"), doc)
        timings = {"load": t_load, "estimate": t_est, "render": t_render,
                   "total": time.perf_counter() - t_start}
        _dump(out.file("manifest.json"),
              _manifest("estimate", args.argv, _resolved(cfg, trace, objective), trace,
                        len(cameras), timings, list(out.files) + ["manifest.json"]))
    status = "converged" if report.converged else "stopped at the sMC round limit"
    print(f"{status} after {len(report.rounds)} rounds; outputs in {args.out}")
    return EXIT_OK if report.converged else EXIT_CAPPED


def cmd_render(args) -> int:
    t_start = time.perf_counter()
    cfg = _apply_overrides(load_scene_config(args.config), args)
    trace, objective = _configs(cfg)
    set_threads(cfg.threads)
    try:
        env = EnvironmentMap.load(args.envmap)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read environment map {args.envmap}: {e}") from None
    if env.ring_count != cfg.rings:
        raise ConfigError(f"environment map has {env.ring_count} rings, config says {cfg.rings}")
    accel = build_accel(load_mesh(cfg.mesh))
    cameras = [v.camera for v in cfg.views]
    renders = render_views(accel, env, cameras, trace, cfg.render_spp)
    with OutputDir(args.out) as out:
        for k, img in enumerate(renders):
            _write_render(out, k, img)
        _dump(out.file("manifest.json"),
              _manifest("render", args.argv, _resolved(cfg, trace, objective), trace,
                        len(cameras), {"total": time.perf_counter() - t_start},
                        list(out.files) + ["manifest.json"]))
    print(f"rendered {len(renders)} view(s) into {args.out}")
    return EXIT_OK


def cmd_errmap(args) -> int:
    ref = load_image(args.reference)
    img = load_image(args.render)
    if ref.shape != img.shape:
        raise ConfigError(f"size mismatch: {ref.shape[:2]} vs {img.shape[:2]}")
    mask = load_mask(args.mask) if args.mask else None
    if mask is not None and mask.shape != ref.shape[:2]:
        raise ConfigError("mask size does not match the images")
    err = error_map(ref, img, args.scale, mask)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, err)
    return EXIT_OK


def cmd_make_box(args) -> int:
    from .synthetic import write_box_fixture

    path = write_box_fixture(args.out, elevation_deg=args.elevation, azimuth_deg=args.azimuth,
                             distance=args.distance, radius=args.radius, spp=args.spp,
                             width=args.width, height=args.height, rings=args.rings)
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="envlight",
                                description="Estimate environment lighting from reference images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scene_flags(sp, estimation: bool):
        sp.add_argument("config", help="scene config JSON (or a run manifest)")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--rings", type=int, help="light rings (default 9)")
        sp.add_argument("--bounces", type=int, help="path vertices doing light sampling (default 3)")
        sp.add_argument("--seed", type=int, help="trace seed (default 0)")
        sp.add_argument("--render-spp", type=int, help="samples per pixel of the final render (default 1024)")
        sp.add_argument("--threads", type=int, help="tracer threads")
        if estimation:
            sp.add_argument("--spp", type=int, help="samples per pixel per sMC round (default 64)")
            sp.add_argument("--alpha", type=float, help="activation weight (default: data-relative)")
            sp.add_argument("--alpha-rel", type=float, help="data-relative activation weight (default 0.5)")
            sp.add_argument("--beta", type=float, help="activation sharpness (default 0.1)")
            sp.add_argument("--cauchy-c", type=float, help="Cauchy scale, normalized units (default 0.05)")
            sp.add_argument("--max-smc", type=int, help="maximum sMC rounds (default 10)")
            sp.add_argument("--err-scale", type=float, default=1.5, help="error map gain (default 1.5)")

    est = sub.add_parser("estimate", help="estimate an environment map")
    scene_flags(est, True)
    est.set_defaults(func=cmd_estimate)

    ren = sub.add_parser("render", help="render the configured views under an environment map")
    scene_flags(ren, False)
    ren.add_argument("envmap", type=Path, help="environment map JSON")
    ren.set_defaults(func=cmd_render)

    err = sub.add_parser("errmap", help="scaled absolute difference of two images")
    err.add_argument("reference", type=Path)
    err.add_argument("render", type=Path)
    err.add_argument("--out", required=True, type=Path)
    err.add_argument("--scale", type=float, default=1.5)
    err.add_argument("--mask", type=Path)
    err.set_defaults(func=cmd_errmap)

    box = sub.add_parser("make-box", help="write the synthetic box scene with a spherical light")
    box.add_argument("out", type=Path)
    box.add_argument("--elevation", type=float, default=55.0)
    box.add_argument("--azimuth", type=float, default=30.0)
    box.add_argument("--distance", type=float, default=8.0, help="light distance from the box centre")
    box.add_argument("--radius", type=float, default=0.6, help="light sphere radius")
    box.add_argument("--rings", type=int, default=9, help="ring count written into the config")
    box.add_argument("--spp", type=int, default=1024)
    box.add_argument("--width", type=int, default=160)
    box.add_argument("--height", type=int, default=120)
    box.set_defaults(func=cmd_make_box)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
