"""Command-line pipeline: make-scene, bake, estimate-light, cache-shadows,
compose, render, bench, metrics.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numerical failure.
SOP_THREADS caps kernel parallelism. All randomness derives from one seed
through named per-stage streams, so stages re-run independently.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import composition as cp
from . import gbuffer as gb
from . import hdrio
from . import lighting as lt
from . import metrics as mt
from . import octmap as om
from . import probes as pr
from . import scenes
from . import shading as sh
from .config import RunConfig, camera_to_dict, load_config, seed_for
from .errors import ConfigError, FormatError, NumericalError
from .geometry import SurfelScene, apply_transform, load_surfels, save_surfels
from .mathutils import normalize


def _apply_thread_cap():
    cap = os.environ.get("SOP_THREADS")
    if not cap:
        return
    import numba

    try:
        n = int(cap)
    except ValueError:
        raise ConfigError(f"SOP_THREADS must be an integer, got {cap!r}") from None
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _check_finite(name: str, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values produced by stage '{name}'")


def _load_scene(path) -> SurfelScene:
    try:
        return load_surfels(path)
    except FileNotFoundError:
        raise FormatError(f"scene file not found: {path}") from None


def _save_png(path, array_u8):
    from PIL import Image

    Image.fromarray(array_u8).save(path)


def _object_rig(placed: SurfelScene, width: int = 128, height: int = 96):
    lo, hi = placed.bounds
    center = 0.5 * (lo + hi)
    dist = max(2.5 * placed.diagonal, 1e-3)
    cams = scenes.orbit_cameras(center, dist, count=6, elevation_deg=30.0,
                                width=width, height=height)
    cams += scenes.orbit_cameras(center, dist, count=2, elevation_deg=-35.0,
                                 width=width, height=height)
    return cams


def _load_environment(cfg: RunConfig):
    """Environment texture + sampling table from cfg.env_path (or constant white)."""
    if cfg.env_path is not None:
        equirect, _ = hdrio.read_hdr(cfg.env_path)
        oct_tex = lt.equirect_to_oct(equirect.astype(np.float64), cfg.env_oct_size)
    else:
        oct_tex = om.OctTexture.constant(cfg.env_oct_size, 1.0)
    return oct_tex, om.build_sampling_table(oct_tex)


def _object_probes(cfg: RunConfig, placed: SurfelScene) -> pr.ProbeSet:
    if cfg.object_probes_path is not None and Path(cfg.object_probes_path).exists():
        return pr.load_probes(cfg.object_probes_path)
    return pr.build_probe_set(placed, _object_rig(placed), cfg.object_probe_count,
                              cfg.probe_tex_size)


def _shadow_field(cfg: RunConfig, scene, placed) -> cp.ShadowField:
    region = cp.define_shadow_region(
        load_surfels(cfg.object), cfg.placement, cfg.region_multiplier)
    if cfg.shadow_field_path is not None and Path(cfg.shadow_field_path).exists():
        pset = pr.load_probes(cfg.shadow_field_path)
        return cp.ShadowField(probes=pset, region=region)
    return cp.cache_occlusion(scene, placed, region, cfg.cameras,
                              cfg.shadow_probe_count, cfg.probe_tex_size)


@click.group()
def cli():
    """Surfel-scene composition renderer with probe-cached lighting."""
    _apply_thread_cap()


_config_opt = click.option("--config", "config_path", required=True,
                           type=click.Path(), help="Run config JSON.")
_seed_opt = click.option("--seed", type=int, default=None, help="Override config seed.")
_out_opt = click.option("--out", "out_path", type=click.Path(), default=None,
                        help="Override output location.")


@cli.command("make-scene")
@click.option("--out", "out_dir", type=click.Path(), default="tutorial",
              show_default=True)
@click.option("--width", type=int, default=320, show_default=True)
@click.option("--height", type=int, default=180, show_default=True)
def cmd_make_scene(out_dir, width, height):
    """Write the plane+sphere tutorial scene, object, cameras and config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_surfels(scenes.tutorial_scene(), out / "scene.surfel")
    save_surfels(scenes.tutorial_object(), out / "object.surfel")
    cams = scenes.orbit_cameras((0.0, 0.0, 0.3), 4.5, count=3, elevation_deg=38.0,
                                width=width, height=height)
    (out / "cameras.json").write_text(json.dumps([camera_to_dict(c) for c in cams], indent=2))
    config = {
        "scene": "scene.surfel",
        "object": "object.surfel",
        "placement": {"translation": [-0.8, -0.5, 0.31], "rotation": [1, 0, 0, 0],
                      "uniform_scale": 1.0},
        "cameras": "cameras.json",
        "samples": {"reconstruction": 128, "rendering": 256},
        "probes": {"object_count": 5000, "shadow_count": 10000},
        "textures": {"probe_size": 16, "env_oct_size": 512},
        "region_multiplier": 6.0,
        "seed": 0,
        "out_dir": "out",
        "env": "env.hdr",
        "object_probes": "object.sops",
        "shadow_field": "shadow.sops",
        "light": {"location": [-0.8, -0.5, 0.61], "completer": "identity-fill",
                  "external_file": None, "panorama_res": [256, 512],
                  "evs": [-5.0, -2.5, 0.0]},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2))
    click.echo(f"wrote tutorial assets to {out}")


@cli.command("bake")
@_config_opt
@_seed_opt
@_out_opt
def cmd_bake(config_path, seed, out_path):
    """Bake object probes (fuse, subsample, offset, trace) to a SOPS1 file."""
    cfg = load_config(config_path, {"seed": seed})
    if cfg.object is None:
        raise ConfigError("bake requires an 'object' path in the config")
    placed = apply_transform(_load_scene(cfg.object), cfg.placement)
    if len(placed) == 0:
        raise ConfigError("cannot bake probes for an empty object")
    pset = pr.build_probe_set(placed, _object_rig(placed), cfg.object_probe_count,
                              cfg.probe_tex_size)
    out = Path(out_path) if out_path else (cfg.object_probes_path or Path("object.sops"))
    out.parent.mkdir(parents=True, exist_ok=True)
    pr.save_probes(pset, out)
    occ = pset.occlusion.mean()
    click.echo(f"baked {len(pset)} probes (tex {pset.tex_size}) to {out}")
    click.echo(f"coverage: mean occlusion {occ:.3f}, FRNN radius {pset.radius:.4f}")


@cli.command("estimate-light")
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--at", "location", required=True,
              help="Capture location, comma separated: x,y,z")
@click.option("--completer", type=click.Choice(["identity", "identity-fill", "external"]),
              default="identity-fill", show_default=True)
@click.option("--external-file", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), default="env.hdr", show_default=True)
@click.option("--res", default="512x1024", show_default=True,
              help="Panorama resolution HxW.")
@click.option("--oct-size", type=int, default=512, show_default=True)
def cmd_estimate_light(scene_path, location, completer, external_file, out_path,
                       res, oct_size):
    """Capture a panorama at a location, complete it, fuse EVs into HDR."""
    try:
        loc = tuple(float(v) for v in location.split(","))
        assert len(loc) == 3
    except (ValueError, AssertionError):
        raise ConfigError(f"--at expects x,y,z, got {location!r}") from None
    try:
        h, w = (int(v) for v in res.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--res expects HxW, got {res!r}") from None
    if completer == "identity":
        completer = "identity-fill"
    scene = _load_scene(scene_path)
    external_hdr = None
    if completer == "external":
        if external_file is None:
            raise ConfigError("external completer requires --external-file")
        external_hdr = _read_panorama(external_file, (h, w))
    env = lt.estimate_environment(scene, loc, completer=completer,
                                  external_hdr=external_hdr, res=(h, w),
                                  oct_size=oct_size)
    _check_finite("estimate-light", env.equirect, env.oct.data)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    hdrio.write_hdr(out, env.equirect)
    oct_out = out.with_name(out.stem + "_oct.hdr")
    om.save_oct_texture(env.oct, oct_out)
    click.echo(f"wrote {out} and {oct_out}")


def _read_panorama(path, expect_res) -> np.ndarray:
    """Completed panorama as linear radiance; .hdr or 16-bit/8-bit PNG."""
    p = Path(path)
    if not p.exists():
        raise FormatError(f"external panorama not found: {p}")
    if p.suffix.lower() == ".hdr":
        img, _ = hdrio.read_hdr(p)
        img = img.astype(np.float64)
    else:
        from PIL import Image

        with Image.open(p) as im:
            arr = np.asarray(im)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        arr = arr[:, :, :3].astype(np.float64)
        scale = 65535.0 if arr.max() > 255 else 255.0
        img = (arr / scale) ** lt.GAMMA
    if img.shape[:2] != tuple(expect_res):
        raise FormatError(
            f"external panorama is {img.shape[:2]}, capture is {tuple(expect_res)}")
    return img


@cli.command("cache-shadows")
@_config_opt
@_seed_opt
@_out_opt
def cmd_cache_shadows(config_path, seed, out_path):
    """Bake the object-only occlusion field over the potential shadow region."""
    cfg = load_config(config_path, {"seed": seed})
    if cfg.object is None:
        raise ConfigError("cache-shadows requires an 'object' path in the config")
    scene = _load_scene(cfg.scene)
    obj = _load_scene(cfg.object)
    if len(obj) == 0:
        raise ConfigError("cannot cache shadows for an empty object")
    placed = apply_transform(obj, cfg.placement)
    region = cp.define_shadow_region(obj, cfg.placement, cfg.region_multiplier)
    field = cp.cache_occlusion(scene, placed, region, cfg.cameras,
                               cfg.shadow_probe_count, cfg.probe_tex_size)
    out = Path(out_path) if out_path else (cfg.shadow_field_path or Path("shadow.sops"))
    out.parent.mkdir(parents=True, exist_ok=True)
    pr.save_probes(field.probes, out)
    sidecar = {"region_center": [float(v) for v in region.center],
               "region_half_extent": [float(v) for v in region.half_extent],
               "frnn_radius": field.probes.radius}
    out.with_suffix(out.suffix + ".json").write_text(json.dumps(sidecar, indent=2))
    click.echo(f"cached {len(field.probes)} shadow probes to {out}")


@cli.command("compose")
@_config_opt
@_seed_opt
@_out_opt
def cmd_compose(config_path, seed, out_path):
    """Full composition: G-buffers, shadow ratios, relit object, compositing."""
    out_abs = str(Path(out_path).resolve()) if out_path else None
    cfg = load_config(config_path, {"seed": seed, "out_dir": out_abs})
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = _load_scene(cfg.scene)
    timings: dict[str, float] = {}
    manifest = {"config": cfg.to_dict(), "frames": [], "probe_fallbacks": 0,
                "stages_seconds": timings}

    obj = _load_scene(cfg.object) if cfg.object is not None else SurfelScene.empty()
    has_object = len(obj) > 0
    placed = apply_transform(obj, cfg.placement) if has_object else obj

    t0 = time.perf_counter()
    env_tex, env_table = _load_environment(cfg)
    timings["environment"] = time.perf_counter() - t0

    shadow_fn = None
    obj_probes = None
    if has_object:
        t0 = time.perf_counter()
        obj_probes = _object_probes(cfg, placed)
        timings["object_probes"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        field = _shadow_field(cfg, scene, placed)
        timings["shadow_field"] = time.perf_counter() - t0
        shadow_fn = cp.make_shadow_fn(env_tex, env_table, field,
                                      s_r=cfg.samples_rendering,
                                      seed=cfg.stage_seed("shadow"))

    timings["gbuffer"] = 0.0
    timings["shadow"] = 0.0
    timings["relight"] = 0.0
    timings["composite"] = 0.0
    for i, cam in enumerate(cfg.cameras):
        t0 = time.perf_counter()
        scene_gb = gb.render_gbuffers(scene, cam)
        timings["gbuffer"] += time.perf_counter() - t0

        obj_render = None
        if has_object:
            t0 = time.perf_counter()
            obj_render = cp.relight_object(placed, env_tex, env_table, obj_probes,
                                           cam, s_r=cfg.samples_rendering,
                                           seed=cfg.stage_seed(f"relight:{i}"))
            manifest["probe_fallbacks"] += obj_render.probe_fallbacks
            timings["relight"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        hdr, ldr = cp.compose_frame(scene_gb, cam, obj_render, shadow_fn)
        timings["composite"] += time.perf_counter() - t0
        _check_finite(f"compose frame {i}", hdr)

        png = out_dir / f"frame_{i:03d}.png"
        hdr_path = out_dir / f"frame_{i:03d}.hdr"
        _save_png(png, ldr)
        hdrio.write_hdr(hdr_path, hdr)
        manifest["frames"].append({"camera": i, "png": png.name, "hdr": hdr_path.name})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    click.echo(f"wrote {len(cfg.cameras)} frames to {out_dir}")


@cli.command("render")
@_config_opt
@_out_opt
def cmd_render(config_path, out_path):
    """Plain scene G-buffer export: float planes, sidecar, LDR preview."""
    out_abs = str(Path(out_path).resolve()) if out_path else None
    cfg = load_config(config_path, {"out_dir": out_abs})
    scene = _load_scene(cfg.scene)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cfg.cameras):
        g = gb.render_gbuffers(scene, cam)
        frame_dir = out_dir / f"frame_{i:03d}"
        gb.export_planes(g, frame_dir)
        gb.export_preview(g, frame_dir / "preview.png")
    click.echo(f"exported {len(cfg.cameras)} G-buffers to {out_dir}")


@cli.command("bench")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--points", "n_points", type=int, default=100_000, show_default=True)
@click.option("--dirs", "n_dirs", type=int, default=128, show_default=True)
@click.option("--probes", "n_probes", type=int, default=5000, show_default=True)
def cmd_bench(config_path, seed, out_path, n_points, n_dirs, n_probes):
    """Probe-query vs ray-trace occlusion throughput, plus frame stage times."""
    cfg = load_config(config_path, {"seed": seed})
    scene = _load_scene(cfg.scene)
    rng = np.random.default_rng(cfg.stage_seed("bench"))

    pset = pr.build_probe_set(scene, cfg.cameras, n_probes, cfg.probe_tex_size)
    points, normals = pr.fuse_surface_points(scene, cfg.cameras)
    pick = rng.integers(0, len(points), n_points)
    offset = 0.01 * scene.diagonal
    qpoints = points[pick] + normals[pick] * offset \
        + rng.uniform(-0.5, 0.5, (n_points, 3)) * offset
    dirs = normalize(rng.standard_normal((n_dirs, 3)))

    # Warm both kernels on tiny inputs so JIT cost stays out of the timings.
    pr.occlusion_interp_grid(pset, qpoints[:2], dirs[:2])
    pr.traced_occlusion_batch(scene, qpoints[:2], dirs[:2])

    n_queries = n_points * n_dirs
    t0 = time.perf_counter()
    occ_interp = pr.occlusion_interp_grid(pset, qpoints, dirs)
    interp_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    chunk = max(1, 2_000_000 // n_dirs)
    occ_traced = np.empty((n_points, n_dirs))
    for s in range(0, n_points, chunk):
        e = min(s + chunk, n_points)
        p_rep = np.repeat(qpoints[s:e], n_dirs, axis=0)
        d_rep = np.tile(dirs, (e - s, 1))
        occ_traced[s:e] = pr.traced_occlusion_batch(scene, p_rep, d_rep).reshape(e - s, n_dirs)
    traced_s = time.perf_counter() - t0

    err = np.abs(occ_interp - occ_traced)
    report = {
        "n_points": n_points,
        "n_dirs": n_dirs,
        "n_queries": n_queries,
        "probe_count": len(pset),
        "interp_seconds": interp_s,
        "traced_seconds": traced_s,
        "interp_queries_per_s": n_queries / interp_s,
        "traced_queries_per_s": n_queries / traced_s,
        "speedup": traced_s / interp_s,
        "occlusion_mean_abs_err": float(err.mean()),
        "occlusion_p95_abs_err": float(np.percentile(err, 95)),
    }

    cam = cfg.cameras[0]
    t0 = time.perf_counter()
    scene_gb = gb.render_gbuffers(scene, cam)
    report["frame_gbuffer_s"] = time.perf_counter() - t0
    env_tex, env_table = _load_environment(cfg)
    ctx = sh.IlluminationContext(env=env_tex, env_table=env_table, probes=pset)
    t0 = time.perf_counter()
    sh.deferred_pbr(scene_gb, cam, ctx, s_r=cfg.samples_rendering, mode="importance",
                    seed=cfg.stage_seed("bench-shade"))
    report["frame_shade_s"] = time.perf_counter() - t0

    text = json.dumps(report, indent=2)
    if out_path:
        Path(out_path).write_text(text)
    click.echo(text)


@cli.command("metrics")
@click.option("--pred", required=True, type=click.Path())
@click.option("--ref", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Write the JSON report here as well as stdout.")
def cmd_metrics(pred, ref, report_path):
    """L1 / PSNR / SSIM / render-loss between two images (.hdr or .png)."""
    a = _read_image(pred)
    b = _read_image(ref)
    pair = mt.ImagePair(a, b)
    report = {"l1": mt.l1(pair), "psnr": mt.psnr(pair), "ssim": mt.ssim(pair),
              "render_loss": mt.render_loss(pair)}
    text = json.dumps(report, indent=2)
    if report_path:
        Path(report_path).write_text(text)
    click.echo(text)


def _read_image(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"image not found: {p}")
    if p.suffix.lower() == ".hdr":
        img, _ = hdrio.read_hdr(p)
        return img.astype(np.float64)
    from PIL import Image

    with Image.open(p) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    arr = arr[:, :, :3].astype(np.float64)
    return arr / (65535.0 if arr.max() > 255 else 255.0)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        return 2
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 2
    except (FormatError, OSError) as e:
        click.echo(f"I/O error: {e}", err=True)
        return 3
    except NumericalError as e:
        click.echo(f"numerical failure: {e}", err=True)
        return 4
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        return 1


if __name__ == "__main__":
    sys.exit(main())
