"""Run configuration: JSON schema, path resolution, camera rigs, and the
named-stream seed splitter every pipeline stage draws from.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .gbuffer import Camera
from .geometry import PlacementTransform

DEFAULT_EVS = (-5.0, -2.5, 0.0)


def seed_for(seed: int, stage: str) -> int:
    """Derived per-stage seed; stable across platforms and runs."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def camera_from_dict(d: dict) -> Camera:
    try:
        return Camera(
            position=np.asarray(d["position"], dtype=np.float64),
            orientation=np.asarray(d["quaternion"], dtype=np.float64),
            fov_y=float(np.radians(d["fov_y_deg"])),
            width=int(d["width"]),
            height=int(d["height"]),
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"bad camera entry: {e}") from None


def camera_to_dict(c: Camera) -> dict:
    return {
        "position": [float(v) for v in c.position],
        "quaternion": [float(v) for v in c.orientation],
        "fov_y_deg": float(np.degrees(c.fov_y)),
        "width": c.width,
        "height": c.height,
    }


@dataclass
class RunConfig:
    """Resolved inputs and constants for one composition run."""

    scene: Path
    cameras: list
    object: Path | None = None
    placement: PlacementTransform = field(default_factory=PlacementTransform.identity)
    samples_reconstruction: int = 128
    samples_rendering: int = 256
    object_probe_count: int = 5000
    shadow_probe_count: int = 10000
    probe_tex_size: int = 16
    env_oct_size: int = 512
    region_multiplier: float = 6.0
    seed: int = 0
    out_dir: Path = Path("out")
    env_path: Path | None = None
    object_probes_path: Path | None = None
    shadow_field_path: Path | None = None
    light_location: tuple | None = None
    light_completer: str = "identity-fill"
    light_external: Path | None = None
    panorama_res: tuple = (512, 1024)
    evs: tuple = DEFAULT_EVS

    def __post_init__(self):
        for name in ("samples_reconstruction", "samples_rendering",
                     "object_probe_count", "shadow_probe_count",
                     "probe_tex_size", "env_oct_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.region_multiplier < 1.0:
            raise ConfigError("region_multiplier must be >= 1")
        if not self.cameras:
            raise ConfigError("at least one camera is required")
        if self.light_completer not in ("identity-fill", "external"):
            raise ConfigError(f"unknown completer: {self.light_completer}")

    def stage_seed(self, stage: str) -> int:
        return seed_for(self.seed, stage)

    def to_dict(self) -> dict:
        return {
            "scene": str(self.scene),
            "object": str(self.object) if self.object else None,
            "placement": {
                "translation": [float(v) for v in self.placement.translation],
                "rotation": [float(v) for v in self.placement.rotation],
                "uniform_scale": float(self.placement.uniform_scale),
            },
            "cameras": [camera_to_dict(c) for c in self.cameras],
            "samples": {"reconstruction": self.samples_reconstruction,
                        "rendering": self.samples_rendering},
            "probes": {"object_count": self.object_probe_count,
                       "shadow_count": self.shadow_probe_count},
            "textures": {"probe_size": self.probe_tex_size,
                         "env_oct_size": self.env_oct_size},
            "region_multiplier": self.region_multiplier,
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "env": str(self.env_path) if self.env_path else None,
            "object_probes": str(self.object_probes_path) if self.object_probes_path else None,
            "shadow_field": str(self.shadow_field_path) if self.shadow_field_path else None,
            "light": {
                "location": list(self.light_location) if self.light_location else None,
                "completer": self.light_completer,
                "external_file": str(self.light_external) if self.light_external else None,
                "panorama_res": list(self.panorama_res),
                "evs": list(self.evs),
            },
        }


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else (base / p)


def load_config(source, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from a JSON file path or a dict.

    Relative paths resolve against the config file's directory (or cwd for
    dict input). `overrides` maps config keys to replacement values.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        base = path.parent
    else:
        data = dict(source)
        base = Path.cwd()
    if overrides:
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}

    try:
        scene = _resolve(base, data["scene"])
    except KeyError:
        raise ConfigError("config requires a 'scene' path") from None

    cams_spec = data.get("cameras")
    if cams_spec is None:
        raise ConfigError("config requires 'cameras' (list or JSON path)")
    if isinstance(cams_spec, (str, Path)):
        cam_file = _resolve(base, cams_spec)
        try:
            cams_spec = json.loads(Path(cam_file).read_text())
        except FileNotFoundError:
            raise ConfigError(f"cameras file not found: {cam_file}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"cameras file is not valid JSON: {e}") from None
    cameras = [camera_from_dict(c) for c in cams_spec]

    placement = PlacementTransform.identity()
    if data.get("placement"):
        p = data["placement"]
        try:
            placement = PlacementTransform(
                translation=np.asarray(p.get("translation", (0, 0, 0)), dtype=np.float64),
                rotation=np.asarray(p.get("rotation", (1, 0, 0, 0)), dtype=np.float64),
                uniform_scale=float(p.get("uniform_scale", 1.0)))
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad placement: {e}") from None

    samples = data.get("samples", {})
    probes = data.get("probes", {})
    textures = data.get("textures", {})
    light = data.get("light", {}) or {}
    return RunConfig(
        scene=scene,
        object=_resolve(base, data.get("object")),
        placement=placement,
        cameras=cameras,
        samples_reconstruction=int(samples.get("reconstruction", 128)),
        samples_rendering=int(samples.get("rendering", 256)),
        object_probe_count=int(probes.get("object_count", 5000)),
        shadow_probe_count=int(probes.get("shadow_count", 10000)),
        probe_tex_size=int(textures.get("probe_size", 16)),
        env_oct_size=int(textures.get("env_oct_size", 512)),
        region_multiplier=float(data.get("region_multiplier", 6.0)),
        seed=int(data.get("seed", 0)),
        out_dir=_resolve(base, data.get("out_dir", "out")),
        env_path=_resolve(base, data.get("env")),
        object_probes_path=_resolve(base, data.get("object_probes")),
        shadow_field_path=_resolve(base, data.get("shadow_field")),
        light_location=tuple(light["location"]) if light.get("location") else None,
        light_completer=light.get("completer", "identity-fill"),
        light_external=_resolve(base, light.get("external_file")),
        panorama_res=tuple(light.get("panorama_res", (512, 1024))),
        evs=tuple(light.get("evs", DEFAULT_EVS)),
    )
