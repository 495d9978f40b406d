"""Experiment configuration: a sectioned ``key = value`` text file covering
cameras, scene layout, noise, needle, servo, grasp and RANSAC settings.

Unknown sections or keys are errors, missing keys keep their defaults.
Angles in the ``noise`` and ``needle`` sections are given in degrees.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grasp import GraspParams
from .perception import RansacParams
from .servo import ServoParams
from .sim import NoiseSettings, SceneSettings

CAMERA_KEYS = (
    "fx", "fy", "cx", "cy", "width", "height", "baseline", "view_distance",
    "elevation_deg", "look_at", "overhead_f", "overhead_width", "overhead_height", "overhead_z",
)
# noise keys given in degrees, mapped to the radian fields
NOISE_DEGREES = {"rot_jitter_deg": "rot_jitter_sigma", "inhand_deg": "inhand_sigma"}


@dataclass(frozen=True)
class HarnessSettings:
    step_latency: float = 0.25  # simulated seconds per timestep
    max_steps: int = 600  # timesteps per handover before Timeout
    n_max: int = 50

    def __post_init__(self):
        if not self.step_latency > 0:
            raise ValueError("step_latency must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass(frozen=True)
class NeedleSettings:
    radius: float | None = None  # overrides the catalogue radius when set
    arc_extent: float = np.pi

    def __post_init__(self):
        if self.radius is not None and not self.radius > 0:
            raise ValueError("radius must be positive")
        if not 0 < self.arc_extent <= 2 * np.pi:
            raise ValueError("arc_extent must be in (0, 2*pi]")


@dataclass(frozen=True)
class Profile:
    name: str = "calibrated"
    scene: SceneSettings = field(default_factory=SceneSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    needle: NeedleSettings = field(default_factory=NeedleSettings)
    servo: ServoParams = field(default_factory=ServoParams)
    grasp: GraspParams = field(default_factory=GraspParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    harness: HarnessSettings = field(default_factory=HarnessSettings)

    def to_dict(self) -> dict:
        """Plain JSON-ready view, angles in the units the file uses."""
        out = {"name": self.name}
        out["cameras"] = {k: _plain(getattr(self.scene, k)) for k in CAMERA_KEYS}
        out["scene"] = {f.name: _plain(getattr(self.scene, f.name))
                        for f in dataclasses.fields(SceneSettings) if f.name not in CAMERA_KEYS}
        noise = {f.name: _plain(getattr(self.noise, f.name)) for f in dataclasses.fields(NoiseSettings)}
        for deg, rad in NOISE_DEGREES.items():
            noise[deg] = float(np.degrees(noise.pop(rad)))
        out["noise"] = noise
        out["needle"] = {"radius": self.needle.radius,
                         "arc_extent_deg": float(np.degrees(self.needle.arc_extent))}
        for name in ("servo", "grasp", "harness"):
            obj = getattr(self, name)
            out[name] = {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        out["ransac"] = {f.name: _plain(getattr(self.ransac, f.name))
                         for f in dataclasses.fields(RansacParams) if f.name != "seed"}
        return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, tuple):
            parts = [float(p) for p in text.split(",")]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return tuple(parts)
        if default is None and text.lower() in ("", "none"):
            return None
        return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {text!r} ({exc})") from exc


def _apply(obj, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, text in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        updates[key] = _coerce(f"{section}.{key}", text, getattr(obj, key))
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def builtin_profile(name: str) -> Profile:
    """``calibrated`` (default noise) or ``zero`` (no noise at all)."""
    if name == "calibrated":
        return Profile()
    if name == "zero":
        return Profile(name="zero", noise=NoiseSettings.zero())
    raise ConfigError(f"unknown built-in profile {name!r}")


def parse_profile(text: str, name: str = "file") -> Profile:
    """Profile from config text; starts from the calibrated defaults."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    prof = Profile(name=name)
    known = {"cameras", "scene", "noise", "needle", "servo", "grasp", "ransac", "harness"}
    for sec in cp.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    scene = prof.scene
    if cp.has_section("cameras"):
        vals = dict(cp.items("cameras"))
        bad = set(vals) - set(CAMERA_KEYS)
        if bad:
            raise ConfigError(f"unknown key {sorted(bad)[0]!r} in section [cameras]")
        scene = _apply(scene, vals, "cameras")
    if cp.has_section("scene"):
        vals = dict(cp.items("scene"))
        bad = set(vals) & set(CAMERA_KEYS)
        if bad:
            raise ConfigError(f"camera key {sorted(bad)[0]!r} belongs in [cameras]")
        scene = _apply(scene, vals, "scene")
    noise = prof.noise
    if cp.has_section("noise"):
        vals = dict(cp.items("noise"))
        for deg, rad in NOISE_DEGREES.items():
            if rad in vals:
                raise ConfigError(f"give [noise] {deg} in degrees instead of {rad}")
            if deg in vals:
                vals[rad] = repr(float(np.radians(_coerce(f"noise.{deg}", vals.pop(deg), 0.0))))
        noise = _apply(noise, vals, "noise")
    needle = prof.needle
    if cp.has_section("needle"):
        vals = dict(cp.items("needle"))
        if "arc_extent_deg" in vals:
            vals["arc_extent"] = repr(float(np.radians(_coerce("needle.arc_extent_deg", vals.pop("arc_extent_deg"), 0.0))))
        if "arc_extent" in vals and "arc_extent_deg" not in cp["needle"]:
            raise ConfigError("give [needle] arc_extent_deg in degrees")
        needle = _apply(needle, vals, "needle")
    parts = {}
    for sec in ("servo", "grasp", "ransac", "harness"):
        obj = getattr(prof, sec)
        if cp.has_section(sec):
            vals = dict(cp.items(sec))
            if sec == "ransac" and "seed" in vals:
                raise ConfigError("the RANSAC seed is derived from the trial seed")
            obj = _apply(obj, vals, sec)
        parts[sec] = obj
    return Profile(name, scene, noise, needle, **parts)


def load_profile(source: str | None) -> Profile:
    """Built-in profile name, or path to a config file. ``None`` means
    ``calibrated``."""
    if source is None:
        return builtin_profile("calibrated")
    if source in ("calibrated", "zero"):
        return builtin_profile(source)
    path = Path(source)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {source!r}: {exc}") from exc
    return parse_profile(text, name=path.stem)


def format_profile(prof: Profile) -> str:
    """Config text that ``parse_profile`` reads back to ``prof``."""
    d = prof.to_dict()
    lines = []
    for sec in ("cameras", "scene", "noise", "needle", "servo", "grasp", "ransac", "harness"):
        lines.append(f"[{sec}]")
        for k, v in d[sec].items():
            if v is None:
                continue
            if isinstance(v, list):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
