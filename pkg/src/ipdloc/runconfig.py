"""Declarative run configuration: strict JSON parsing and validation.

A single JSON file drives every command: scene sampling ranges, the network
configuration, training hyperparameters, localization settings, optional
default artifact paths, and the master seed.  Unknown keys are rejected at
every nesting level and every range is checked before any work starts, so a
typo fails fast with the offending file and field named.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .geometry import ArrayGeometry
from .model import ModelConfig, default_hidden
from .pit_train import TrainConfig
from .simulate import (
    MAX_SOURCE_SPEED,
    ROOM_DIM_RANGES,
    RT60_RANGE,
    SNR_RANGE,
    RoomRanges,
    SimulateRanges,
)


class ConfigError(ValueError):
    """Invalid run configuration (maps to exit code 1 in the CLI)."""


DEFAULT_GEOMETRY = (((0.0, 0.0, 0.0), (0.04, 0.0, 0.0)), 0)


@dataclass(frozen=True)
class LocalizeSettings:
    grid_kind: str = "azimuth"
    grid_resolution_deg: float = 1.0
    detection_threshold: float = 0.5
    tolerance_deg: float = 10.0
    far_denominator: str = "active"
    activity_threshold: float = 0.001

    def __post_init__(self):
        if self.grid_kind not in ("azimuth", "joint"):
            raise ConfigError(f"grid_kind {self.grid_kind!r} not azimuth/joint")
        if self.grid_resolution_deg <= 0:
            raise ConfigError("grid_resolution_deg must be positive")
        if self.tolerance_deg <= 0:
            raise ConfigError("tolerance_deg must be positive")
        if self.far_denominator not in ("active", "frames"):
            raise ConfigError(
                f"far_denominator {self.far_denominator!r} not active/frames"
            )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    geometry: ArrayGeometry = None
    simulate: SimulateRanges = field(default_factory=SimulateRanges)
    model: ModelConfig = None
    train: TrainConfig = field(default_factory=TrainConfig)
    localize: LocalizeSettings = field(default_factory=LocalizeSettings)
    paths: dict = field(default_factory=dict)


def _check_keys(obj: dict, allowed: set, context: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{context}: expected an object, got {type(obj).__name__}")
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{context}: unknown key {key!r}")


def _number(obj: dict, key: str, context: str, default, lo=None, hi=None,
            integer: bool = False):
    if key not in obj:
        return default
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{context}.{key}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{context}.{key}: expected an integer, got {value!r}")
    if lo is not None and value < lo or hi is not None and value > hi:
        raise ConfigError(
            f"{context}.{key}: {value} outside the allowed range [{lo}, {hi}]"
        )
    return int(value) if integer else float(value)


def _interval(obj: dict, key: str, context: str, default, lo=None, hi=None,
              integer: bool = False, nullable: bool = False):
    """Parse a two-element [low, high] sampling range confined to [lo, hi]."""
    if key not in obj:
        return default
    value = obj[key]
    if value is None and nullable:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{context}.{key}: expected [low, high], got {value!r}")
    pair = {"low": value[0], "high": value[1]}
    a = _number(pair, "low", f"{context}.{key}", None, lo, hi, integer)
    b = _number(pair, "high", f"{context}.{key}", None, lo, hi, integer)
    if a > b:
        raise ConfigError(f"{context}.{key}: low {a} exceeds high {b}")
    return (a, b)


def _string(obj: dict, key: str, context: str, default, choices=None):
    if key not in obj:
        return default
    value = obj[key]
    if not isinstance(value, str):
        raise ConfigError(f"{context}.{key}: expected a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(f"{context}.{key}: {value!r} not one of {sorted(choices)}")
    return value


def _boolean(obj: dict, key: str, context: str, default):
    if key not in obj:
        return default
    value = obj[key]
    if not isinstance(value, bool):
        raise ConfigError(f"{context}.{key}: expected true/false, got {value!r}")
    return value


def _parse_geometry(obj: dict, context: str) -> ArrayGeometry:
    _check_keys(obj, {"positions", "reference_index", "sound_speed"}, context)
    if "positions" not in obj:
        raise ConfigError(f"{context}: positions is required")
    raw = obj["positions"]
    if not isinstance(raw, list) or len(raw) < 2:
        raise ConfigError(f"{context}.positions: expected >= 2 microphone rows")
    positions = []
    for i, row in enumerate(raw):
        if not isinstance(row, list) or len(row) != 3:
            raise ConfigError(f"{context}.positions[{i}]: expected [x, y, z]")
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{context}.positions[{i}]: non-numeric {v!r}")
        positions.append(tuple(float(v) for v in row))
    reference = _number(obj, "reference_index", context, 0, integer=True)
    speed = _number(obj, "sound_speed", context, 343.0, lo=1.0)
    try:
        return ArrayGeometry(
            positions=tuple(positions), reference_index=reference, sound_speed=speed
        )
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _parse_room(obj: dict, context: str) -> RoomRanges:
    _check_keys(obj, {"enabled", "x", "y", "z", "rt60", "max_order"}, context)
    enabled = _boolean(obj, "enabled", context, False)
    return RoomRanges(
        enabled=enabled,
        x=_interval(obj, "x", context, ROOM_DIM_RANGES[0], *ROOM_DIM_RANGES[0]),
        y=_interval(obj, "y", context, ROOM_DIM_RANGES[1], *ROOM_DIM_RANGES[1]),
        z=_interval(obj, "z", context, ROOM_DIM_RANGES[2], *ROOM_DIM_RANGES[2]),
        rt60=_interval(obj, "rt60", context, RT60_RANGE, *RT60_RANGE),
        max_order=_number(obj, "max_order", context, 2, lo=1, hi=4, integer=True),
    )


def _parse_simulate(obj: dict, context: str) -> SimulateRanges:
    allowed = {
        "duration", "snr_db", "num_sources", "source_distance",
        "active_fraction", "azimuth_deg", "elevation_deg", "moving_fraction",
        "max_speed", "room",
    }
    _check_keys(obj, allowed, context)
    defaults = SimulateRanges()
    room = _parse_room(obj.get("room", {}), f"{context}.room")
    ranges = SimulateRanges(
        duration=_interval(obj, "duration", context, defaults.duration, lo=0.05),
        snr_db=_interval(obj, "snr_db", context, defaults.snr_db, *SNR_RANGE,
                         nullable=True),
        num_sources=_interval(obj, "num_sources", context, defaults.num_sources,
                              lo=0, hi=2, integer=True),
        source_distance=_interval(obj, "source_distance", context,
                                  defaults.source_distance, lo=0.5, hi=20.0),
        active_fraction=_interval(obj, "active_fraction", context,
                                  defaults.active_fraction, lo=0.05, hi=1.0),
        azimuth_deg=_interval(obj, "azimuth_deg", context,
                              defaults.azimuth_deg, lo=0.0, hi=360.0),
        elevation_deg=_interval(obj, "elevation_deg", context,
                                defaults.elevation_deg, lo=-90.0, hi=90.0),
        moving_fraction=_number(obj, "moving_fraction", context,
                                defaults.moving_fraction, lo=0.0, hi=1.0),
        max_speed=_number(obj, "max_speed", context, defaults.max_speed,
                          lo=0.0, hi=MAX_SOURCE_SPEED),
        room=room,
    )
    if room.enabled:
        horizontal = min(room.x[0], room.y[0]) / 2.0 - 0.1
        if ranges.source_distance[1] > horizontal:
            raise ConfigError(
                f"{context}.source_distance: high {ranges.source_distance[1]} "
                f"does not fit inside the smallest room (limit {horizontal:.2f})"
            )
    return ranges


def _parse_model(obj: dict, context: str, default_channels: int = 2) -> ModelConfig:
    allowed = {
        "variant", "mode", "num_channels", "max_sources", "num_freqs",
        "hidden", "num_blocks", "use_fullband",
    }
    _check_keys(obj, allowed, context)
    variant = _string(obj, "variant", context, "fixed", {"fixed", "variable"})
    channels = _number(obj, "num_channels", context, default_channels,
                       lo=2, hi=16, integer=True)
    hidden = _number(obj, "hidden", context,
                     default_hidden(variant, channels), lo=4, integer=True)
    try:
        return ModelConfig(
            variant=variant,
            mode=_string(obj, "mode", context, "online", {"online", "offline"}),
            num_channels=channels,
            max_sources=_number(obj, "max_sources", context, 2, lo=1, hi=4,
                                integer=True),
            num_freqs=_number(obj, "num_freqs", context, 256, lo=1, integer=True),
            hidden=hidden,
            num_blocks=_number(obj, "num_blocks", context, 2, lo=1, hi=8,
                               integer=True),
            use_fullband=_boolean(obj, "use_fullband", context, True),
        )
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _parse_train(obj: dict, context: str) -> TrainConfig:
    allowed = {
        "lr", "lr_decay", "batch_size", "clip_seconds", "epochs", "seed",
        "non_source_mode",
    }
    _check_keys(obj, allowed, context)
    try:
        return TrainConfig(
            lr=_number(obj, "lr", context, 5e-4, lo=0.0),
            lr_decay=_number(obj, "lr_decay", context, 0.975, lo=0.0, hi=1.0),
            batch_size=_number(obj, "batch_size", context, 16, lo=1, integer=True),
            clip_seconds=_number(obj, "clip_seconds", context, 4.5, lo=0.1),
            epochs=_number(obj, "epochs", context, 30, lo=0, integer=True),
            seed=_number(obj, "seed", context, 0, integer=True),
            non_source_mode=_string(obj, "non_source_mode", context, "bessel",
                                    {"bessel", "zero"}),
        )
    except ValueError as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _parse_localize(obj: dict, context: str) -> LocalizeSettings:
    allowed = {
        "grid_kind", "grid_resolution_deg", "detection_threshold",
        "tolerance_deg", "far_denominator", "activity_threshold",
    }
    _check_keys(obj, allowed, context)
    return LocalizeSettings(
        grid_kind=_string(obj, "grid_kind", context, "azimuth",
                          {"azimuth", "joint"}),
        grid_resolution_deg=_number(obj, "grid_resolution_deg", context, 1.0,
                                    lo=1e-3, hi=90.0),
        detection_threshold=_number(obj, "detection_threshold", context, 0.5,
                                    lo=-1.0, hi=1.0),
        tolerance_deg=_number(obj, "tolerance_deg", context, 10.0, lo=0.1),
        far_denominator=_string(obj, "far_denominator", context, "active",
                                {"active", "frames"}),
        activity_threshold=_number(obj, "activity_threshold", context, 0.001,
                                   lo=0.0, hi=1.0),
    )


def _parse_paths(obj: dict, context: str) -> dict:
    allowed = {"dataset", "valid_dataset", "checkpoint", "out"}
    _check_keys(obj, allowed, context)
    for key, value in obj.items():
        if not isinstance(value, str):
            raise ConfigError(f"{context}.{key}: expected a path string")
    return dict(obj)


def parse_run_config(data: dict, source: str = "config") -> RunConfig:
    allowed = {"seed", "geometry", "simulate", "model", "train", "localize", "paths"}
    _check_keys(data, allowed, source)
    geometry = _parse_geometry(
        data.get(
            "geometry",
            {"positions": [list(p) for p in DEFAULT_GEOMETRY[0]],
             "reference_index": DEFAULT_GEOMETRY[1]},
        ),
        f"{source}.geometry",
    )
    model = _parse_model(dict(data.get("model", {})), f"{source}.model",
                         default_channels=geometry.num_mics)
    if model.num_channels != geometry.num_mics:
        raise ConfigError(
            f"{source}: model.num_channels {model.num_channels} does not match "
            f"the {geometry.num_mics}-microphone geometry"
        )
    return RunConfig(
        seed=_number(data, "seed", source, 0, integer=True),
        geometry=geometry,
        simulate=_parse_simulate(dict(data.get("simulate", {})), f"{source}.simulate"),
        model=model,
        train=_parse_train(dict(data.get("train", {})), f"{source}.train"),
        localize=_parse_localize(dict(data.get("localize", {})), f"{source}.localize"),
        paths=_parse_paths(dict(data.get("paths", {})), f"{source}.paths"),
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_run_config(data, source=path)
