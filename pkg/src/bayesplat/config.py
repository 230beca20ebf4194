"""
Run configuration.

``RunConfig`` gathers every tunable of a run. Values resolve in this order,
later sources winning: field defaults, the file named by the BAYESPLAT_CONFIG
environment variable, an explicit config file, then command-line overrides.
Files are flat ``key = value`` text with ``#`` comments.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Iterable, List, Optional, Tuple, get_type_hints

from .errors import ConfigError
from .frontend import FrontendDefaults
from .infer import InferenceDefaults
from .keyframes import KeyframeDefaults
from .render import RenderDefaults
from .sim import SimDefaults
from .splatmap import MapDefaults
from .track import TrackingDefaults

logger = logging.getLogger(__name__)

ENV_VAR = "BAYESPLAT_CONFIG"

MOTION_MODELS = ("constant_velocity", "static", "odometry")
SIM_PRESETS = ("textured_plane", "box_room", "cluttered_table")

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    """Every field has a default; zero means "use the dataset's value" where noted."""

    # --- input and output ----------------------------------------------
    dataset: str = ""
    sim: str = ""
    frames: int = 0  # 0: all frames (simulator: SimDefaults.FRAMES)
    seed: int = 0
    output: str = "out"
    max_dt: float = FrontendDefaults.MAX_DT
    depth_scale: float = 0.0  # 0: from the dataset

    # --- frontend ----------------------------------------------------------
    track_stride: int = FrontendDefaults.TRACK_STRIDE
    keyframe_stride: int = FrontendDefaults.KEYFRAME_STRIDE
    init_voxel: float = FrontendDefaults.INIT_VOXEL
    insert_voxel: float = FrontendDefaults.INSERT_VOXEL
    depth_min: float = FrontendDefaults.DEPTH_MIN
    depth_max: float = FrontendDefaults.DEPTH_MAX

    # --- inference ---------------------------------------------------------
    gate_radius: float = InferenceDefaults.GATE_RADIUS
    top_m: int = InferenceDefaults.TOP_M
    cavi_sweeps: int = InferenceDefaults.CAVI_SWEEPS
    cavi_tol: float = InferenceDefaults.RELATIVE_TOL
    propagate_pose_uncertainty: bool = InferenceDefaults.PROPAGATE_POSE_UNCERTAINTY
    eigen_floor: float = 0.0  # 0: raise on a non-PSD scale matrix

    # --- tracking ----------------------------------------------------------
    motion_model: str = "constant_velocity"
    max_iters: int = TrackingDefaults.MAX_ITERS
    tol: float = TrackingDefaults.TOL
    divergence_patience: int = TrackingDefaults.DIVERGENCE_PATIENCE
    translation_noise: float = TrackingDefaults.TRANSLATION_NOISE
    rotation_noise: float = TrackingDefaults.ROTATION_NOISE
    odometry_translation_noise: float = SimDefaults.ODOMETRY_TRANSLATION_NOISE
    odometry_rotation_noise: float = SimDefaults.ODOMETRY_ROTATION_NOISE
    init_from_truth: bool = True

    # --- keyframes and map management -------------------------------------
    covis_threshold: float = KeyframeDefaults.COVIS_THRESHOLD
    max_interval: int = KeyframeDefaults.MAX_INTERVAL
    window: int = KeyframeDefaults.WINDOW
    stale_window: int = KeyframeDefaults.STALE_WINDOW
    coverage_threshold: float = KeyframeDefaults.COVERAGE_THRESHOLD
    window_sweeps: int = KeyframeDefaults.SWEEPS
    max_insert: int = KeyframeDefaults.MAX_INSERT
    alpha_prior: float = MapDefaults.ALPHA_PRIOR

    # --- rendering and reports ---------------------------------------------
    opacity_gain: float = RenderDefaults.OPACITY_GAIN
    render_metrics: bool = True
    save_png: bool = False
    report_timing: bool = True
    cavi_trace: bool = False
    threads: int = 1

    # --- simulator -----------------------------------------------------------
    sim_density: float = 0.0  # 0: preset default
    sim_frame_rate: float = SimDefaults.FRAME_RATE
    depth_noise: float = 0.0  # m
    color_noise: float = 0.0

    def validate(self) -> "RunConfig":
        if bool(self.dataset) == bool(self.sim):
            raise ConfigError("dataset", "exactly one of 'dataset' and 'sim' must be set")
        if self.sim and self.sim not in SIM_PRESETS:
            raise ConfigError("sim", f"unknown preset '{self.sim}', expected one of {', '.join(SIM_PRESETS)}")
        if self.motion_model not in MOTION_MODELS:
            raise ConfigError("motion_model", f"unknown model '{self.motion_model}', expected one of {', '.join(MOTION_MODELS)}")
        if self.motion_model == "odometry" and not self.sim:
            raise ConfigError("motion_model", "odometry is only available for simulated sequences")
        for key in ("track_stride", "keyframe_stride", "top_m", "cavi_sweeps", "max_iters", "divergence_patience", "max_interval", "window", "stale_window", "window_sweeps", "threads"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be at least 1, got {getattr(self, key)}")
        for key in ("init_voxel", "insert_voxel", "gate_radius", "tol", "sim_frame_rate", "alpha_prior"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")
        if not 0 < self.depth_min < self.depth_max:
            raise ConfigError("depth_min", f"need 0 < depth_min < depth_max, got {self.depth_min} and {self.depth_max}")
        if self.frames < 0:
            raise ConfigError("frames", f"must not be negative, got {self.frames}")
        if self.threads != 1:
            logger.warning("threads=%d requested; the frame loop runs single-threaded", self.threads)
        return self

    def to_lines(self) -> List[str]:
        return [f"{f.name} = {_render(getattr(self, f.name))}" for f in fields(self)]

    def with_overrides(self, values: Dict[str, Tuple[str, Optional[int]]]) -> "RunConfig":
        """Apply raw string values (with optional source line numbers) after coercing them."""
        hints = get_type_hints(RunConfig)
        changes: Dict[str, Any] = {}
        for key, (raw, line) in values.items():
            if key not in hints:
                raise ConfigError(key, "unknown key", line)
            changes[key] = _coerce(key, raw, hints[key], line)
        return replace(self, **changes)


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, kind: Any, line: Optional[int]) -> Any:
    text = raw.strip()
    if kind is bool:
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got '{raw}'", line)
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got '{raw}'", line) from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(key, f"expected a number, got '{raw}'", line) from None
    return text


def parse_config_lines(lines: Iterable[str]) -> Dict[str, Tuple[str, Optional[int]]]:
    """``key = value`` pairs keyed by name, each with its 1-based line number."""
    values: Dict[str, Tuple[str, Optional[int]]] = {}
    for number, text in enumerate(lines, start=1):
        stripped = text.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(stripped, "expected 'key = value'", number)
        key, value = stripped.split("=", 1)
        values[key.strip()] = (value.strip(), number)
    return values


def load_config_file(path: str) -> Dict[str, Tuple[str, Optional[int]]]:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return parse_config_lines(handle)
    except OSError as exc:
        raise ConfigError(path, f"cannot read config file: {exc.strerror}") from None


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Tuple[str, Optional[int]]]:
    """Command-line ``key=value`` strings."""
    values: Dict[str, Tuple[str, Optional[int]]] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        key, value = pair.split("=", 1)
        values[key.strip()] = (value.strip(), None)
    return values


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Tuple[str, Optional[int]]]] = None,
    environ: Optional[Dict[str, str]] = None,
) -> RunConfig:
    """Resolve defaults < $BAYESPLAT_CONFIG < ``path`` < ``overrides``; the result is not yet validated."""
    environ = os.environ if environ is None else environ
    config = RunConfig()
    env_path = environ.get(ENV_VAR)
    if env_path:
        logger.info("reading config from %s=%s", ENV_VAR, env_path)
        config = config.with_overrides(load_config_file(env_path))
    if path:
        config = config.with_overrides(load_config_file(path))
    if overrides:
        config = config.with_overrides(overrides)
    return config


def write_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("# resolved run configuration\n")
        handle.write("\n".join(config.to_lines()) + "\n")
