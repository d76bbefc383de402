import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from typing_extensions import Literal, Self

from div2x.errors import ConfigurationError
from div2x.geom import GridSpec, OrientedRect
from div2x.pipeline import PillarEncoderConfig
from div2x.simlidar import SceneSpec, SensorModel


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridConfig(_Section):
    x_range: Tuple[float, float] = (-40.0, 40.0)
    y_range: Tuple[float, float] = (-20.0, 20.0)
    z_range: Tuple[float, float] = (-3.5, 1.5)
    cell_size: Tuple[float, float] = (0.8, 0.8)
    stride: int = 2
    channels: int = 32

    @model_validator(mode="after")
    def _check(self) -> Self:
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if hi <= lo:
                raise ValueError(f"{name} must be increasing, got {(lo, hi)}")
        if min(self.cell_size) <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.channels < 8:
            raise ValueError(f"channels must be at least 8, got {self.channels}")
        for extent, cell, axis in ((self.x_range, self.cell_size[0], "x"),
                                   (self.y_range, self.cell_size[1], "y")):
            cells = (extent[1] - extent[0]) / cell
            if abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"{axis} range is not a whole number of cells ({cells})")
            if round(cells) % self.stride:
                raise ValueError(f"{axis} cell count {round(cells)} is not divisible by stride {self.stride}")
        return self


GRID_PRESETS: Dict[str, GridConfig] = {
    "desk": GridConfig(),
    "full": GridConfig(x_range=(-100.0, 100.0), y_range=(-40.0, 40.0),
                        cell_size=(0.4, 0.4), stride=2, channels=256),
}


class SensorConfig(_Section):
    beams: int
    fov_deg: float
    azimuth_step_deg: float
    elevation_deg: Tuple[float, float]
    max_range: float
    range_noise_sigma: float
    dropout_prob: float
    mount_height: float
    pitch_deg: float = 0.0
    ground_keep_prob: float = 0.25

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.beams < 1:
            raise ValueError(f"beams must be >= 1, got {self.beams}")
        if not 0 < self.fov_deg <= 360:
            raise ValueError(f"fov_deg must be in (0, 360], got {self.fov_deg}")
        if self.azimuth_step_deg <= 0 or self.max_range <= 0:
            raise ValueError("azimuth_step_deg and max_range must be positive")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if not 0 < self.ground_keep_prob <= 1:
            raise ValueError(f"ground_keep_prob must be in (0, 1], got {self.ground_keep_prob}")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be non-negative")
        if self.elevation_deg[1] < self.elevation_deg[0]:
            raise ValueError(f"elevation_deg must be increasing, got {self.elevation_deg}")
        return self


VEHICLE_SENSOR = SensorConfig(
    beams=16, fov_deg=360.0, azimuth_step_deg=1.0, elevation_deg=(-15.0, 5.0),
    max_range=70.0, range_noise_sigma=0.02, dropout_prob=0.05, mount_height=1.8,
)
INFRA_SENSOR = SensorConfig(
    beams=64, fov_deg=100.0, azimuth_step_deg=0.4, elevation_deg=(-25.0, 5.0),
    max_range=80.0, range_noise_sigma=0.03, dropout_prob=0.1, mount_height=5.0, pitch_deg=10.0,
)


class SceneConfig(_Section):
    num_objects: int = 10
    length_range: Tuple[float, float] = (3.6, 4.8)
    width_range: Tuple[float, float] = (1.6, 2.0)
    height_range: Tuple[float, float] = (1.4, 1.8)
    placement_center: Tuple[float, float] = (8.0, 0.0)
    placement_half_extents: Tuple[float, float] = (30.0, 16.0)
    placement_yaw_deg: float = 0.0
    infra_x_range: Tuple[float, float] = (5.0, 30.0)
    infra_side_offset: Tuple[float, float] = (10.0, 16.0)
    infra_yaw_jitter_deg: float = 15.0
    vehicle_clearance: float = 3.0
    pose_noise_translation: float = 0.0
    pose_noise_yaw_deg: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.num_objects < 0:
            raise ValueError(f"num_objects must be >= 0, got {self.num_objects}")
        for name in ("length_range", "width_range", "height_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive interval, got {(lo, hi)}")
        if min(self.placement_half_extents) <= 0:
            raise ValueError("placement_half_extents must be positive")
        if self.pose_noise_translation < 0 or self.pose_noise_yaw_deg < 0:
            raise ValueError("pose noise sigmas must be non-negative")
        return self


class DMAConfig(_Section):
    tau_low: float = 0.2
    tau_high: float = 0.8
    # (p_f, p_v, p_i)
    probabilities: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_samples: int = 10
    max_attempts: int = 10

    @model_validator(mode="after")
    def _check(self) -> Self:
        if not 0 < self.tau_low < self.tau_high < 1:
            raise ValueError(f"thresholds must satisfy 0 < tau_low < tau_high < 1, got "
                             f"{(self.tau_low, self.tau_high)}")
        if min(self.probabilities) < 0 or abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must be non-negative and sum to 1, got {self.probabilities}")
        if self.n_samples < 0 or self.max_attempts < 1:
            raise ValueError("n_samples must be >= 0 and max_attempts >= 1")
        return self


class TrainConfig(_Section):
    epochs: int = 20
    lr: float = 1e-2
    momentum: float = 0.9
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    grad_clip: Optional[float] = 10.0
    lambda_kd: float = 1.0
    mask_mode: Literal["geometric", "footprint"] = "geometric"
    distill_score_thr: float = 0.3
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    target_assignment: Literal["footprint", "center"] = "footprint"
    use_dma: bool = True
    use_pdd: bool = True
    use_daf: bool = True
    scene_augmentation: bool = False
    flip_prob: float = 0.5
    rotation_range_deg: float = 10.0
    scale_range: Tuple[float, float] = (0.95, 1.05)
    pose_noise_translation: float = 0.0
    pose_noise_yaw_deg: float = 0.0
    seed: int = 42

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lambda_kd < 0:
            raise ValueError(f"lambda_kd must be >= 0, got {self.lambda_kd}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError(f"scale_range must be a positive interval, got {self.scale_range}")
        return self


class EvalConfig(_Section):
    score_thr: float = 0.3
    nms_thr: float = 0.3
    max_candidates: int = 100
    iou_thresholds: Tuple[float, ...] = (0.5, 0.7)
    noise_translation: float = 0.5
    noise_yaw_deg: float = 2.0
    noise_seed: int = 7

    @model_validator(mode="after")
    def _check(self) -> Self:
        if not self.iou_thresholds or not all(0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError(f"iou_thresholds must lie in (0, 1], got {self.iou_thresholds}")
        return self


class RunConfig(_Section):
    """Every tunable of a run, as one validated document"""
    seed: int = 42
    threads: int = Field(default=1, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    grid: GridConfig = GridConfig()
    vehicle_sensor: SensorConfig = VEHICLE_SENSOR
    infra_sensor: SensorConfig = INFRA_SENSOR
    scene: SceneConfig = SceneConfig()
    dma: DMAConfig = DMAConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()


ENV_DEFAULTS = {
    "DIV2X_LOG_LEVEL": "log_level",
    "DIV2X_THREADS": "threads",
}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(document: Dict[str, Any], dotted_key: str, value: Any) -> None:
    """Set document['a']['b'] = value for dotted_key 'a.b'"""
    keys = dotted_key.split(".")
    node = document
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"Cannot override {dotted_key}: {key} is not a section")
        node = child
    node[keys[-1]] = value


def parse_overrides(pairs) -> Dict[str, Any]:
    """Turn ['train.epochs=2', ...] into {'train.epochs': 2, ...}"""
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"Override must look like key=value, got {pair!r}")
        key, text = pair.split("=", 1)
        overrides[key.strip()] = _parse_value(text.strip())
    return overrides


class ConfigurationManager:
    """Responsible for loading, validating and echoing the run configuration"""

    def __init__(
        self,
        config_path: Optional[Union[str, Path]] = None,
        overrides: Optional[Dict[str, Any]] = None,
        grid_preset: Optional[str] = None,
        logging_level: Optional[int] = None
    ):
        load_dotenv()
        self.config_path = Path(config_path) if config_path else None
        self.overrides = dict(overrides or {})
        self.grid_preset = grid_preset

        document = self._load_document()
        self.config = self._validate_configuration(document)
        self.logging_level = logging_level or getattr(logging, self.config.log_level)
        self.setup_logging()

    def _load_document(self) -> Dict[str, Any]:
        document: Dict[str, Any] = {}
        if self.config_path is not None:
            try:
                document = json.loads(self.config_path.read_text())
            except FileNotFoundError:
                raise ConfigurationError(f"Config file not found: {self.config_path}")
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {self.config_path} is not valid JSON: {e}")
            if not isinstance(document, dict):
                raise ConfigurationError("Config document must be a JSON object")

        if self.grid_preset is not None:
            if self.grid_preset not in GRID_PRESETS:
                raise ConfigurationError(
                    f"Unknown grid preset {self.grid_preset!r}; choose from {sorted(GRID_PRESETS)}")
            document["grid"] = GRID_PRESETS[self.grid_preset].model_dump()

        for env_name, key in ENV_DEFAULTS.items():
            value = os.getenv(env_name)
            if value and key not in document:
                document[key] = _parse_value(value)

        for key, value in self.overrides.items():
            apply_override(document, key, value)
        return document

    def _validate_configuration(self, document: Dict[str, Any]) -> RunConfig:
        try:
            config = RunConfig.model_validate(document)
        except ValidationError as e:
            for error in e.errors():
                location = ".".join(str(part) for part in error["loc"]) or "<root>"
                logging.error(f"Configuration error: {location}: {error['msg']}")
            raise ConfigurationError("Invalid configuration. Check logs for details.")

        logging.info("Configuration validation successful")
        logging.debug(f"Grid: x={config.grid.x_range} y={config.grid.y_range} cell={config.grid.cell_size}")
        logging.debug(f"Seed: {config.seed}, threads: {config.threads}")
        return config

    def setup_logging(self) -> None:
        logging.basicConfig(
            level=self.logging_level,
            format='%(asctime)s - %(levelname)s - %(message)s'
        )
        logging.getLogger().setLevel(self.logging_level)

    def dump(self, out_dir: Union[str, Path]) -> Path:
        """Echo the merged effective config into out_dir"""
        path = Path(out_dir) / "effective_config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        return path

    def get_grid_spec(self) -> GridSpec:
        """The pillar (input) grid"""
        return grid_spec(self.config.grid)

    def get_feature_grid(self) -> GridSpec:
        return self.get_grid_spec().downsample(self.config.grid.stride)


def grid_spec(config: GridConfig) -> GridSpec:
    return GridSpec(config.x_range, config.y_range, config.cell_size)


def placement_rect(config: SceneConfig) -> OrientedRect:
    return OrientedRect(config.placement_center, config.placement_half_extents,
                        math.radians(config.placement_yaw_deg))


def sensor_model(config: SensorConfig) -> SensorModel:
    return SensorModel(
        beams=config.beams,
        fov=math.radians(config.fov_deg),
        azimuth_step=math.radians(config.azimuth_step_deg),
        max_range=config.max_range,
        range_noise_sigma=config.range_noise_sigma,
        dropout_prob=config.dropout_prob,
        elevation=(math.radians(config.elevation_deg[0]), math.radians(config.elevation_deg[1])),
        mount_height=config.mount_height,
        pitch=math.radians(config.pitch_deg),
        ground_keep_prob=config.ground_keep_prob,
    )


def scene_spec(config: SceneConfig) -> SceneSpec:
    return SceneSpec(
        num_objects=config.num_objects,
        length_range=config.length_range,
        width_range=config.width_range,
        height_range=config.height_range,
        placement_region=placement_rect(config),
        infra_x_range=config.infra_x_range,
        infra_side_offset=config.infra_side_offset,
        infra_yaw_jitter=math.radians(config.infra_yaw_jitter_deg),
        vehicle_clearance=config.vehicle_clearance,
        pose_noise=(config.pose_noise_translation, math.radians(config.pose_noise_yaw_deg)),
    )


def encoder_config(config: GridConfig) -> PillarEncoderConfig:
    return PillarEncoderConfig(grid_spec(config), config.z_range, config.channels, config.stride)
