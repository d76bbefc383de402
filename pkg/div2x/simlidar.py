"""Deterministic two-agent LiDAR scene generator.

World frame: ground plane at z = 0. Each agent's frame sits at its sensor
(yaw-only rotation, translation includes the mount height), so clouds are
expressed relative to the sensor and the ground lies at z = -mount_height.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from div2x.geom import (
    Box3D, OrientedRect, PoseSE3, compose, invert, rotated_iou, transform_points, yaw_rotation,
)

MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SensorModel:
    beams: int
    fov: float
    azimuth_step: float
    max_range: float
    range_noise_sigma: float
    dropout_prob: float
    elevation: Tuple[float, float] = (math.radians(-15.0), math.radians(5.0))
    mount_height: float = 1.8
    pitch: float = 0.0
    ground_keep_prob: float = 0.25

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError(f"beams must be >= 1, got {self.beams}")
        if not 0 < self.fov <= 2 * math.pi + 1e-12:
            raise ValueError(f"fov must be in (0, 2pi], got {self.fov}")
        if self.max_range <= 0 or self.azimuth_step <= 0:
            raise ValueError("max_range and azimuth_step must be positive")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")

    def azimuths(self) -> np.ndarray:
        if self.fov >= 2 * math.pi - 1e-12:
            return -math.pi + np.arange(int(round(2 * math.pi / self.azimuth_step))) * self.azimuth_step
        count = int(math.floor(self.fov / self.azimuth_step + 1e-9)) + 1
        return -self.fov / 2 + np.arange(count) * self.azimuth_step

    def elevations(self) -> np.ndarray:
        lo, hi = self.elevation
        if self.beams == 1:
            return np.array([(lo + hi) / 2 - self.pitch])
        return np.linspace(lo, hi, self.beams) - self.pitch

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, shape (beams * azimuths) × 3"""
        az, el = np.meshgrid(self.azimuths(), self.elevations(), indexing="ij")
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class SceneSpec:
    num_objects: int
    length_range: Tuple[float, float]
    width_range: Tuple[float, float]
    height_range: Tuple[float, float]
    placement_region: OrientedRect
    infra_x_range: Tuple[float, float] = (5.0, 30.0)
    infra_side_offset: Tuple[float, float] = (10.0, 16.0)
    infra_yaw_jitter: float = math.radians(15.0)
    vehicle_clearance: float = 3.0
    pose_noise: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.num_objects < 0:
            raise ValueError(f"num_objects must be >= 0, got {self.num_objects}")
        for name in ("length_range", "width_range", "height_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} must be a positive interval, got {(lo, hi)}")


@dataclass(frozen=True, eq=False)
class AgentFrame:
    pose: PoseSE3
    cloud: np.ndarray
    reported_pose: PoseSE3


@dataclass(frozen=True, eq=False)
class ScenePair:
    vehicle: AgentFrame
    infra: AgentFrame
    gt_boxes: Tuple[Box3D, ...]
    scene_id: int
    dropped_objects: int = 0

    @property
    def placement_warning(self) -> bool:
        return self.dropped_objects > 0

    def infra_to_vehicle(self, reported: bool = True) -> PoseSE3:
        if reported:
            return compose(invert(self.vehicle.reported_pose), self.infra.reported_pose)
        return compose(invert(self.vehicle.pose), self.infra.pose)


def inject_pose_noise(pose: PoseSE3, sigma_t: float, sigma_yaw: float, seed) -> PoseSE3:
    """pose ∘ noise, noise = planar N(0, sigma_t²) translation and N(0, sigma_yaw²) yaw"""
    if sigma_t < 0 or sigma_yaw < 0:
        raise ValueError(f"Noise sigmas must be non-negative, got {(sigma_t, sigma_yaw)}")
    if sigma_t == 0 and sigma_yaw == 0:
        return pose
    rng = np.random.default_rng(seed)
    dx, dy = rng.normal(0.0, sigma_t, size=2) if sigma_t > 0 else (0.0, 0.0)
    dyaw = rng.normal(0.0, sigma_yaw) if sigma_yaw > 0 else 0.0
    return compose(pose, PoseSE3.from_yaw(dyaw, (dx, dy, 0.0)))


def with_pose_noise(pair: ScenePair, sigma_t: float, sigma_yaw: float, seed) -> ScenePair:
    """Redraw the infrastructure's reported pose around its true pose"""
    reported = inject_pose_noise(pair.infra.pose, sigma_t, sigma_yaw, seed)
    return replace(pair, infra=replace(pair.infra, reported_pose=reported))


def _ray_box_hits(origin: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box3D]) -> np.ndarray:
    """Entry distance of every ray into every box (slab test), inf on a miss; shape rays × boxes"""
    t_hit = np.full((len(dirs), len(boxes)), np.inf)
    for k, box in enumerate(boxes):
        rot = yaw_rotation(box.yaw)
        o = (origin - np.array([box.x, box.y, box.z])) @ rot
        d = dirs @ rot
        half = np.array([box.l / 2, box.w / 2, box.h / 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        lo = np.where(np.abs(d) < 1e-12, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(np.abs(d) < 1e-12, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
        t_enter = lo.max(axis=1)
        t_exit = hi.min(axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 0)
        t_hit[hit, k] = t_enter[hit]
    return t_hit


def render_agent(sensor: SensorModel, pose: PoseSE3, boxes_world: Sequence[Box3D],
                 rng: np.random.Generator) -> np.ndarray:
    """Cast the sensor's ray grid into the world and return first hits in the sensor frame"""
    dirs_sensor = sensor.ray_directions()
    dirs_world = dirs_sensor @ pose.rotation.T
    origin = pose.translation

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs_world[:, 2] < -1e-12, -origin[2] / dirs_world[:, 2], np.inf)
    t_ground = np.where(t_ground > 0, t_ground, np.inf)
    if boxes_world:
        t_boxes = _ray_box_hits(origin, dirs_world, boxes_world).min(axis=1)
    else:
        t_boxes = np.full(len(dirs_world), np.inf)
    t = np.minimum(t_ground, t_boxes)
    hit_ground = t_ground < t_boxes

    keep = np.isfinite(t) & (t <= sensor.max_range)
    noise = rng.normal(0.0, sensor.range_noise_sigma, size=len(t)) if sensor.range_noise_sigma > 0 else np.zeros(len(t))
    dropout = rng.random(len(t)) < sensor.dropout_prob
    ground_drop = rng.random(len(t)) >= sensor.ground_keep_prob
    keep &= ~dropout & ~(hit_ground & ground_drop)

    ranges = np.clip(np.where(keep, t, 0.0) + noise, 0.0, sensor.max_range)
    keep &= ranges > 0
    ranges = ranges[keep]
    xyz = dirs_sensor[keep] * ranges[:, None]
    intensity = 1.0 - 0.5 * (ranges / sensor.max_range)
    return np.concatenate([xyz, intensity[:, None]], axis=1).astype(np.float32)


def _sample_layout(spec: SceneSpec, rng: np.random.Generator) -> Tuple[PoseSE3, PoseSE3, List[Box3D], int]:
    """Vehicle/infra ground poses (world) and boxes in the vehicle ground frame"""
    vehicle_ground = PoseSE3.from_yaw(rng.uniform(-math.pi, math.pi), (*rng.uniform(-50, 50, size=2), 0.0))

    side = 1.0 if rng.random() < 0.5 else -1.0
    ix = rng.uniform(*spec.infra_x_range)
    iy = side * rng.uniform(*spec.infra_side_offset)
    target = np.array(spec.placement_region.center)
    facing = math.atan2(target[1] - iy, target[0] - ix) + rng.uniform(-spec.infra_yaw_jitter, spec.infra_yaw_jitter)
    infra_local = PoseSE3.from_yaw(facing, (ix, iy, 0.0))
    infra_ground = compose(vehicle_ground, infra_local)

    region = spec.placement_region
    region_poly = region.polygon()
    keepout = [np.zeros(2), np.array([ix, iy])]
    boxes: List[Box3D] = []
    dropped = 0
    for _ in range(spec.num_objects):
        placed = None
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            l = rng.uniform(*spec.length_range)
            w = rng.uniform(*spec.width_range)
            h = rng.uniform(*spec.height_range)
            u = rng.uniform(-1, 1, size=2) * np.array(region.half_extents)
            c, s = math.cos(region.yaw), math.sin(region.yaw)
            x = region.center[0] + c * u[0] - s * u[1]
            y = region.center[1] + s * u[0] + c * u[1]
            candidate = Box3D(x, y, h / 2, h, w, l, rng.uniform(-math.pi, math.pi))
            if not region_poly.contains(candidate.footprint().vertices).all():
                continue
            if any(np.hypot(*(np.array([x, y]) - p)) < spec.vehicle_clearance + candidate.bev_radius for p in keepout):
                continue
            if any(rotated_iou(candidate, other) > 0 for other in boxes):
                continue
            placed = candidate
            break
        if placed is None:
            dropped += 1
        else:
            boxes.append(placed)
    return vehicle_ground, infra_ground, boxes, dropped


def _mount(ground_pose: PoseSE3, height: float) -> PoseSE3:
    return compose(ground_pose, PoseSE3.from_yaw(0.0, (0.0, 0.0, height)))


def generate_scene(spec: SceneSpec, sensors: Tuple[SensorModel, SensorModel], seed: int,
                   scene_id: Optional[int] = None) -> ScenePair:
    vehicle_sensor, infra_sensor = sensors
    layout_seq, vehicle_seq, infra_seq, noise_seq = np.random.SeedSequence(seed).spawn(4)
    layout_rng = np.random.default_rng(layout_seq)
    vehicle_rng = np.random.default_rng(vehicle_seq)
    infra_rng = np.random.default_rng(infra_seq)
    scene_id = seed if scene_id is None else scene_id
    vehicle_ground, infra_ground, boxes_local, dropped = _sample_layout(spec, layout_rng)
    if dropped:
        logging.warning(f"Scene {scene_id}: placed {len(boxes_local)} of {spec.num_objects} objects")

    boxes_world = [b.transformed(vehicle_ground) for b in boxes_local]
    vehicle_pose = _mount(vehicle_ground, vehicle_sensor.mount_height)
    infra_pose = _mount(infra_ground, infra_sensor.mount_height)

    vehicle_cloud = render_agent(vehicle_sensor, vehicle_pose, boxes_world, vehicle_rng)
    infra_cloud = render_agent(infra_sensor, infra_pose, boxes_world, infra_rng)

    sigma_t, sigma_yaw = spec.pose_noise
    reported_infra = inject_pose_noise(infra_pose, sigma_t, sigma_yaw, noise_seq)
    to_vehicle = invert(vehicle_pose)
    gt_boxes = tuple(b.transformed(to_vehicle) for b in boxes_world)
    return ScenePair(
        vehicle=AgentFrame(vehicle_pose, vehicle_cloud, vehicle_pose),
        infra=AgentFrame(infra_pose, infra_cloud, reported_infra),
        gt_boxes=gt_boxes,
        scene_id=scene_id,
        dropped_objects=dropped,
    )


def fuse_early(pair: ScenePair, use_reported_pose: bool = True) -> np.ndarray:
    """Vehicle cloud followed by the infrastructure cloud moved into the vehicle frame"""
    infra = pair.infra.cloud
    if len(infra) == 0:
        return pair.vehicle.cloud.copy()
    moved = transform_points(infra, pair.infra_to_vehicle(reported=use_reported_pose))
    return np.concatenate([pair.vehicle.cloud, moved.astype(pair.vehicle.cloud.dtype)], axis=0)


def scene_seed(dataset_seed: int, scene_id: int) -> int:
    """Per-scene seed, independent of how many scenes are generated"""
    return int(np.random.SeedSequence([dataset_seed, scene_id]).generate_state(1)[0])


def leveled_infra_view(pair: ScenePair, reported: bool = True) -> Tuple[np.ndarray, PoseSE3]:
    """Infrastructure cloud lowered to the vehicle's mount height, plus that frame's pose in the vehicle frame.

    Lets one detector with a single z range serve both agents.
    """
    lift = float(pair.infra.pose.translation[2] - pair.vehicle.pose.translation[2])
    shift = PoseSE3.from_yaw(0.0, (0.0, 0.0, lift))
    cloud = transform_points(pair.infra.cloud, shift) if len(pair.infra.cloud) else pair.infra.cloud
    return cloud, compose(pair.infra_to_vehicle(reported=reported), invert(shift))
