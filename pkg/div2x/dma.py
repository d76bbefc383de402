"""Domain-mixing instance augmentation.

Object crops are collected per GT box with per-point provenance (vehicle or
infrastructure sensor), labeled by the share of vehicle points, and pasted
back into training scenes so the early-fused teacher and the two student
branches receive consistent copies of the same instance.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from div2x.geom import (
    Box3D, GridSpec, OrientedRect, PoseSE3, compose, invert, points_in_box, rotated_iou, transform_points,
)
from div2x.simlidar import ScenePair
from div2x.storage import write_json, write_points

EMPTY_CLOUD = np.zeros((0, 4), dtype=np.float64)


class Domain(str, Enum):
    VEHICLE = "D_v"
    INFRA = "D_i"
    FUSED = "D_f"


# Order of the (p_f, p_v, p_i) probability triple
SAMPLING_ORDER = (Domain.FUSED, Domain.VEHICLE, Domain.INFRA)


def classify_domain(n_v: int, n_i: int, tau_low: float = 0.2, tau_high: float = 0.8) -> Domain:
    """r = n_v / (n_v + n_i): r < tau_low -> D_i, r > tau_high -> D_v, otherwise D_f"""
    if n_v < 0 or n_i < 0 or n_v + n_i < 1:
        raise ValueError(f"Cannot classify an instance with n_v={n_v}, n_i={n_i}")
    if not 0 < tau_low < tau_high < 1:
        raise ValueError(f"Thresholds must satisfy 0 < tau_low < tau_high < 1, got {(tau_low, tau_high)}")
    ratio = n_v / (n_v + n_i)
    if ratio < tau_low:
        return Domain.INFRA
    if ratio > tau_high:
        return Domain.VEHICLE
    return Domain.FUSED


@dataclass(frozen=True, eq=False)
class Instance:
    points_v: np.ndarray
    points_i: np.ndarray
    box: Box3D
    domain: Domain

    def __post_init__(self):
        if self.n_v + self.n_i < 1:
            raise ValueError("An instance needs at least one point")

    @property
    def n_v(self) -> int:
        return len(self.points_v)

    @property
    def n_i(self) -> int:
        return len(self.points_i)


@dataclass(frozen=True, eq=False)
class InstanceBank:
    instances: Tuple[Instance, ...]
    tau_low: float
    tau_high: float

    def __len__(self) -> int:
        return len(self.instances)

    def by_domain(self, domain: Domain) -> List[Instance]:
        return [inst for inst in self.instances if inst.domain == domain]

    def counts(self) -> Dict[Domain, int]:
        return {d: len(self.by_domain(d)) for d in Domain}


def crop_instances(pair: ScenePair, tau_low: float, tau_high: float) -> List[Instance]:
    """One instance per GT box with at least one point, using the true infra pose"""
    infra_in_vehicle = transform_points(pair.infra.cloud, pair.infra_to_vehicle(reported=False))
    instances = []
    for box in pair.gt_boxes:
        points_v = pair.vehicle.cloud[points_in_box(pair.vehicle.cloud, box)]
        points_i = infra_in_vehicle[points_in_box(infra_in_vehicle, box)]
        if len(points_v) + len(points_i) == 0:
            continue
        domain = classify_domain(len(points_v), len(points_i), tau_low, tau_high)
        instances.append(Instance(points_v, points_i.astype(np.float32), box, domain))
    return instances


def build_bank(scenes: Sequence[ScenePair], tau_low: float = 0.2, tau_high: float = 0.8,
               threads: int = 1) -> InstanceBank:
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        per_scene = list(pool.map(lambda s: crop_instances(s, tau_low, tau_high), scenes))
    instances = tuple(inst for group in per_scene for inst in group)
    bank = InstanceBank(instances, tau_low, tau_high)
    counts = bank.counts()
    logging.info(f"Instance bank: {len(bank)} instances "
                 f"(D_f={counts[Domain.FUSED]}, D_v={counts[Domain.VEHICLE]}, D_i={counts[Domain.INFRA]})")
    return bank


def export_bank(bank: InstanceBank, out_dir) -> Path:
    """Write a JSON manifest plus DVPC point files per instance, for inspection"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, inst in enumerate(bank.instances):
        v_name, i_name = f"instance_{k:06d}_v.bin", f"instance_{k:06d}_i.bin"
        write_points(out / v_name, inst.points_v)
        write_points(out / i_name, inst.points_i)
        entries.append({"box": inst.box.as_array().tolist(), "domain": inst.domain.value,
                        "n_v": inst.n_v, "n_i": inst.n_i, "points_v": v_name, "points_i": i_name})
    path = out / "bank.json"
    write_json(path, {"tau_low": bank.tau_low, "tau_high": bank.tau_high, "instances": entries})
    return path


@dataclass(frozen=True, eq=False)
class AugmentedScene:
    """Training inputs for one scene: P_v′ (vehicle frame), P_i′ (infra frame), P_e′ (vehicle frame)"""
    vehicle_cloud: np.ndarray
    infra_cloud: np.ndarray
    early_cloud: np.ndarray
    gt_boxes: Tuple[Box3D, ...]
    infra_to_vehicle: PoseSE3
    injected: Tuple[Instance, ...] = ()
    vehicle_rect: Optional[OrientedRect] = None
    infra_rect: Optional[OrientedRect] = None

    def infra_cloud_in_vehicle(self) -> np.ndarray:
        if len(self.infra_cloud) == 0:
            return EMPTY_CLOUD
        return transform_points(self.infra_cloud, self.infra_to_vehicle)


def _concat(*clouds: np.ndarray) -> np.ndarray:
    parts = [c for c in clouds if len(c)]
    if not parts:
        return EMPTY_CLOUD.copy()
    return np.concatenate(parts, axis=0).astype(np.float64, copy=False)


def base_scene(pair: ScenePair, use_reported_pose: bool = True) -> AugmentedScene:
    """The un-augmented training inputs of a scene"""
    to_vehicle = pair.infra_to_vehicle(reported=use_reported_pose)
    infra_in_vehicle = transform_points(pair.infra.cloud, to_vehicle) if len(pair.infra.cloud) else EMPTY_CLOUD
    return AugmentedScene(
        vehicle_cloud=pair.vehicle.cloud,
        infra_cloud=pair.infra.cloud,
        early_cloud=_concat(pair.vehicle.cloud, infra_in_vehicle),
        gt_boxes=tuple(pair.gt_boxes),
        infra_to_vehicle=to_vehicle,
    )


def _draw_instance(bank: InstanceBank, probs: Sequence[float], rng: np.random.Generator) -> Instance:
    domain = SAMPLING_ORDER[int(rng.choice(3, p=np.asarray(probs, dtype=np.float64)))]
    pool = bank.by_domain(domain)
    if not pool:
        for fallback in SAMPLING_ORDER:
            pool = bank.by_domain(fallback)
            if pool:
                logging.debug(f"Category {domain.value} empty, sampling from {fallback.value}")
                break
    return pool[int(rng.integers(len(pool)))]


def _place(instance: Instance, grid: GridSpec, occupied: List[Box3D], rng: np.random.Generator,
           max_attempts: int) -> Optional[Box3D]:
    box = instance.box
    margin = box.bev_radius
    x_lo, x_hi = grid.x_range[0] + margin, grid.x_range[1] - margin
    y_lo, y_hi = grid.y_range[0] + margin, grid.y_range[1] - margin
    for _ in range(max_attempts):
        candidate = Box3D(rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi), box.z,
                          box.h, box.w, box.l, rng.uniform(-math.pi, math.pi))
        if all(rotated_iou(candidate, other) <= 0 for other in occupied):
            return candidate
    return None


def sample_and_inject(bank: InstanceBank, pair: ScenePair, probs: Sequence[float], n_samples: int,
                      seed, grid: GridSpec, max_attempts: int = 10,
                      use_reported_pose: bool = True) -> AugmentedScene:
    """Paste up to n_samples bank instances into free spots of the scene"""
    scene = base_scene(pair, use_reported_pose)
    if n_samples <= 0:
        return scene
    if len(bank) == 0:
        raise ValueError("Cannot sample from an empty instance bank")
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ValueError(f"Sampling probabilities must sum to 1, got {probs}")

    rng = np.random.default_rng(seed)
    occupied = list(scene.gt_boxes)
    to_infra = invert(scene.infra_to_vehicle)
    added_v, added_i, added_i_local, injected = [], [], [], []
    for _ in range(n_samples):
        instance = _draw_instance(bank, probs, rng)
        placed = _place(instance, grid, occupied, rng, max_attempts)
        if placed is None:
            logging.debug("Instance placement rejected after all attempts")
            continue
        motion = compose(placed.pose(), invert(instance.box.pose()))
        points_v = transform_points(instance.points_v.astype(np.float64), motion) if instance.n_v else EMPTY_CLOUD
        points_i = transform_points(instance.points_i.astype(np.float64), motion) if instance.n_i else EMPTY_CLOUD
        added_v.append(points_v)
        added_i.append(points_i)
        added_i_local.append(transform_points(points_i, to_infra) if instance.n_i else EMPTY_CLOUD)
        occupied.append(placed)
        injected.append(Instance(points_v, points_i, placed, instance.domain))

    return replace(
        scene,
        vehicle_cloud=_concat(scene.vehicle_cloud, *added_v),
        infra_cloud=_concat(scene.infra_cloud, *added_i_local),
        early_cloud=_concat(scene.early_cloud, *added_v, *added_i),
        gt_boxes=tuple(occupied),
        injected=tuple(injected),
    )


@dataclass(frozen=True)
class SceneAugmentation:
    """Global flip (y -> -y), rotation about z and scaling applied to a whole scene"""
    flip: bool = False
    angle: float = 0.0
    scale: float = 1.0

    @property
    def linear(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        flip = np.diag([1.0, -1.0 if self.flip else 1.0, 1.0])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.scale * rot @ flip

    def _yaw(self, yaw: float) -> float:
        return self.angle + (-yaw if self.flip else yaw)

    def apply_points(self, cloud: np.ndarray) -> np.ndarray:
        out = np.array(cloud, dtype=np.float64, copy=True)
        out[:, :3] = out[:, :3] @ self.linear.T
        return out

    def apply_box(self, box: Box3D) -> Box3D:
        center = self.linear @ np.array([box.x, box.y, box.z])
        return Box3D(center[0], center[1], center[2], box.h * self.scale, box.w * self.scale,
                     box.l * self.scale, self._yaw(box.yaw))

    def apply_rect(self, rect: OrientedRect) -> OrientedRect:
        center = self.linear[:2, :2] @ np.asarray(rect.center, dtype=np.float64)
        half = (rect.half_extents[0] * self.scale, rect.half_extents[1] * self.scale)
        return OrientedRect((float(center[0]), float(center[1])), half, self._yaw(rect.yaw))


def sample_scene_augmentation(rng: np.random.Generator, flip_prob: float, rotation_range: float,
                              scale_range: Tuple[float, float]) -> SceneAugmentation:
    return SceneAugmentation(
        flip=bool(rng.random() < flip_prob),
        angle=float(rng.uniform(-rotation_range, rotation_range)),
        scale=float(rng.uniform(*scale_range)),
    )


def scene_augment(scene: AugmentedScene, aug: SceneAugmentation,
                  vehicle_rect: OrientedRect, infra_rect: OrientedRect) -> AugmentedScene:
    """Apply one global transform identically to every cloud, box and perception rect.

    The infrastructure cloud stays in its own frame: it is moved into the
    vehicle frame, transformed, and moved back with the same pose.
    """
    infra = scene.infra_cloud
    if len(infra):
        to_infra = invert(scene.infra_to_vehicle)
        infra = transform_points(aug.apply_points(scene.infra_cloud_in_vehicle()), to_infra)
    return replace(
        scene,
        vehicle_cloud=aug.apply_points(scene.vehicle_cloud) if len(scene.vehicle_cloud) else EMPTY_CLOUD,
        infra_cloud=infra.astype(np.float64) if len(infra) else EMPTY_CLOUD,
        early_cloud=aug.apply_points(scene.early_cloud) if len(scene.early_cloud) else EMPTY_CLOUD,
        gt_boxes=tuple(aug.apply_box(b) for b in scene.gt_boxes),
        vehicle_rect=aug.apply_rect(vehicle_rect),
        infra_rect=aug.apply_rect(infra_rect),
    )
