"""Detection models: pillar BEV encoder, domain-adaptive fusion, anchor-free head."""
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from div2x import nn
from div2x.errors import DataError
from div2x.geom import Box3D, GridSpec, nms
from div2x.storage import read_checkpoint, write_checkpoint

PILLAR_FEATURES = 6
REG_CHANNELS = 8
# prior probability 0.01 for the class logits at init
CLASS_BIAS_INIT = -math.log((1 - 0.01) / 0.01)
TARGET_ASSIGNMENTS = ("footprint", "center")


@dataclass(frozen=True)
class PillarEncoderConfig:
    grid: GridSpec
    z_range: Tuple[float, float] = (-3.5, 1.5)
    channels: int = 32
    stride: int = 2

    def __post_init__(self):
        if self.channels < 8:
            raise ValueError(f"channels must be >= 8, got {self.channels}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def feature_grid(self) -> GridSpec:
        return self.grid.downsample(self.stride)

    def to_dict(self) -> Dict:
        return {"x_range": list(self.grid.x_range), "y_range": list(self.grid.y_range),
                "cell_size": list(self.grid.cell_size), "z_range": list(self.z_range),
                "channels": self.channels, "stride": self.stride}

    @classmethod
    def from_dict(cls, d: Dict) -> "PillarEncoderConfig":
        grid = GridSpec(tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["cell_size"]))
        return cls(grid, tuple(d["z_range"]), int(d["channels"]), int(d["stride"]))


def pillarize(cloud: np.ndarray, grid: GridSpec, z_range: Tuple[float, float] = (-3.5, 1.5)) -> np.ndarray:
    """Per-cell (count, mean z, mean intensity, mean x offset, mean y offset, occupancy), H×W×6"""
    h, w = grid.shape
    features = np.zeros((h, w, PILLAR_FEATURES), dtype=np.float64)
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 4)
    if len(cloud) == 0:
        return features
    x, y, z, intensity = cloud.T
    fi = np.floor((x - grid.x_range[0]) / grid.cell_size[0])
    fj = np.floor((y - grid.y_range[0]) / grid.cell_size[1])
    keep = (fi >= 0) & (fi < h) & (fj >= 0) & (fj < w) & (z >= z_range[0]) & (z <= z_range[1])
    if not keep.any():
        return features
    i, j = fi[keep].astype(np.int64), fj[keep].astype(np.int64)
    flat = i * w + j
    cx = grid.x_range[0] + (i + 0.5) * grid.cell_size[0]
    cy = grid.y_range[0] + (j + 0.5) * grid.cell_size[1]
    count = np.bincount(flat, minlength=h * w).astype(np.float64)
    safe = np.maximum(count, 1.0)
    sums = [np.bincount(flat, weights=v, minlength=h * w)
            for v in (z[keep], intensity[keep], x[keep] - cx, y[keep] - cy)]
    features[..., 0] = count.reshape(h, w)
    for k, s in enumerate(sums, start=1):
        features[..., k] = (s / safe).reshape(h, w)
    features[..., 5] = (count > 0).reshape(h, w)
    return features


def occupancy(pillars: np.ndarray, stride: int) -> np.ndarray:
    """Feature-grid cells whose stride×stride pillar block holds any point"""
    h, w = pillars.shape[:2]
    occupied = pillars[..., 0] > 0
    return occupied.reshape(h // stride, stride, w // stride, stride).any(axis=(1, 3)).astype(np.uint8)


class BevEncoder(nn.Module):
    """1×1 conv (6 -> C) then two 3×3 convs, ReLU after each"""

    def __init__(self, config: PillarEncoderConfig, seed: int = 0, name: str = "encoder"):
        c = config.channels
        self.conv_in = nn.Conv2d(f"{name}.conv_in", PILLAR_FEATURES, c, 1, seed=seed)
        self.conv1 = nn.Conv2d(f"{name}.conv1", c, c, 3, stride=config.stride, seed=seed)
        self.conv2 = nn.Conv2d(f"{name}.conv2", c, c, 3, seed=seed)

    def __call__(self, pillars: nn.Tensor) -> nn.Tensor:
        x = nn.relu(self.conv_in(pillars))
        x = nn.relu(self.conv1(x))
        return nn.relu(self.conv2(x))


@dataclass
class HeadOutput:
    class_map: nn.Tensor
    reg_map: nn.Tensor


class DetectionHead(nn.Module):
    def __init__(self, channels: int, seed: int = 0, name: str = "head"):
        self.shared = nn.Conv2d(f"{name}.shared", channels, channels, 3, seed=seed)
        self.cls = nn.Conv2d(f"{name}.cls", channels, 1, 1, seed=seed, bias_init=CLASS_BIAS_INIT)
        self.reg = nn.Conv2d(f"{name}.reg", channels, REG_CHANNELS, 1, seed=seed)

    def __call__(self, features: nn.Tensor) -> HeadOutput:
        x = nn.relu(self.shared(features))
        return HeadOutput(self.cls(x), self.reg(x))


def head_forward(head: DetectionHead, features: nn.Tensor) -> HeadOutput:
    return head(features)


class DomainAdaptiveFusion(nn.Module):
    """Offset-warp the infrastructure feature, then fuse with domain and spatial attention"""

    def __init__(self, channels: int, seed: int = 0, name: str = "daf"):
        c2 = 2 * channels
        self.channels = channels
        self.offset = nn.Conv2d(f"{name}.offset", c2, 2, 3, seed=seed, zero_init=True)
        self.domain_conv3 = nn.Conv2d(f"{name}.domain_conv3", c2, c2, 3, seed=seed)
        self.domain_conv1a = nn.Conv2d(f"{name}.domain_conv1a", c2, c2, 1, seed=seed)
        self.domain_conv1b = nn.Conv2d(f"{name}.domain_conv1b", c2, c2, 1, seed=seed)
        self.spatial_conv3 = nn.Conv2d(f"{name}.spatial_conv3", c2, 1, 3, seed=seed)
        self.spatial_conv5 = nn.Conv2d(f"{name}.spatial_conv5", c2, 1, 5, seed=seed)
        self.reduce = nn.Conv2d(f"{name}.reduce", c2, channels, 1, seed=seed)

    def offsets(self, b_v: nn.Tensor, b_i: nn.Tensor) -> nn.Tensor:
        if b_v.shape != b_i.shape:
            raise ValueError(f"DAF inputs differ in shape: {b_v.shape} vs {b_i.shape}")
        return self.offset(nn.concat_axis([b_v, b_i], axis=-1))

    def domain_attention(self, b_cat: nn.Tensor) -> nn.Tensor:
        h, w, c, d = b_cat.shape
        if d != 2:
            raise ValueError(f"Domain axis must have size 2, got {b_cat.shape}")
        folded = nn.reshape(b_cat, (h, w, c * d))
        x = nn.relu(self.domain_conv3(folded))
        x = nn.relu(self.domain_conv1a(x))
        logits = nn.add(folded, self.domain_conv1b(x))
        return nn.softmax_axis(nn.reshape(logits, (h, w, c, d)), axis=-1)

    def spatial_attention(self, b_cat: nn.Tensor) -> nn.Tensor:
        h, w, c, d = b_cat.shape
        folded = nn.reshape(b_cat, (h, w, c * d))
        conv_path = nn.add(self.spatial_conv3(folded), self.spatial_conv5(folded))
        return nn.add(nn.reshape(conv_path, (h, w)), nn.max_over_axes(b_cat, axes=(2, 3)))

    def fuse(self, b_v: nn.Tensor, b_i_warped: nn.Tensor, a_d: nn.Tensor, a_s: nn.Tensor) -> nn.Tensor:
        b_cat = nn.stack([b_v, b_i_warped], axis=-1)
        h, w, c, d = b_cat.shape
        weighted = nn.mul(nn.mul(a_d, nn.broadcast_to(a_s, (h, w, c, d))), b_cat)
        return self.reduce(nn.reshape(weighted, (h, w, c * d)))

    def __call__(self, b_v: nn.Tensor, b_i: nn.Tensor) -> nn.Tensor:
        delta = self.offsets(b_v, b_i)
        b_i_warped = daf_warp(b_i, delta)
        b_cat = nn.stack([b_v, b_i_warped], axis=-1)
        a_d = self.domain_attention(b_cat)
        a_s = self.spatial_attention(b_cat)
        return self.fuse(b_v, b_i_warped, a_d, a_s)


def daf_offset(daf: DomainAdaptiveFusion, b_v: nn.Tensor, b_i: nn.Tensor) -> nn.Tensor:
    return daf.offsets(b_v, b_i)


def daf_warp(b_i: nn.Tensor, delta: nn.Tensor) -> nn.Tensor:
    return nn.bilinear_sample(b_i, delta)


def daf_domain_attention(daf: DomainAdaptiveFusion, b_cat: nn.Tensor) -> nn.Tensor:
    return daf.domain_attention(b_cat)


def daf_spatial_attention(daf: DomainAdaptiveFusion, b_cat: nn.Tensor) -> nn.Tensor:
    return daf.spatial_attention(b_cat)


def daf_fuse(daf: DomainAdaptiveFusion, b_v: nn.Tensor, b_i_warped: nn.Tensor,
             a_d: nn.Tensor, a_s: nn.Tensor) -> nn.Tensor:
    return daf.fuse(b_v, b_i_warped, a_d, a_s)


# ---------------------------------------------------------------- models

class SingleAgentDetector(nn.Module):
    """Encoder + head on one cloud; serves early fusion, the teacher and the single-agent baseline"""
    kind = "single"

    def __init__(self, config: PillarEncoderConfig, seed: int = 0):
        self.config = config
        self.encoder = BevEncoder(config, seed=seed)
        self.head = DetectionHead(config.channels, seed=seed)

    def features(self, cloud: np.ndarray) -> nn.Tensor:
        return self.encoder(nn.Tensor(pillarize(cloud, self.config.grid, self.config.z_range)))

    def __call__(self, cloud: np.ndarray) -> Tuple[nn.Tensor, HeadOutput]:
        features = self.features(cloud)
        return features, self.head(features)

    def hyperparameters(self) -> Dict:
        return {"kind": self.kind, "encoder": self.config.to_dict()}


@dataclass
class StudentOutput:
    b_v: nn.Tensor
    b_i: nn.Tensor
    b_f: nn.Tensor
    head: HeadOutput


class StudentDetector(nn.Module):
    """Two branches sharing one encoder, fused by DAF (or summed), then the head"""
    kind = "student"

    def __init__(self, config: PillarEncoderConfig, seed: int = 0, use_daf: bool = True):
        self.config = config
        self.use_daf = use_daf
        self.encoder = BevEncoder(config, seed=seed)
        if use_daf:
            self.daf = DomainAdaptiveFusion(config.channels, seed=seed)
        self.head = DetectionHead(config.channels, seed=seed)

    def encode(self, cloud: np.ndarray) -> nn.Tensor:
        return self.encoder(nn.Tensor(pillarize(cloud, self.config.grid, self.config.z_range)))

    def fuse(self, b_v: nn.Tensor, b_i: nn.Tensor) -> nn.Tensor:
        if self.use_daf:
            return self.daf(b_v, b_i)
        return nn.add(b_v, b_i)

    def __call__(self, vehicle_cloud: np.ndarray, infra_cloud_in_vehicle: np.ndarray) -> StudentOutput:
        b_v = self.encode(vehicle_cloud)
        b_i = self.encode(infra_cloud_in_vehicle)
        b_f = self.fuse(b_v, b_i)
        return StudentOutput(b_v, b_i, b_f, self.head(b_f))

    def hyperparameters(self) -> Dict:
        return {"kind": self.kind, "use_daf": self.use_daf, "encoder": self.config.to_dict()}


def save_model(model: nn.Module, path, extra: Optional[Dict] = None) -> None:
    """DVCK checkpoint plus a JSON sidecar with the architecture"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(path, model.state_dict())
    sidecar = dict(model.hyperparameters())
    if extra:
        sidecar.update(extra)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_model(path):
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    try:
        sidecar = json.loads(sidecar_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Failed to read model sidecar {sidecar_path}: {e}")
    config = PillarEncoderConfig.from_dict(sidecar["encoder"])
    if sidecar["kind"] == StudentDetector.kind:
        model = StudentDetector(config, use_daf=bool(sidecar["use_daf"]))
    elif sidecar["kind"] == SingleAgentDetector.kind:
        model = SingleAgentDetector(config)
    else:
        raise DataError(f"Unknown model kind {sidecar['kind']!r} in {sidecar_path}")
    try:
        model.load_state_dict(read_checkpoint(path))
    except (KeyError, ValueError) as e:
        raise DataError(f"Checkpoint {path} does not match its sidecar: {e}")
    return model


# ---------------------------------------------------------------- targets

@dataclass
class Targets:
    """Dense training targets on the feature grid.

    ``dropped`` counts boxes whose center falls outside the grid; ``merged``
    counts in-grid boxes that lost every cell to a nearer box center.
    """
    cls: np.ndarray
    reg: np.ndarray
    positive: np.ndarray
    dropped: int = 0
    merged: int = 0


def encode_targets(gt_boxes, grid: GridSpec, assignment: str = "footprint") -> Targets:
    """Mark positive cells per GT box and fill their regression targets.

    The center cell of a box is always positive. With ``footprint`` assignment
    every cell whose center lies inside the box footprint is positive as well;
    ``center`` keeps the center cell only. A cell claimed by several boxes goes
    to the nearest box center. Regression is (dx, dy, z, log h, log w, log l,
    sin, cos) with (dx, dy) measured from the claiming cell's center in cell units.
    """
    if assignment not in TARGET_ASSIGNMENTS:
        raise ValueError(f"Unknown target assignment {assignment!r}, expected one of {TARGET_ASSIGNMENTS}")
    h, w = grid.shape
    cls = np.zeros((h, w, 1))
    reg = np.zeros((h, w, REG_CHANNELS))
    owner = np.full((h, w), -1, dtype=np.int64)
    distance = np.full((h, w), np.inf)
    xs, ys = grid.cell_centers()
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
    kept = []
    dropped = 0
    for box in gt_boxes:
        i, j = grid.cell_of(box.x, box.y)
        if not grid.contains_cell(i, j):
            dropped += 1
            continue
        index = len(kept)
        kept.append(box)
        if assignment == "footprint":
            claim = box.footprint().contains(centers).reshape(h, w)
        else:
            claim = np.zeros((h, w), dtype=bool)
        claim[i, j] = True
        d2 = (xs - box.x) ** 2 + (ys - box.y) ** 2
        wins = claim & (d2 < distance)
        owner[wins] = index
        distance[wins] = d2[wins]
    for index, box in enumerate(kept):
        cells = np.argwhere(owner == index)
        for i, j in cells:
            reg[i, j] = [(box.x - xs[i, j]) / grid.cell_size[0], (box.y - ys[i, j]) / grid.cell_size[1], box.z,
                         math.log(box.h), math.log(box.w), math.log(box.l), math.sin(box.yaw), math.cos(box.yaw)]
    positive = (owner >= 0).astype(np.uint8)
    cls[..., 0] = positive
    merged = len(kept) - len(np.unique(owner[owner >= 0]))
    return Targets(cls, reg, positive, dropped, merged)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float


def decode_detections(out: HeadOutput, grid: GridSpec, score_thr: float = 0.3, nms_thr: float = 0.3,
                      max_candidates: int = 100) -> List[Detection]:
    scores = nn.sigmoid(out.class_map.detach()).data[..., 0].astype(np.float64)
    reg = out.reg_map.data.astype(np.float64)
    ii, jj = np.nonzero(scores >= score_thr)
    if len(ii) == 0:
        return []
    order = np.lexsort((jj, ii, -scores[ii, jj]))[:max_candidates]
    boxes, kept_scores = [], []
    for k in order:
        i, j = ii[k], jj[k]
        dx, dy, z, log_h, log_w, log_l, sin_t, cos_t = reg[i, j]
        cx = grid.x_range[0] + (i + 0.5) * grid.cell_size[0]
        cy = grid.y_range[0] + (j + 0.5) * grid.cell_size[1]
        extents = np.exp(np.clip([log_h, log_w, log_l], -10.0, 5.0))
        boxes.append(Box3D(cx + dx * grid.cell_size[0], cy + dy * grid.cell_size[1], z,
                           extents[0], extents[1], extents[2], math.atan2(sin_t, cos_t)))
        kept_scores.append(float(scores[i, j]))
    return [Detection(boxes[k], kept_scores[k]) for k in nms(boxes, kept_scores, nms_thr)]
