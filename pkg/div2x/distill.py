"""Progressive distillation: masks, losses and the training loops.

The teacher is an early-fusion detector trained first and then frozen. The
student encodes each agent with one shared encoder, fuses the two features
and is pulled towards the teacher twice: before fusion on the regions only
one agent covers, and after fusion on the overlap, plus on the predictions.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from div2x import nn
from div2x.config import RunConfig, encoder_config
from div2x.dma import (
    EMPTY_CLOUD, AugmentedScene, InstanceBank, base_scene, build_bank, sample_and_inject,
    sample_scene_augmentation, scene_augment,
)
from div2x.errors import ConfigurationError, DataError, TrainingDivergedError
from div2x.geom import GridSpec, OrientedRect, invert, polygon_intersection, rasterize_mask, transform_points
from div2x.pipeline import HeadOutput, SingleAgentDetector, StudentDetector, encode_targets, pillarize
from div2x.simlidar import ScenePair, leveled_infra_view, with_pose_noise
from div2x.training_log import DefaultTrainingLog, LossRecord, TrainingLogHandler

Rects = Tuple[OrientedRect, OrientedRect]


@dataclass(frozen=True, eq=False)
class MaskSet:
    overlap: np.ndarray
    vehicle_only: np.ndarray
    infra_only: np.ndarray
    mode: str


class MaskBuilder(ABC):
    """Abstract base class for overlap / non-overlap mask construction"""
    mode: str

    @abstractmethod
    def build(self, vehicle_rect: OrientedRect, infra_rect: OrientedRect, grid: GridSpec,
              clouds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> MaskSet:
        pass


class GeometricMaskBuilder(MaskBuilder):
    """Masks from the two perception rectangles"""
    mode = "geometric"

    def build(self, vehicle_rect, infra_rect, grid, clouds=None) -> MaskSet:
        infra_area = infra_rect.polygon()
        overlap = rasterize_mask(polygon_intersection(vehicle_rect.polygon(), infra_area), grid)
        outside = 1 - overlap
        return MaskSet(overlap, outside, rasterize_mask(infra_area, grid) & outside, self.mode)


class FootprintMaskBuilder(MaskBuilder):
    """Masks from the cells each agent's points actually occupy"""
    mode = "footprint"

    def __init__(self, z_range: Tuple[float, float] = (-3.5, 1.5)):
        self.z_range = z_range

    def build(self, vehicle_rect, infra_rect, grid, clouds=None) -> MaskSet:
        if clouds is None:
            raise ValueError("Footprint masks need the vehicle and infrastructure clouds")
        occupied_v, occupied_i = (
            (pillarize(cloud, grid, self.z_range)[..., 5] > 0).astype(np.uint8) for cloud in clouds)
        return MaskSet(occupied_v & occupied_i, occupied_v & (1 - occupied_i),
                       occupied_i & (1 - occupied_v), self.mode)


def compute_masks(vehicle_rect: OrientedRect, infra_rect: OrientedRect, grid: GridSpec,
                  clouds: Optional[Tuple[np.ndarray, np.ndarray]] = None, mode: str = "geometric",
                  z_range: Tuple[float, float] = (-3.5, 1.5)) -> MaskSet:
    """clouds are (vehicle, infrastructure) in the vehicle frame; only footprint mode reads them"""
    if mode == GeometricMaskBuilder.mode:
        builder: MaskBuilder = GeometricMaskBuilder()
    elif mode == FootprintMaskBuilder.mode:
        builder = FootprintMaskBuilder(z_range)
    else:
        raise ValueError(f"Unknown mask mode {mode!r}")
    return builder.build(vehicle_rect, infra_rect, grid, clouds)


def perception_rects(pair: ScenePair, grid: GridSpec, reported: bool = False) -> Rects:
    """A_v is the grid itself; A_i is the same rectangle carried along by the infra pose"""
    vehicle_rect = grid.rect()
    to_vehicle = pair.infra_to_vehicle(reported=reported)
    center = to_vehicle.rotation[:2, :2] @ np.asarray(vehicle_rect.center) + to_vehicle.translation[:2]
    infra_rect = OrientedRect((float(center[0]), float(center[1])), vehicle_rect.half_extents, to_vehicle.yaw)
    return vehicle_rect, infra_rect


# ---------------------------------------------------------------- losses

def loss_da(b_t: nn.Tensor, b_v: nn.Tensor, b_i: nn.Tensor, masks: MaskSet) -> nn.Tensor:
    """Pre-fusion distillation on the cells only one agent covers"""
    target = b_t.detach()
    return nn.add(nn.masked_l1(target, b_v, masks.vehicle_only), nn.masked_l1(target, b_i, masks.infra_only))


def loss_f(b_t: nn.Tensor, b_f: nn.Tensor, masks: MaskSet) -> nn.Tensor:
    """Post-fusion distillation on the overlap"""
    return nn.masked_l1(b_t.detach(), b_f, masks.overlap)


def loss_p(teacher_out: HeadOutput, student_out: HeadOutput, score_thr: float = 0.3) -> nn.Tensor:
    teacher_scores = nn.sigmoid(teacher_out.class_map.detach())
    confident = teacher_scores.data[..., 0] >= score_thr
    k = int(confident.sum())
    if k == 0:
        return nn.Tensor(0.0)
    class_term = nn.masked_l1(teacher_scores, nn.sigmoid(student_out.class_map), confident, normalizer=k)
    reg_term = nn.masked_l1(teacher_out.reg_map.detach(), student_out.reg_map, confident, normalizer=k)
    return nn.add(class_term, reg_term)


def focal_loss(logits: nn.Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> nn.Tensor:
    """Summed sigmoid focal loss"""
    t = nn.Tensor(targets)
    p = nn.sigmoid(logits)
    positive = nn.mul(nn.mul(nn.pow_scalar(1 - p, gamma), nn.neg(nn.log_sigmoid(logits))), t)
    negative = nn.mul(nn.mul(nn.pow_scalar(p, gamma), nn.neg(nn.log_sigmoid(nn.neg(logits)))), 1 - t)
    return nn.sum_all(nn.add(nn.mul(positive, alpha), nn.mul(negative, 1.0 - alpha)))


def loss_detect(out: HeadOutput, gt_boxes, grid: GridSpec, alpha: float = 0.25, gamma: float = 2.0,
                assignment: str = "footprint") -> nn.Tensor:
    """Focal loss on the class map plus L1 on the regression channels of positive cells"""
    targets = encode_targets(gt_boxes, grid, assignment)
    if targets.dropped or targets.merged:
        logging.debug(f"Target assignment: {targets.dropped} GT boxes outside the grid, "
                      f"{targets.merged} merged into a nearer box")
    normalizer = max(int(targets.positive.sum()), 1)
    cls_term = nn.mul(focal_loss(out.class_map, targets.cls, alpha, gamma), 1.0 / normalizer)
    reg_term = nn.masked_l1(out.reg_map, nn.Tensor(targets.reg), targets.positive, normalizer=normalizer)
    return nn.add(cls_term, reg_term)


def total_loss(detect, da, f, p, lambda_kd: float = 1.0) -> nn.Tensor:
    if lambda_kd < 0:
        raise ValueError(f"lambda_kd must be >= 0, got {lambda_kd}")
    detect = nn.as_tensor(detect)
    if lambda_kd == 0:
        return detect
    distill = nn.add(nn.add(nn.as_tensor(da), nn.as_tensor(f)), nn.as_tensor(p))
    return nn.add(detect, nn.mul(distill, lambda_kd))


# ---------------------------------------------------------------- training

@dataclass(frozen=True, eq=False)
class TrainingSample:
    """One augmented scene as both teacher and student see it"""
    scene: AugmentedScene
    vehicle_rect: OrientedRect
    infra_rect: OrientedRect
    infra_in_vehicle: np.ndarray


def prepare_sample(pair: ScenePair, config: RunConfig, bank: Optional[InstanceBank], grid: GridSpec,
                   seed: np.random.SeedSequence) -> TrainingSample:
    """Pose noise, DMA and scene augmentation for one training step.

    Clouds for the teacher are aligned with the true pose; the student's
    infrastructure branch is projected with the reported one.
    """
    train = config.train
    noise_seed, dma_seed, aug_seed = seed.spawn(3)
    if train.pose_noise_translation > 0 or train.pose_noise_yaw_deg > 0:
        pair = with_pose_noise(pair, train.pose_noise_translation, math.radians(train.pose_noise_yaw_deg),
                               noise_seed)
    if bank is not None and train.use_dma and len(bank):
        scene = sample_and_inject(bank, pair, config.dma.probabilities, config.dma.n_samples, dma_seed, grid,
                                  config.dma.max_attempts, use_reported_pose=False)
    else:
        scene = base_scene(pair, use_reported_pose=False)
    vehicle_rect, infra_rect = perception_rects(pair, grid)
    if train.scene_augmentation:
        aug = sample_scene_augmentation(np.random.default_rng(aug_seed), train.flip_prob,
                                        math.radians(train.rotation_range_deg), train.scale_range)
        scene = scene_augment(scene, aug, vehicle_rect, infra_rect)
        vehicle_rect, infra_rect = scene.vehicle_rect, scene.infra_rect
    if len(scene.infra_cloud):
        infra_in_vehicle = transform_points(scene.infra_cloud, pair.infra_to_vehicle(reported=True))
    else:
        infra_in_vehicle = EMPTY_CLOUD
    return TrainingSample(scene, vehicle_rect, infra_rect, infra_in_vehicle)


StepLoss = Callable[[ScenePair, np.random.SeedSequence], Tuple[nn.Tensor, Dict[str, float]]]


def _fit(model: nn.Module, scenes: Sequence[ScenePair], config: RunConfig, step_loss: StepLoss,
         log_handler: TrainingLogHandler, role: str) -> None:
    """Seeded epoch loop shared by every role; one optimizer step per scene"""
    train = config.train
    optimizer = nn.SGD(model.parameters(), train.lr, train.momentum, train.grad_clip)
    total_steps = train.epochs * len(scenes)
    step = 0
    for epoch in range(1, train.epochs + 1):
        order = np.random.default_rng([train.seed, epoch]).permutation(len(scenes))
        epoch_total = 0.0
        for position, index in enumerate(order):
            if train.lr_schedule == "cosine":
                optimizer.lr = nn.cosine_lr(train.lr, step, total_steps)
            optimizer.zero_grad()
            loss, parts = step_loss(scenes[int(index)], np.random.SeedSequence([train.seed, epoch, position]))
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            loss.backward()
            optimizer.step()
            log_handler.handle_step(LossRecord(epoch=epoch, step=step, total=value, **parts))
            epoch_total += value
            step += 1
        logging.info(f"{role} epoch {epoch}/{train.epochs} - mean loss {epoch_total / len(scenes):.5f}")


def _check_scenes(scenes: Sequence[ScenePair]) -> None:
    if not scenes:
        raise DataError("Training split is empty")


def _bank_for(scenes: Sequence[ScenePair], config: RunConfig) -> Optional[InstanceBank]:
    if not config.train.use_dma or config.dma.n_samples == 0:
        return None
    return build_bank(scenes, config.dma.tau_low, config.dma.tau_high, config.threads)


def train_teacher(scenes: Sequence[ScenePair], config: RunConfig,
                  log_handler: Optional[TrainingLogHandler] = None) -> SingleAgentDetector:
    """Early-fusion detector on DMA-augmented clouds, detection loss only"""
    _check_scenes(scenes)
    log_handler = log_handler or DefaultTrainingLog()
    encoder = encoder_config(config.grid)
    feature_grid = encoder.feature_grid
    model = SingleAgentDetector(encoder, seed=config.train.seed)
    bank = _bank_for(scenes, config)

    def step_loss(pair, seed):
        sample = prepare_sample(pair, config, bank, encoder.grid, seed)
        _, out = model(sample.scene.early_cloud)
        detect = loss_detect(out, sample.scene.gt_boxes, feature_grid,
                             config.train.focal_alpha, config.train.focal_gamma, config.train.target_assignment)
        return detect, {"loss_detect": detect.item()}

    _fit(model, scenes, config, step_loss, log_handler, "Teacher")
    return model


def check_teacher(teacher: Optional[SingleAgentDetector], config: RunConfig) -> None:
    """Reject a missing teacher when PDD is on, or one built for another grid"""
    if config.train.use_pdd and teacher is None:
        raise ConfigurationError("Student training with distillation needs a teacher checkpoint")
    if teacher is not None and teacher.config != encoder_config(config.grid):
        raise ConfigurationError("Teacher checkpoint was trained on a different grid or channel count")


def train_student(scenes: Sequence[ScenePair], config: RunConfig, teacher: Optional[SingleAgentDetector] = None,
                  log_handler: Optional[TrainingLogHandler] = None) -> StudentDetector:
    """Shared-encoder two-branch student, distilled from a frozen teacher when PDD is on"""
    _check_scenes(scenes)
    train = config.train
    check_teacher(teacher, config)
    log_handler = log_handler or DefaultTrainingLog()
    encoder = encoder_config(config.grid)
    feature_grid = encoder.feature_grid
    model = StudentDetector(encoder, seed=train.seed, use_daf=train.use_daf)
    if teacher is not None:
        teacher.freeze()
    bank = _bank_for(scenes, config)

    def step_loss(pair, seed):
        sample = prepare_sample(pair, config, bank, encoder.grid, seed)
        out = model(sample.scene.vehicle_cloud, sample.infra_in_vehicle)
        detect = loss_detect(out.head, sample.scene.gt_boxes, feature_grid, train.focal_alpha, train.focal_gamma,
                             train.target_assignment)
        if not train.use_pdd:
            return detect, {"loss_detect": detect.item()}

        b_t, teacher_out = teacher(sample.scene.early_cloud)
        masks = compute_masks(sample.vehicle_rect, sample.infra_rect, feature_grid,
                              (sample.scene.vehicle_cloud, sample.infra_in_vehicle), train.mask_mode,
                              encoder.z_range)
        da = loss_da(b_t, out.b_v, out.b_i, masks)
        f = loss_f(b_t, out.b_f, masks)
        p = loss_p(teacher_out, out.head, train.distill_score_thr)
        parts = {"loss_detect": detect.item(), "loss_da": da.item(), "loss_f": f.item(), "loss_p": p.item()}
        return total_loss(detect, da, f, p, train.lambda_kd), parts

    _fit(model, scenes, config, step_loss, log_handler, "Student")
    return model


def train_single(scenes: Sequence[ScenePair], config: RunConfig,
                 log_handler: Optional[TrainingLogHandler] = None) -> SingleAgentDetector:
    """One detector co-trained on vehicle clouds and leveled infrastructure clouds"""
    _check_scenes(scenes)
    log_handler = log_handler or DefaultTrainingLog()
    encoder = encoder_config(config.grid)
    feature_grid = encoder.feature_grid
    model = SingleAgentDetector(encoder, seed=config.train.seed)
    alpha, gamma, assignment = config.train.focal_alpha, config.train.focal_gamma, config.train.target_assignment

    def step_loss(pair, seed):
        _, out_v = model(pair.vehicle.cloud)
        infra_cloud, infra_to_vehicle = leveled_infra_view(pair, reported=False)
        to_infra = invert(infra_to_vehicle)
        _, out_i = model(infra_cloud)
        detect_v = loss_detect(out_v, pair.gt_boxes, feature_grid, alpha, gamma, assignment)
        boxes_i = [b.transformed(to_infra) for b in pair.gt_boxes]
        detect_i = loss_detect(out_i, boxes_i, feature_grid, alpha, gamma, assignment)
        detect = nn.mul(nn.add(detect_v, detect_i), 0.5)
        return detect, {"loss_detect": detect.item()}

    _fit(model, scenes, config, step_loss, log_handler, "Single-agent")
    return model
