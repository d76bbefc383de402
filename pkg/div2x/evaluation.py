"""Detection evaluation and the fusion-paradigm benchmark suite."""
import hashlib
import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from div2x.config import RunConfig
from div2x.distill import train_single, train_student, train_teacher
from div2x.dma import EMPTY_CLOUD
from div2x.geom import Box3D, GridSpec, nms, rotated_iou, transform_points
from div2x.pipeline import Detection, SingleAgentDetector, StudentDetector, decode_detections, save_model
from div2x.simlidar import ScenePair, fuse_early, leveled_infra_view, with_pose_noise
from div2x.storage import write_csv, write_json
from div2x.training_log import CsvTrainingLog

MODES = ("no_fusion", "early", "late", "intermediate_sum", "div2x_student", "div2x_teacher")
# which trained model each mode runs
MODE_CHECKPOINTS = {
    "no_fusion": "single",
    "late": "single",
    "early": "early",
    "intermediate_sum": "intermediate_sum",
    "div2x_student": "student",
    "div2x_teacher": "teacher",
}
CHECKPOINT_ROLES = ("single", "early", "teacher", "intermediate_sum", "student")
POSE_DEPENDENT_MODES = ("early", "late", "intermediate_sum", "div2x_student")
ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("+DMA", True, False, False),
    ("+PDD", False, True, False),
    ("+DAF", False, False, True),
    ("+PDD+DAF", False, True, True),
    ("all", True, True, True),
)
GENERALIZATION_CONDITIONS = ("vehicle", "infra", "both")


# ---------------------------------------------------------------- metrics

@dataclass
class PRCurve:
    scores: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    matched_ious: List[float]
    num_gt: int


def precision_recall(detections: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box3D]],
                     iou_thr: float) -> PRCurve:
    """Global score-descending sweep with greedy highest-IoU matching per scene"""
    if len(detections) != len(gts):
        raise ValueError(f"Detections cover {len(detections)} scenes but GT covers {len(gts)}")
    flat = [(scene, det) for scene, dets in enumerate(detections) for det in dets]
    scores = np.array([det.score for _, det in flat], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(flat))
    matched_ious: List[float] = []
    for rank, k in enumerate(order):
        scene, det = flat[k]
        best, best_iou = -1, iou_thr
        for g, gt in enumerate(gts[scene]):
            if matched[scene][g]:
                continue
            iou = rotated_iou(det.box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            matched[scene][best] = True
            tp[rank] = 1
            matched_ious.append(best_iou)
    num_gt = sum(len(g) for g in gts)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(flat) + 1)
    recall = cum_tp / num_gt if num_gt else np.zeros(len(flat))
    precision = cum_tp / ranks if len(flat) else np.zeros(0)
    return PRCurve(scores[order], recall, precision, matched_ious, num_gt)


def area_under_envelope(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated AP"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(detections: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box3D]],
                      iou_thr: float) -> Optional[float]:
    """None when there is no GT at all"""
    curve = precision_recall(detections, gts, iou_thr)
    if curve.num_gt == 0:
        return None
    return area_under_envelope(curve.recall, curve.precision)


# ---------------------------------------------------------------- fusion modes

class FusionMode(ABC):
    """Abstract base class for one way of turning a scene pair into vehicle-frame detections"""

    def __init__(self, name: str, grid: GridSpec, score_thr: float = 0.3, nms_thr: float = 0.3,
                 max_candidates: int = 100):
        self.name = name
        self.grid = grid
        self.score_thr = score_thr
        self.nms_thr = nms_thr
        self.max_candidates = max_candidates

    def decode(self, out) -> List[Detection]:
        return decode_detections(out, self.grid, self.score_thr, self.nms_thr, self.max_candidates)

    @abstractmethod
    def detect(self, pair: ScenePair) -> List[Detection]:
        pass


class NoFusion(FusionMode):
    """Vehicle cloud only"""

    def __init__(self, model: SingleAgentDetector, name: str = "no_fusion", **kwargs):
        super().__init__(name, model.config.feature_grid, **kwargs)
        self.model = model

    def detect(self, pair: ScenePair) -> List[Detection]:
        _, out = self.model(pair.vehicle.cloud)
        return self.decode(out)


class EarlyFusion(FusionMode):
    """One detector on the raw union of both clouds, aligned with the reported pose"""

    def __init__(self, model: SingleAgentDetector, name: str = "early", **kwargs):
        super().__init__(name, model.config.feature_grid, **kwargs)
        self.model = model

    def detect(self, pair: ScenePair) -> List[Detection]:
        _, out = self.model(fuse_early(pair, use_reported_pose=True))
        return self.decode(out)


class LateFusion(FusionMode):
    """Per-agent detection, infrastructure boxes moved by the reported pose, merged by NMS"""

    def __init__(self, model: SingleAgentDetector, name: str = "late", **kwargs):
        super().__init__(name, model.config.feature_grid, **kwargs)
        self.model = model

    def detect(self, pair: ScenePair) -> List[Detection]:
        _, out_v = self.model(pair.vehicle.cloud)
        detections = self.decode(out_v)
        infra_cloud, infra_to_vehicle = leveled_infra_view(pair, reported=True)
        if len(infra_cloud) == 0:
            return detections
        _, out_i = self.model(infra_cloud)
        detections += [Detection(d.box.transformed(infra_to_vehicle), d.score) for d in self.decode(out_i)]
        keep = nms([d.box for d in detections], [d.score for d in detections], self.nms_thr)
        return [detections[k] for k in keep]


class IntermediateFusion(FusionMode):
    """Two-branch student; condition empties one agent's cloud for the generalization study"""

    def __init__(self, model: StudentDetector, name: str, condition: str = "both", **kwargs):
        if condition not in GENERALIZATION_CONDITIONS:
            raise ValueError(f"Unknown condition {condition!r}")
        super().__init__(name, model.config.feature_grid, **kwargs)
        self.model = model
        self.condition = condition

    def detect(self, pair: ScenePair) -> List[Detection]:
        vehicle = pair.vehicle.cloud if self.condition != "infra" else EMPTY_CLOUD
        infra = EMPTY_CLOUD
        if self.condition != "vehicle" and len(pair.infra.cloud):
            infra = transform_points(pair.infra.cloud, pair.infra_to_vehicle(reported=True))
        return self.decode(self.model(vehicle, infra).head)


def build_mode(mode: str, checkpoints: Dict[str, Any], config: RunConfig) -> Optional[FusionMode]:
    """None (with a notice) when the mode's checkpoint is missing"""
    if mode not in MODES:
        raise ValueError(f"Unknown mode {mode!r}; valid modes: {', '.join(MODES)}")
    role = MODE_CHECKPOINTS[mode]
    model = checkpoints.get(role)
    if model is None:
        logging.warning(f"Skipping mode {mode}: no '{role}' checkpoint provided")
        return None
    options = {"score_thr": config.eval.score_thr, "nms_thr": config.eval.nms_thr,
               "max_candidates": config.eval.max_candidates}
    if mode == "no_fusion":
        return NoFusion(model, **options)
    if mode == "late":
        return LateFusion(model, **options)
    if mode in ("early", "div2x_teacher"):
        return EarlyFusion(model, name=mode, **options)
    return IntermediateFusion(model, name=mode, **options)


# ---------------------------------------------------------------- runners

@dataclass
class ModeResult:
    mode: str
    ap: Dict[float, Optional[float]]
    mean_iou: Dict[float, Optional[float]]
    num_detections: int
    num_gt: int
    curves: Dict[float, PRCurve] = field(repr=False, default_factory=dict)


@dataclass
class EvalReport:
    results: Dict[str, ModeResult]
    metadata: Dict[str, Any]
    skipped: List[str] = field(default_factory=list)


def _noisy(scenes: Sequence[ScenePair], sigma_t: float, sigma_yaw: float, seed: int) -> List[ScenePair]:
    return [with_pose_noise(pair, sigma_t, sigma_yaw, [seed, pair.scene_id]) for pair in scenes]


def _map_scenes(fn: Callable[[ScenePair], Any], scenes: Sequence[ScenePair], threads: int) -> List[Any]:
    """Scene-ordered results whatever the pool size"""
    if threads <= 1:
        return [fn(pair) for pair in scenes]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, scenes))


def evaluate_mode(fusion: FusionMode, scenes: Sequence[ScenePair], iou_thresholds: Sequence[float],
                  threads: int = 1) -> ModeResult:
    detections = _map_scenes(fusion.detect, scenes, threads)
    gts = [list(pair.gt_boxes) for pair in scenes]
    ap, mean_iou, curves = {}, {}, {}
    for thr in iou_thresholds:
        curve = precision_recall(detections, gts, thr)
        curves[thr] = curve
        ap[thr] = area_under_envelope(curve.recall, curve.precision) if curve.num_gt else None
        mean_iou[thr] = float(np.mean(curve.matched_ious)) if curve.matched_ious else None
    result = ModeResult(fusion.name, ap, mean_iou, sum(len(d) for d in detections),
                        sum(len(g) for g in gts), curves)
    summary = ", ".join(f"AP@{thr}={_fmt(ap[thr])}" for thr in iou_thresholds)
    logging.info(f"Mode {fusion.name}: {summary} ({result.num_detections} detections, {result.num_gt} GT)")
    return result


def run_mode(mode: str, scenes: Sequence[ScenePair], checkpoints: Dict[str, Any], config: RunConfig,
             noise: Optional[Tuple[float, float, int]] = None) -> Optional[ModeResult]:
    """noise is (sigma_t metres, sigma_yaw radians, seed) for the infrastructure reported pose"""
    fusion = build_mode(mode, checkpoints, config)
    if fusion is None:
        return None
    if noise is not None:
        scenes = _noisy(scenes, *noise)
    return evaluate_mode(fusion, scenes, config.eval.iou_thresholds, config.threads)


def model_digest(model) -> str:
    digest = hashlib.sha256()
    for name, array in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return digest.hexdigest()[:16]


def evaluate(scenes: Sequence[ScenePair], checkpoints: Dict[str, Any], modes: Sequence[str], config: RunConfig,
             dataset_id: str = "", noise: Optional[Tuple[float, float, int]] = None) -> EvalReport:
    results, skipped = {}, []
    for mode in modes:
        result = run_mode(mode, scenes, checkpoints, config, noise)
        if result is None:
            skipped.append(mode)
        else:
            results[mode] = result
    metadata = {
        "seed": config.seed,
        "dataset": dataset_id,
        "num_scenes": len(scenes),
        "checkpoints": {role: model_digest(m) for role, m in sorted(checkpoints.items()) if m is not None},
        "iou_thresholds": list(config.eval.iou_thresholds),
        "pose_noise": list(noise[:2]) if noise else None,
    }
    return EvalReport(results, metadata, skipped)


@dataclass
class GeneralizationRow:
    iou_thr: float
    vehicle: Optional[float]
    infra: Optional[float]
    both: Optional[float]

    @property
    def average(self) -> Optional[float]:
        values = (self.vehicle, self.infra, self.both)
        if any(v is None for v in values):
            return None
        return sum(values) / 3.0


def run_generalization(scenes: Sequence[ScenePair], checkpoints: Dict[str, Any],
                       config: RunConfig) -> List[GeneralizationRow]:
    """Student AP with only the vehicle cloud, only the infrastructure cloud, and both"""
    student = checkpoints.get("student")
    if student is None:
        raise ValueError("Generalization study needs a 'student' checkpoint")
    options = {"score_thr": config.eval.score_thr, "nms_thr": config.eval.nms_thr,
               "max_candidates": config.eval.max_candidates}
    per_condition = {
        condition: evaluate_mode(IntermediateFusion(student, f"div2x_student[{condition}]", condition, **options),
                                 scenes, config.eval.iou_thresholds, config.threads)
        for condition in GENERALIZATION_CONDITIONS
    }
    return [GeneralizationRow(thr, *(per_condition[c].ap[thr] for c in GENERALIZATION_CONDITIONS))
            for thr in config.eval.iou_thresholds]


def with_toggles(config: RunConfig, use_dma: bool, use_pdd: bool, use_daf: bool) -> RunConfig:
    train = config.train.model_copy(update={"use_dma": use_dma, "use_pdd": use_pdd, "use_daf": use_daf})
    return config.model_copy(update={"train": train})


@dataclass
class AblationRow:
    name: str
    use_dma: bool
    use_pdd: bool
    use_daf: bool
    result: ModeResult


def run_ablation(train_scenes: Sequence[ScenePair], val_scenes: Sequence[ScenePair], config: RunConfig,
                 teacher: Optional[SingleAgentDetector] = None,
                 out_dir: Optional[Path] = None) -> List[AblationRow]:
    """Train and evaluate one student per module combination, same seed throughout"""
    if teacher is None:
        teacher = train_teacher(train_scenes, with_toggles(config, True, False, False))
    rows = []
    for name, use_dma, use_pdd, use_daf in ABLATION_ROWS:
        logging.info(f"Ablation row {name}: dma={use_dma} pdd={use_pdd} daf={use_daf}")
        row_config = with_toggles(config, use_dma, use_pdd, use_daf)
        log = CsvTrainingLog(Path(out_dir) / f"train_log_{_slug(name)}.csv") if out_dir else None
        try:
            student = train_student(train_scenes, row_config, teacher if use_pdd else None, log)
        finally:
            if log is not None:
                log.close()
        fusion = IntermediateFusion(student, name, score_thr=config.eval.score_thr, nms_thr=config.eval.nms_thr,
                                    max_candidates=config.eval.max_candidates)
        rows.append(AblationRow(name, use_dma, use_pdd, use_daf,
                                evaluate_mode(fusion, val_scenes, config.eval.iou_thresholds, config.threads)))
    return rows


@dataclass
class NoiseRow:
    mode: str
    iou_thr: float
    clean: Optional[float]
    noisy: Optional[float]

    @property
    def drop(self) -> Optional[float]:
        if self.clean is None or self.noisy is None:
            return None
        return self.clean - self.noisy


def run_noise_robustness(scenes: Sequence[ScenePair], checkpoints: Dict[str, Any], config: RunConfig,
                         clean: Optional[EvalReport] = None) -> List[NoiseRow]:
    """AP of every pose-dependent mode with clean and with noisy infrastructure poses"""
    noise = (config.eval.noise_translation, math.radians(config.eval.noise_yaw_deg), config.eval.noise_seed)
    rows = []
    for mode in POSE_DEPENDENT_MODES:
        if clean is not None and mode in clean.results:
            clean_result = clean.results[mode]
        else:
            clean_result = run_mode(mode, scenes, checkpoints, config)
        if clean_result is None:
            continue
        noisy_result = run_mode(mode, scenes, checkpoints, config, noise)
        rows.extend(NoiseRow(mode, thr, clean_result.ap[thr], noisy_result.ap[thr])
                    for thr in config.eval.iou_thresholds)
    return rows


@dataclass
class BenchmarkResult:
    checkpoints: Dict[str, Any]
    report: EvalReport
    noise: List[NoiseRow]


def train_all(train_scenes: Sequence[ScenePair], config: RunConfig,
              out_dir: Optional[Path] = None) -> Dict[str, Any]:
    """Every model the mode suite needs, keyed by checkpoint role"""
    plans = {
        "single": lambda log: train_single(train_scenes, config, log),
        "early": lambda log: train_teacher(train_scenes, with_toggles(config, False, False, False), log),
        "teacher": lambda log: train_teacher(train_scenes, with_toggles(config, True, False, False), log),
        "intermediate_sum": lambda log: train_student(train_scenes, with_toggles(config, False, False, False),
                                                      None, log),
    }
    checkpoints: Dict[str, Any] = {}
    for role, plan in plans.items():
        checkpoints[role] = _train_logged(role, plan, out_dir)
    full = with_toggles(config, True, True, True)
    checkpoints["student"] = _train_logged(
        "student", lambda log: train_student(train_scenes, full, checkpoints["teacher"], log), out_dir)
    return checkpoints


def _train_logged(role: str, plan, out_dir: Optional[Path]):
    logging.info(f"Training {role} model")
    log = CsvTrainingLog(Path(out_dir) / f"train_log_{role}.csv") if out_dir else None
    try:
        model = plan(log)
    finally:
        if log is not None:
            log.close()
    if out_dir:
        save_model(model, Path(out_dir) / f"{role}.dvck")
    return model


def run_benchmark(train_scenes: Sequence[ScenePair], val_scenes: Sequence[ScenePair], config: RunConfig,
                  out_dir: Optional[Path] = None, dataset_id: str = "") -> BenchmarkResult:
    checkpoints = train_all(train_scenes, config, out_dir)
    report = evaluate(val_scenes, checkpoints, MODES, config, dataset_id)
    noise = run_noise_robustness(val_scenes, checkpoints, config, clean=report)
    return BenchmarkResult(checkpoints, report, noise)


# ---------------------------------------------------------------- writers

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def _rounded(value: Optional[float]) -> Optional[float]:
    return None if value is None else round(value, 6)


def _slug(name: str) -> str:
    return name.replace("+", "plus_").strip("_").lower() or "row"


def write_report(report: EvalReport, out_dir) -> None:
    """report.csv (mode × IoU rows), report.json and pr_<mode>.csv per mode"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode, result in report.results.items():
        for thr, ap in result.ap.items():
            rows.append([mode, thr, _fmt(ap), result.num_detections, result.num_gt, _fmt(result.mean_iou[thr])])
    write_csv(out / "report.csv", ["mode", "iou_thr", "ap", "num_detections", "num_gt", "mean_iou"], rows)
    write_json(out / "report.json", {
        "metadata": report.metadata,
        "skipped": report.skipped,
        "modes": {
            mode: {
                "ap": {str(thr): _rounded(ap) for thr, ap in result.ap.items()},
                "mean_iou": {str(thr): _rounded(v) for thr, v in result.mean_iou.items()},
                "num_detections": result.num_detections,
                "num_gt": result.num_gt,
            }
            for mode, result in report.results.items()
        },
    })
    for mode, result in report.results.items():
        write_pr_curves(result, out / f"pr_{mode}.csv")


def write_pr_curves(result: ModeResult, path) -> None:
    rows = []
    for thr, curve in result.curves.items():
        for rank, (score, rec, prec) in enumerate(zip(curve.scores, curve.recall, curve.precision), start=1):
            rows.append([thr, rank, _fmt(score), _fmt(rec), _fmt(prec)])
    write_csv(path, ["iou_thr", "rank", "score", "recall", "precision"], rows)


def write_generalization(rows: Sequence[GeneralizationRow], path) -> None:
    write_csv(path, ["iou_thr", "vehicle", "infra", "both", "average"],
              [[r.iou_thr, _fmt(r.vehicle), _fmt(r.infra), _fmt(r.both), _fmt(r.average)] for r in rows])


def write_ablation(rows: Sequence[AblationRow], path, iou_thresholds: Sequence[float]) -> None:
    header = ["row", "dma", "pdd", "daf"] + [f"ap@{thr}" for thr in iou_thresholds]
    write_csv(path, header, [
        [r.name, int(r.use_dma), int(r.use_pdd), int(r.use_daf)] + [_fmt(r.result.ap[thr]) for thr in iou_thresholds]
        for r in rows
    ])


def write_noise(rows: Sequence[NoiseRow], path) -> None:
    write_csv(path, ["mode", "iou_thr", "clean_ap", "noisy_ap", "drop"],
              [[r.mode, r.iou_thr, _fmt(r.clean), _fmt(r.noisy), _fmt(r.drop)] for r in rows])
