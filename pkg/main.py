import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv

from div2x.config import ConfigurationManager, GRID_PRESETS, parse_overrides, scene_spec, sensor_model
from div2x.distill import check_teacher, train_single, train_student, train_teacher
from div2x.errors import ConfigurationError, DataError, Div2xError
from div2x.evaluation import (
    CHECKPOINT_ROLES, MODES, evaluate, run_ablation, run_benchmark, run_generalization, write_ablation,
    write_generalization, write_noise, write_report,
)
from div2x.pipeline import load_model, save_model
from div2x.simlidar import generate_scene, scene_seed
from div2x.storage import DatasetStore
from div2x.training_log import CsvTrainingLog

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class CliParser(argparse.ArgumentParser):
    """Usage errors exit with 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_manager(args, extra_overrides: Optional[Dict] = None) -> ConfigurationManager:
    overrides = parse_overrides(args.set)
    if args.threads is not None:
        overrides["threads"] = args.threads
    overrides.update(extra_overrides or {})
    return ConfigurationManager(args.config, overrides, args.grid_preset)


def _dataset_id(store: DatasetStore) -> str:
    return f"{store.root.name}:seed{store.read_index()['seed']}"


def _parse_checkpoints(pairs: Optional[List[str]]) -> Dict[str, Path]:
    checkpoints = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--ckpt must look like role=path, got {pair!r}")
        role, path = pair.split("=", 1)
        if role not in CHECKPOINT_ROLES:
            raise ConfigurationError(f"Unknown checkpoint role {role!r}; valid roles: {', '.join(CHECKPOINT_ROLES)}")
        checkpoints[role] = Path(path)
    return checkpoints


def _parse_modes(text: str) -> List[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise ConfigurationError(f"Unknown mode(s) {unknown}; valid modes: {', '.join(MODES)}")
    return modes


def _parse_iou(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--iou must be a comma-separated list of numbers, got {text!r}")


def cmd_simgen(args) -> int:
    manager = _config_manager(args)
    config = manager.config
    seed = config.seed if args.seed is None else args.seed
    if args.num_scenes < 0:
        raise ConfigurationError(f"--num-scenes must be >= 0, got {args.num_scenes}")
    spec = scene_spec(config.scene)
    sensors = (sensor_model(config.vehicle_sensor), sensor_model(config.infra_sensor))
    store = DatasetStore(args.out)
    scene_ids = list(range(args.num_scenes))

    def generate(scene_id: int):
        return generate_scene(spec, sensors, scene_seed(seed, scene_id), scene_id=scene_id)

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for pair in pool.map(generate, scene_ids):
            store.write_scene(pair)
    store.write_index(scene_ids, seed)
    manager.dump(args.out)
    logging.info(f"Wrote {len(scene_ids)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    toggles = {}
    for flag, key in (("no_dma", "train.use_dma"), ("no_pdd", "train.use_pdd"), ("no_daf", "train.use_daf")):
        if getattr(args, flag):
            toggles[key] = False
    manager = _config_manager(args, toggles)
    config = manager.config
    if args.role == "student" and config.train.use_pdd and not args.teacher_ckpt:
        raise ConfigurationError("--role student requires --teacher-ckpt (or --no-pdd)")
    if args.role != "student" and args.teacher_ckpt:
        logging.warning(f"--teacher-ckpt is ignored for --role {args.role}")

    store = DatasetStore(args.data)
    scenes = store.load_split(args.split)
    if not scenes:
        raise DataError(f"{args.data} has no {args.split} scenes")
    teacher = load_model(args.teacher_ckpt) if args.role == "student" and config.train.use_pdd else None
    if args.role == "student":
        check_teacher(teacher, config)
    out = Path(args.out)
    log = CsvTrainingLog(out / "train_log.csv")
    try:
        if args.role == "teacher":
            model = train_teacher(scenes, config, log)
        elif args.role == "student":
            model = train_student(scenes, config, teacher, log)
        else:
            model = train_single(scenes, config, log)
    finally:
        log.close()
    checkpoint = out / f"{args.role}.dvck"
    save_model(model, checkpoint, {"role": args.role, "seed": config.train.seed, "dataset": _dataset_id(store)})
    manager.dump(out)
    logging.info(f"Checkpoint written to {checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    modes = _parse_modes(args.modes)
    iou = _parse_iou(args.iou)
    checkpoint_paths = _parse_checkpoints(args.ckpt)
    manager = _config_manager(args, {"eval.iou_thresholds": iou})
    config = manager.config
    store = DatasetStore(args.data)
    scenes = store.load_split(args.split)
    checkpoints = {role: load_model(path) for role, path in checkpoint_paths.items()}
    noise = None
    if args.pose_noise:
        noise = (config.eval.noise_translation, math.radians(config.eval.noise_yaw_deg), config.eval.noise_seed)
    report = evaluate(scenes, checkpoints, modes, config, _dataset_id(store), noise)
    write_report(report, args.out)
    manager.dump(args.out)
    if report.skipped:
        logging.error(f"Modes not evaluated: {', '.join(report.skipped)}")
        return EXIT_DATA
    return EXIT_OK


def cmd_generalize(args) -> int:
    manager = _config_manager(args)
    store = DatasetStore(args.data)
    scenes = store.load_split(args.split)
    rows = run_generalization(scenes, {"student": load_model(args.student_ckpt)}, manager.config)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    write_generalization(rows, Path(args.out) / "generalization.csv")
    manager.dump(args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    manager = _config_manager(args)
    config = manager.config
    store = DatasetStore(args.data)
    train_scenes, val_scenes = store.load_split("train"), store.load_split("val")
    teacher = load_model(args.teacher_ckpt) if args.teacher_ckpt else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(train_scenes, val_scenes, config, teacher, out)
    write_ablation(rows, out / "ablation.csv", config.eval.iou_thresholds)
    manager.dump(out)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    manager = _config_manager(args)
    config = manager.config
    store = DatasetStore(args.data)
    train_scenes, val_scenes = store.load_split("train"), store.load_split("val")
    if not val_scenes:
        raise DataError(f"{args.data} has no validation scenes")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_benchmark(train_scenes, val_scenes, config, out, _dataset_id(store))
    write_report(result.report, out)
    write_noise(result.noise, out / "noise_robustness.csv")
    manager.dump(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--threads", type=int, help="cap on worker threads")
    common.add_argument("--grid-preset", choices=sorted(GRID_PRESETS), help="named BEV grid")

    parser = CliParser(prog="div2x",
                       description="Two-agent collaborative BEV detection with domain-invariant distillation")
    commands = parser.add_subparsers(dest="command", required=True)

    simgen = commands.add_parser("simgen", parents=[common], help="generate a synthetic dataset")
    simgen.add_argument("--out", required=True)
    simgen.add_argument("--num-scenes", type=int, default=250)
    simgen.add_argument("--seed", type=int)
    simgen.set_defaults(handler=cmd_simgen)

    train = commands.add_parser("train", parents=[common], help="train a teacher, student or single-agent model")
    train.add_argument("--data", required=True)
    train.add_argument("--role", choices=("teacher", "student", "single"), required=True)
    train.add_argument("--teacher-ckpt")
    train.add_argument("--out", required=True)
    train.add_argument("--split", default="train")
    train.add_argument("--no-dma", action="store_true")
    train.add_argument("--no-pdd", action="store_true")
    train.add_argument("--no-daf", action="store_true")
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = commands.add_parser("eval", parents=[common], help="evaluate fusion modes")
    evaluate_cmd.add_argument("--data", required=True)
    evaluate_cmd.add_argument("--ckpt", action="append", metavar="ROLE=PATH",
                              help=f"checkpoint per role ({', '.join(CHECKPOINT_ROLES)})")
    evaluate_cmd.add_argument("--modes", default=",".join(MODES), help=f"comma list of {', '.join(MODES)}")
    evaluate_cmd.add_argument("--iou", default="0.5,0.7")
    evaluate_cmd.add_argument("--split", default="val")
    evaluate_cmd.add_argument("--pose-noise", action="store_true", help="perturb infrastructure poses")
    evaluate_cmd.add_argument("--out", required=True)
    evaluate_cmd.set_defaults(handler=cmd_eval)

    ablate = commands.add_parser("ablate", parents=[common], help="module ablation grid")
    ablate.add_argument("--data", required=True)
    ablate.add_argument("--teacher-ckpt")
    ablate.add_argument("--out", required=True)
    ablate.set_defaults(handler=cmd_ablate)

    generalize = commands.add_parser("generalize", parents=[common], help="student with one or both agents")
    generalize.add_argument("--data", required=True)
    generalize.add_argument("--student-ckpt", required=True)
    generalize.add_argument("--split", default="val")
    generalize.add_argument("--out", required=True)
    generalize.set_defaults(handler=cmd_generalize)

    benchmark = commands.add_parser("benchmark", parents=[common], help="train every model and evaluate all modes")
    benchmark.add_argument("--data", required=True)
    benchmark.add_argument("--out", required=True)
    benchmark.set_defaults(handler=cmd_benchmark)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Div2xError as e:
        logging.error(str(e))
        return e.exit_code
    except OSError as e:
        logging.error(f"File error: {str(e)}")
        return EXIT_DATA
    except Exception as e:
        logging.error(f"Unexpected error: {str(e)}")
        logging.exception(e)
        return EXIT_USAGE


if __name__ == "__main__":
    # Set up logging
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    sys.exit(main())
