from div2x.errors import ConfigurationError, DataError, Div2xError, NumericalError, TrainingDivergedError
from div2x.geom import Box3D, ConvexPolygon2D, GridSpec, OrientedRect, PoseSE3, nms, rotated_iou
from div2x.simlidar import ScenePair, SceneSpec, SensorModel, generate_scene
from div2x.storage import DatasetStore
from div2x.config import ConfigurationManager, RunConfig
from div2x.dma import InstanceBank, build_bank, sample_and_inject
from div2x.pipeline import SingleAgentDetector, StudentDetector, load_model, save_model
from div2x.distill import train_single, train_student, train_teacher
from div2x.training_log import CsvTrainingLog, DefaultTrainingLog, TrainingLogHandler
from div2x.evaluation import EvalReport, average_precision, run_mode

__all__ = [
    'Div2xError',
    'ConfigurationError',
    'DataError',
    'NumericalError',
    'TrainingDivergedError',
    'Box3D',
    'ConvexPolygon2D',
    'GridSpec',
    'OrientedRect',
    'PoseSE3',
    'nms',
    'rotated_iou',
    'ScenePair',
    'SceneSpec',
    'SensorModel',
    'generate_scene',
    'DatasetStore',
    'ConfigurationManager',
    'RunConfig',
    'InstanceBank',
    'build_bank',
    'sample_and_inject',
    'SingleAgentDetector',
    'StudentDetector',
    'load_model',
    'save_model',
    'train_single',
    'train_student',
    'train_teacher',
    'CsvTrainingLog',
    'DefaultTrainingLog',
    'TrainingLogHandler',
    'EvalReport',
    'average_precision',
    'run_mode',
]
