"""Shared fixtures: a tiny run configuration, tiny scenes and a finite-difference checker."""
import json
import os
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pytest

from div2x import nn
from div2x.config import RunConfig, scene_spec, sensor_model
from div2x.simlidar import ScenePair, generate_scene, scene_seed
from div2x.storage import DatasetStore

TINY_DOCUMENT = {
    "seed": 42,
    "grid": {"x_range": [-16.0, 16.0], "y_range": [-8.0, 8.0], "z_range": [-3.5, 1.5],
             "cell_size": [0.8, 0.8], "stride": 2, "channels": 8},
    "vehicle_sensor": {"beams": 8, "fov_deg": 360.0, "azimuth_step_deg": 2.0, "elevation_deg": [-15.0, 5.0],
                       "max_range": 30.0, "range_noise_sigma": 0.02, "dropout_prob": 0.05,
                       "mount_height": 1.8},
    "infra_sensor": {"beams": 16, "fov_deg": 100.0, "azimuth_step_deg": 1.0, "elevation_deg": [-25.0, 5.0],
                     "max_range": 40.0, "range_noise_sigma": 0.03, "dropout_prob": 0.1,
                     "mount_height": 5.0, "pitch_deg": 10.0},
    "scene": {"num_objects": 3, "placement_center": [6.0, 0.0], "placement_half_extents": [9.0, 6.0],
              "infra_x_range": [4.0, 10.0], "infra_side_offset": [8.0, 10.0]},
    "dma": {"n_samples": 2},
    "train": {"epochs": 1},
}


def tiny_run_config(**sections) -> RunConfig:
    """TINY_DOCUMENT with per-section field updates, e.g. tiny_run_config(train={"epochs": 0})"""
    document = json.loads(json.dumps(TINY_DOCUMENT))
    for section, updates in sections.items():
        if isinstance(updates, dict):
            document.setdefault(section, {}).update(updates)
        else:
            document[section] = updates
    return RunConfig.model_validate(document)


def make_scenes(config: RunConfig, count: int, dataset_seed: int = 0) -> List[ScenePair]:
    spec = scene_spec(config.scene)
    sensors = (sensor_model(config.vehicle_sensor), sensor_model(config.infra_sensor))
    return [generate_scene(spec, sensors, scene_seed(dataset_seed, i), scene_id=i) for i in range(count)]


GOLDEN_DIR = Path(__file__).parent / "golden"


def assert_golden(name: str, values: Dict[str, Optional[float]], abs_tol: float = 1e-6) -> None:
    """Compare against tests/golden/<name>.json; a missing file (or DIV2X_UPDATE_GOLDEN=1) records it and skips"""
    path = GOLDEN_DIR / f"{name}.json"
    if not path.exists() or os.environ.get("DIV2X_UPDATE_GOLDEN") == "1":
        GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
        pytest.skip(f"Recorded golden values in {path}")
    expected = json.loads(path.read_text())
    assert sorted(values) == sorted(expected)
    for key, value in values.items():
        if expected[key] is None:
            assert value is None, key
        else:
            assert value == pytest.approx(expected[key], abs=abs_tol), key


def assert_gradients(loss_fn: Callable[[], nn.Tensor], tensors: Sequence[nn.Tensor], h: float = 1e-5,
                     rtol: float = 1e-4, atol: float = 1e-8, max_entries: int = 12, seed: int = 0) -> None:
    """Compare backward() against central differences on a random subset of entries of each tensor"""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        picks = rng.choice(t.data.size, size=min(max_entries, t.data.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(int(flat), t.data.shape)
            original = t.data[idx]
            t.data[idx] = original + h
            up = loss_fn().item()
            t.data[idx] = original - h
            down = loss_fn().item()
            t.data[idx] = original
            numeric = (up - down) / (2 * h)
            tolerance = rtol * max(abs(numeric), abs(analytic[idx])) + atol
            assert abs(numeric - analytic[idx]) <= tolerance, (
                f"{t.name or 'tensor'}{idx}: analytic {analytic[idx]} vs numeric {numeric}")


def randomize_parameters(model: nn.Module, seed: int = 0, scale: float = 0.3) -> None:
    """Move every parameter (biases included) off zero so no ReLU sits exactly on its kink"""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = rng.normal(0.0, scale, size=p.shape).astype(p.data.dtype)


@pytest.fixture
def f64():
    with nn.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_scenes(tiny_config) -> List[ScenePair]:
    return make_scenes(tiny_config, 4)


@pytest.fixture
def tiny_config_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(TINY_DOCUMENT))
    return path


@pytest.fixture
def dataset_dir(tmp_path, tiny_config):
    """Five tiny scenes on disk with a train/val index"""
    root = tmp_path / "data"
    store = DatasetStore(root)
    scenes = make_scenes(tiny_config, 5)
    for pair in scenes:
        store.write_scene(pair)
    store.write_index([p.scene_id for p in scenes], seed=0)
    return root
