import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from div2x.errors import DataError
from div2x.geom import Box3D, PoseSE3
from div2x.simlidar import AgentFrame, ScenePair

POINTS_MAGIC = b"DVPC"
CHECKPOINT_MAGIC = b"DVCK"
FORMAT_VERSION = 1
INDEX_NAME = "index.json"

PathLike = Union[str, Path]


def write_points(path: PathLike, cloud: np.ndarray) -> None:
    """DVPC: magic, u32 version, u32 count, count × 4 float32 (little-endian)"""
    cloud = np.asarray(cloud, dtype="<f4").reshape(-1, 4)
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(cloud)))
        f.write(cloud.tobytes())


def read_points(path: PathLike) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Failed to read point file {path}: {e}")
    if raw[:4] != POINTS_MAGIC:
        raise DataError(f"{path} is not a DVPC point file (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported DVPC version {version}")
    payload = raw[12:]
    if len(payload) != count * 16:
        raise DataError(f"{path}: expected {count} points, found {len(payload) // 16}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, 4).astype(np.float32)


def write_checkpoint(path: PathLike, state: Dict[str, np.ndarray]) -> None:
    """DVCK: magic, u32 version, u32 entries; per entry u16 name length, name, u8 rank, u32 dims, float32 data"""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(state)))
        for name in sorted(state):
            array = np.asarray(state[name], dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes())


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Failed to read checkpoint {path}: {e}")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a DVCK checkpoint (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported DVCK version {version}")
    offset = 12
    state: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            state[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(dims).copy()
            offset += 4 * size
    except (struct.error, ValueError) as e:
        raise DataError(f"{path}: truncated checkpoint: {e}")
    return state


def write_json(path: PathLike, document: Any) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise DataError(f"Failed to read {path}: {e}")
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}")


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def assign_splits(scene_ids: Sequence[int], seed: int, val_fraction: float = 0.2) -> Dict[int, str]:
    """Rank scenes by a hash of (seed, id); the lowest val_fraction go to 'val'"""
    def key(scene_id: int) -> str:
        return hashlib.sha256(f"{seed}:{scene_id}".encode()).hexdigest()

    ranked = sorted(scene_ids, key=key)
    n_val = int(round(val_fraction * len(ranked)))
    val = set(ranked[:n_val])
    return {sid: ("val" if sid in val else "train") for sid in scene_ids}


def _pose_to_list(pose: PoseSE3) -> List[List[float]]:
    return pose.as_matrix().tolist()


class DatasetStore:
    """Directory-backed scene storage: one JSON manifest and two DVPC files per scene"""

    def __init__(self, root: PathLike):
        self.root = Path(root)

    def manifest_path(self, scene_id: int) -> Path:
        return self.root / f"scene_{scene_id:06d}.json"

    def write_scene(self, pair: ScenePair) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        stem = f"scene_{pair.scene_id:06d}"
        frames = {}
        for role, frame in (("vehicle", pair.vehicle), ("infra", pair.infra)):
            points_name = f"{stem}_{role}.bin"
            write_points(self.root / points_name, frame.cloud)
            frames[role] = {
                "pose": _pose_to_list(frame.pose),
                "reported_pose": _pose_to_list(frame.reported_pose),
                "points": points_name,
            }
        manifest = {
            "scene_id": pair.scene_id,
            "vehicle": frames["vehicle"],
            "infra": frames["infra"],
            "gt_boxes": [b.as_array().tolist() for b in pair.gt_boxes],
            "dropped_objects": pair.dropped_objects,
        }
        path = self.manifest_path(pair.scene_id)
        write_json(path, manifest)
        return path

    def read_scene(self, scene_id: int) -> ScenePair:
        manifest = read_json(self.manifest_path(scene_id))
        try:
            frames = {}
            for role in ("vehicle", "infra"):
                entry = manifest[role]
                frames[role] = AgentFrame(
                    pose=PoseSE3.from_matrix(entry["pose"]),
                    cloud=read_points(self.root / entry["points"]),
                    reported_pose=PoseSE3.from_matrix(entry["reported_pose"]),
                )
            boxes = tuple(Box3D.from_array(b) for b in manifest["gt_boxes"])
            return ScenePair(frames["vehicle"], frames["infra"], boxes,
                             int(manifest["scene_id"]), int(manifest.get("dropped_objects", 0)))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed scene manifest {self.manifest_path(scene_id)}: {e}")

    def write_index(self, scene_ids: Sequence[int], seed: int, extra: Optional[Dict[str, Any]] = None) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        splits = assign_splits(scene_ids, seed)
        index = {
            "version": FORMAT_VERSION,
            "seed": seed,
            "scenes": [{"scene_id": sid, "manifest": self.manifest_path(sid).name, "split": splits[sid]}
                       for sid in scene_ids],
        }
        if extra:
            index.update(extra)
        path = self.root / INDEX_NAME
        write_json(path, index)
        return path

    def read_index(self) -> Dict[str, Any]:
        index = read_json(self.root / INDEX_NAME)
        if "scenes" not in index:
            raise DataError(f"{self.root / INDEX_NAME} has no 'scenes' list")
        return index

    def scene_ids(self, split: Optional[str] = None) -> List[int]:
        return [int(entry["scene_id"]) for entry in self.read_index()["scenes"]
                if split is None or entry["split"] == split]

    def load_split(self, split: Optional[str] = None) -> List[ScenePair]:
        return [self.read_scene(sid) for sid in self.scene_ids(split)]
