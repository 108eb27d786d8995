"""
Dataset Manager for the on-disk expert corpus
Handles map directories (PNG rasters + meta.json), the manifest, and
materialization of (encoding, cell, action) training samples
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np

import config
from expert_oracle import DatasetManifest, ExpertTrajectory, MapEntry
from nav_mdp import Cell, NavWorld
from terrain_synth import TerrainMap, encode_input, load_image, save_image

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1.0"


@dataclass
class SampleSet:
    """Training samples of one split

    Every (map, goal) pair is encoded once; samples refer to their encoding
    by index so trajectories sharing a goal share the image tensor.
    """

    split: str
    encodings: np.ndarray  # (E, 3, M, M) float32
    enc_index: np.ndarray  # (S,)
    positions: np.ndarray  # (S, 2) as (x1, x2)
    labels: np.ndarray  # (S,)
    worlds: List[NavWorld] = field(default_factory=list)
    starts: List[List[Cell]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.encodings.shape[-1])

    def batch(self, idx: np.ndarray):
        """(inputs, positions, labels) for the given sample indices"""
        return self.encodings[self.enc_index[idx]], self.positions[idx], self.labels[idx]


def _grid_to_rows(grid: np.ndarray) -> List[str]:
    return [''.join('1' if v else '0' for v in row) for row in grid]


def _rows_to_grid(rows: List[str]) -> np.ndarray:
    return np.array([[c == '1' for c in row] for row in rows], dtype=bool)


class DatasetManager:
    """Manages a dataset directory: one sub-directory per map plus manifest.json"""

    def __init__(self, data_dir: str = config.DATA_DIR):
        self.data_dir = Path(data_dir)
        self.manifest_file = self.data_dir / "manifest.json"

    def _ensure_directories(self):
        """Create the dataset root"""
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def _load_json(self, file_path: Path, default: Any) -> Any:
        """Load JSON file with error handling"""
        try:
            if file_path.exists():
                with open(file_path, 'r', encoding='utf-8') as f:
                    return json.load(f)
        except Exception as e:
            logger.error(f"Error loading {file_path}: {e}")
        return default

    def _save_json(self, file_path: Path, data: Any):
        """Save data to JSON file; failures are logged and re-raised"""
        try:
            with open(file_path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
                f.write('\n')
        except Exception as e:
            logger.error(f"Error saving to {file_path}: {e}")
            raise

    def map_dir(self, map_id: str) -> Path:
        return self.data_dir / map_id

    def exists(self) -> bool:
        """True once a manifest has been written"""
        return self.manifest_file.exists()

    def save_map(self, entry: MapEntry, cell_size: int, goal_mode: str = config.GOAL_MODE):
        """Write rasters and meta.json for one map"""
        if entry.terrain is None:
            raise ValueError(f"{entry.map_id} has no terrain to save")
        self._ensure_directories()
        map_dir = self.map_dir(entry.map_id)
        map_dir.mkdir(exist_ok=True)
        save_image(map_dir / "gray.png", entry.terrain.gray)
        save_image(map_dir / "edge.png", entry.terrain.edge)
        save_image(map_dir / "risky.png", entry.terrain.risky)

        goals = entry.goals
        meta = {
            "map_id": entry.map_id,
            "seed": entry.seed,
            "goal": list(goals[0]) if goal_mode == 'shared' and len(goals) == 1 else None,
            "grid_size": int(entry.grid.shape[0]),
            "cell_size": cell_size,
            "terrain_digest": entry.terrain.params_digest,
            "grid": _grid_to_rows(entry.grid),
            "trajectories": [t.to_dict() for t in entry.trajectories],
        }
        self._save_json(map_dir / "meta.json", meta)

    def save_manifest(self, manifest: DatasetManifest) -> str:
        """Write manifest.json and return its SHA-256 digest"""
        self._ensure_directories()
        data = {
            "version": MANIFEST_VERSION,
            "seed": manifest.seed,
            "image_size": manifest.image_size,
            "cell_size": manifest.cell_size,
            "risk_fraction": manifest.risk_fraction,
            "params_digest": manifest.params_digest,
            "goal_mode": manifest.goal_mode,
            "terrain_params": manifest.terrain_params,
            "counts": manifest.counts(),
            "maps": [{"map_id": m.map_id, "seed": m.seed, "split": m.split} for m in manifest.maps],
        }
        self._save_json(self.manifest_file, data)
        logger.info(f"Saved manifest with {len(manifest.maps)} maps to {self.manifest_file}")
        return self.manifest_digest()

    def manifest_digest(self) -> str:
        """SHA-256 of manifest.json as written"""
        return hashlib.sha256(self.manifest_file.read_bytes()).hexdigest()

    def load_manifest(self) -> DatasetManifest:
        """Read manifest.json and every map's meta.json (terrain stays on disk)"""
        data = self._load_json(self.manifest_file, None)
        if data is None:
            raise FileNotFoundError(f"No readable dataset manifest at {self.manifest_file}")

        maps: List[MapEntry] = []
        for item in data["maps"]:
            map_id = item["map_id"]
            meta = self._load_json(self.map_dir(map_id) / "meta.json", None)
            if meta is None:
                raise FileNotFoundError(f"Missing meta.json for {map_id}")
            maps.append(MapEntry(
                map_id=map_id,
                seed=int(item["seed"]),
                split=item["split"],
                grid=_rows_to_grid(meta["grid"]),
                trajectories=[ExpertTrajectory.from_dict(map_id, t) for t in meta["trajectories"]],
            ))
        return DatasetManifest(
            maps=maps,
            seed=int(data["seed"]),
            image_size=int(data["image_size"]),
            cell_size=int(data["cell_size"]),
            risk_fraction=float(data["risk_fraction"]),
            params_digest=data["params_digest"],
            goal_mode=data.get("goal_mode", config.GOAL_MODE),
            terrain_params=data.get("terrain_params", {}),
        )

    def load_terrain(self, entry: MapEntry) -> TerrainMap:
        """Rebuild a TerrainMap from the stored rasters"""
        map_dir = self.map_dir(entry.map_id)
        meta = self._load_json(map_dir / "meta.json", {})
        return TerrainMap(
            gray=load_image(map_dir / "gray.png"),
            risky=load_image(map_dir / "risky.png") > 0.5,
            edge=load_image(map_dir / "edge.png"),
            seed=entry.seed,
            params_digest=meta.get("terrain_digest", ""),
        )

    def load_samples(self, manifest: DatasetManifest, split: str) -> SampleSet:
        """Materialize a split, reading rasters for maps not held in memory"""
        return materialize_samples(manifest, split, self.load_terrain)

    def get_statistics(self) -> Dict[str, Any]:
        """Get dataset statistics"""
        data = self._load_json(self.manifest_file, {})
        total_size = sum(p.stat().st_size for p in self.data_dir.rglob('*') if p.is_file()) \
            if self.data_dir.exists() else 0
        return {
            "counts": data.get("counts", {}),
            "image_size": data.get("image_size"),
            "goal_mode": data.get("goal_mode"),
            "storage_size_mb": round(total_size / (1024 * 1024), 2),
            "data_directory": str(self.data_dir),
        }


def materialize_samples(
    manifest: DatasetManifest,
    split: str,
    load_terrain: Optional[Callable[[MapEntry], TerrainMap]] = None,
) -> SampleSet:
    """Every trajectory step of a split becomes one sample"""
    entries = manifest.split(split)
    if not entries:
        raise ValueError(f"Split '{split}' has no maps")

    encodings: List[np.ndarray] = []
    worlds: List[NavWorld] = []
    starts: List[List[Cell]] = []
    enc_index: List[int] = []
    positions: List[Cell] = []
    labels: List[int] = []
    for entry in entries:
        terrain = entry.terrain
        if terrain is None:
            if load_terrain is None:
                raise ValueError(f"{entry.map_id} has no terrain in memory")
            terrain = load_terrain(entry)
        by_goal: Dict[Cell, int] = {}
        for traj in entry.trajectories:
            if traj.goal not in by_goal:
                by_goal[traj.goal] = len(encodings)
                encodings.append(encode_input(terrain, traj.goal, manifest.cell_size))
                worlds.append(NavWorld(grid=entry.grid, goal=traj.goal, source_map_id=entry.map_id,
                                       cell_size=manifest.cell_size))
                starts.append([])
            e = by_goal[traj.goal]
            starts[e].append(traj.positions[0])
            enc_index.extend([e] * len(traj.actions))
            positions.extend(traj.positions[:-1])
            labels.extend(traj.actions)

    samples = SampleSet(
        split=split,
        encodings=np.stack(encodings).astype(np.float32),
        enc_index=np.asarray(enc_index, dtype=np.int64),
        positions=np.asarray(positions, dtype=np.int64).reshape(-1, 2),
        labels=np.asarray(labels, dtype=np.int64),
        worlds=worlds,
        starts=starts,
    )
    logger.info(f"Loaded {len(samples)} {split} samples from {len(entries)} maps ({len(encodings)} encodings)")
    return samples
