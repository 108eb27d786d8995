#!/usr/bin/env python3
"""
Configuration file for navnet
"""

import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

# Directory Configuration
DATA_DIR = os.getenv('NAVNET_DATA_DIR', 'data')
RUNS_DIR = os.getenv('NAVNET_RUNS_DIR', 'runs')

# Logging Configuration
LOG_LEVEL = os.getenv('NAVNET_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

# Execution Configuration
WORKERS = int(os.getenv('NAVNET_WORKERS', '1'))
SEED = int(os.getenv('NAVNET_SEED', '1'))

# Grid Configuration
CELL_SIZE = 4  # pixels per compressed cell edge (two stride-2 pools)
RISK_FRACTION = 0.25
NUM_ACTIONS = 8

# Desk-scale defaults
IMAGE_SIZE = 64
N_MAPS = 700
TRAJECTORIES_PER_MAP = 7
EPOCHS = 30

# Full-scale defaults
FULL_IMAGE_SIZE = 128
FULL_N_MAPS = 10000

# Training Configuration
BATCH_SIZE = 128
LEARNING_RATE = 1e-3
L2_LAMBDA = 1e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
VIN_ITERATIONS = 40

# Canny Configuration
CANNY_SIGMA = 1.4
CANNY_LOW = 0.1
CANNY_HIGH = 0.3

# Dataset generation
MAX_MAP_ATTEMPTS = 20
GOAL_MODE = 'shared'


@dataclass
class RunConfig:
    """Merged, serializable view of every knob that shapes a run"""

    out_dir: str = RUNS_DIR
    seed: int = SEED
    # terrain / dataset
    image_size: int = IMAGE_SIZE
    cell_size: int = CELL_SIZE
    risk_fraction: float = RISK_FRACTION
    n_maps: int = N_MAPS
    trajectories_per_map: int = TRAJECTORIES_PER_MAP
    goal_mode: str = GOAL_MODE
    terrain: Dict[str, Any] = field(default_factory=dict)
    dataset_dir: str = DATA_DIR
    # training
    arch_id: str = 'dbnet'
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    l2_lambda: float = L2_LAMBDA
    l2_squared: bool = False
    vin_iterations: int = VIN_ITERATIONS
    deterministic: bool = False
    workers: int = WORKERS

    def to_dict(self) -> Dict[str, Any]:
        """JSON-ready dict of every field"""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Build from a dict; unknown keys raise ValueError"""
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"Unknown config key: {key}")
        return cls(**data)

    def merged(self, overrides: Dict[str, Any]) -> 'RunConfig':
        """Return a copy with every non-None override applied"""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(data)

    def effective_workers(self) -> int:
        """Worker count, forced to 1 in deterministic mode"""
        return 1 if self.deterministic else max(1, self.workers)


def full_scale(config: Optional[RunConfig] = None) -> RunConfig:
    """Switch a config to the full-size experiment"""
    config = config or RunConfig()
    return config.merged({'image_size': FULL_IMAGE_SIZE, 'n_maps': FULL_N_MAPS})
