"""
Run Manager for training/evaluation output directories
Stores the run config, metrics, wall-clock timings, checkpoint and images
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

from PIL import Image

import config
from models import PolicyNet, load_model, save_model
from train_eval import MetricsRecord

logger = logging.getLogger(__name__)


class RunManager:
    """Manages one run directory"""

    def __init__(self, run_dir: str):
        self.run_dir = Path(run_dir)
        self.config_file = self.run_dir / "config.json"
        self.metrics_file = self.run_dir / "metrics.json"
        self.timings_file = self.run_dir / "timings.json"
        self.checkpoint_file = self.run_dir / "checkpoint.bin"
        self.eval_file = self.run_dir / "eval.json"
        self.images_dir = self.run_dir / "images"

    def _ensure_directories(self):
        """Create necessary directories"""
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def _load_json(self, file_path: Path, default: Any) -> Any:
        """Load JSON file with error handling"""
        try:
            if file_path.exists():
                with open(file_path, 'r', encoding='utf-8') as f:
                    return json.load(f)
        except Exception as e:
            logger.error(f"Error loading {file_path}: {e}")
        return default

    def save_json(self, name: str, data: Any) -> Path:
        """Write a JSON document into the run directory; failures are logged and re-raised"""
        self._ensure_directories()
        path = self.run_dir / name
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, ensure_ascii=False, sort_keys=True)
                f.write('\n')
            logger.info(f"Saved {path}")
        except Exception as e:
            logger.error(f"Error saving to {path}: {e}")
            raise
        return path

    def save_config(self, run_config: config.RunConfig):
        """Write config.json"""
        self.save_json(self.config_file.name, run_config.to_dict())

    def load_config(self) -> Optional[config.RunConfig]:
        """Read config.json, or None when absent"""
        data = self._load_json(self.config_file, None)
        return config.RunConfig.from_dict(data) if data is not None else None

    def save_metrics(self, record: MetricsRecord, deterministic: bool = False):
        """metrics.json; in deterministic mode wall times go to timings.json only"""
        self.save_json(self.metrics_file.name, record.to_dict(include_seconds=not deterministic))
        self.save_json(self.timings_file.name, {
            'arch_id': record.arch_id,
            'seconds': record.timings(),
            'mean_epoch_seconds': record.mean_epoch_seconds(),
        })

    def load_metrics(self) -> Optional[MetricsRecord]:
        """Read metrics.json, or None when absent"""
        data = self._load_json(self.metrics_file, None)
        return MetricsRecord.from_dict(data) if data is not None else None

    def save_checkpoint(self, model: PolicyNet, extra: Optional[Dict[str, Any]] = None):
        """Write checkpoint.bin"""
        self._ensure_directories()
        save_model(self.checkpoint_file, model, extra)

    def load_checkpoint(self, expected_arch: Optional[str] = None) -> PolicyNet:
        """Read checkpoint.bin, optionally checking the architecture"""
        return load_model(self.checkpoint_file, expected_arch)

    def save_image(self, name: str, image: Image.Image) -> Path:
        """Write a PNG under images/"""
        self.images_dir.mkdir(parents=True, exist_ok=True)
        path = self.images_dir / name
        image.save(path)
        return path

    def image_count(self) -> int:
        """Number of files under images/"""
        if not self.images_dir.exists():
            return 0
        return sum(1 for p in self.images_dir.iterdir() if p.suffix == '.png')
