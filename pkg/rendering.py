"""
Raster outputs: value maps, trajectory overlays and training curves
"""

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Optional, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from PIL import Image, ImageDraw

from nav_mdp import Cell, NavWorld
from terrain_synth import TerrainMap, encode_input

if TYPE_CHECKING:
    from train_eval import MetricsRecord

logger = logging.getLogger(__name__)

START_RGB = (0, 255, 0)
GOAL_RGB = (0, 0, 255)
PATH_RGB = (255, 0, 0)
CONSTANT_GRAY = 128


def value_map(model, encoding: np.ndarray, world: Optional[NavWorld] = None) -> np.ndarray:
    """Per-cell maximum action value, indexed [x2, x1]"""
    return np.asarray(model.action_values(encoding, world)).max(axis=-1)


def value_contrast(model, samples) -> Dict[str, Optional[float]]:
    """Count maps whose goal-adjacent traversable cells are lighter on average than the risky cells"""
    checked = lighter = 0
    for e, world in enumerate(samples.worlds):
        risky = ~world.grid
        g1, g2 = world.goal
        adjacent = np.zeros_like(world.grid)
        adjacent[max(g2 - 1, 0):g2 + 2, max(g1 - 1, 0):g1 + 2] = True
        adjacent &= world.grid
        adjacent[g2, g1] = False
        if not risky.any() or not adjacent.any():
            continue
        values = value_map(model, samples.encodings[e], world)
        checked += 1
        lighter += int(values[adjacent].mean() > values[risky].mean())
    if checked == 0:
        logger.warning("No map has both risky cells and traversable goal neighbours; value contrast skipped")
    return {
        'maps': checked,
        'lighter': lighter,
        'fraction': lighter / checked if checked else None,
    }


def normalize_values(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 8-bit; a constant field becomes mid-gray"""
    lo, hi = float(values.min()), float(values.max())
    if not hi - lo > 1e-12:
        logger.warning("Value map is constant; rendering mid-gray")
        return np.full(values.shape, CONSTANT_GRAY, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def render_value_map(
    model,
    terrain: TerrainMap,
    goal: Cell,
    cell_size: int,
    world: Optional[NavWorld] = None,
    upscale: bool = False,
) -> Image.Image:
    """Grayscale NxN image of the value map; lighter is better"""
    encoding = encode_input(terrain, goal, cell_size)
    pixels = normalize_values(value_map(model, encoding, world))
    if upscale:
        pixels = np.kron(pixels, np.ones((cell_size, cell_size), dtype=np.uint8))
    return Image.fromarray(pixels)


def _center(cell: Cell, cell_size: int) -> Cell:
    return cell[0] * cell_size + cell_size // 2, cell[1] * cell_size + cell_size // 2


def render_trajectory_overlay(
    terrain: TerrainMap,
    positions: Sequence[Cell],
    cell_size: int,
    goal: Optional[Cell] = None,
) -> Image.Image:
    """MxM RGB overlay: red path through cell centres, green start, blue goal"""
    if len(positions) == 0:
        raise ValueError("Cannot draw an empty trajectory")
    gray = np.clip(np.round(terrain.gray * 255.0), 0, 255).astype(np.uint8)
    image = Image.fromarray(gray).convert('RGB')
    draw = ImageDraw.Draw(image)

    centers = [_center(p, cell_size) for p in positions]
    if len(centers) > 1:
        draw.line(centers, fill=PATH_RGB, width=1)
    radius = max(1, cell_size // 4)
    goal = positions[-1] if goal is None else goal
    for cell, color in ((positions[0], START_RGB), (goal, GOAL_RGB)):
        cx, cy = _center(cell, cell_size)
        draw.rectangle([cx - radius, cy - radius, cx + radius, cy + radius], fill=color)
    return image


def plot_training_curves(records: Dict[str, 'MetricsRecord'], path: Path):
    """Loss and step error per epoch for several architectures on shared axes"""
    fig, (ax_loss, ax_err) = plt.subplots(1, 2, figsize=(10, 4))
    for arch_id, record in records.items():
        epochs = [e.epoch for e in record.epochs]
        line, = ax_loss.plot(epochs, [e.loss for e in record.epochs], label=arch_id)
        ax_err.plot(epochs, [1.0 - e.test_acc for e in record.epochs], color=line.get_color(), label=f"{arch_id} test")
        ax_err.plot(epochs, [1.0 - e.train_acc for e in record.epochs], color=line.get_color(), linestyle='--',
                    label=f"{arch_id} train")
    ax_loss.set_xlabel('epoch')
    ax_loss.set_ylabel('loss')
    ax_err.set_xlabel('epoch')
    ax_err.set_ylabel('step error')
    ax_loss.legend()
    ax_err.legend(fontsize='small')
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Saved training curves to {path}")
