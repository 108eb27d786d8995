"""
Procedural Mars-like terrain synthesis
Crater fields over smooth noise, Canny edge channel, network input encoding,
and pixel-to-cell risk compression
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

import config

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CannyParams:
    gaussian_sigma: float = config.CANNY_SIGMA
    low_threshold: float = config.CANNY_LOW
    high_threshold: float = config.CANNY_HIGH

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError(f"gaussian_sigma must be >= 0, got {self.gaussian_sigma}")
        if not 0 < self.low_threshold < self.high_threshold < 1:
            raise ValueError(
                f"Canny thresholds must satisfy 0 < low < high < 1, "
                f"got low={self.low_threshold} high={self.high_threshold}"
            )


@dataclass(frozen=True)
class TerrainParams:
    image_size: int = config.IMAGE_SIZE
    crater_count_range: Tuple[int, int] = (3, 12)
    crater_radius_range: Tuple[float, float] = (2.0, 7.0)
    rim_brightness: float = 0.25
    noise_amplitude: float = 0.15
    rock_count_range: Tuple[int, int] = (0, 0)
    rock_radius_range: Tuple[float, float] = (1.0, 2.0)
    cell_size: int = config.CELL_SIZE
    canny: CannyParams = field(default_factory=CannyParams)

    def __post_init__(self):
        object.__setattr__(self, 'crater_count_range', tuple(self.crater_count_range))
        object.__setattr__(self, 'crater_radius_range', tuple(self.crater_radius_range))
        object.__setattr__(self, 'rock_count_range', tuple(self.rock_count_range))
        object.__setattr__(self, 'rock_radius_range', tuple(self.rock_radius_range))
        if isinstance(self.canny, dict):
            object.__setattr__(self, 'canny', CannyParams(**self.canny))

        if self.image_size < 2 or self.image_size % self.cell_size != 0:
            raise ValueError(f"image_size {self.image_size} must be divisible by cell_size {self.cell_size}")
        lo, hi = self.crater_count_range
        if not 0 < lo <= hi:
            raise ValueError(f"Invalid crater_count_range {self.crater_count_range}")
        lo, hi = self.crater_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"Invalid crater_radius_range {self.crater_radius_range}")
        lo, hi = self.rock_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"Invalid rock_count_range {self.rock_count_range}")
        lo, hi = self.rock_radius_range
        if not 0 < lo <= hi:
            raise ValueError(f"Invalid rock_radius_range {self.rock_radius_range}")
        if self.noise_amplitude < 0 or self.rim_brightness < 0:
            raise ValueError("noise_amplitude and rim_brightness must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key, value in data.items():
            if isinstance(value, tuple):
                data[key] = list(value)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TerrainParams':
        return cls(**data)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form"""
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def default_terrain_params(image_size: int = config.IMAGE_SIZE, **overrides) -> TerrainParams:
    """Defaults tuned at M=64; crater radii scale with the image edge"""
    scale = image_size / 64.0
    params = {
        'image_size': image_size,
        'crater_radius_range': (2.0 * scale, 7.0 * scale),
        'rock_radius_range': (1.0 * scale, 2.0 * scale),
    }
    params.update(overrides)
    return TerrainParams(**params)


@dataclass(frozen=True, eq=False)
class TerrainMap:
    gray: np.ndarray
    risky: np.ndarray
    edge: np.ndarray
    seed: int
    params_digest: str

    def __post_init__(self):
        if not (self.gray.shape == self.risky.shape == self.edge.shape):
            raise ValueError(
                f"Raster shapes differ: gray {self.gray.shape}, risky {self.risky.shape}, edge {self.edge.shape}"
            )

    @property
    def size(self) -> int:
        return self.gray.shape[0]

    def to_bytes(self) -> bytes:
        return self.gray.tobytes() + self.risky.tobytes() + self.edge.tobytes()


def _smooth_noise(rng: np.random.Generator, size: int, octaves: int = 4) -> np.ndarray:
    """Low-frequency fractal noise in [0,1] from upsampled random lattices"""
    total = np.zeros((size, size), dtype=np.float64)
    amplitude = 1.0
    norm = 0.0
    lattice = 4
    for _ in range(octaves):
        coarse = rng.random((lattice, lattice)).astype(np.float32)
        layer = Image.fromarray(coarse).resize((size, size), Image.Resampling.BICUBIC)
        total += amplitude * np.asarray(layer, dtype=np.float64)
        norm += amplitude
        amplitude *= 0.5
        lattice = min(lattice * 2, size)
    total /= norm
    lo, hi = total.min(), total.max()
    if hi - lo < 1e-12:
        return np.full((size, size), 0.5)
    return (total - lo) / (hi - lo)


def generate_terrain(seed: int, params: TerrainParams) -> TerrainMap:
    """Render a crater field; a pure function of (seed, params)"""
    rng = np.random.default_rng(seed)
    size = params.image_size
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)

    gray = 0.45 + params.noise_amplitude * (_smooth_noise(rng, size) - 0.5)
    risky = np.zeros((size, size), dtype=bool)

    n_craters = int(rng.integers(params.crater_count_range[0], params.crater_count_range[1] + 1))
    for _ in range(n_craters):
        radius = rng.uniform(*params.crater_radius_range)
        cx, cy = rng.uniform(0, size, size=2)
        dist = np.hypot(cols + 0.5 - cx, rows + 0.5 - cy)
        inside = dist < radius
        bowl = 1.0 - (dist / radius) ** 2
        gray = np.where(inside, gray - 0.3 * bowl, gray)
        rim_width = max(0.2 * radius, 0.75)
        gray = gray + params.rim_brightness * np.exp(-(((dist - radius) / rim_width) ** 2))
        risky |= inside

    n_rocks = int(rng.integers(params.rock_count_range[0], params.rock_count_range[1] + 1))
    for _ in range(n_rocks):
        radius = rng.uniform(*params.rock_radius_range)
        cx, cy = rng.uniform(0, size, size=2)
        dist = np.hypot(cols + 0.5 - cx, rows + 0.5 - cy)
        shadow = np.hypot(cols + 0.5 - cx - radius, rows + 0.5 - cy - radius) < radius
        gray = np.where(shadow, gray - 0.2, gray)
        inside = dist < radius
        gray = np.where(inside, gray + 0.35, gray)
        risky |= inside | shadow

    gray = np.clip(gray, 0.0, 1.0)
    # PNG round-trip is lossless for values on the 8-bit lattice
    gray = np.round(gray * 255.0) / 255.0
    edge = canny_edges(gray, params.canny)

    logger.debug(f"Generated terrain seed={seed}: {n_craters} craters, {n_rocks} rocks, "
                 f"risky fraction {risky.mean():.3f}")
    return TerrainMap(gray=gray, risky=risky, edge=edge, seed=int(seed), params_digest=params.digest())


def canny_edges(gray: np.ndarray, p: Optional[CannyParams] = None) -> np.ndarray:
    """Binary Canny edge map with thresholds relative to the peak gradient magnitude"""
    p = p or CannyParams()
    image = np.asarray(gray, dtype=np.float64)
    # Gradients only see differences; centring keeps the result independent of offsets
    image = image - image.mean()
    smooth = ndimage.gaussian_filter(image, p.gaussian_sigma, mode='nearest', truncate=3.0)
    gx = ndimage.sobel(smooth, axis=1, mode='nearest')
    gy = ndimage.sobel(smooth, axis=0, mode='nearest')
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    if peak <= 1e-9:
        return np.zeros_like(image)

    # Quantize direction to 0/45/90/135 degrees
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    h, w = magnitude.shape
    padded = np.pad(magnitude, 1, mode='constant')
    keep = np.zeros_like(magnitude, dtype=bool)
    for s, (dr, dc) in offsets.items():
        before = padded[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        after = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        # strict on one side so plateaus thin to one pixel
        keep |= (sector == s) & (magnitude > before) & (magnitude >= after)
    thin = np.where(keep, magnitude, 0.0)

    strong = thin >= p.high_threshold * peak
    candidate = thin >= p.low_threshold * peak
    # keep weak pixels only when 8-connected to a strong one
    labels, _ = ndimage.label(candidate, structure=EIGHT_CONNECTED)
    seeded = np.unique(labels[strong])
    edges = np.isin(labels, seeded[seeded > 0])
    return edges.astype(np.float64)


def encode_input(terrain: TerrainMap, goal_cell: Tuple[int, int], l: int) -> np.ndarray:
    """3xMxM float32 input: gray, edge, goal block indicator"""
    size = terrain.size
    if size % l != 0:
        raise ValueError(f"Image size {size} not divisible by cell size {l}")
    n = size // l
    g1, g2 = int(goal_cell[0]), int(goal_cell[1])
    if not (0 <= g1 < n and 0 <= g2 < n):
        raise ValueError(f"Goal {goal_cell} outside {n}x{n} grid")
    target = np.zeros((size, size), dtype=np.float32)
    target[g2 * l:(g2 + 1) * l, g1 * l:(g1 + 1) * l] = 1.0
    return np.stack([terrain.gray.astype(np.float32), terrain.edge.astype(np.float32), target])


def compress_risky(risky: np.ndarray, l: int, risk_fraction: float = config.RISK_FRACTION) -> np.ndarray:
    """NxN traversability grid (True = safe) from an MxM risky mask"""
    size = risky.shape[0]
    if risky.shape != (size, size) or size % l != 0:
        raise ValueError(f"Mask shape {risky.shape} must be square and divisible by {l}")
    if not 0 <= risk_fraction <= 1:
        raise ValueError(f"risk_fraction must be in [0,1], got {risk_fraction}")
    n = size // l
    counts = np.asarray(risky, dtype=np.int64).reshape(n, l, n, l).sum(axis=(1, 3))
    # compare counts to avoid floating rounding at exact thresholds
    return ~(counts > risk_fraction * l * l)


def load_image(path: Path) -> np.ndarray:
    """Grayscale PNG as floats in [0, 1]"""
    with Image.open(path) as img:
        return np.asarray(img.convert('L'), dtype=np.float64) / 255.0


def save_image(path: Path, image: np.ndarray):
    """Write a [0, 1] array as an 8-bit grayscale PNG"""
    data = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_terrain_pair(gray_png: Path, mask_png: Path, canny: Optional[CannyParams] = None) -> TerrainMap:
    """Ingest a user-supplied grayscale image and risky mask"""
    gray_png, mask_png = Path(gray_png), Path(mask_png)
    gray = load_image(gray_png)
    mask = load_image(mask_png) > 0
    if gray.shape != mask.shape or gray.shape[0] != gray.shape[1]:
        raise ValueError(f"Gray {gray.shape} and mask {mask.shape} must be equal-sized squares")
    digest = hashlib.sha256(gray_png.read_bytes() + mask_png.read_bytes()).hexdigest()
    return TerrainMap(gray=gray, risky=mask, edge=canny_edges(gray, canny), seed=0, params_digest=digest)
