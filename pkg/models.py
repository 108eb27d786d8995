"""
Policy networks mapping (input encoding, rover cell) to 8 action values
DB-Net, its two ablations and the value-iteration-network baseline
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import config
from tensor_nn import (
    CheckpointError,
    Conv2D,
    Dense,
    GradCheckReport,
    Layer,
    LayerSpec,
    ParamSet,
    ShapeError,
    Tensor,
    build_stack,
    channel_max,
    channel_max_backward,
    gradient_check,
    one_hot,
    read_checkpoint,
    softmax,
    softmax_ce_l2_loss,
    write_checkpoint,
)

logger = logging.getLogger(__name__)

ARCHS = ('dbnet', 'b1net', 'b2net', 'vin')
INPUT_CHANNELS = 3

# Reprocessing layers: 3xMxM -> AxNxN with N = M/4
REPROCESS_LAYERS = [
    LayerSpec('conv', 'conv00', kernels=6, size=5, stride=1),
    LayerSpec('pool', 'pool00', size=3, stride=2),
    LayerSpec('conv', 'conv01', kernels=12, size=4, stride=1),
    LayerSpec('pool', 'pool01', size=3, stride=2),
]

# Branch one: global guidance, AxNxN -> B
BRANCH_ONE_LAYERS = [
    LayerSpec('conv', 'conv10', kernels=20, size=5, stride=1),
    LayerSpec('pool', 'pool10', size=3, stride=1),
    LayerSpec('residual', 'res11', kernels=20, size=3, stride=1),
    LayerSpec('pool', 'pool11', size=3, stride=2),
    LayerSpec('residual', 'res12', kernels=20, size=3, stride=1),
    LayerSpec('pool', 'pool12', size=3, stride=2),
    LayerSpec('residual', 'res13', kernels=20, size=3, stride=1),
    LayerSpec('pool', 'pool13', size=3, stride=1),
    LayerSpec('fc', 'fc1', kernels=192),
    LayerSpec('fc', 'fc2', kernels=10),
]

# Branch two: local value distribution, AxNxN -> CxNxN
BRANCH_TWO_LAYERS = [
    LayerSpec('conv', 'conv20', kernels=20, size=5, stride=1),
    LayerSpec('residual', 'res21', kernels=20, size=3, stride=1),
    LayerSpec('residual', 'res22', kernels=20, size=3, stride=1),
    LayerSpec('residual', 'res23', kernels=20, size=3, stride=1),
    LayerSpec('residual', 'res24', kernels=20, size=3, stride=1),
    LayerSpec('residual', 'res25', kernels=20, size=3, stride=1),
    LayerSpec('conv', 'conv21', kernels=10, size=3, stride=1),
]

OUTPUT_LAYER = LayerSpec('fc', 'fc3', kernels=config.NUM_ACTIONS, activation=False)

VIN_REWARD_LAYER = LayerSpec('conv', 'vin_r', kernels=1, size=1, stride=1, activation=False)
VIN_Q_LAYER = LayerSpec('conv', 'vin_q', kernels=10, size=3, stride=1, activation=False)


def plain_layers(specs: List[LayerSpec]) -> List[LayerSpec]:
    """Replace every residual block by one plain convolution of the same shape"""
    return [
        LayerSpec('conv', f"{s.name}_plain", kernels=s.kernels, size=s.size, stride=s.stride)
        if s.kind == 'residual' else s
        for s in specs
    ]


@dataclass(frozen=True)
class ModelSpec:
    arch_id: str = 'dbnet'
    image_size: int = config.IMAGE_SIZE
    cell_size: int = config.CELL_SIZE
    feature_a: int = 12
    feature_b: int = 10
    feature_c: int = 10
    vin_iterations: int = config.VIN_ITERATIONS

    def __post_init__(self):
        if self.arch_id not in ARCHS:
            raise ValueError(f"Unknown architecture: {self.arch_id} (expected one of {', '.join(ARCHS)})")
        if self.cell_size != 4:
            raise ShapeError(f"cell_size is fixed at 4 by the two stride-2 pools, got {self.cell_size}")
        if self.image_size < 8 or self.image_size % self.cell_size:
            raise ShapeError(f"image_size must be a multiple of {self.cell_size} and at least 8, got {self.image_size}")
        if self.arch_id == 'vin' and self.vin_iterations < 1:
            raise ValueError(f"vin_iterations must be >= 1, got {self.vin_iterations}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.cell_size

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ModelSpec':
        return cls(**data)


@dataclass
class PolicyOutput:
    logits: Tensor  # (B, 8)
    probs: Tensor

    @property
    def actions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def build_ablation(arch_id: str, base: Optional[ModelSpec] = None) -> ModelSpec:
    """Spec for b1net or b2net sharing every other field with base"""
    if arch_id not in ('b1net', 'b2net'):
        raise ValueError(f"Not an ablation architecture: {arch_id}")
    base = base or ModelSpec()
    return ModelSpec(**{**base.to_dict(), 'arch_id': arch_id})


def _check_positions(pos: np.ndarray, batch: int, n: int) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
    if pos.shape[0] != batch:
        raise ShapeError(f"Got {pos.shape[0]} positions for a batch of {batch}")
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise ValueError(f"Positions must lie inside the {n}x{n} grid")
    return pos


class PolicyNet:
    """Shared trunk/head plumbing

    The trunk is position-independent and runs once per image; the head
    gathers features at the rover cell. forward/backward train on
    (image, cell) pairs, action_values scores every cell of one image.
    """

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.params = ParamSet()
        self.dtype = dtype
        self._rng = np.random.default_rng(seed)
        self._head_cache: Any = None
        n = spec.image_size
        self.reprocess, channels, size = build_stack(
            REPROCESS_LAYERS, self.params, 'reprocess', INPUT_CHANNELS, n, self._rng, dtype
        )
        if channels != spec.feature_a or size != spec.grid_size:
            raise ShapeError(f"Reprocessing yields {channels}x{size}x{size}, expected "
                             f"{spec.feature_a}x{spec.grid_size}x{spec.grid_size}")

    # subclasses fill these in
    def trunk(self, x: Tensor) -> Tuple[Tensor, ...]:
        raise NotImplementedError

    def trunk_backward(self, grads: Tuple[Optional[Tensor], ...]):
        raise NotImplementedError

    def head(self, feats: Tuple[Tensor, ...], pos: np.ndarray, rows: np.ndarray) -> Tensor:
        raise NotImplementedError

    def head_backward(self, dlogits: Tensor) -> Tuple[Optional[Tensor], ...]:
        raise NotImplementedError

    def _check_input(self, x: Tensor) -> Tensor:
        m = self.spec.image_size
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
            raise ShapeError(f"Expected input (B, {INPUT_CHANNELS}, {m}, {m}), got {x.shape}")
        if x.shape[2] != m or x.shape[3] != m:
            raise ShapeError(f"Input size {x.shape[2]}x{x.shape[3]} does not match model size {m}x{m}")
        return np.ascontiguousarray(x, dtype=self.params.dtype)

    def reset(self):
        for value in vars(self).values():
            if isinstance(value, Layer):
                value.reset()

    def forward(self, x: Tensor, pos: np.ndarray) -> Tensor:
        """Logits (B, 8) for image x[i] with the rover at pos[i] = (x1, x2)"""
        self.reset()
        x = self._check_input(x)
        pos = _check_positions(pos, x.shape[0], self.spec.grid_size)
        feats = self.trunk(x)
        return self.head(feats, pos, np.arange(x.shape[0]))

    def backward(self, dlogits: Tensor):
        """Accumulate parameter gradients for the last forward"""
        self.trunk_backward(self.head_backward(dlogits))

    def policy(self, x: Tensor, pos: np.ndarray) -> PolicyOutput:
        logits = self.forward(x, pos)
        return PolicyOutput(logits=logits, probs=softmax(logits))

    def action_values(self, encoding: Tensor, world: Any = None) -> np.ndarray:
        """Logits for every cell of one image, indexed [x2, x1, a]"""
        self.reset()
        x = self._check_input(encoding)
        n = self.spec.grid_size
        feats = self.trunk(x)
        x2, x1 = np.divmod(np.arange(n * n), n)
        pos = np.stack([x1, x2], axis=1)
        logits = self.head(feats, pos, np.zeros(n * n, dtype=np.int64))
        self.reset()
        return logits.reshape(n, n, -1)

    def num_parameters(self) -> int:
        return self.params.num_parameters()


def _gather(features: Tensor, pos: np.ndarray, rows: np.ndarray) -> Tensor:
    """Feature column at each (x1, x2): (S, C)"""
    return features[rows, :, pos[:, 1], pos[:, 0]]


def _scatter(dcols: Tensor, shape: Tuple[int, ...], pos: np.ndarray, rows: np.ndarray) -> Tensor:
    out = np.zeros(shape, dtype=dcols.dtype)
    np.add.at(out, (rows, slice(None), pos[:, 1], pos[:, 0]), dcols)
    return out


class DBNet(PolicyNet):
    """Double-branch network: global branch f1 concatenated with the positional column f2"""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        a, n = spec.feature_a, spec.grid_size
        self.branch_one, f1, _ = build_stack(BRANCH_ONE_LAYERS, self.params, 'branch_one', a, n, self._rng, dtype)
        self.branch_two, f2, size = build_stack(BRANCH_TWO_LAYERS, self.params, 'branch_two', a, n, self._rng, dtype)
        if f1 != spec.feature_b or f2 != spec.feature_c or size != n:
            raise ShapeError(f"Branch widths {f1}/{f2} do not match B={spec.feature_b}, C={spec.feature_c}")
        self.output = Dense(self.params, OUTPUT_LAYER.name, f1 + f2, OUTPUT_LAYER.kernels, self._rng,
                            activation=False, dtype=dtype)

    def fc1_fan_in(self) -> int:
        return next(l for l in self.branch_one.layers if isinstance(l, Dense)).fan_in

    def trunk(self, x: Tensor) -> Tuple[Tensor, ...]:
        feat = self.reprocess.forward(x)
        return self.branch_one.forward(feat), self.branch_two.forward(feat)

    def trunk_backward(self, grads):
        df1, dg = grads
        dfeat = self.branch_one.backward(df1) + self.branch_two.backward(dg)
        self.reprocess.backward(dfeat)

    def head(self, feats, pos, rows):
        f1, g = feats
        self._head_cache = (f1.shape, g.shape, pos, rows)
        z = np.concatenate([f1[rows], _gather(g, pos, rows)], axis=1)
        return self.output.forward(z)

    def head_backward(self, dlogits):
        f1_shape, g_shape, pos, rows = self._head_cache
        dz = self.output.backward(dlogits)
        b = f1_shape[1]
        df1 = np.zeros(f1_shape, dtype=dz.dtype)
        np.add.at(df1, rows, dz[:, :b])
        return df1, _scatter(dz[:, b:], g_shape, pos, rows)


class LocalNet(PolicyNet):
    """Branch two alone (B1-Net); with plain convolutions in place of residual blocks it is B2-Net"""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        layers = BRANCH_TWO_LAYERS if spec.arch_id == 'b1net' else plain_layers(BRANCH_TWO_LAYERS)
        a, n = spec.feature_a, spec.grid_size
        self.branch_two, f2, _ = build_stack(layers, self.params, 'branch_two', a, n, self._rng, dtype)
        self.output = Dense(self.params, OUTPUT_LAYER.name, f2, OUTPUT_LAYER.kernels, self._rng,
                            activation=False, dtype=dtype)

    def trunk(self, x):
        return (self.branch_two.forward(self.reprocess.forward(x)),)

    def trunk_backward(self, grads):
        (dg,) = grads
        self.reprocess.backward(self.branch_two.backward(dg))

    def head(self, feats, pos, rows):
        (g,) = feats
        self._head_cache = (g.shape, pos, rows)
        return self.output.forward(_gather(g, pos, rows))

    def head_backward(self, dlogits):
        g_shape, pos, rows = self._head_cache
        return (_scatter(self.output.backward(dlogits), g_shape, pos, rows),)


class VIN(PolicyNet):
    """Reward map, K shared-weight Q convolutions with channel-max V, attention on Q at the rover cell"""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        super().__init__(spec, seed, dtype)
        r, q = VIN_REWARD_LAYER, VIN_Q_LAYER
        self.reward = Conv2D(self.params, r.name, spec.feature_a, r.kernels, r.size, self._rng,
                             activation=False, dtype=dtype)
        self.q_conv = Conv2D(self.params, q.name, 2, q.kernels, q.size, self._rng, activation=False, dtype=dtype)
        self.output = Dense(self.params, OUTPUT_LAYER.name, q.kernels, OUTPUT_LAYER.kernels, self._rng,
                            activation=False, dtype=dtype)
        self._max_caches: List[Any] = []

    def reset(self):
        super().reset()
        self._max_caches = []

    def iterate(self, reward_map: Tensor) -> Tuple[Tensor, Tensor]:
        """Run the K-step recurrence from V = 0; returns (Q, V)"""
        v = np.zeros_like(reward_map)
        q = None
        for k in range(self.spec.vin_iterations):
            q = self.q_conv.forward(np.concatenate([reward_map, v], axis=1))
            v, cache = channel_max(q)
            if k < self.spec.vin_iterations - 1:
                self._max_caches.append(cache)
        return q, v

    def trunk(self, x):
        q, _ = self.iterate(self.reward.forward(self.reprocess.forward(x)))
        return (q,)

    def trunk_backward(self, grads):
        (dq,) = grads
        dr = None
        for _ in range(self.spec.vin_iterations):
            dstack = self.q_conv.backward(dq)
            dr = dstack[:, :1] if dr is None else dr + dstack[:, :1]
            if self._max_caches:
                dq = channel_max_backward(dstack[:, 1:], self._max_caches.pop())
        self.reprocess.backward(self.reward.backward(dr))

    def head(self, feats, pos, rows):
        (q,) = feats
        self._head_cache = (q.shape, pos, rows)
        return self.output.forward(_gather(q, pos, rows))

    def head_backward(self, dlogits):
        q_shape, pos, rows = self._head_cache
        return (_scatter(self.output.backward(dlogits), q_shape, pos, rows),)


MODEL_CLASSES = {'dbnet': DBNet, 'b1net': LocalNet, 'b2net': LocalNet, 'vin': VIN}


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> PolicyNet:
    """Instantiate an architecture from its spec"""
    model = MODEL_CLASSES[spec.arch_id](spec, seed, dtype)
    logger.info(f"Built {spec.arch_id} for {spec.image_size}x{spec.image_size} input "
                f"({model.num_parameters()} parameters)")
    return model


def dbnet_forward(model: DBNet, x: Tensor, pos: np.ndarray) -> PolicyOutput:
    return model.policy(x, pos)


def vin_forward(model: VIN, x: Tensor, pos: np.ndarray) -> PolicyOutput:
    return model.policy(x, pos)


def save_model(path: Path, model: PolicyNet, extra: Optional[Dict[str, Any]] = None):
    """Checkpoint the parameters with the model spec in the header"""
    header = {'arch_id': model.spec.arch_id, 'model_spec': model.spec.to_dict()}
    header.update(extra or {})
    write_checkpoint(path, model.params, header)


def load_model(path: Path, expected_arch: Optional[str] = None) -> PolicyNet:
    """Rebuild a model from a checkpoint; expected_arch guards against mixing runs"""
    header, state = read_checkpoint(path)
    arch = header.get('arch_id')
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"Checkpoint holds {arch}, expected {expected_arch}")
    try:
        spec = ModelSpec.from_dict(header['model_spec'])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint model spec is invalid: {e}") from e
    model = MODEL_CLASSES[spec.arch_id](spec)
    model.params.load_state(state)
    model.params.step = int(header.get('step', 0))
    return model


def model_gradient_check(
    arch_id: str,
    samples: int = 100,
    tolerance: float = 1e-3,
    seed: int = 0,
    image_size: int = 16,
    batch: int = 2,
    vin_iterations: int = 3,
) -> GradCheckReport:
    """End-to-end float64 check of cross-entropy gradients for every parameter tensor"""
    spec = ModelSpec(arch_id=arch_id, image_size=image_size, vin_iterations=vin_iterations)
    model = MODEL_CLASSES[arch_id](spec, seed, np.float64)
    rng = np.random.default_rng(seed)
    x = rng.random((batch, INPUT_CHANNELS, image_size, image_size))
    pos = rng.integers(0, spec.grid_size, size=(batch, 2))
    labels = one_hot(rng.integers(0, config.NUM_ACTIONS, size=batch))

    model.params.zero_grad()
    _, dlogits = softmax_ce_l2_loss(model.forward(x, pos), labels)
    model.backward(dlogits)
    analytic = {name: g.copy() for name, g in model.params.grads.items()}
    return gradient_check(
        lambda: softmax_ce_l2_loss(model.forward(x, pos), labels)[0],
        model.params.params, analytic, tolerance, samples, seed=seed, one_sided=True,
    )
