"""
Imitation-learning training loop and evaluation
Mini-batch Adam on expert (state, action) samples, step accuracy,
policy rollouts and success rates
"""

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

import numpy as np

import config
from dataset_manager import SampleSet
from expert_oracle import distance_field, optimal_action_table
from models import ModelSpec, PolicyNet, build_model
from nav_mdp import Cell, NavWorld, Termination, initial_state, step
from tensor_nn import adam_step, one_hot, softmax_ce_l2_loss

logger = logging.getLogger(__name__)


class Policy(Protocol):
    def action_values(self, encoding: np.ndarray, world: Optional[NavWorld] = None) -> np.ndarray:
        """Action values indexed [x2, x1, a]"""


@dataclass
class TrainConfig:
    arch_id: str = 'dbnet'
    epochs: int = config.EPOCHS
    batch_size: int = config.BATCH_SIZE
    lr: float = config.LEARNING_RATE
    l2_lambda: float = config.L2_LAMBDA
    seed: int = config.SEED
    dataset_path: str = config.DATA_DIR
    deterministic: bool = False
    vin_iterations: int = config.VIN_ITERATIONS
    l2_squared: bool = False
    evaluate_success: bool = True
    random_starts: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.l2_lambda < 0:
            raise ValueError(f"L2 lambda must be >= 0, got {self.l2_lambda}")

    @classmethod
    def from_run_config(cls, run: config.RunConfig, **overrides) -> 'TrainConfig':
        """Training settings taken from a merged run config"""
        values = dict(
            arch_id=run.arch_id,
            epochs=run.epochs,
            batch_size=run.batch_size,
            lr=run.lr,
            l2_lambda=run.l2_lambda,
            seed=run.seed,
            dataset_path=run.dataset_dir,
            deterministic=run.deterministic,
            vin_iterations=run.vin_iterations,
            l2_squared=run.l2_squared,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float
    seconds: Optional[float]


@dataclass
class MetricsRecord:
    arch_id: str
    epochs: List[EpochMetrics] = field(default_factory=list)
    train_succ: Optional[float] = None
    test_succ: Optional[float] = None
    best_epoch: Optional[int] = None

    def to_dict(self, include_seconds: bool = True) -> Dict[str, Any]:
        rows = []
        for e in self.epochs:
            row = asdict(e)
            if not include_seconds:
                row['seconds'] = None
            rows.append(row)
        return {
            'arch_id': self.arch_id,
            'epochs': rows,
            'best_epoch': self.best_epoch,
            'train_succ': self.train_succ,
            'test_succ': self.test_succ,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricsRecord':
        return cls(
            arch_id=data['arch_id'],
            epochs=[EpochMetrics(**row) for row in data['epochs']],
            train_succ=data.get('train_succ'),
            test_succ=data.get('test_succ'),
            best_epoch=data.get('best_epoch'),
        )

    def timings(self) -> List[Optional[float]]:
        return [e.seconds for e in self.epochs]

    def mean_epoch_seconds(self) -> Optional[float]:
        """Mean wall time per epoch, None when unrecorded"""
        seconds = [s for s in self.timings() if s is not None]
        return float(np.mean(seconds)) if seconds else None

    @property
    def best(self) -> Optional[EpochMetrics]:
        if self.best_epoch is None:
            return None
        return next(e for e in self.epochs if e.epoch == self.best_epoch)


class OraclePolicy:
    """The expert as a model: one-hot action values from the distance field"""

    def action_values(self, encoding: np.ndarray, world: Optional[NavWorld] = None) -> np.ndarray:
        if world is None:
            raise ValueError("OraclePolicy needs the world to plan on")
        table = optimal_action_table(distance_field(world))
        values = np.zeros(table.shape + (config.NUM_ACTIONS,))
        rows, cols = np.nonzero(table >= 0)
        values[rows, cols, table[rows, cols]] = 1.0
        return values


def step_accuracy(model: Policy, samples: SampleSet) -> float:
    """Fraction of samples whose argmax action equals the expert label"""
    if len(samples) == 0:
        raise ValueError(f"Split '{samples.split}' has no samples")
    correct = 0
    order = np.argsort(samples.enc_index, kind='stable')
    bounds = np.searchsorted(samples.enc_index[order], np.arange(len(samples.worlds) + 1))
    for e, world in enumerate(samples.worlds):
        idx = order[bounds[e]:bounds[e + 1]]
        if idx.size == 0:
            continue
        table = model.action_values(samples.encodings[e], world)
        pos = samples.positions[idx]
        pred = table[pos[:, 1], pos[:, 0]].argmax(axis=-1)
        correct += int(np.sum(pred == samples.labels[idx]))
    return correct / len(samples)


def rollout(
    model: Policy,
    world: NavWorld,
    start: Cell,
    max_steps: Optional[int] = None,
    encoding: Optional[np.ndarray] = None,
    table: Optional[np.ndarray] = None,
) -> Tuple[List[Cell], bool]:
    """Follow argmax actions from start until a terminal state"""
    if table is None:
        table = model.action_values(encoding, world)
    actions = table.argmax(axis=-1)
    state = initial_state(world, start, max_steps)
    positions = [state.pos]
    while not state.terminal:
        x1, x2 = state.pos
        state = step(state, int(actions[x2, x1])).next
        positions.append(state.pos)
    return positions, state.termination == Termination.SUCCESS


def success_rate(
    model: Policy,
    samples: SampleSet,
    starts_per_map: Optional[int] = None,
    random_starts: bool = False,
    seed: int = 0,
    max_steps: Optional[int] = None,
) -> float:
    """Fraction of successful rollouts over (encoding, start) pairs of a split"""
    if not samples.worlds:
        raise ValueError(f"Split '{samples.split}' has no maps")
    rng = np.random.default_rng(seed)
    successes = 0
    total = 0
    for e, world in enumerate(samples.worlds):
        starts = samples.starts[e]
        if random_starts:
            reachable = distance_field(world).reachable_cells()
            count = starts_per_map or len(starts)
            starts = [reachable[int(i)] for i in rng.integers(len(reachable), size=count)] if reachable else []
        elif starts_per_map is not None:
            starts = starts[:starts_per_map]
        if not starts:
            continue
        table = model.action_values(samples.encodings[e], world)
        for start in starts:
            _, ok = rollout(model, world, start, max_steps, table=table)
            successes += int(ok)
            total += 1
    if total == 0:
        raise ValueError(f"Split '{samples.split}' has no rollout starts")
    return successes / total


def run_epoch(model: PolicyNet, samples: SampleSet, cfg: TrainConfig, rng: np.random.Generator) -> Tuple[float, float]:
    """One shuffled pass of mini-batch Adam; returns (mean loss, wall seconds)"""
    start = time.perf_counter()
    order = rng.permutation(len(samples))
    total_loss = 0.0
    for first in range(0, len(order), cfg.batch_size):
        idx = order[first:first + cfg.batch_size]
        x, pos, labels = samples.batch(idx)
        model.params.zero_grad()
        logits = model.forward(x, pos)
        loss, dlogits = softmax_ce_l2_loss(logits, one_hot(labels), model.params, cfg.l2_lambda, cfg.l2_squared)
        model.backward(dlogits)
        adam_step(model.params, cfg.lr)
        total_loss += loss * len(idx)
    return total_loss / len(order), time.perf_counter() - start


def train(
    cfg: TrainConfig,
    train_set: SampleSet,
    test_set: SampleSet,
    model: Optional[PolicyNet] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> Tuple[PolicyNet, MetricsRecord]:
    """Minimize cross-entropy + L2 on expert labels; the returned model holds the best-test-accuracy parameters"""
    if train_set.image_size != test_set.image_size:
        raise ValueError(f"Train and test encodings differ in size: {train_set.image_size} vs {test_set.image_size}")
    if model is None:
        spec = ModelSpec(arch_id=cfg.arch_id, image_size=train_set.image_size, vin_iterations=cfg.vin_iterations)
        model = build_model(spec, cfg.seed)
    elif model.spec.image_size != train_set.image_size:
        raise ValueError(f"Model expects {model.spec.image_size}px input, dataset has {train_set.image_size}px")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    record = MetricsRecord(arch_id=model.spec.arch_id)
    best_acc = -1.0
    best_state = None
    logger.info(f"Training {model.spec.arch_id} on {len(train_set)} samples for {cfg.epochs} epochs")
    for epoch in range(1, cfg.epochs + 1):
        loss, seconds = run_epoch(model, train_set, cfg, rng)
        metrics = EpochMetrics(
            epoch=epoch,
            loss=float(loss),
            train_acc=step_accuracy(model, train_set),
            test_acc=step_accuracy(model, test_set),
            seconds=seconds,
        )
        record.epochs.append(metrics)
        logger.info(f"Epoch {epoch}/{cfg.epochs}: loss={metrics.loss:.4f} train_acc={metrics.train_acc:.4f} "
                    f"test_acc={metrics.test_acc:.4f} ({seconds:.1f}s)")
        if metrics.test_acc > best_acc:
            best_acc = metrics.test_acc
            best_state = model.params.state_dict()
            record.best_epoch = epoch
        if on_epoch is not None:
            on_epoch(metrics)

    step_count = model.params.step
    model.params.load_state(best_state)
    model.params.step = step_count
    if cfg.evaluate_success:
        record.train_succ = success_rate(model, train_set, random_starts=cfg.random_starts, seed=cfg.seed)
        record.test_succ = success_rate(model, test_set, random_starts=cfg.random_starts, seed=cfg.seed)
        logger.info(f"Success rate: train={record.train_succ:.4f} test={record.test_succ:.4f}")
    return model, record


def evaluate(
    model: Policy,
    train_set: SampleSet,
    test_set: SampleSet,
    random_starts: bool = False,
    starts_per_map: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, float]:
    """Step accuracy and success rate on both splits"""
    return {
        'train_acc': step_accuracy(model, train_set),
        'test_acc': step_accuracy(model, test_set),
        'train_succ': success_rate(model, train_set, starts_per_map, random_starts, seed),
        'test_succ': success_rate(model, test_set, starts_per_map, random_starts, seed),
    }


def bench_epoch(spec: ModelSpec, samples: SampleSet, batch_size: int, seed: int) -> float:
    """Wall seconds of one training pass for a freshly built model"""
    model = build_model(spec, seed)
    cfg = TrainConfig(arch_id=spec.arch_id, epochs=1, batch_size=batch_size, seed=seed,
                      vin_iterations=spec.vin_iterations)
    _, seconds = run_epoch(model, samples, cfg, np.random.default_rng(seed))
    logger.info(f"{spec.arch_id}: {seconds:.2f}s per epoch")
    return seconds
