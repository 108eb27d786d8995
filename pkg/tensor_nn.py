"""
Dense numpy layer vocabulary with paired backward passes
Convolution, max-pooling, residual blocks, fully-connected layers, softmax
cross-entropy with an L2 term, Adam, finite-difference checks and the
checkpoint codec
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

import config

logger = logging.getLogger(__name__)

Tensor = np.ndarray

CHECKPOINT_FORMAT = 'navnet-checkpoint'
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when an operand does not fit the layer it is fed to"""


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoints"""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Ordered named parameters with paired gradients and Adam moment slots"""

    def __init__(self):
        self.params: 'OrderedDict[str, Tensor]' = OrderedDict()
        self.grads: Dict[str, Tensor] = {}
        self.m: Dict[str, Tensor] = {}
        self.v: Dict[str, Tensor] = {}
        self.step = 0

    def add(self, name: str, value: Tensor) -> str:
        if name in self.params:
            raise KeyError(f"Duplicate parameter name: {name}")
        self.params[name] = np.ascontiguousarray(value)
        self.grads[name] = np.zeros_like(self.params[name])
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self) -> List[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def dtype(self):
        first = next(iter(self.params.values()), None)
        return first.dtype if first is not None else np.dtype(np.float32)

    def zero_grad(self):
        """Reset every gradient to zeros"""
        for name, p in self.params.items():
            self.grads[name] = np.zeros_like(p)

    def accumulate(self, name: str, grad: Tensor):
        """Add into a parameter's gradient"""
        if grad.shape != self.params[name].shape:
            raise ShapeError(f"Gradient for {name} has shape {grad.shape}, expected {self.params[name].shape}")
        self.grads[name] += grad

    def l2_norm(self) -> float:
        """Euclidean norm over all parameters"""
        return float(np.sqrt(sum(np.sum(np.square(p, dtype=np.float64)) for p in self.params.values())))

    def cast(self, dtype) -> 'ParamSet':
        """Convert every parameter in place (float64 for gradient checks)"""
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
            self.grads[name] = np.zeros_like(self.params[name])
        self.m.clear()
        self.v.clear()
        return self

    def state_dict(self) -> Dict[str, Tensor]:
        """Copies of every parameter, in registration order"""
        return OrderedDict((name, p.copy()) for name, p in self.params.items())

    def load_state(self, state: Dict[str, Tensor]):
        """Replace parameters from a state dict; names and shapes must match"""
        for name, value in state.items():
            if name not in self.params:
                raise CheckpointError(f"Unknown parameter in state: {name}")
            if value.shape != self.params[name].shape:
                raise CheckpointError(f"Parameter {name} has shape {value.shape}, expected {self.params[name].shape}")
            self.params[name] = np.ascontiguousarray(value, dtype=self.params[name].dtype)
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"State is missing parameters: {sorted(missing)}")


def init_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float32) -> Tensor:
    """LeCun-uniform draw with bound sqrt(3 / fan_in)"""
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Functional ops
# ---------------------------------------------------------------------------

def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """(pad_before, pad_after, out_size) with out_size = ceil(size / stride)"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def _pads(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == 'same':
        pt, pb, oh = same_padding(h, kh, stride)
        pl, pr, ow = same_padding(w, kw, stride)
    elif padding == 'valid':
        if h < kh or w < kw:
            raise ShapeError(f"Input {h}x{w} smaller than kernel {kh}x{kw} with valid padding")
        pt = pb = pl = pr = 0
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
    else:
        raise ValueError(f"Unknown padding mode: {padding}")
    return (pt, pb, pl, pr), oh, ow


def _windows(xp: Tensor, kh: int, kw: int, stride: int, oh: int, ow: int) -> Tensor:
    """View shaped (B, C, oh, ow, kh, kw)"""
    view = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride][:, :, :oh, :ow]


def _scatter_windows(dwin: Tensor, padded_shape: Tuple[int, ...], stride: int) -> Tensor:
    """Adjoint of _windows: sum (B, C, oh, ow, kh, kw) contributions back onto the padded input"""
    _, _, oh, ow, kh, kw = dwin.shape
    dxp = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dwin[:, :, :, :, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = 'same'):
    """Cross-correlation of x (B,C,H,W) with w (F,C,kh,kw); returns (out, cache)"""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d input (B,C,H,W), got {x.ndim} dimensions")
    if w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d weights (F,C,kh,kw), got {w.ndim} dimensions")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input channels: weights expect {w.shape[1]}, input has {x.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias length: expected {w.shape[0]}, got {b.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")

    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    (pt, pb, pl, pr), oh, ow = _pads(h, wd, kh, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(xp, kh, kw, stride, oh, ow)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, oh, ow, F)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
    cache = (x.shape, xp, w, stride, (pt, pl), (oh, ow))
    return out, cache


def conv2d_backward(dout: Tensor, cache) -> Tuple[Tensor, Tensor, Tensor]:
    x_shape, xp, w, stride, (pt, pl), (oh, ow) = cache
    kh, kw = w.shape[2:]
    win = _windows(xp, kh, kw, stride, oh, ow)
    dw = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dwin = np.tensordot(dout, w, axes=([1], [0]))  # (B, oh, ow, C, kh, kw)
    dxp = _scatter_windows(dwin.transpose(0, 3, 1, 2, 4, 5), xp.shape, stride)
    dx = dxp[:, :, pt:pt + x_shape[2], pl:pl + x_shape[3]]
    return np.ascontiguousarray(dx), dw, db


def maxpool2d(x: Tensor, kernel: int, stride: int):
    """Same-padded max-pooling; ties route to the first maximal element in row-major order"""
    if kernel < 1:
        raise ShapeError(f"maxpool2d kernel must be >= 1, got {kernel}")
    _, _, h, w = x.shape
    if stride < 1 or stride > h or stride > w:
        raise ShapeError(f"maxpool2d stride {stride} invalid for input {h}x{w}")
    (pt, pb, pl, pr), oh, ow = _pads(h, w, kernel, kernel, stride, 'same')
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    win = _windows(xp, kernel, kernel, stride, oh, ow)
    flat = win.reshape(win.shape[:4] + (kernel * kernel,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    cache = (x.shape, xp.shape, kernel, stride, (pt, pl), idx)
    return out, cache


def maxpool2d_backward(dout: Tensor, cache) -> Tensor:
    x_shape, padded_shape, kernel, stride, (pt, pl), idx = cache
    hits = idx[..., None] == np.arange(kernel * kernel)
    dwin = np.where(hits, dout[..., None], 0.0).astype(dout.dtype)
    dwin = dwin.reshape(dout.shape + (kernel, kernel))
    dxp = _scatter_windows(dwin, padded_shape, stride)
    return np.ascontiguousarray(dxp[:, :, pt:pt + x_shape[2], pl:pl + x_shape[3]])


def relu(x: Tensor):
    """Elementwise max(x, 0)"""
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(dout: Tensor, mask: Tensor) -> Tensor:
    return np.where(mask, dout, 0).astype(dout.dtype)


def residual_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
    """relu(x + conv(relu(conv(x)))) with stride-1 same convolutions"""
    channels = x.shape[1]
    for name, w in (('first', w1), ('second', w2)):
        if w.shape[0] != channels or w.shape[1] != channels:
            raise ShapeError(
                f"residual_block {name} conv maps {w.shape[1]}->{w.shape[0]} channels, input has {channels}"
            )
    a, c1 = conv2d(x, w1, b1, 1, 'same')
    h, m1 = relu(a)
    f, c2 = conv2d(h, w2, b2, 1, 'same')
    out, m2 = relu(x + f)
    return out, (c1, m1, c2, m2)


def residual_block_backward(dout: Tensor, cache):
    """Returns (dx, dw1, db1, dw2, db2)"""
    c1, m1, c2, m2 = cache
    dsum = relu_backward(dout, m2)
    dh, dw2, db2 = conv2d_backward(dsum, c2)
    da = relu_backward(dh, m1)
    dx_branch, dw1, db1 = conv2d_backward(da, c1)
    return dsum + dx_branch, dw1, db1, dw2, db2


def fully_connected(x: Tensor, w: Tensor, b: Tensor):
    """x @ w + b; returns (out, cache)"""
    if x.ndim != 2:
        raise ShapeError(f"fully_connected expects a flat (B, fan_in) input, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"fully_connected fan-in mismatch: expected {w.shape[0]}, got {x.shape[1]}")
    return x @ w + b, x


def fully_connected_backward(dout: Tensor, x: Tensor, w: Tensor):
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def channel_max(x: Tensor):
    """Per-pixel maximum over channels, keeping the channel axis"""
    idx = x.argmax(axis=1)
    out = np.take_along_axis(x, idx[:, None], axis=1)
    return out, (x.shape, idx)


def channel_max_backward(dout: Tensor, cache) -> Tensor:
    shape, idx = cache
    hits = idx[:, None] == np.arange(shape[1])[None, :, None, None]
    return np.where(hits, dout, 0.0).astype(dout.dtype)


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes: int = config.NUM_ACTIONS) -> Tensor:
    """One-hot rows for integer action labels"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def l2_penalty(params: ParamSet, lam: float, squared: bool = False) -> float:
    """lam*||theta||_2 (or its square); adds the penalty gradient to params.grads"""
    if lam == 0 or len(params) == 0:
        return 0.0
    norm = params.l2_norm()
    if squared:
        for name, p in params.items():
            params.accumulate(name, (2.0 * lam * p).astype(p.dtype))
        return lam * norm * norm
    if norm > 0:
        for name, p in params.items():
            params.accumulate(name, (lam / norm * p).astype(p.dtype))
    return lam * norm


def softmax_ce_l2_loss(
    logits: Tensor,
    labels: Tensor,
    params: Optional[ParamSet] = None,
    lam: float = 0.0,
    squared: bool = False,
) -> Tuple[float, Tensor]:
    """Mean cross-entropy against one-hot rows plus the L2 term; returns (loss, dlogits)"""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ShapeError(f"Labels shape {labels.shape} does not match logits {logits.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("Every label row must be one-hot")

    z = logits.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-(labels * log_probs).sum() / n)
    dlogits = ((np.exp(log_probs) - labels) / n).astype(logits.dtype)
    if params is not None:
        loss += l2_penalty(params, lam, squared)
    return loss, dlogits


def adam_step(
    params: ParamSet,
    lr: float = config.LEARNING_RATE,
    beta1: float = config.ADAM_BETA1,
    beta2: float = config.ADAM_BETA2,
    eps: float = config.ADAM_EPS,
    t: Optional[int] = None,
) -> ParamSet:
    """Bias-corrected Adam update in place"""
    t = params.step + 1 if t is None else t
    if t < 1:
        raise ValueError(f"Adam step must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = params.grads[name]
        if name not in params.m:
            params.m[name] = np.zeros_like(p)
            params.v[name] = np.zeros_like(p)
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    params.step = t
    return params


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    max_error: Dict[str, float] = field(default_factory=dict)
    worst: List[Tuple[str, int, float, float, float]] = field(default_factory=list)

    def overall_max(self) -> float:
        return max(self.max_error.values(), default=0.0)


def relative_error(analytic: float, numeric: float) -> float:
    """Symmetric relative error with a 1e-8 floor"""
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def gradient_check(
    loss_fn: Callable[[], float],
    tensors: Dict[str, Tensor],
    analytic: Dict[str, Tensor],
    tolerance: float = 1e-3,
    samples: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    worst_count: int = 5,
    one_sided: bool = False,
) -> GradCheckReport:
    """Central differences at sampled coordinates of each tensor, perturbed in place

    With one_sided, a coordinate whose central difference straddles a ReLU or
    max-pool kink may instead match its forward or backward difference.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(passed=True, tolerance=tolerance)
    offenders = []
    base = loss_fn() if one_sided else None
    for name, tensor in tensors.items():
        if tensor.dtype != np.float64:
            raise ValueError(f"Gradient check requires float64 tensors, {name} is {tensor.dtype}")
        flat = tensor.reshape(-1)
        if not np.shares_memory(flat, tensor):
            raise ValueError(f"Tensor {name} must be contiguous for in-place perturbation")
        grad = np.asarray(analytic[name]).reshape(-1)
        count = min(samples, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        worst_here = 0.0
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn()
            flat[i] = original - h
            minus = loss_fn()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            err = relative_error(float(grad[i]), numeric)
            if one_sided and err > tolerance:
                for side in ((plus - base) / h, (base - minus) / h):
                    if relative_error(float(grad[i]), side) < err:
                        numeric, err = side, relative_error(float(grad[i]), side)
            worst_here = max(worst_here, err)
            offenders.append((name, int(i), float(grad[i]), float(numeric), err))
        report.max_error[name] = worst_here
        if worst_here > tolerance:
            report.passed = False
    offenders.sort(key=lambda row: row[4], reverse=True)
    report.worst = offenders[:worst_count]
    return report


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One row of a layer table"""

    kind: str  # conv | pool | residual | fc | softmax
    name: str
    kernels: int = 0
    size: int = 0
    stride: int = 1
    padding: str = 'same'
    activation: bool = True


class Layer:
    """Stateful wrapper over a functional op; caches form a stack so a layer can be reused"""

    def __init__(self, params: ParamSet, name: str):
        self.params = params
        self.name = name
        self._caches: List[Any] = []

    def reset(self):
        self._caches.clear()

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, dout: Tensor) -> Tensor:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, params: ParamSet, name: str, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: str = 'same', activation: bool = True,
                 dtype=np.float32):
        super().__init__(params, name)
        self.stride = stride
        self.padding = padding
        self.activation = activation
        fan_in = in_channels * kernel * kernel
        self.w = params.add(f"{name}.w", init_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype))
        self.b = params.add(f"{name}.b", np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        out, cache = conv2d(x, self.params[self.w], self.params[self.b], self.stride, self.padding)
        mask = None
        if self.activation:
            out, mask = relu(out)
        self._caches.append((cache, mask))
        return out

    def backward(self, dout: Tensor) -> Tensor:
        cache, mask = self._caches.pop()
        if mask is not None:
            dout = relu_backward(dout, mask)
        dx, dw, db = conv2d_backward(dout, cache)
        self.params.accumulate(self.w, dw)
        self.params.accumulate(self.b, db)
        return dx


class MaxPool2D(Layer):
    def __init__(self, params: ParamSet, name: str, kernel: int, stride: int):
        super().__init__(params, name)
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        out, cache = maxpool2d(x, self.kernel, self.stride)
        self._caches.append(cache)
        return out

    def backward(self, dout: Tensor) -> Tensor:
        return maxpool2d_backward(dout, self._caches.pop())


class ResidualBlock(Layer):
    def __init__(self, params: ParamSet, name: str, channels: int, kernel: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(params, name)
        fan_in = channels * kernel * kernel
        shape = (channels, channels, kernel, kernel)
        self.w1 = params.add(f"{name}.w1", init_uniform(rng, shape, fan_in, dtype))
        self.b1 = params.add(f"{name}.b1", np.zeros(channels, dtype=dtype))
        self.w2 = params.add(f"{name}.w2", init_uniform(rng, shape, fan_in, dtype))
        self.b2 = params.add(f"{name}.b2", np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        out, cache = residual_block(x, p[self.w1], p[self.b1], p[self.w2], p[self.b2])
        self._caches.append(cache)
        return out

    def backward(self, dout: Tensor) -> Tensor:
        dx, dw1, db1, dw2, db2 = residual_block_backward(dout, self._caches.pop())
        self.params.accumulate(self.w1, dw1)
        self.params.accumulate(self.b1, db1)
        self.params.accumulate(self.w2, dw2)
        self.params.accumulate(self.b2, db2)
        return dx


class Dense(Layer):
    def __init__(self, params: ParamSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator,
                 activation: bool = True, dtype=np.float32):
        super().__init__(params, name)
        self.activation = activation
        self.w = params.add(f"{name}.w", init_uniform(rng, (fan_in, fan_out), fan_in, dtype))
        self.b = params.add(f"{name}.b", np.zeros(fan_out, dtype=dtype))

    @property
    def fan_in(self) -> int:
        return self.params[self.w].shape[0]

    def forward(self, x: Tensor) -> Tensor:
        x = x.reshape(x.shape[0], -1)
        out, cache = fully_connected(x, self.params[self.w], self.params[self.b])
        mask = None
        if self.activation:
            out, mask = relu(out)
        self._caches.append((cache, mask))
        return out

    def backward(self, dout: Tensor) -> Tensor:
        x, mask = self._caches.pop()
        if mask is not None:
            dout = relu_backward(dout, mask)
        dx, dw, db = fully_connected_backward(dout, x, self.params[self.w])
        self.params.accumulate(self.w, dw)
        self.params.accumulate(self.b, db)
        return dx


class Flatten(Layer):
    def forward(self, x: Tensor) -> Tensor:
        self._caches.append(x.shape)
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: Tensor) -> Tensor:
        return dout.reshape(self._caches.pop())


class Sequential(Layer):
    def __init__(self, params: ParamSet, name: str, layers: List[Layer]):
        super().__init__(params, name)
        self.layers = layers

    def reset(self):
        for layer in self.layers:
            layer.reset()

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def build_stack(
    specs: List[LayerSpec],
    params: ParamSet,
    name: str,
    in_channels: int,
    spatial: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> Tuple[Sequential, int, int]:
    """Instantiate a layer table; returns (stack, out_channels, out_spatial)

    Dense layers read their fan-in from the running shape, so a table whose
    rows do not chain raises ShapeError here rather than at the first batch.
    """
    layers: List[Layer] = []
    channels, size, flat = in_channels, spatial, None
    for spec in specs:
        if spec.kind == 'conv':
            if flat is not None:
                raise ShapeError(f"{spec.name}: convolution after flattening")
            layers.append(Conv2D(params, spec.name, channels, spec.kernels, spec.size, rng,
                                 spec.stride, spec.padding, spec.activation, dtype))
            channels = spec.kernels
            size = same_padding(size, spec.size, spec.stride)[2] if spec.padding == 'same' \
                else (size - spec.size) // spec.stride + 1
        elif spec.kind == 'pool':
            if spec.stride > size:
                raise ShapeError(f"{spec.name}: pool stride {spec.stride} exceeds the {size}x{size} input")
            layers.append(MaxPool2D(params, spec.name, spec.size, spec.stride))
            size = same_padding(size, spec.size, spec.stride)[2]
        elif spec.kind == 'residual':
            if spec.kernels != channels or spec.stride != 1:
                raise ShapeError(f"{spec.name}: residual block needs {channels} kernels with stride 1")
            layers.append(ResidualBlock(params, spec.name, channels, spec.size, rng, dtype))
        elif spec.kind == 'fc':
            if flat is None:
                layers.append(Flatten(params, f"{spec.name}.flatten"))
                flat = channels * size * size
            layers.append(Dense(params, spec.name, flat, spec.kernels, rng, spec.activation, dtype))
            flat = spec.kernels
        else:
            raise ValueError(f"Unsupported layer kind in stack: {spec.kind}")
    out_channels = flat if flat is not None else channels
    return Sequential(params, name, layers), out_channels, size


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def write_checkpoint(path: Path, params: ParamSet, header: Dict[str, Any]):
    """JSON header line followed by little-endian float32 blobs in header order"""
    full = dict(header)
    full.update({
        'format': CHECKPOINT_FORMAT,
        'version': CHECKPOINT_VERSION,
        'dtype': '<f4',
        'step': int(params.step),
        'params': [{'name': name, 'shape': list(p.shape)} for name, p in params.items()],
    })
    with open(path, 'wb') as f:
        f.write(json.dumps(full, sort_keys=True).encode('utf-8'))
        f.write(b'\n')
        for p in params.params.values():
            f.write(np.ascontiguousarray(p, dtype='<f4').tobytes())
    logger.info(f"Saved checkpoint to {path}")


def read_checkpoint(path: Path) -> Tuple[Dict[str, Any], Dict[str, Tensor]]:
    """Parse a checkpoint into (header, state dict)"""
    try:
        with open(path, 'rb') as f:
            header = json.loads(f.readline().decode('utf-8'))
            blob = f.read()
    except (OSError, ValueError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if header.get('format') != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a navnet checkpoint")

    state: Dict[str, Tensor] = OrderedDict()
    offset = 0
    for entry in header['params']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path} is truncated at parameter {entry['name']}")
        state[entry['name']] = np.frombuffer(blob[offset:end], dtype='<f4').reshape(shape).astype(np.float32)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - offset} trailing bytes")
    return header, state


# ---------------------------------------------------------------------------
# Layer gradient suite
# ---------------------------------------------------------------------------

def _op_check(forward: Callable, backward: Callable, inputs: Dict[str, Tensor], rng: np.random.Generator,
              samples: int, tolerance: float, seed: int, bug_scale: float = 1.0,
              one_sided: bool = False) -> GradCheckReport:
    """Check an op through the scalar loss sum(out * R) for a fixed random R"""
    out, cache = forward()
    weights = rng.standard_normal(out.shape)
    analytic = {name: g * bug_scale for name, g in backward(weights, cache).items()}
    return gradient_check(lambda: float(np.sum(forward()[0] * weights)), inputs, analytic,
                          tolerance, samples, seed=seed, one_sided=one_sided)


def layer_gradient_checks(
    samples: int = 100,
    tolerance: float = 1e-3,
    seed: int = 0,
    inject_bug: bool = False,
) -> Dict[str, GradCheckReport]:
    """Finite-difference checks for every op in float64; inject_bug doubles the conv gradients"""
    rng = np.random.default_rng(seed)
    bug = 2.0 if inject_bug else 1.0
    reports: Dict[str, GradCheckReport] = OrderedDict()

    def conv_case(x_shape, w_shape, stride, padding):
        t = {'x': rng.standard_normal(x_shape), 'w': rng.standard_normal(w_shape), 'b': rng.standard_normal(w_shape[0])}

        def backward(dout, cache):
            dx, dw, db = conv2d_backward(dout, cache)
            return {'x': dx, 'w': dw, 'b': db}

        return _op_check(lambda: conv2d(t['x'], t['w'], t['b'], stride, padding), backward, t, rng,
                         samples, tolerance, seed, bug)

    reports['conv2d_3x3_same'] = conv_case((2, 2, 6, 6), (3, 2, 3, 3), 1, 'same')
    reports['conv2d_4x4_same'] = conv_case((1, 2, 6, 6), (2, 2, 4, 4), 1, 'same')
    reports['conv2d_3x3_stride2_valid'] = conv_case((1, 2, 7, 7), (2, 2, 3, 3), 2, 'valid')

    for kernel, stride in ((3, 2), (3, 1)):
        t = {'x': rng.standard_normal((2, 2, 7, 7))}
        reports[f'maxpool2d_{kernel}x{kernel}_stride{stride}'] = _op_check(
            lambda: maxpool2d(t['x'], kernel, stride),
            lambda dout, cache: {'x': maxpool2d_backward(dout, cache)},
            t, rng, samples, tolerance, seed, one_sided=True,
        )

    t = {name: rng.standard_normal(shape) * 0.5 for name, shape in
         (('x', (2, 3, 5, 5)), ('w1', (3, 3, 3, 3)), ('b1', (3,)), ('w2', (3, 3, 3, 3)), ('b2', (3,)))}

    def residual_backward(dout, cache):
        return dict(zip(('x', 'w1', 'b1', 'w2', 'b2'), residual_block_backward(dout, cache)))

    reports['residual_block'] = _op_check(
        lambda: residual_block(t['x'], t['w1'], t['b1'], t['w2'], t['b2']),
        residual_backward, t, rng, samples, tolerance, seed, one_sided=True,
    )

    fc = {'x': rng.standard_normal((4, 6)), 'w': rng.standard_normal((6, 5)), 'b': rng.standard_normal(5)}

    def fc_backward(dout, x):
        dx, dw, db = fully_connected_backward(dout, x, fc['w'])
        return {'x': dx, 'w': dw, 'b': db}

    reports['fully_connected'] = _op_check(lambda: fully_connected(fc['x'], fc['w'], fc['b']), fc_backward,
                                           fc, rng, samples, tolerance, seed)

    cm = {'x': rng.standard_normal((2, 4, 3, 3))}
    reports['channel_max'] = _op_check(lambda: channel_max(cm['x']),
                                       lambda dout, cache: {'x': channel_max_backward(dout, cache)},
                                       cm, rng, samples, tolerance, seed)

    theta = ParamSet()
    theta.add('theta', rng.standard_normal((3, 4)))
    logits = rng.standard_normal((4, config.NUM_ACTIONS))
    labels = one_hot(rng.integers(0, config.NUM_ACTIONS, size=4))
    theta.zero_grad()
    _, dlogits = softmax_ce_l2_loss(logits, labels, theta, 0.01)
    analytic = {'logits': dlogits, 'theta': theta.grads['theta'].copy()}
    reports['softmax_ce_l2_loss'] = gradient_check(
        lambda: softmax_ce_l2_loss(logits, labels, theta, 0.01)[0],
        {'logits': logits, 'theta': theta['theta']}, analytic, tolerance, samples, seed=seed,
    )
    return reports
