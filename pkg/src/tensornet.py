from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericalError


logger = logging.getLogger(__name__)

MODES = ("train", "eval")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 2
    encoder_blocks: int = 3
    base_features: int = 128
    convs_per_block: int = 2
    kernel_size: int = 3
    out_channels: int = 1
    mve_head: bool = False          # extra log-variance channel per output
    upsample: str = "transpose"     # "transpose" | "nearest"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise DataError("in_channels and out_channels must be >= 1")
        if self.encoder_blocks < 1:
            raise DataError(f"encoder_blocks must be >= 1, got {self.encoder_blocks}")
        if self.base_features < 1:
            raise DataError(f"base_features must be >= 1, got {self.base_features}")
        if self.convs_per_block < 1:
            raise DataError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise DataError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.upsample not in ("transpose", "nearest"):
            raise DataError(f"upsample must be 'transpose' or 'nearest', got {self.upsample!r}")
        if not 0.0 <= self.bn_momentum <= 1.0:
            raise DataError(f"bn_momentum must lie in [0, 1], got {self.bn_momentum}")
        if self.bn_eps <= 0:
            raise DataError(f"bn_eps must be > 0, got {self.bn_eps}")

    def features(self, level: int) -> int:
        return self.base_features * 2 ** level

    @property
    def head_channels(self) -> int:
        return self.out_channels * (2 if self.mve_head else 1)

    @property
    def divisor(self) -> int:
        return 2 ** self.encoder_blocks

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "UNetConfig":
        return cls(**doc)


# -----------------------------
# Parameter count (closed form)
# -----------------------------

def conv_parameter_count(cin: int, cout: int, kernel: int, bias: bool = True) -> int:
    return kernel * kernel * cin * cout + (cout if bias else 0)


def _block_count(cin: int, cout: int, cfg: UNetConfig) -> int:
    total = 0
    for j in range(cfg.convs_per_block):
        total += conv_parameter_count(cin if j == 0 else cout, cout, cfg.kernel_size) + 2 * cout
    return total


def count_parameters(cfg: UNetConfig) -> int:
    """Trainable scalars: conv kernels and biases plus batch-norm scale/shift."""
    total = 0
    cin = cfg.in_channels
    for level in range(cfg.encoder_blocks):
        total += _block_count(cin, cfg.features(level), cfg)
        cin = cfg.features(level)
    total += _block_count(cin, cfg.features(cfg.encoder_blocks), cfg)
    for level in reversed(range(cfg.encoder_blocks)):
        f, f_up = cfg.features(level), cfg.features(level + 1)
        up_kernel = 2 if cfg.upsample == "transpose" else cfg.kernel_size
        total += conv_parameter_count(f_up, f, up_kernel)
        total += _block_count(2 * f, f, cfg)
    total += conv_parameter_count(cfg.features(0), cfg.head_channels, 1)
    return total


# -----------------------------
# Parameter store
# -----------------------------

class ParameterStore:
    """
    Named trainable tensors with their gradients and Adam moments, plus the
    batch-norm running statistics (buffers, not trainable).

    A train-mode forward leaves its intermediate activations in `tape`;
    backward consumes them.
    """

    def __init__(self, cfg: UNetConfig, dtype: Any = np.float32) -> None:
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step = 0
        self.tape: Optional[Dict[str, Any]] = None

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        self.buffers[name] = np.asarray(value, dtype=self.dtype)

    def names(self) -> List[str]:
        return list(self.params)

    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def snapshot(self) -> Dict[str, Dict[str, np.ndarray]]:
        """Copy of parameters and buffers (no optimizer state)."""
        return {
            "params": {k: v.copy() for k, v in self.params.items()},
            "buffers": {k: v.copy() for k, v in self.buffers.items()},
        }

    def restore(self, snap: Dict[str, Dict[str, np.ndarray]]) -> None:
        for k, v in snap["params"].items():
            self.params[k][...] = v
        for k, v in snap["buffers"].items():
            self.buffers[k][...] = v
        self.tape = None

    def astype(self, dtype: Any) -> "ParameterStore":
        """Same weights in another scalar type; optimizer state is copied too."""
        out = ParameterStore(self.cfg, dtype)
        for k, v in self.params.items():
            out.add(k, v)
            out.adam_m[k][...] = self.adam_m[k]
            out.adam_v[k][...] = self.adam_v[k]
        for k, v in self.buffers.items():
            out.add_buffer(k, v)
        out.step = self.step
        return out


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _add_conv(store: ParameterStore, rng: np.random.Generator, name: str, cin: int, cout: int, k: int) -> None:
    store.add(f"{name}.weight", _he(rng, (cout, cin, k, k), cin * k * k))
    store.add(f"{name}.bias", np.zeros(cout))


def _add_bn(store: ParameterStore, name: str, c: int) -> None:
    store.add(f"{name}.gamma", np.ones(c))
    store.add(f"{name}.beta", np.zeros(c))
    store.add_buffer(f"{name}.running_mean", np.zeros(c))
    store.add_buffer(f"{name}.running_var", np.ones(c))


def _add_block(store: ParameterStore, rng: np.random.Generator, prefix: str, cin: int, cout: int, cfg: UNetConfig) -> None:
    for j in range(cfg.convs_per_block):
        _add_conv(store, rng, f"{prefix}.conv{j}", cin if j == 0 else cout, cout, cfg.kernel_size)
        _add_bn(store, f"{prefix}.bn{j}", cout)


def build_unet(cfg: UNetConfig, seed: int = 0, dtype: Any = np.float32) -> ParameterStore:
    """
    Allocate a U-Net: `encoder_blocks` levels of conv/BN/ReLU blocks with 2x2
    max-pooling, a bottleneck block, a mirrored decoder with skip
    concatenation, and a 1x1 head producing logits. He-normal init drawn in
    creation order from `seed`.
    """
    rng = np.random.default_rng(seed)
    store = ParameterStore(cfg, dtype)
    cin = cfg.in_channels
    for level in range(cfg.encoder_blocks):
        _add_block(store, rng, f"enc{level}", cin, cfg.features(level), cfg)
        cin = cfg.features(level)
    _add_block(store, rng, "bottleneck", cin, cfg.features(cfg.encoder_blocks), cfg)
    for level in reversed(range(cfg.encoder_blocks)):
        f, f_up = cfg.features(level), cfg.features(level + 1)
        if cfg.upsample == "transpose":
            store.add(f"dec{level}.up.weight", _he(rng, (f_up, f, 2, 2), f_up))
            store.add(f"dec{level}.up.bias", np.zeros(f))
        else:
            _add_conv(store, rng, f"dec{level}.up", f_up, f, cfg.kernel_size)
        _add_block(store, rng, f"dec{level}", 2 * f, f, cfg)
    _add_conv(store, rng, "head", cfg.features(0), cfg.head_channels, 1)

    expected = count_parameters(cfg)
    if store.trainable_count() != expected:
        raise AssertionError(f"Allocated {store.trainable_count()} parameters, closed form says {expected}")
    logger.debug("Built U-Net with %d trainable parameters", expected)
    return store


# -----------------------------
# Primitive layers (forward returns (out, cache))
# -----------------------------

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Any]:
    """Stride-1 'same' convolution (cross-correlation) with zero padding k//2."""
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))        # (N, C, H, W, k, k)
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))   # (N, H, W, O)
    out = np.moveaxis(out, 3, 1) + b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype), (xp, w, x.shape)


def conv2d_backward(dout: np.ndarray, cache: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    xp, w, x_shape = cache
    k = w.shape[-1]
    p = k // 2
    _, _, h, wd = x_shape
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))   # (O, C, k, k)
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0]))   # (N, H, W, C)
            dxp[:, :, i:i + h, j:j + wd] += np.moveaxis(contrib, 3, 1)
    dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
    return np.ascontiguousarray(dx), dw.astype(w.dtype, copy=False), db


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tuple[np.ndarray, Any]:
    """
    Per-channel normalization. Train mode normalizes with the batch's biased
    variance and folds (mean, unbiased variance) into the running statistics
    in place; eval mode reads the running statistics only.
    """
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        return gamma[None, :, None, None] * xhat + beta[None, :, None, None], None

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    if update_stats:
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    return out, (xhat, inv_std, gamma)


def batchnorm_backward(dout: np.ndarray, cache: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if cache is None:
        raise NumericalError("Batch-norm backward needs a train-mode forward")
    xhat, inv_std, gamma = cache
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    dx = (inv_std[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    active = x > 0
    return np.where(active, x, 0).astype(x.dtype, copy=False), active


def relu_backward(dout: np.ndarray, active: np.ndarray) -> np.ndarray:
    return np.where(active, dout, 0).astype(dout.dtype, copy=False)


def maxpool_forward(x: np.ndarray) -> Tuple[np.ndarray, Any]:
    """2x2 stride-2 max-pool; ties go to the first position in row-major order."""
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, arg, axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dout: np.ndarray, cache: Any) -> np.ndarray:
    arg, (n, c, h, w) = cache
    routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(routed, arg, dout[..., None], axis=-1)
    return routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def conv_transpose2x2_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, Any]:
    """Stride-2 2x2 transposed convolution; w has shape (Cin, Cout, 2, 2)."""
    n, _, h, wd = x.shape
    cout = w.shape[1]
    t = np.tensordot(x, w, axes=([1], [0]))                 # (N, H, W, Cout, 2, 2)
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * wd)
    out = out + b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype), (x, w)


def conv_transpose2x2_backward(dout: np.ndarray, cache: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    n, _, h, wd = x.shape
    cout = w.shape[1]
    d = dout.reshape(n, cout, h, 2, wd, 2)
    dx = np.tensordot(d, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, d, axes=([0, 2, 3], [0, 2, 4]))   # (Cin, Cout, 2, 2)
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def upsample_nearest_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest_backward(dout: np.ndarray) -> np.ndarray:
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_forward(skip: np.ndarray, up: np.ndarray) -> np.ndarray:
    return np.concatenate([skip, up], axis=1)


def concat_backward(dout: np.ndarray, skip_channels: int) -> Tuple[np.ndarray, np.ndarray]:
    return dout[:, :skip_channels], dout[:, skip_channels:]


# -----------------------------
# Network
# -----------------------------

def _check_input(store: ParameterStore, batch: np.ndarray) -> np.ndarray:
    cfg = store.cfg
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise DataError(f"Expected a (N, C, H, W) batch, got shape {batch.shape}")
    if batch.shape[1] != cfg.in_channels:
        raise DataError(f"Expected {cfg.in_channels} input channels, got {batch.shape[1]}")
    h, w = batch.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise DataError(f"Spatial dims {(h, w)} are not divisible by 2**encoder_blocks = {cfg.divisor}")
    return batch.astype(store.dtype, copy=False)


def _block_forward(store: ParameterStore, prefix: str, x: np.ndarray, mode: str, tape: Optional[Dict], update_stats: bool) -> np.ndarray:
    cfg = store.cfg
    p, buf = store.params, store.buffers
    for j in range(cfg.convs_per_block):
        conv, bn = f"{prefix}.conv{j}", f"{prefix}.bn{j}"
        x, c_cache = conv2d_forward(x, p[f"{conv}.weight"], p[f"{conv}.bias"])
        x, b_cache = batchnorm_forward(
            x, p[f"{bn}.gamma"], p[f"{bn}.beta"], buf[f"{bn}.running_mean"], buf[f"{bn}.running_var"],
            mode, cfg.bn_momentum, cfg.bn_eps, update_stats,
        )
        x, r_cache = relu_forward(x)
        if tape is not None:
            tape[conv] = c_cache
            tape[bn] = b_cache
            tape[f"{prefix}.relu{j}"] = r_cache
    return x


def _block_backward(store: ParameterStore, prefix: str, d: np.ndarray, tape: Dict) -> np.ndarray:
    g = store.grads
    for j in reversed(range(store.cfg.convs_per_block)):
        conv, bn = f"{prefix}.conv{j}", f"{prefix}.bn{j}"
        d = relu_backward(d, tape[f"{prefix}.relu{j}"])
        d, dgamma, dbeta = batchnorm_backward(d, tape[bn])
        g[f"{bn}.gamma"] += dgamma
        g[f"{bn}.beta"] += dbeta
        d, dw, db = conv2d_backward(d, tape[conv])
        g[f"{conv}.weight"] += dw
        g[f"{conv}.bias"] += db
    return d


def forward(store: ParameterStore, batch: np.ndarray, mode: str = "eval", update_stats: bool = True) -> np.ndarray:
    """
    Logits of shape (N, head_channels, H, W).

    Train mode normalizes with batch statistics, updates the running
    statistics (unless `update_stats` is off) and keeps the activations on
    `store.tape` for backward. Eval mode has no side effects.
    """
    if mode not in MODES:
        raise DataError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = store.cfg
    x = _check_input(store, batch)
    p = store.params
    tape: Optional[Dict[str, Any]] = {} if mode == "train" else None

    skips: List[np.ndarray] = []
    for level in range(cfg.encoder_blocks):
        x = _block_forward(store, f"enc{level}", x, mode, tape, update_stats)
        skips.append(x)
        x, pool_cache = maxpool_forward(x)
        if tape is not None:
            tape[f"skip{level}"] = skips[-1].shape[1]
            tape[f"pool{level}"] = pool_cache

    x = _block_forward(store, "bottleneck", x, mode, tape, update_stats)

    for level in reversed(range(cfg.encoder_blocks)):
        up = f"dec{level}.up"
        if cfg.upsample == "transpose":
            x, u_cache = conv_transpose2x2_forward(x, p[f"{up}.weight"], p[f"{up}.bias"])
        else:
            x, u_cache = conv2d_forward(upsample_nearest_forward(x), p[f"{up}.weight"], p[f"{up}.bias"])
        if tape is not None:
            tape[up] = u_cache
        x = concat_forward(skips[level], x)
        x = _block_forward(store, f"dec{level}", x, mode, tape, update_stats)

    logits, h_cache = conv2d_forward(x, p["head.weight"], p["head.bias"])
    if tape is not None:
        tape["head"] = h_cache
        store.tape = tape
    return logits


def backward(store: ParameterStore, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Accumulate d(loss)/d(param) into `store.grads` from the gradient at the
    logits, consuming the tape of the last train-mode forward.
    """
    tape = store.tape
    if tape is None:
        raise NumericalError("backward() called without a retained train-mode forward pass")
    cfg = store.cfg
    d = np.asarray(loss_grad, dtype=store.dtype)
    g = store.grads

    d, dw, db = conv2d_backward(d, tape["head"])
    g["head.weight"] += dw
    g["head.bias"] += db

    skip_grads: Dict[int, np.ndarray] = {}
    for level in range(cfg.encoder_blocks):
        d = _block_backward(store, f"dec{level}", d, tape)
        skip_grads[level], d = concat_backward(d, tape[f"skip{level}"])
        up = f"dec{level}.up"
        if cfg.upsample == "transpose":
            d, dw, db = conv_transpose2x2_backward(d, tape[up])
        else:
            d, dw, db = conv2d_backward(d, tape[up])
            d = upsample_nearest_backward(d)
        g[f"{up}.weight"] += dw
        g[f"{up}.bias"] += db

    d = _block_backward(store, "bottleneck", d, tape)
    for level in reversed(range(cfg.encoder_blocks)):
        d = maxpool_backward(d, tape[f"pool{level}"]) + skip_grads[level]
        d = _block_backward(store, f"enc{level}", d, tape)

    store.tape = None
    return store.grads


# -----------------------------
# Optimizer
# -----------------------------

def adam_step(
    store: ParameterStore,
    grads: Optional[Dict[str, np.ndarray]] = None,
    lr: float = 2e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: Optional[int] = None,
) -> ParameterStore:
    """Bias-corrected Adam update, in place. `t` defaults to the store's next step."""
    grads = store.grads if grads is None else grads
    bad = [name for name, gr in grads.items() if not np.all(np.isfinite(gr))]
    if bad:
        raise NumericalError(f"Non-finite gradients in {len(bad)} tensor(s): {', '.join(bad[:5])}")
    t = store.step + 1 if t is None else int(t)
    if t < 1:
        raise DataError(f"Adam step t must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        gr = grads[name]
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * gr
        v *= beta2
        v += (1.0 - beta2) * gr * gr
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    store.step = t
    return store
