"""Dense array operations with matching backward rules.

Tensors are plain numpy ndarrays (row-major buffers with shape metadata).
Every forward operation returns its output together with a small context
object; the paired ``*_backward`` function consumes that context and the
upstream gradient. There is no tape or graph: callers chain the backward
calls in reverse order themselves.

All operations are pure. Same inputs (plus the same generator state for
dropout) produce bitwise-identical outputs. Outputs are checked for
NaN/Inf and a :class:`NonFiniteError` is raised as soon as one appears.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError

_default_dtype = np.float32


def set_default_dtype(dtype) -> None:
    """Select the global working precision (numpy float32 or float64)."""
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported precision {dt}; use float32 or float64")
    _default_dtype = dt.type


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the global precision."""
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def ensure_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} contains NaN or Inf")


@dataclass
class LayerGrad:
    """Backward result: gradient w.r.t. the input plus named parameter grads.

    ``param_grads`` is empty for parameterless layers. Shapes always match
    the corresponding forward-pass arrays.
    """

    input_grad: np.ndarray
    param_grads: dict[str, np.ndarray] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Read-only strided view of all kh x kw patches: (N, C, ho, wo, kh, kw)."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )


@dataclass
class Conv2dCtx:
    cols: np.ndarray
    weight: np.ndarray
    stride: int
    padding: int
    padded_shape: tuple[int, ...]
    out_hw: tuple[int, int]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int = 1, padding: int = 0) -> tuple[np.ndarray, Conv2dCtx]:
    """Cross-correlate a batch with a filter bank.

    Args:
        x: input of shape (N, C, H, W).
        weight: filters of shape (F, C, kh, kw). No kernel flip is applied.
        bias: per-filter offsets of shape (F,).
        stride: step between patch origins.
        padding: symmetric zero padding added to H and W before sliding.

    Returns output of shape (N, F, H', W') with H' = (H + 2*padding - kh)
    // stride + 1, plus the context for :func:`conv2d_backward`. The
    context keeps the unfolded patch matrix so backward reuses it.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigError(
            f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ConfigError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {cw}")
    if bias.shape != (f,):
        raise ConfigError(f"conv2d bias shape {bias.shape} does not match {f} filters")
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv2d padding must be >= 0, got {padding}")
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ConfigError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    view = _windows(xp, kh, kw, stride)
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)
                                ).reshape(n * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(f, -1).T
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = out + bias.reshape(1, f, 1, 1)
    ensure_finite("conv2d output", out)
    return out, Conv2dCtx(cols, weight, stride, padding, xp.shape, (ho, wo))


def conv2d_backward(ctx: Conv2dCtx, grad_out: np.ndarray,
                    need_input_grad: bool = True) -> LayerGrad:
    """Gradients of conv2d w.r.t. input, weight, and bias."""
    weight = ctx.weight
    f, c, kh, kw = weight.shape
    stride = ctx.stride
    ho, wo = ctx.out_hw
    n = ctx.padded_shape[0]
    gy = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)
                              ).reshape(n * ho * wo, f)
    grad_b = gy.sum(axis=0)
    grad_w = (gy.T @ ctx.cols).reshape(f, c, kh, kw)
    grad_x = None
    if need_input_grad:
        dcols = (gy @ weight.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(ctx.padded_shape, dtype=grad_out.dtype)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                    dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        p = ctx.padding
        grad_x = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        ensure_finite("conv2d input grad", grad_x)
    ensure_finite("conv2d weight grad", grad_w)
    return LayerGrad(grad_x, {"weight": grad_w, "bias": grad_b})


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


@dataclass
class MaxPool2Ctx:
    in_shape: tuple[int, ...]
    argmax: np.ndarray


def max_pool2(x: np.ndarray) -> tuple[np.ndarray, MaxPool2Ctx]:
    """2x2 max pooling with stride 2. H and W must be even.

    Ties route the gradient to the first maximal element in row-major
    window order, so backward is deterministic.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"max_pool2 needs even extents, got {h}x{w}")
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    ensure_finite("max_pool2 output", out)
    return out, MaxPool2Ctx(x.shape, idx)


def max_pool2_backward(ctx: MaxPool2Ctx, grad_out: np.ndarray) -> LayerGrad:
    n, c, h, w = ctx.in_shape
    gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(gwin, ctx.argmax[..., None], grad_out[..., None], axis=-1)
    grad_x = (gwin.reshape(n, c, h // 2, w // 2, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(n, c, h, w))
    return LayerGrad(grad_x)


# ---------------------------------------------------------------------------
# dense / activations
# ---------------------------------------------------------------------------


@dataclass
class AffineCtx:
    x: np.ndarray
    weight: np.ndarray


def affine(x: np.ndarray, weight: np.ndarray, bias: np.ndarray
           ) -> tuple[np.ndarray, AffineCtx]:
    """out = x @ weight + bias for x of shape (N, D) and weight (D, M)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigError(
            f"affine shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ConfigError(
            f"affine bias shape {bias.shape} does not match width {weight.shape[1]}")
    out = x @ weight + bias
    ensure_finite("affine output", out)
    return out, AffineCtx(x, weight)


def affine_backward(ctx: AffineCtx, grad_out: np.ndarray) -> LayerGrad:
    grad_x = grad_out @ ctx.weight.T
    grad_w = ctx.x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    ensure_finite("affine input grad", grad_x)
    return LayerGrad(grad_x, {"weight": grad_w, "bias": grad_b})


@dataclass
class LeakyReluCtx:
    positive: np.ndarray
    slope: float


def leaky_relu(x: np.ndarray, slope: float = 0.01) -> tuple[np.ndarray, LeakyReluCtx]:
    """x where x > 0, slope * x elsewhere. The slope applies at x == 0."""
    if not 0.0 <= slope < 1.0:
        raise ConfigError(f"leaky_relu slope must be in [0, 1), got {slope}")
    positive = x > 0
    out = np.where(positive, x, slope * x)
    ensure_finite("leaky_relu output", out)
    return out, LeakyReluCtx(positive, slope)


def leaky_relu_backward(ctx: LeakyReluCtx, grad_out: np.ndarray) -> LayerGrad:
    grad_x = np.where(ctx.positive, grad_out, ctx.slope * grad_out)
    return LayerGrad(grad_x)


def sigmoid(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise logistic function, saturation-safe for large |x|.

    The context is the output itself (backward only needs it).
    """
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    ensure_finite("sigmoid output", out)
    return out, out


def sigmoid_backward(out: np.ndarray, grad_out: np.ndarray) -> LayerGrad:
    return LayerGrad(grad_out * out * (1.0 - out))


def softmax(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax over the last axis, with max-subtraction.

    Rows of the output sum to 1. The context is the output.
    """
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)
    ensure_finite("softmax output", out)
    return out, out


def softmax_backward(out: np.ndarray, grad_out: np.ndarray) -> LayerGrad:
    """Full Jacobian product: s * (g - sum(g * s)) per row."""
    inner = (grad_out * out).sum(axis=-1, keepdims=True)
    return LayerGrad(out * (grad_out - inner))


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


@dataclass
class ConcatCtx:
    axis: int
    sizes: tuple[int, ...]


def concat(inputs: list[np.ndarray], axis: int) -> tuple[np.ndarray, ConcatCtx]:
    """Concatenate along one axis; all other extents must agree."""
    if not inputs:
        raise ConfigError("concat needs at least one input")
    ref = list(inputs[0].shape)
    for t in inputs[1:]:
        other = list(t.shape)
        ref_rest = ref[:axis] + ref[axis + 1:]
        other_rest = other[:axis] + other[axis + 1:]
        if len(ref) != len(other) or ref_rest != other_rest:
            raise ConfigError(
                "concat extent mismatch off axis "
                f"{axis}: {[tuple(t.shape) for t in inputs]}")
    out = np.concatenate(inputs, axis=axis)
    return out, ConcatCtx(axis, tuple(t.shape[axis] for t in inputs))


def concat_backward(ctx: ConcatCtx, grad_out: np.ndarray) -> list[np.ndarray]:
    """Split the upstream gradient back into one piece per input."""
    offsets = np.cumsum(ctx.sizes)[:-1]
    return np.split(grad_out, offsets, axis=ctx.axis)


@dataclass
class DropoutCtx:
    mask: np.ndarray | None
    scale: float


def dropout(x: np.ndarray, rate: float, mode: str,
            rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, DropoutCtx]:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Eval mode (and rate 0) is the identity. Train mode requires an explicit
    generator so results are reproducible.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x, DropoutCtx(None, 1.0)
    if rng is None:
        raise ConfigError("dropout in train mode needs a random generator")
    mask = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = x * (mask * np.asarray(scale, dtype=x.dtype))
    return out, DropoutCtx(mask, scale)


def dropout_backward(ctx: DropoutCtx, grad_out: np.ndarray) -> LayerGrad:
    if ctx.mask is None:
        return LayerGrad(grad_out)
    return LayerGrad(grad_out * (ctx.mask * np.asarray(ctx.scale, dtype=grad_out.dtype)))
