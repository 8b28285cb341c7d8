"""Numeric verification of every analytic gradient in the package.

Central finite differences (epsilon 1e-4, 64-bit) are the reference; the
suite reports the worst relative error per component and a pass/fail
against each component's threshold. Inputs for kinked functions (leaky
ReLU, max pooling) are sampled away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses, tensor
from .model import ModelConfig, backward, build, forward
from .tensor import default_dtype

EPS = 1e-4

# configuration of the small network used for the composite check
CHECK_MODEL_CONFIG = ModelConfig(
    input_h=32, input_w=22, crop_rows=(6, 12, 14), conv_channels=(4, 8, 8),
    conv_kernels=(7, 5, 3), fc_width=32, k_minus_1=8, dropout_rate=0.0)


def numeric_gradient(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central-difference gradient of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    work = x.copy()
    for i in range(x.size):
        orig = work.flat[i]
        work.flat[i] = orig + eps
        f_plus = f(work)
        work.flat[i] = orig - eps
        f_minus = f(work)
        work.flat[i] = orig
        grad.flat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative disagreement of two gradient estimates."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    b = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    """Push values out of (-margin, margin) so kink sampling stays safe."""
    return x + np.sign(x + 1e-12) * margin


# ---------------------------------------------------------------------------
# per-component checks, each returning its worst relative error
# ---------------------------------------------------------------------------


def _check_conv2d(rng: np.random.Generator) -> float:
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4) * 0.1
    probe = rng.standard_normal((2, 4, 6, 6))

    out, ctx = tensor.conv2d(x, w, b, stride=1)
    lg = tensor.conv2d_backward(ctx, probe)
    worst = rel_error(lg.input_grad,
                      numeric_gradient(lambda v: float((tensor.conv2d(v, w, b)[0] * probe).sum()), x))
    worst = max(worst, rel_error(
        lg.param_grads["weight"],
        numeric_gradient(lambda v: float((tensor.conv2d(x, v, b)[0] * probe).sum()), w)))
    worst = max(worst, rel_error(
        lg.param_grads["bias"],
        numeric_gradient(lambda v: float((tensor.conv2d(x, w, v)[0] * probe).sum()), b)))
    return worst


def _check_max_pool2(rng: np.random.Generator) -> float:
    # distinct, well-separated values so no argmax flips under perturbation
    x = rng.permutation(72).astype(np.float64).reshape(1, 2, 6, 6) * 0.1
    probe = rng.standard_normal((1, 2, 3, 3))
    _, ctx = tensor.max_pool2(x)
    lg = tensor.max_pool2_backward(ctx, probe)
    num = numeric_gradient(lambda v: float((tensor.max_pool2(v)[0] * probe).sum()), x)
    return rel_error(lg.input_grad, num)


def _check_affine(rng: np.random.Generator) -> float:
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    probe = rng.standard_normal((3, 4))
    _, ctx = tensor.affine(x, w, b)
    lg = tensor.affine_backward(ctx, probe)
    worst = rel_error(lg.input_grad,
                      numeric_gradient(lambda v: float((tensor.affine(v, w, b)[0] * probe).sum()), x))
    worst = max(worst, rel_error(
        lg.param_grads["weight"],
        numeric_gradient(lambda v: float((tensor.affine(x, v, b)[0] * probe).sum()), w)))
    worst = max(worst, rel_error(
        lg.param_grads["bias"],
        numeric_gradient(lambda v: float((tensor.affine(x, w, v)[0] * probe).sum()), b)))
    return worst


def _check_leaky_relu(rng: np.random.Generator) -> float:
    x = _away_from_zero(rng.standard_normal((4, 6)))
    probe = rng.standard_normal((4, 6))
    _, ctx = tensor.leaky_relu(x, 0.01)
    lg = tensor.leaky_relu_backward(ctx, probe)
    num = numeric_gradient(lambda v: float((tensor.leaky_relu(v, 0.01)[0] * probe).sum()), x)
    return rel_error(lg.input_grad, num)


def _check_sigmoid(rng: np.random.Generator) -> float:
    x = rng.standard_normal((4, 7)) * 3.0
    probe = rng.standard_normal((4, 7))
    out, ctx = tensor.sigmoid(x)
    lg = tensor.sigmoid_backward(ctx, probe)
    num = numeric_gradient(lambda v: float((tensor.sigmoid(v)[0] * probe).sum()), x)
    return rel_error(lg.input_grad, num)


def _check_softmax(rng: np.random.Generator) -> float:
    x = rng.standard_normal((3, 6))
    probe = rng.standard_normal((3, 6))
    out, ctx = tensor.softmax(x)
    lg = tensor.softmax_backward(ctx, probe)
    num = numeric_gradient(lambda v: float((tensor.softmax(v)[0] * probe).sum()), x)
    return rel_error(lg.input_grad, num)


def _check_dropout(rng: np.random.Generator) -> float:
    x = rng.standard_normal((5, 8))
    probe = rng.standard_normal((5, 8))
    seed = int(rng.integers(1 << 31))

    def run(v):
        out, _ = tensor.dropout(v, 0.4, "train", np.random.default_rng(seed))
        return float((out * probe).sum())

    _, ctx = tensor.dropout(x, 0.4, "train", np.random.default_rng(seed))
    lg = tensor.dropout_backward(ctx, probe)
    return rel_error(lg.input_grad, numeric_gradient(run, x))


def _check_cross_entropy(rng: np.random.Generator) -> float:
    o = rng.uniform(0.1, 0.9, (3, 6))
    t = (rng.random((3, 6)) < 0.5).astype(np.float64)
    _, grad = losses.cross_entropy(o, t)
    num = numeric_gradient(lambda v: losses.cross_entropy(v, t)[0], o)
    return rel_error(grad, num)


def _check_emd2(rng: np.random.Generator) -> float:
    p_hat = rng.random((3, 5)) + 0.05
    p_hat /= p_hat.sum(axis=1, keepdims=True)
    p = rng.random((3, 5)) + 0.05
    p /= p.sum(axis=1, keepdims=True)
    _, grad = losses.emd2(p_hat, p)
    num = numeric_gradient(lambda v: losses.emd2_value(v, p), p_hat)
    return rel_error(grad, num)


def _check_odl(rng: np.random.Generator) -> float:
    o = rng.uniform(0.1, 0.9, (3, 6))
    counts = rng.integers(0, 7, 3)
    t = (np.arange(6)[None, :] < counts[:, None]).astype(np.float64)
    report, grad = losses.odl(o, t, lam=10.0)
    num = numeric_gradient(lambda v: losses.odl(v, t, lam=10.0)[0].total, o)
    return rel_error(grad, num)


def _check_gender_bce(rng: np.random.Generator) -> float:
    p = rng.uniform(0.1, 0.9, 8)
    t = (rng.random(8) < 0.5).astype(np.float64)
    _, grad = losses.gender_bce(p, t)
    num = numeric_gradient(lambda v: losses.gender_bce(v, t)[0], p)
    return rel_error(grad, num)


def _check_euclidean(rng: np.random.Generator) -> float:
    pred = rng.standard_normal(6) * 10
    truth = rng.standard_normal(6) * 10
    _, grad = losses.baseline_regression_loss("euclidean", pred, truth)
    num = numeric_gradient(
        lambda v: losses.baseline_regression_loss("euclidean", v, truth)[0], pred)
    return rel_error(grad, num)


def check_model(samples: int = 40, seed: int = 3,
                config: ModelConfig | None = None, lam: float = 10.0,
                eps: float = 1e-5) -> dict[str, float]:
    """Finite differences through the whole network, per parameter tensor.

    For each parameter tensor a deterministic subset of entries is
    perturbed (both directions) and compared against the analytic
    backward pass; the returned dict maps tensor names to relative
    errors. Runs in eval mode with dropout off.

    The step is finer than the per-layer checks use because a bias probe
    shifts every preactivation in its layer by the full step; at 1e-4
    some of the thousands of units always sit close enough to an
    activation kink to flip, which contaminates the difference quotient.
    """
    config = config or CHECK_MODEL_CONFIG
    with default_dtype(np.float64):
        model = build(config, seed)
        rng = np.random.default_rng(seed + 1)
        # zero biases sit exactly on the activation kinks; lift them off
        for name in model.params:
            if name.endswith(".bias"):
                model.params[name] = rng.uniform(0.01, 0.05,
                                                 model.params[name].shape)
        x = rng.uniform(0.05, 1.0, (2, 1, config.input_h, config.input_w))
        counts = rng.integers(0, config.k_minus_1 + 1, 2)
        bits = (np.arange(config.k_minus_1)[None, :] < counts[:, None]).astype(np.float64)

        fwd = forward(model, x, mode="eval")
        _, grad_out = losses.odl(fwd.outputs, bits, lam)
        grads = backward(model, fwd.record, grad_out)

        def total_loss() -> float:
            out = forward(model, x, mode="eval").outputs
            return losses.odl(out, bits, lam)[0].total

        errors: dict[str, float] = {}
        for tensor_i, name in enumerate(sorted(grads)):
            theta = model.params[name]
            sel_rng = np.random.default_rng([seed, 91, tensor_i])
            k = min(samples, theta.size)
            idx = sel_rng.choice(theta.size, size=k, replace=False)
            fd = np.empty(k)
            for j, flat in enumerate(idx):
                orig = theta.flat[flat]
                theta.flat[flat] = orig + eps
                f_plus = total_loss()
                theta.flat[flat] = orig - eps
                f_minus = total_loss()
                theta.flat[flat] = orig
                fd[j] = (f_plus - f_minus) / (2.0 * eps)
            errors[name] = rel_error(grads[name].flat[idx], fd)
        return errors


def _check_model_worst(rng: np.random.Generator, samples: int = 40) -> float:
    return max(check_model(samples=samples, seed=3).values())


@dataclass
class ComponentResult:
    name: str
    worst_rel_err: float
    threshold: float
    passed: bool
    seconds: float


_COMPONENTS: dict[str, tuple] = {
    "conv2d": (_check_conv2d, 1e-6),
    "max_pool2": (_check_max_pool2, 1e-6),
    "affine": (_check_affine, 1e-6),
    "leaky_relu": (_check_leaky_relu, 1e-6),
    "sigmoid": (_check_sigmoid, 1e-6),
    "softmax": (_check_softmax, 1e-6),
    "dropout": (_check_dropout, 1e-6),
    "cross_entropy": (_check_cross_entropy, 1e-6),
    "emd2": (_check_emd2, 1e-6),
    "odl": (_check_odl, 1e-5),
    "gender_bce": (_check_gender_bce, 1e-6),
    "euclidean": (_check_euclidean, 1e-6),
    "model": (_check_model_worst, 1e-4),
}

COMPONENT_NAMES = tuple(_COMPONENTS)


def run_suite(components: list[str] | None = None,
              threshold: float | None = None, seed: int = 0,
              samples: int = 40) -> list[ComponentResult]:
    """Run the selected checks at 64-bit precision.

    ``threshold`` overrides every component's own pass level (useful as a
    negative control: demand 1e-12 and finite-difference truncation error
    fails the suite, as it should).
    """
    names = list(components) if components else list(_COMPONENTS)
    results = []
    with default_dtype(np.float64):
        for name in names:
            if name not in _COMPONENTS:
                raise KeyError(f"unknown gradcheck component {name!r}; "
                               f"choose from {', '.join(_COMPONENTS)}")
            fn, default_threshold = _COMPONENTS[name]
            limit = threshold if threshold is not None else default_threshold
            rng = np.random.default_rng([seed, 17, list(_COMPONENTS).index(name)])
            start = time.perf_counter()
            if name == "model":
                worst = fn(rng, samples=samples)
            else:
                worst = fn(rng)
            elapsed = time.perf_counter() - start
            results.append(ComponentResult(name, worst, limit,
                                           worst < limit, elapsed))
    return results
