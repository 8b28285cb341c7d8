"""Global-plus-local convolutional network over silhouette images.

One global sub-network sees the whole image; three local sub-networks see
the head, body, and feet rows. Local feature maps from the second
convolution stage are stacked back together along the height axis, pass a
shared third convolution, and join the global features along the channel
axis before three fully connected layers produce the stacked classifier
outputs (plus an optional gender output).

Every configuration is dry-run through a shape audit before any parameter
is allocated. The audit decides where 2x2 pooling is legal (both extents
even), picks the shared third convolution's stride so the local path
lands on the same spatial map as the global path, and reports the flat
feature width. Builds are deterministic given a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import (AffineCtx, Conv2dCtx, ConcatCtx, DropoutCtx,
                     LeakyReluCtx, MaxPool2Ctx, affine, affine_backward,
                     concat, concat_backward, conv2d, conv2d_backward,
                     dropout, dropout_backward, get_default_dtype, leaky_relu,
                     leaky_relu_backward, max_pool2, max_pool2_backward,
                     sigmoid, sigmoid_backward)

PARTS = ("head", "body", "feet")
HEAD_MODES = ("ordinal", "scalar_regression")


@dataclass(frozen=True)
class ModelConfig:
    """Declarative network description; all sizes live here."""

    input_h: int = 128
    input_w: int = 88
    crop_rows: tuple[int, int, int] = (22, 48, 58)
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    conv_kernels: tuple[int, int, int] = (7, 5, 3)
    fc_width: int = 1024
    k_minus_1: int = 88
    leaky_slope: float = 0.01
    dropout_rate: float = 0.5
    gender_head: bool = False
    head_mode: str = "ordinal"
    f6_activation: bool = True
    padding: str = "same"

    def validate(self) -> None:
        if self.input_h < 2 or self.input_w < 2:
            raise ConfigError(f"input {self.input_h}x{self.input_w} too small")
        if len(self.crop_rows) != 3 or any(r < 1 for r in self.crop_rows):
            raise ConfigError(f"crop_rows must be three positive counts, got {self.crop_rows}")
        if sum(self.crop_rows) != self.input_h:
            raise ConfigError(
                f"crop_rows {self.crop_rows} sum to {sum(self.crop_rows)}, "
                f"expected input height {self.input_h}")
        if len(self.conv_channels) != 3 or any(c < 1 for c in self.conv_channels):
            raise ConfigError(f"conv_channels must be three positive ints, got {self.conv_channels}")
        if len(self.conv_kernels) != 3 or any(k < 1 or k % 2 == 0 for k in self.conv_kernels):
            raise ConfigError(f"conv_kernels must be three odd ints, got {self.conv_kernels}")
        if self.fc_width < 1:
            raise ConfigError(f"fc_width must be positive, got {self.fc_width}")
        if self.k_minus_1 < 1:
            raise ConfigError(f"k_minus_1 must be positive, got {self.k_minus_1}")
        if not 0.0 <= self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must be in [0, 1), got {self.leaky_slope}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def out_dim(self) -> int:
        return self.k_minus_1 if self.head_mode == "ordinal" else 1


@dataclass(frozen=True)
class ShapePlan:
    """Result of the dry-run shape audit for one configuration."""

    pad: tuple[int, int, int]
    global_pool: tuple[bool, bool, bool]
    global_hw: tuple[tuple[int, int], ...]
    local_pool1: bool
    part_hw: tuple[tuple[int, int], ...]
    merged_hw: tuple[int, int]
    merged_pool: bool
    local3_stride: int
    local3_pool: bool
    final_hw: tuple[int, int]
    feature_dim: int
    out_dim: int


def _conv_hw(hw: tuple[int, int], k: int, pad: int, stride: int,
             where: str) -> tuple[int, int]:
    h, w = hw
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise ConfigError(f"{where}: kernel {k}x{k} exceeds padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"{where}: output collapses to {ho}x{wo}")
    return ho, wo


def _even(hw: tuple[int, int]) -> bool:
    return hw[0] % 2 == 0 and hw[1] % 2 == 0


def audit_shapes(config: ModelConfig) -> ShapePlan:
    """Walk the network symbolically and fix the pooling schedule.

    Pools run wherever both extents are even. The shared local conv3 may
    take stride 2 and/or skip its pool so the local path ends on the same
    spatial map as the global one; if no combination reconciles the two
    paths the configuration is rejected.
    """
    config.validate()
    k = config.conv_kernels
    pad = tuple((kk - 1) // 2 if config.padding == "same" else 0 for kk in k)

    hw = (config.input_h, config.input_w)
    global_hw = []
    global_pool = []
    for i in range(3):
        hw = _conv_hw(hw, k[i], pad[i], 1, f"global conv{i + 1}")
        do_pool = _even(hw)
        if do_pool:
            hw = (hw[0] // 2, hw[1] // 2)
        global_pool.append(do_pool)
        global_hw.append(hw)
    final_global = hw

    part_hw = [
        _conv_hw((rows, config.input_w), k[0], pad[0], 1, f"local {name} conv1")
        for name, rows in zip(PARTS, config.crop_rows)
    ]
    widths = {w for _, w in part_hw}
    local_pool1 = all(_even(p) for p in part_hw) and len(widths) == 1
    if local_pool1:
        part_hw = [(h // 2, w // 2) for h, w in part_hw]
    part_hw = [
        _conv_hw(p, k[1], pad[1], 1, f"local {name} conv2")
        for name, p in zip(PARTS, part_hw)
    ]
    widths = {w for _, w in part_hw}
    if len(widths) != 1:
        raise ConfigError(
            f"local parts end conv2 with unequal widths {sorted(widths)}; "
            "choose crop_rows with matching parity")
    merged = (sum(h for h, _ in part_hw), widths.pop())
    merged_pool = _even(merged)
    merged_after = (merged[0] // 2, merged[1] // 2) if merged_pool else merged

    chosen = None
    for stride in (1, 2):
        try:
            hw3 = _conv_hw(merged_after, k[2], pad[2], stride, "local shared conv3")
        except ConfigError:
            continue
        for pool3 in (False, True):
            candidate = (hw3[0] // 2, hw3[1] // 2) if pool3 else hw3
            if pool3 and not _even(hw3):
                continue
            if candidate == final_global:
                chosen = (stride, pool3, candidate)
                break
        if chosen:
            break
    if chosen is None:
        raise ConfigError(
            f"local shared conv3: cannot reconcile local spatial {merged_after} "
            f"with global {final_global}; adjust input size or crop_rows")
    stride3, pool3, final_hw = chosen

    feature_dim = 2 * config.conv_channels[2] * final_hw[0] * final_hw[1]
    return ShapePlan(
        pad=pad,
        global_pool=tuple(global_pool),
        global_hw=tuple(global_hw),
        local_pool1=local_pool1,
        part_hw=tuple(part_hw),
        merged_hw=merged,
        merged_pool=merged_pool,
        local3_stride=stride3,
        local3_pool=pool3,
        final_hw=final_hw,
        feature_dim=feature_dim,
        out_dim=config.out_dim,
    )


def _param_layout(config: ModelConfig, plan: ShapePlan
                  ) -> list[tuple[str, tuple[int, ...], int | None]]:
    """Ordered (name, shape, fan_in) triples; fan_in None marks a bias."""
    c0, c1, c2 = config.conv_channels
    k0, k1, k2 = config.conv_kernels
    layout: list[tuple[str, tuple[int, ...], int | None]] = []

    def conv_entry(name, f, cin, kk):
        layout.append((f"{name}.weight", (f, cin, kk, kk), cin * kk * kk))
        layout.append((f"{name}.bias", (f,), None))

    def fc_entry(name, din, dout):
        layout.append((f"{name}.weight", (din, dout), din))
        layout.append((f"{name}.bias", (dout,), None))

    conv_entry("global.conv1", c0, 1, k0)
    conv_entry("global.conv2", c1, c0, k1)
    conv_entry("global.conv3", c2, c1, k2)
    for part in PARTS:
        conv_entry(f"local.{part}.conv1", c0, 1, k0)
    for part in PARTS:
        conv_entry(f"local.{part}.conv2", c1, c0, k1)
    conv_entry("local.shared.conv3", c2, c1, k2)
    fc_entry("fc4", plan.feature_dim, config.fc_width)
    fc_entry("fc5", config.fc_width, config.fc_width)
    fc_entry("fc6", config.fc_width, plan.out_dim)
    if config.gender_head:
        fc_entry("gender", config.fc_width, 1)
    return layout


def param_count(config: ModelConfig) -> int:
    plan = audit_shapes(config)
    return sum(int(np.prod(shape)) for _, shape, _ in _param_layout(config, plan))


@dataclass
class GlcnnModel:
    """Instantiated parameter set for one :class:`ModelConfig`."""

    config: ModelConfig
    plan: ShapePlan
    seed: int
    params: dict[str, np.ndarray]

    def clone(self) -> "GlcnnModel":
        return GlcnnModel(self.config, self.plan, self.seed,
                          {k: v.copy() for k, v in self.params.items()})


def build(config: ModelConfig, seed: int) -> GlcnnModel:
    """Audit the config, then draw parameters from a seeded generator.

    Weights are uniform in +/- sqrt(6 / fan_in); biases start at zero.
    The same seed and config always produce identical parameters.
    """
    plan = audit_shapes(config)
    rng = np.random.default_rng(seed)
    dtype = get_default_dtype()
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in _param_layout(config, plan):
        if fan_in is None:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            lim = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return GlcnnModel(config, plan, seed, params)


def crop_parts(batch: np.ndarray, config: ModelConfig
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split a (N, 1, H, W) batch into head, body, and feet row bands."""
    if batch.ndim != 4 or batch.shape[2] != sum(config.crop_rows):
        raise ConfigError(
            f"batch shape {batch.shape} does not match crop_rows "
            f"{config.crop_rows} (sum {sum(config.crop_rows)})")
    r0, r1, _ = config.crop_rows
    return (batch[:, :, :r0, :],
            batch[:, :, r0:r0 + r1, :],
            batch[:, :, r0 + r1:, :])


@dataclass
class ActivationRecord:
    """Everything backward needs from one forward pass."""

    mode: str
    batch_shape: tuple[int, ...]
    g_stages: list[tuple[Conv2dCtx, LeakyReluCtx, MaxPool2Ctx | None]] = field(default_factory=list)
    l_conv1: dict[str, tuple[Conv2dCtx, LeakyReluCtx, MaxPool2Ctx | None]] = field(default_factory=dict)
    l_conv2: dict[str, tuple[Conv2dCtx, LeakyReluCtx]] = field(default_factory=dict)
    merge_ctx: ConcatCtx | None = None
    merged_pool_ctx: MaxPool2Ctx | None = None
    l3: tuple[Conv2dCtx, LeakyReluCtx, MaxPool2Ctx | None] | None = None
    cat_ctx: ConcatCtx | None = None
    pre_flat_shape: tuple[int, ...] = ()
    f4: tuple[AffineCtx, LeakyReluCtx, DropoutCtx] | None = None
    f5: tuple[AffineCtx, LeakyReluCtx, DropoutCtx] | None = None
    f6_aff: AffineCtx | None = None
    f6_act: LeakyReluCtx | None = None
    f6_drop: DropoutCtx | None = None
    out_sig: np.ndarray | None = None
    gender_aff: AffineCtx | None = None
    gender_sig: np.ndarray | None = None


@dataclass
class ForwardPass:
    outputs: np.ndarray
    gender: np.ndarray | None
    record: ActivationRecord
    pre_sigmoid: np.ndarray | None = None


def forward(model: GlcnnModel, batch: np.ndarray, mode: str = "eval",
            rng: np.random.Generator | None = None) -> ForwardPass:
    """Run the network. ``mode='train'`` enables dropout (rng required).

    Eval mode is deterministic; train mode is deterministic given the
    generator state. The returned record is consumed by :func:`backward`.
    """
    cfg = model.config
    plan = model.plan
    p = model.params
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2] != cfg.input_h \
            or batch.shape[3] != cfg.input_w:
        raise ConfigError(
            f"batch shape {batch.shape} does not match configured input "
            f"(N, 1, {cfg.input_h}, {cfg.input_w})")
    if mode not in ("train", "eval"):
        raise ConfigError(f"forward mode must be 'train' or 'eval', got {mode!r}")
    dtype = p["fc4.weight"].dtype
    x = batch.astype(dtype, copy=False)
    slope = cfg.leaky_slope
    rec = ActivationRecord(mode=mode, batch_shape=batch.shape)

    def conv_block(h, name, i, stride, do_pool, store):
        out, cctx = conv2d(h, p[f"{name}.weight"], p[f"{name}.bias"],
                           stride=stride, padding=plan.pad[i])
        act, actx = leaky_relu(out, slope)
        pctx = None
        if do_pool:
            act, pctx = max_pool2(act)
        store((cctx, actx, pctx))
        return act

    h = x
    for i in range(3):
        h = conv_block(h, f"global.conv{i + 1}", i, 1, plan.global_pool[i],
                       rec.g_stages.append)
    global_out = h

    parts = crop_parts(x, cfg)
    merged_inputs = []
    for part, xp in zip(PARTS, parts):
        a = conv_block(xp, f"local.{part}.conv1", 0, 1, plan.local_pool1,
                       lambda ctxs, part=part: rec.l_conv1.__setitem__(part, ctxs))
        out, cctx = conv2d(a, p[f"local.{part}.conv2.weight"],
                           p[f"local.{part}.conv2.bias"], stride=1,
                           padding=plan.pad[1])
        act, actx = leaky_relu(out, slope)
        rec.l_conv2[part] = (cctx, actx)
        merged_inputs.append(act)
    merged, rec.merge_ctx = concat(merged_inputs, axis=2)
    if plan.merged_pool:
        merged, rec.merged_pool_ctx = max_pool2(merged)
    local_out = conv_block(merged, "local.shared.conv3", 2, plan.local3_stride,
                           plan.local3_pool, lambda ctxs: setattr(rec, "l3", ctxs))

    joined, rec.cat_ctx = concat([global_out, local_out], axis=1)
    rec.pre_flat_shape = joined.shape
    flat = joined.reshape(joined.shape[0], -1)

    def fc_block(h, name, store):
        out, actx = affine(h, p[f"{name}.weight"], p[f"{name}.bias"])
        act, lctx = leaky_relu(out, slope)
        act, dctx = dropout(act, cfg.dropout_rate, mode, rng)
        store((actx, lctx, dctx))
        return act

    h4 = fc_block(flat, "fc4", lambda c: setattr(rec, "f4", c))
    h5 = fc_block(h4, "fc5", lambda c: setattr(rec, "f5", c))

    gender_out = None
    if cfg.gender_head:
        gz, rec.gender_aff = affine(h5, p["gender.weight"], p["gender.bias"])
        gender_out, rec.gender_sig = sigmoid(gz)

    z6, rec.f6_aff = affine(h5, p["fc6.weight"], p["fc6.bias"])
    pre_sigmoid = None
    if cfg.head_mode == "ordinal":
        h6 = z6
        if cfg.f6_activation:
            h6, rec.f6_act = leaky_relu(h6, slope)
        h6, rec.f6_drop = dropout(h6, cfg.dropout_rate, mode, rng)
        pre_sigmoid = h6
        outputs, rec.out_sig = sigmoid(h6)
    else:
        outputs = z6
    return ForwardPass(outputs, gender_out, rec, pre_sigmoid)


def backward(model: GlcnnModel, record: ActivationRecord,
             output_grad: np.ndarray,
             gender_grad: np.ndarray | None = None,
             pre_sigmoid_grad: np.ndarray | None = None,
             gender_logit_grad: np.ndarray | None = None
             ) -> dict[str, np.ndarray]:
    """Chain the recorded contexts in reverse; returns named param grads.

    ``output_grad`` is w.r.t. the forward outputs (post-sigmoid in ordinal
    mode). ``pre_sigmoid_grad``, when given, is added at the tensor that
    feeds the output sigmoid (used when the distribution loss reads the
    pre-sigmoid values). The gender head takes either ``gender_grad``
    (w.r.t. its probability) or ``gender_logit_grad`` (w.r.t. its
    pre-sigmoid value; numerically safe when the head is saturated); with
    neither, its parameters receive zero gradients.
    """
    cfg = model.config
    if record.f6_aff is None or output_grad.shape != (record.batch_shape[0],
                                                      model.plan.out_dim):
        raise ConfigError(
            f"output grad shape {output_grad.shape} does not match record "
            f"for batch {record.batch_shape}")
    grads: dict[str, np.ndarray] = {}

    g = output_grad
    if cfg.head_mode == "ordinal":
        g = sigmoid_backward(record.out_sig, g).input_grad
        if pre_sigmoid_grad is not None:
            g = g + pre_sigmoid_grad
        g = dropout_backward(record.f6_drop, g).input_grad
        if record.f6_act is not None:
            g = leaky_relu_backward(record.f6_act, g).input_grad
    lg = affine_backward(record.f6_aff, g)
    grads["fc6.weight"] = lg.param_grads["weight"]
    grads["fc6.bias"] = lg.param_grads["bias"]
    g5 = lg.input_grad

    if cfg.gender_head:
        if gender_grad is None and gender_logit_grad is None:
            grads["gender.weight"] = np.zeros_like(model.params["gender.weight"])
            grads["gender.bias"] = np.zeros_like(model.params["gender.bias"])
        else:
            gs = gender_logit_grad if gender_logit_grad is not None \
                else np.zeros_like(record.gender_sig)
            if gender_grad is not None:
                gs = gs + sigmoid_backward(record.gender_sig, gender_grad).input_grad
            lgg = affine_backward(record.gender_aff, gs)
            grads["gender.weight"] = lgg.param_grads["weight"]
            grads["gender.bias"] = lgg.param_grads["bias"]
            g5 = g5 + lgg.input_grad

    def fc_back(g, name, ctxs):
        actx, lctx, dctx = ctxs
        g = dropout_backward(dctx, g).input_grad
        g = leaky_relu_backward(lctx, g).input_grad
        lg = affine_backward(actx, g)
        grads[f"{name}.weight"] = lg.param_grads["weight"]
        grads[f"{name}.bias"] = lg.param_grads["bias"]
        return lg.input_grad

    g4 = fc_back(g5, "fc5", record.f5)
    gflat = fc_back(g4, "fc4", record.f4)

    gjoined = gflat.reshape(record.pre_flat_shape)
    g_global, g_local = concat_backward(record.cat_ctx, gjoined)

    def conv_back(g, name, ctxs, need_input):
        cctx, actx, pctx = ctxs
        if pctx is not None:
            g = max_pool2_backward(pctx, g).input_grad
        g = leaky_relu_backward(actx, g).input_grad
        lg = conv2d_backward(cctx, g, need_input_grad=need_input)
        grads[f"{name}.weight"] = lg.param_grads["weight"]
        grads[f"{name}.bias"] = lg.param_grads["bias"]
        return lg.input_grad

    g = g_global
    for i in (2, 1, 0):
        g = conv_back(g, f"global.conv{i + 1}", record.g_stages[i], need_input=i > 0)

    g_merged = conv_back(g_local, "local.shared.conv3", record.l3, need_input=True)
    if record.merged_pool_ctx is not None:
        g_merged = max_pool2_backward(record.merged_pool_ctx, g_merged).input_grad
    part_grads = concat_backward(record.merge_ctx, g_merged)
    for part, gp in zip(PARTS, part_grads):
        cctx, actx = record.l_conv2[part]
        gp = leaky_relu_backward(actx, gp).input_grad
        lg = conv2d_backward(cctx, gp, need_input_grad=True)
        grads[f"local.{part}.conv2.weight"] = lg.param_grads["weight"]
        grads[f"local.{part}.conv2.bias"] = lg.param_grads["bias"]
        conv_back(lg.input_grad, f"local.{part}.conv1", record.l_conv1[part],
                  need_input=False)
    return grads
