"""End-to-end training: data, model, loss dispatch, logging, checkpoints.

Each run writes into its output directory:

* ``train_log.csv``: one row per epoch (loss terms, train/val MAE, lr)
* ``training_curves.png``: the same history rendered as a figure
* ``checkpoint.bin``: parameters (and optimizer state) at the best
  validation MAE seen so far
* ``train_manifest.csv`` / ``val_manifest.csv``: the exact split used

Runs are reproducible: the model seed, dropout stream, split, and batch
order are all pure functions of the configured seeds.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass

import numpy as np

from . import losses
from .checkpoint import save_checkpoint
from .config import RunConfig, config_echo
from .data import (SampleManifest, load_manifest, split_and_batch,
                   synth_generate, write_manifest)
from .errors import ConfigError, NonFiniteError, TrainingError
from .evaluate import mae
from .model import GlcnnModel, backward, build, forward
from .optim import Adam, lr_schedule
from .ordinal import decode_batch, encode_batch
from .tensor import default_dtype, softmax, softmax_backward

LOG_COLUMNS = "epoch,ce,emd,total,train_mae,val_mae,lr"


@dataclass
class EpochLog:
    epoch: int
    ce: float
    emd: float
    total: float
    train_mae: float
    val_mae: float
    lr: float


@dataclass
class TrainResult:
    out_dir: str
    checkpoint_path: str
    log_path: str
    curves_path: str
    train_manifest_path: str
    val_manifest_path: str
    best_val_mae: float
    best_epoch: int
    history: list[EpochLog]


def _ordinal_loss(cfg: RunConfig, fwd, bits: np.ndarray):
    """Loss report plus gradients for the ordinal head.

    Returns (report, grad_wrt_outputs, grad_wrt_pre_sigmoid). The second
    gradient is only used when the distribution term reads the pre-sigmoid
    values instead of the classifier outputs.
    """
    outputs = fwd.outputs
    if cfg.loss_kind in ("odl", "ce"):
        lam = cfg.lam if cfg.loss_kind == "odl" else 0.0
        if not cfg.softmax_on_logits or lam == 0.0:
            report, grad = losses.odl(outputs, bits, lam)
            return report, grad, None
        ce_value, grad = losses.cross_entropy(outputs, bits)
        p_hat, _ = softmax(fwd.pre_sigmoid)
        p_target, _ = softmax(bits.astype(outputs.dtype))
        emd_value, emd_grad = losses.emd2(p_hat, p_target)
        pre_grad = lam * softmax_backward(p_hat, emd_grad).input_grad
        report = losses.LossReport(total=ce_value + lam * emd_value,
                                   ce_term=ce_value, emd_term=emd_value,
                                   lam=lam)
        return report, grad, pre_grad
    if cfg.loss_kind == "emd2":
        # distribution term alone; cross-entropy is logged but not trained on
        ce_value, _ = losses.cross_entropy(outputs, bits)
        source = fwd.pre_sigmoid if cfg.softmax_on_logits else outputs
        p_hat, _ = softmax(source)
        p_target, _ = softmax(bits.astype(outputs.dtype))
        emd_value, emd_grad = losses.emd2(p_hat, p_target)
        grad = softmax_backward(p_hat, emd_grad).input_grad
        report = losses.LossReport(total=emd_value, ce_term=ce_value,
                                   emd_term=emd_value, lam=0.0)
        if cfg.softmax_on_logits:
            return report, np.zeros_like(outputs), grad
        return report, grad, None
    raise ConfigError(f"loss {cfg.loss_kind!r} is not an ordinal-head loss")


def _validation_mae(model: GlcnnModel, stream, cfg: RunConfig) -> float:
    preds = []
    for x, _, _ in stream.in_order(batch_size=256):
        out = forward(model, x, mode="eval").outputs
        if cfg.model.head_mode == "ordinal":
            preds.append(decode_batch(out, cfg.rank))
        else:
            preds.append(out[:, 0])
    return mae(np.concatenate(preds), stream.ages)


def prepare_manifest(cfg: RunConfig, out_dir: str) -> SampleManifest:
    """Load the configured manifest, or synthesize the dataset in place."""
    if cfg.manifest is not None:
        return load_manifest(cfg.manifest)
    return synth_generate(cfg.synth, os.path.join(out_dir, "dataset"))


def train_run(cfg: RunConfig, quiet: bool = False) -> TrainResult:
    """Train a model per the run configuration; see the module docstring."""
    cfg.validate()
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with default_dtype(np.float32 if cfg.precision == "float32" else np.float64):
        manifest = prepare_manifest(cfg, out_dir)
        if cfg.model.gender_head and not manifest.has_gender:
            raise ConfigError(
                "gender head enabled but the manifest has no gender column")
        split = split_and_batch(manifest, cfg.split_ratio, cfg.batch_size,
                                cfg.effective_shuffle_seed)
        if split.train.images.shape[2:] != (cfg.model.input_h, cfg.model.input_w):
            raise ConfigError(
                f"dataset images are {split.train.images.shape[2]}x"
                f"{split.train.images.shape[3]} but the model expects "
                f"{cfg.model.input_h}x{cfg.model.input_w}")
        train_manifest_path = os.path.join(out_dir, "train_manifest.csv")
        val_manifest_path = os.path.join(out_dir, "val_manifest.csv")
        write_manifest(manifest, split.train_indices, train_manifest_path)
        write_manifest(manifest, split.test_indices, val_manifest_path)

        model = build(cfg.model, cfg.seed)
        opt = Adam(lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2,
                   eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay,
                   decoupled=cfg.optim.decoupled)
        echo = config_echo(cfg)
        ordinal = cfg.model.head_mode == "ordinal"
        mu = cfg.gender_weight

        checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        log_path = os.path.join(out_dir, "train_log.csv")
        curves_path = os.path.join(out_dir, "training_curves.png")
        best_val = math.inf
        best_epoch = -1
        history: list[EpochLog] = []

        with open(log_path, "w", encoding="utf-8", newline="\n") as log:
            log.write(LOG_COLUMNS + "\n")
            for epoch in range(cfg.epochs):
                if cfg.optim.lr_decay:
                    opt.lr = lr_schedule(epoch, cfg.optim.lr,
                                         cfg.optim.lr_decay_every,
                                         cfg.optim.lr_decay_factor)
                rng = np.random.default_rng([cfg.seed, 7, epoch])
                sums = np.zeros(3)
                seen = 0
                preds = []
                truths = []
                for batch_i, (x, ages, genders) in enumerate(split.train.epoch(epoch)):
                    try:
                        fwd = forward(model, x, mode="train", rng=rng)
                        if ordinal:
                            bits = encode_batch(ages, cfg.rank).astype(x.dtype)
                            report, grad_out, pre_grad = _ordinal_loss(cfg, fwd, bits)
                        else:
                            value, g = losses.baseline_regression_loss(
                                cfg.loss_kind, fwd.outputs[:, 0], ages.astype(x.dtype))
                            report = losses.LossReport(
                                total=value, ce_term=math.nan, emd_term=math.nan,
                                lam=0.0)
                            grad_out, pre_grad = g[:, None], None
                        gender_logit_grad = None
                        if cfg.model.gender_head:
                            truth = genders.astype(x.dtype)
                            g_value, _ = losses.gender_bce(fwd.gender[:, 0], truth)
                            report = dataclasses.replace(
                                report, total=report.total + mu * g_value,
                                aux_gender=g_value, gender_weight=mu)
                            # logit-form BCE gradient: stays full strength
                            # when the head saturates on the wrong side
                            gender_logit_grad = (
                                mu * (fwd.gender - truth[:, None]) / x.shape[0])
                        if not math.isfinite(report.total):
                            raise TrainingError(
                                f"non-finite loss at epoch {epoch} batch {batch_i}: "
                                f"ce={report.ce_term} emd={report.emd_term}")
                        grads = backward(model, fwd.record, grad_out,
                                         pre_sigmoid_grad=pre_grad,
                                         gender_logit_grad=gender_logit_grad)
                        model.params = opt.step(model.params, grads)
                    except NonFiniteError as exc:
                        raise TrainingError(
                            f"non-finite value at epoch {epoch} batch {batch_i}: "
                            f"{exc}") from exc
                    n = x.shape[0]
                    seen += n
                    ce = report.ce_term if ordinal else math.nan
                    emd = report.emd_term if ordinal else math.nan
                    sums += np.array([ce * n, emd * n, report.total * n])
                    if ordinal:
                        preds.append(decode_batch(fwd.outputs, cfg.rank))
                    else:
                        preds.append(np.asarray(fwd.outputs[:, 0], dtype=np.float64))
                    truths.append(ages)

                train_mae = mae(np.concatenate(preds), np.concatenate(truths))
                last = epoch == cfg.epochs - 1
                val_mae = math.nan
                if last or (epoch + 1) % cfg.eval_every == 0:
                    val_mae = _validation_mae(model, split.test, cfg)
                    if val_mae < best_val:
                        best_val = val_mae
                        best_epoch = epoch
                        save_checkpoint(checkpoint_path, model, cfg.rank,
                                        run_echo=echo, adam=opt)
                entry = EpochLog(epoch, float(sums[0] / seen),
                                 float(sums[1] / seen), float(sums[2] / seen),
                                 float(train_mae), float(val_mae),
                                 float(opt.lr))
                history.append(entry)
                log.write(",".join([
                    str(entry.epoch), repr(entry.ce), repr(entry.emd),
                    repr(entry.total), repr(entry.train_mae),
                    repr(entry.val_mae), repr(entry.lr)]) + "\n")
                log.flush()
                if not quiet:
                    print(f"epoch {epoch:3d}  total {entry.total:.5f}  "
                          f"train_mae {train_mae:.3f}  val_mae {val_mae:.3f}")

        _plot_history(history, curves_path)
    return TrainResult(out_dir, checkpoint_path, log_path, curves_path,
                       train_manifest_path, val_manifest_path,
                       best_val, best_epoch, history)


def _plot_history(history: list[EpochLog], png_path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [h.epoch for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.6, 3.4))
    ax1.plot(epochs, [h.total for h in history], label="total")
    if any(math.isfinite(h.ce) for h in history):
        ax1.plot(epochs, [h.ce for h in history], label="ce", alpha=0.7)
        ax1.plot(epochs, [h.emd for h in history], label="emd", alpha=0.7)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.grid(True, alpha=0.3)
    ax2.plot(epochs, [h.train_mae for h in history], label="train")
    evaluated = [(h.epoch, h.val_mae) for h in history if math.isfinite(h.val_mae)]
    if evaluated:
        ax2.plot(*zip(*evaluated), label="val")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("MAE (years)")
    ax2.legend(fontsize=8)
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
