"""Acceptance gate: every criterion checked at its stated tolerance.

Each test prints one ``CRITERION n ... PASS`` line (visible with -s or -rA)
and fails loudly otherwise. The training-based criteria share module-scoped
fixtures so the expensive runs happen once.
"""

import os
import time

import numpy as np
import pytest

from gaitage import losses
from gaitage.checkpoint import load_checkpoint
from gaitage.cli import main
from gaitage.config import OptimConfig, RunConfig
from gaitage.data import SynthSpec, load_arrays, load_manifest
from gaitage.evaluate import evaluate_model, mae
from gaitage.gradcheck import check_model, numeric_gradient, rel_error
from gaitage.model import ModelConfig
from gaitage.ordinal import RankSpec, decode, encode
from gaitage.tensor import default_dtype
from gaitage.train import train_run

DESK_MODEL = dict(input_h=32, input_w=22, crop_rows=(6, 12, 14),
                  conv_channels=(4, 8, 8), conv_kernels=(7, 5, 3),
                  fc_width=32, dropout_rate=0.0)
DESK_RANK = RankSpec(2.0, 4.0, 23)  # ages 2..90 in 4-year steps, 22 classifiers
ABLATION_SEEDS = (100, 101, 102, 103, 104)


def report(n, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"CRITERION {n} ({name}): {status}  {detail}")
    assert ok, f"criterion {n} {name}: {detail}"


def desk_config(out_dir, *, seed, loss="odl", gender_head=False,
                gender_data=False, synth_seed=7, epochs=50):
    return RunConfig(
        model=ModelConfig(k_minus_1=DESK_RANK.k_minus_1,
                          gender_head=gender_head, **DESK_MODEL),
        rank=DESK_RANK,
        optim=OptimConfig(lr=1e-3),
        synth=SynthSpec(seed=synth_seed, n_samples=2000, height=32, width=22,
                        noise=0.1, gender_effect=gender_data),
        loss_kind=loss, lam=10.0, epochs=epochs, batch_size=64, seed=seed,
        precision="float32", out_dir=out_dir, eval_every=5)


def run_and_score(cfg):
    start = time.perf_counter()
    result = train_run(cfg, quiet=True)
    seconds = time.perf_counter() - start
    ckpt = load_checkpoint(result.checkpoint_path)
    val = load_manifest(result.val_manifest_path)
    train_man = load_manifest(result.train_manifest_path)
    with default_dtype(np.float32):
        images, ages, genders = load_arrays(val)
        rep = evaluate_model(ckpt.model, images, ages, ckpt.rank,
                             genders=genders)
    return {
        "mae": rep.mae,
        "mvr": rep.monotonicity_violation_rate,
        "gender_acc": rep.gender_accuracy,
        "seconds": seconds,
        "train_ages": train_man.ages(),
        "val_ages": ages,
    }


# ---------------------------------------------------------------------------
# gradient criteria
# ---------------------------------------------------------------------------


def test_criterion_01_cross_entropy_gradient():
    """Analytic CE gradient vs central finite differences, 50+ batches."""

    def ce_value_oracle(o, t):
        # independent re-statement of the loss, written longhand
        total = 0.0
        n, k = o.shape
        for i in range(n):
            for j in range(k):
                oc = min(max(o[i, j], 1e-7), 1 - 1e-7)
                total += -(t[i, j] * np.log(oc) + (1 - t[i, j]) * np.log(1 - oc))
        return total / n

    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    with default_dtype(np.float64):
        for _ in range(50):
            o = rng.uniform(0.1, 0.9, (2, 6))
            t = (rng.random((2, 6)) < 0.5).astype(np.float64)
            _, grad = losses.cross_entropy(o, t)
            num = numeric_gradient(lambda v: ce_value_oracle(v, t), o)
            worst = max(worst, rel_error(grad, num))
    elapsed = time.perf_counter() - start
    report(1, "cross-entropy gradient", worst < 1e-6 and elapsed < 5.0,
           f"worst rel err {worst:.3e}, {elapsed:.2f}s")


def test_criterion_02_emd2_gradient():
    """Closed-form squared-EMD gradient vs finite differences of a
    brute-force value oracle, plus the hand-expanded case."""

    def emd2_value_oracle(p_hat, p):
        n, k = p_hat.shape
        total = 0.0
        for i in range(n):
            for j in range(k):
                gap = sum(p_hat[i, :j + 1]) - sum(p[i, :j + 1])
                total += gap * gap
        return total / n

    start = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    with default_dtype(np.float64):
        for _ in range(50):
            k = int(rng.integers(3, 9))
            p_hat = rng.random((2, k)) + 0.05
            p_hat /= p_hat.sum(axis=1, keepdims=True)
            p = rng.random((2, k)) + 0.05
            p /= p.sum(axis=1, keepdims=True)
            _, grad = losses.emd2(p_hat, p)
            num = numeric_gradient(lambda v: emd2_value_oracle(v, p), p_hat)
            worst = max(worst, rel_error(grad, num))
        _, hand = losses.emd2(np.array([[0.4, 0.3, 0.3]]),
                              np.array([[0.3, 0.4, 0.3]]))
    elapsed = time.perf_counter() - start
    hand_ok = np.allclose(hand, [[0.2, 0.0, 0.0]], atol=1e-12)
    report(2, "squared-EMD gradient",
           worst < 1e-6 and hand_ok and elapsed < 5.0,
           f"worst rel err {worst:.3e}, hand case {hand.round(6).tolist()}, "
           f"{elapsed:.2f}s")


def test_criterion_03_composite_gradient():
    """Joint loss through the scaled-down network, every parameter tensor."""
    start = time.perf_counter()
    errors = check_model(samples=40, seed=3)
    elapsed = time.perf_counter() - start
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    assert len(errors) == 26  # every parameter tensor of the scaled model
    report(3, "composite gradient", worst < 1e-4 and elapsed < 120.0,
           f"{len(errors)} tensors, worst {worst:.3e} ({worst_name}), "
           f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# codec and distribution-distance criteria
# ---------------------------------------------------------------------------


def test_criterion_04_ordinal_codec():
    start = time.perf_counter()
    spec = RankSpec(2.0, 1.0, 89)  # full 2..90 grid
    for age in spec.ranks:
        target = encode(age, spec)
        assert decode(target.bits, spec) == age, age

    rng = np.random.default_rng(404)
    probs = rng.random((10_000, spec.k_minus_1))
    ok = True
    for row in probs[:10_000]:
        oracle = spec.r_min + spec.eta * sum(1 for p in row if p > 0.5)
        if decode(row, spec) != oracle:
            ok = False
            break
    elapsed = time.perf_counter() - start
    report(4, "ordinal codec", ok and elapsed < 5.0,
           f"89 grid ages round-trip, 10000 random decodes match the "
           f"threshold-count oracle, {elapsed:.2f}s")


def test_criterion_05_emd2_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    with default_dtype(np.float64):
        p_hat = rng.random((10_000, 7)) + 0.01
        p_hat /= p_hat.sum(axis=1, keepdims=True)
        p = rng.random((10_000, 7)) + 0.01
        p /= p.sum(axis=1, keepdims=True)

        forward_value, _ = losses.emd2(p_hat, p)
        backward_value, _ = losses.emd2(p, p_hat)
        assert forward_value >= 0
        assert forward_value == pytest.approx(backward_value, rel=1e-12)

        # row-wise: zero exactly when the partial sums agree
        gaps = np.cumsum(p_hat - p, axis=1)
        row_values = (gaps ** 2).sum(axis=1)
        distinct = np.abs(gaps).max(axis=1) > 1e-6
        assert (row_values[distinct] > 0).all()
        same, _ = losses.emd2(p_hat, p_hat.copy())
        assert same == 0.0

        hand, _ = losses.emd2(np.array([[1.0, 0.0, 0.0]]),
                              np.array([[0.0, 0.0, 1.0]]))
    elapsed = time.perf_counter() - start
    report(5, "squared-EMD properties",
           hand == pytest.approx(2.0) and elapsed < 5.0,
           f"10000 simplex pairs, hand value {hand}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# training criteria (shared fixtures)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    """Five seeds each of the joint loss and CE-only on the desk dataset."""
    base = tmp_path_factory.mktemp("ablation")
    runs = {"odl": [], "ce": []}
    for seed in ABLATION_SEEDS:
        for loss in ("odl", "ce"):
            cfg = desk_config(str(base / f"{loss}_{seed}"), seed=seed, loss=loss)
            runs[loss].append(run_and_score(cfg))
    return runs


@pytest.fixture(scope="module")
def gender_ablation(tmp_path_factory):
    """Five seeds of joint age+gender training vs age-only, on a dataset
    whose silhouettes carry the gender latent."""
    base = tmp_path_factory.mktemp("gender")
    runs = {"with": [], "without": []}
    for seed in ABLATION_SEEDS:
        for label, head in (("with", True), ("without", False)):
            cfg = desk_config(str(base / f"{label}_{seed}"), seed=seed,
                              gender_head=head, gender_data=True, synth_seed=8)
            runs[label].append(run_and_score(cfg))
    return runs


def test_criterion_06_end_to_end_learning(desk_ablation):
    """Held-out MAE beats half of the constant-median-age predictor."""
    first = desk_ablation["odl"][0]
    median_age = float(np.median(first["train_ages"]))
    baseline = mae(np.full_like(first["val_ages"], median_age), first["val_ages"])
    ok = first["mae"] < 0.5 * baseline and first["seconds"] < 900.0
    report(6, "end-to-end learning", ok,
           f"held-out MAE {first['mae']:.3f} vs 0.5 x baseline "
           f"{baseline:.3f} = {0.5 * baseline:.3f}, trained in "
           f"{first['seconds']:.0f}s")


def test_criterion_07_odl_vs_ce_ablation(desk_ablation):
    odl_mvr = float(np.median([r["mvr"] for r in desk_ablation["odl"]]))
    ce_mvr = float(np.median([r["mvr"] for r in desk_ablation["ce"]]))
    odl_mae = float(np.median([r["mae"] for r in desk_ablation["odl"]]))
    ce_mae = float(np.median([r["mae"] for r in desk_ablation["ce"]]))
    ok = odl_mvr < ce_mvr and odl_mae <= ce_mae + 0.25
    report(7, "joint loss vs CE ablation", ok,
           f"median violation rate {odl_mvr:.4f} vs {ce_mvr:.4f}; "
           f"median MAE {odl_mae:.3f} vs {ce_mae:.3f}")


def test_criterion_08_gender_multitask(gender_ablation):
    acc = float(np.median([r["gender_acc"] for r in gender_ablation["with"]]))
    mae_with = float(np.median([r["mae"] for r in gender_ablation["with"]]))
    mae_without = float(np.median([r["mae"] for r in gender_ablation["without"]]))
    ok = acc > 95.0 and mae_with <= mae_without + 0.25
    report(8, "gender multi-task", ok,
           f"median gender accuracy {acc:.2f}%, age MAE {mae_with:.3f} "
           f"vs {mae_without:.3f} without the gender head")


def test_criterion_09_training_determinism(tmp_path):
    """Identical config and seeds give byte-identical checkpoints at 64-bit."""
    cfg_text = "\n".join([
        "synth.n = 64", "synth.seed = 5", "synth.height = 16",
        "synth.width = 12", "synth.noise = 0.1",
        "rank.min = 2", "rank.eta = 11", "rank.count = 9",
        "model.input_h = 16", "model.input_w = 12",
        "model.crop_rows = 4,6,6", "model.conv_channels = 2,3,3",
        "model.conv_kernels = 3,3,3", "model.fc_width = 8",
        "model.dropout = 0.5",
        "optim.lr = 0.001", "train.epochs = 3", "train.batch_size = 16",
        "train.seed = 1", "train.precision = float64",
    ])
    cfg_path = tmp_path / "det.cfg"
    cfg_path.write_text(cfg_text, encoding="utf-8")
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["train", "--config", str(cfg_path), "--out", out_a,
                 "--quiet"]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", out_b,
                 "--quiet"]) == 0
    bytes_a = open(os.path.join(out_a, "checkpoint.bin"), "rb").read()
    bytes_b = open(os.path.join(out_b, "checkpoint.bin"), "rb").read()
    log_a = open(os.path.join(out_a, "train_log.csv")).read()
    log_b = open(os.path.join(out_b, "train_log.csv")).read()
    report(9, "training determinism", bytes_a == bytes_b and log_a == log_b,
           f"checkpoints identical ({len(bytes_a)} bytes), logs identical")


def test_criterion_10_lambda_zero_reduction():
    rng = np.random.default_rng(1010)
    identical = True
    with default_dtype(np.float64):
        for _ in range(100):
            o = rng.uniform(0.02, 0.98, (4, 9))
            t = (np.arange(9)[None, :] < rng.integers(0, 10, 4)[:, None]
                 ).astype(np.float64)
            ce_value, ce_grad = losses.cross_entropy(o, t)
            rep, grad = losses.odl(o, t, lam=0.0)
            if rep.total != ce_value or (grad != ce_grad).any():
                identical = False
                break
            assert rep.emd_term > 0  # still measured, just not in the total
    report(10, "lambda-zero reduction", identical,
           "100 random batches, values and gradients bit-identical")
