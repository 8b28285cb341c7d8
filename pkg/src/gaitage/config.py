"""Run configuration: a flat ``key = value`` file with a fixed key set.

Unknown keys are hard errors so a config file can never silently drift
from what the code understands. Lines starting with ``#`` and blank lines
are ignored. A run is reproducible from its config plus seeds alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError
from .model import ModelConfig
from .ordinal import RankSpec
from .data import SynthSpec

LOSS_KINDS = ("odl", "ce", "emd2", "euclidean", "mae")
PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    decoupled: bool = False
    lr_decay: bool = False
    lr_decay_every: int = 15
    lr_decay_factor: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    """Everything one training run needs, serializable as key = value."""

    model: ModelConfig = field(default_factory=ModelConfig)
    rank: RankSpec = field(default_factory=lambda: RankSpec(2.0, 1.0, 89))
    optim: OptimConfig = field(default_factory=OptimConfig)
    synth: SynthSpec | None = None
    manifest: str | None = None
    loss_kind: str = "odl"
    lam: float = 10.0
    gender_weight: float = 1.0
    softmax_on_logits: bool = False
    split_ratio: float = 0.5
    batch_size: int = 64
    epochs: int = 50
    seed: int = 1
    shuffle_seed: int | None = None
    precision: str = "float32"
    out_dir: str = "runs/default"
    eval_every: int = 1
    cs_max: int = 15

    def validate(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"train.precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError(f"train.split_ratio must be in (0, 1), got {self.split_ratio}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {self.eval_every}")
        if (self.synth is None) == (self.manifest is None):
            raise ConfigError(
                "exactly one data source is required: set data.manifest or synth.n")
        scalar = self.loss_kind in ("euclidean", "mae")
        if scalar != (self.model.head_mode == "scalar_regression"):
            raise ConfigError(
                f"loss.kind {self.loss_kind!r} requires model.head_mode "
                f"{'scalar_regression' if scalar else 'ordinal'}")
        if self.model.head_mode == "ordinal" \
                and self.model.k_minus_1 != self.rank.k_minus_1:
            raise ConfigError(
                f"model.k_minus_1 {self.model.k_minus_1} disagrees with the "
                f"rank grid ({self.rank.k_minus_1} classifiers)")
        self.model.validate()
        if self.synth is not None:
            self.synth.validate()

    @property
    def effective_shuffle_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed


def _as_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _as_int_triple(raw: str) -> tuple[int, int, int]:
    parts = [int(p) for p in raw.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected three comma-separated ints, got {raw!r}")
    return tuple(parts)


# key -> (group, field, caster); groups map onto RunConfig sections
_KEYS: dict[str, tuple[str, str, object]] = {
    "data.manifest": ("run", "manifest", str),
    "synth.n": ("synth", "n_samples", int),
    "synth.seed": ("synth", "seed", int),
    "synth.height": ("synth", "height", int),
    "synth.width": ("synth", "width", int),
    "synth.age_min": ("synth", "age_min", int),
    "synth.age_max": ("synth", "age_max", int),
    "synth.noise": ("synth", "noise", float),
    "synth.gender_effect": ("synth", "gender_effect", _as_bool),
    "rank.min": ("rank", "r_min", float),
    "rank.eta": ("rank", "eta", float),
    "rank.count": ("rank", "count", int),
    "model.input_h": ("model", "input_h", int),
    "model.input_w": ("model", "input_w", int),
    "model.crop_rows": ("model", "crop_rows", _as_int_triple),
    "model.conv_channels": ("model", "conv_channels", _as_int_triple),
    "model.conv_kernels": ("model", "conv_kernels", _as_int_triple),
    "model.fc_width": ("model", "fc_width", int),
    "model.leaky_slope": ("model", "leaky_slope", float),
    "model.dropout": ("model", "dropout_rate", float),
    "model.gender_head": ("model", "gender_head", _as_bool),
    "model.head_mode": ("model", "head_mode", str),
    "model.f6_activation": ("model", "f6_activation", _as_bool),
    "model.padding": ("model", "padding", str),
    "loss.kind": ("run", "loss_kind", str),
    "loss.lambda": ("run", "lam", float),
    "loss.gender_weight": ("run", "gender_weight", float),
    "loss.softmax_on_logits": ("run", "softmax_on_logits", _as_bool),
    "optim.lr": ("optim", "lr", float),
    "optim.beta1": ("optim", "beta1", float),
    "optim.beta2": ("optim", "beta2", float),
    "optim.eps": ("optim", "eps", float),
    "optim.weight_decay": ("optim", "weight_decay", float),
    "optim.decoupled": ("optim", "decoupled", _as_bool),
    "optim.lr_decay": ("optim", "lr_decay", _as_bool),
    "optim.lr_decay_every": ("optim", "lr_decay_every", int),
    "optim.lr_decay_factor": ("optim", "lr_decay_factor", float),
    "train.epochs": ("run", "epochs", int),
    "train.batch_size": ("run", "batch_size", int),
    "train.split_ratio": ("run", "split_ratio", float),
    "train.seed": ("run", "seed", int),
    "train.shuffle_seed": ("run", "shuffle_seed", int),
    "train.precision": ("run", "precision", str),
    "train.out_dir": ("run", "out_dir", str),
    "train.eval_every": ("run", "eval_every", int),
    "train.cs_max": ("run", "cs_max", int),
}


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    groups: dict[str, dict] = {"run": {}, "model": {}, "rank": {},
                               "optim": {}, "synth": {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        group, attr, caster = _KEYS[key]
        try:
            groups[group][attr] = caster(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    return _assemble(groups)


def _assemble(groups: dict[str, dict]) -> RunConfig:
    rank_kwargs = groups["rank"]
    rank = RankSpec(**{"r_min": 2.0, "eta": 1.0, "count": 89, **rank_kwargs})
    synth = None
    if groups["synth"]:
        if "n_samples" not in groups["synth"]:
            raise ConfigError("synth.* keys given without synth.n")
        synth = SynthSpec(**{"seed": 0, **groups["synth"]})
    model_kwargs = dict(groups["model"])
    if "k_minus_1" not in model_kwargs:
        model_kwargs["k_minus_1"] = rank.k_minus_1
    if model_kwargs.get("head_mode") == "scalar_regression":
        model_kwargs["k_minus_1"] = rank.k_minus_1  # F6 width unused in scalar mode
    model = ModelConfig(**model_kwargs)
    optim = OptimConfig(**groups["optim"])
    cfg = RunConfig(model=model, rank=rank, optim=optim, synth=synth,
                    **groups["run"])
    cfg.validate()
    return cfg


def parse_config_file(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=path)


def apply_overrides(cfg: RunConfig, *, seed: int | None = None,
                    out_dir: str | None = None, loss: str | None = None,
                    lam: float | None = None,
                    gender_weight: float | None = None,
                    lr_decay: bool = False) -> RunConfig:
    """Apply command-line overrides on top of a parsed config."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    if loss is not None:
        cfg = replace(cfg, loss_kind=loss)
    if lam is not None:
        cfg = replace(cfg, lam=lam)
    if gender_weight is not None:
        cfg = replace(cfg, gender_weight=gender_weight)
    if lr_decay:
        cfg = replace(cfg, optim=replace(cfg.optim, lr_decay=True))
    cfg.validate()
    return cfg


def config_echo(cfg: RunConfig) -> dict:
    """Reproducibility-relevant fields for the checkpoint header.

    The output directory is omitted on purpose: it does not affect any
    computed value, and leaving it out keeps checkpoints byte-identical
    across runs that differ only in where they write.
    """
    echo = {
        "rank": {"r_min": cfg.rank.r_min, "eta": cfg.rank.eta,
                 "count": cfg.rank.count},
        "optim": asdict(cfg.optim),
        "loss_kind": cfg.loss_kind,
        "lambda": cfg.lam,
        "gender_weight": cfg.gender_weight,
        "softmax_on_logits": cfg.softmax_on_logits,
        "split_ratio": cfg.split_ratio,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "shuffle_seed": cfg.effective_shuffle_seed,
        "precision": cfg.precision,
        "manifest": cfg.manifest,
        "synth": asdict(cfg.synth) if cfg.synth else None,
    }
    return echo
