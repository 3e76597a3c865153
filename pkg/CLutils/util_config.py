#!/usr/bin/env python
# =============================================================================#
#                                                                             #
# NAME:     util_config.py                                                    #
#                                                                             #
# PURPOSE:  Configuration records for data generation, the toy MLLM, the      #
#           training stages, the mitigation methods and complete runs.        #
#                                                                             #
# REQUIRED: Standard library only.                                           #
#                                                                             #
# CONTENTS:                                                                   #
#                                                                             #
#  ModelConfig          ... transformer, vision and projector dimensions      #
#  DataConfig           ... dataset sizes and rendering noise                 #
#  StageConfig          ... optimiser + schedule for one training stage       #
#  PretrainConfig       ... base LM training loop and its accuracy floor      #
#  SoftTargetConfig     ... label smoothing strength                          #
#  LoRAConfig           ... low-rank adapter rank, scaling and targets        #
#  RehearsalConfig      ... fraction of each past task kept for replay        #
#  MethodSpec           ... which mitigation method is active                 #
#  Seeds                ... explicit seeds for data, init, train and eval     #
#  RunConfig            ... everything needed to reproduce a run              #
#  config_to_dict       ... nested record -> plain dictionary                 #
#  config_from_dict     ... plain dictionary -> nested record                 #
#  load_config          ... read and validate a JSON run configuration        #
#  save_config          ... write a run configuration as JSON                 #
#  apply_seed_overrides ... apply K=V seed overrides from the command line    #
#  config_hash          ... stable hash of a run configuration                #
#  data_hash            ... provenance hash of the generated datasets         #
#  pretrain_hash        ... provenance hash of the base LM checkpoint         #
#                                                                             #
# =============================================================================#
#                                                                             #
# The MIT License (MIT)                                                       #
#                                                                             #
# Copyright (c) 2026 The MLLM-CLtools developers                              #
#                                                                             #
# =============================================================================#

import json
import typing
from pathlib import Path
from typing import NamedTuple, Optional

from CLutils.util_misc import ConfigError, canonical_json, sha256_hex, write_json

METHOD_VARIANTS = (
    "naive",
    "soft_targets",
    "lora",
    "rehearsal",
    "msgm",
    "msgm_rehearsal",
)
RUN_MODES = ("two_task", "continual")
LORA_TARGET_SETS = ("all_linear", "attention_kqv")
SEED_NAMES = ("data", "init", "train", "eval")


def _with_options(record, kwargs):
    prop = record._asdict()
    prop.update(**kwargs)
    return type(record)(**prop)


class ModelConfig(NamedTuple):
    """Dimensions of the toy MLLM"""

    n_layers: int = 2
    """Number of transformer blocks"""
    d_model: int = 64
    """Residual stream width"""
    n_heads: int = 4
    """Attention heads per block"""
    d_ffn: int = 256
    """Hidden width of the feed-forward layer"""
    context: int = 128
    """Maximum sequence length, counting tokens and image patches"""
    vocab_size: int = 256
    """Vocabulary size N"""
    n_patches: int = 16
    """Patches per synthetic image (P)"""
    patch_dim: int = 8
    """Features per patch (F)"""
    vision_dim: int = 32
    """Output width of the frozen vision encoder"""
    dtype: str = "float32"
    """Floating point type of the parameters ('float32' or 'float64')"""

    def with_options(self, **kwargs):
        """Create a new ModelConfig instance with keywords updated"""
        return _with_options(self, kwargs)

    def validate(self):
        if min(self.n_layers, self.d_model, self.n_heads, self.d_ffn) < 1:
            raise ConfigError("model: layer counts and widths must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"model: d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if self.context < self.n_patches + 16:
            raise ConfigError(
                f"model: context={self.context} must be >= n_patches + 16 "
                f"= {self.n_patches + 16}"
            )
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"model: unsupported dtype '{self.dtype}'")


class DataConfig(NamedTuple):
    """Sizes of the generated datasets"""

    n_pretrain: int = 20000
    """Sentences in the text-only pretraining corpus"""
    n_vl_train: int = 2000
    """Train samples per vision-language task"""
    n_vl_test: int = 256
    """Test samples per vision-language task"""
    n_align: int = 2000
    """Caption samples in the alignment subset"""
    n_nl_test: int = 256
    """Samples per natural-language evaluation set"""
    noise_sigma: float = 0.05
    """Amplitude bound of the patch noise"""

    def with_options(self, **kwargs):
        """Create a new DataConfig instance with keywords updated"""
        return _with_options(self, kwargs)

    def validate(self):
        sizes = (self.n_pretrain, self.n_vl_train, self.n_vl_test, self.n_align)
        if min(sizes + (self.n_nl_test,)) < 1:
            raise ConfigError("data: every dataset size must be >= 1")
        if not 0.0 <= self.noise_sigma < 0.5:
            raise ConfigError("data: noise_sigma must lie in [0, 0.5)")


class StageConfig(NamedTuple):
    """Optimiser and learning-rate schedule for one training stage"""

    peak_lr: float = 2e-5
    """Learning rate reached at the end of warmup"""
    warmup_ratio: float = 0.03
    """Fraction of the stage's steps spent in linear warmup"""
    batch_size: int = 16
    """Global batch size"""
    micro_batch_size: Optional[int] = None
    """Split each global batch into micro-batches of this size"""
    grad_clip: Optional[float] = None
    """Global gradient-norm clip, off when None"""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    epochs: int = 1
    """Passes over the stage data, fixed to one"""
    schedule: str = "warmup_cosine"

    def with_options(self, **kwargs):
        """Create a new StageConfig instance with keywords updated"""
        return _with_options(self, kwargs)

    def validate(self, name="stage"):
        if self.epochs != 1:
            raise ConfigError(f"{name}: epochs must be 1 (single pass per task)")
        if not 0.0 < self.warmup_ratio < 1.0:
            raise ConfigError(f"{name}: warmup_ratio must lie in (0, 1)")
        if self.peak_lr < 0:
            raise ConfigError(f"{name}: peak_lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"{name}: batch_size must be >= 1")
        if self.micro_batch_size is not None and not (
            1 <= self.micro_batch_size <= self.batch_size
        ):
            raise ConfigError(f"{name}: micro_batch_size must lie in [1, batch_size]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"{name}: grad_clip must be positive")
        if self.schedule != "warmup_cosine":
            raise ConfigError(f"{name}: unknown schedule '{self.schedule}'")


ALIGNMENT_STAGE = StageConfig(peak_lr=1e-3, batch_size=32)
FINETUNE_STAGE = StageConfig(peak_lr=2e-5, batch_size=16)


class PretrainConfig(NamedTuple):
    """Training of the text-only base LM (task 1)"""

    peak_lr: float = 3e-3
    warmup_ratio: float = 0.03
    batch_size: int = 32
    max_steps: int = 4000
    """Step cap; the schedule spans the full cap"""
    eval_every: int = 250
    """Evaluate the NL suite every this many steps"""
    nlg_floor: float = 0.30
    """Required cloze accuracy"""
    nlu_floor_factor: float = 2.0
    """Required multiple-choice accuracy as a multiple of chance"""
    require_floor: bool = True
    """Raise PretrainFloorError when the floor is not reached"""

    def with_options(self, **kwargs):
        """Create a new PretrainConfig instance with keywords updated"""
        return _with_options(self, kwargs)

    def stage(self):
        """StageConfig equivalent used for the schedule and optimiser."""
        return StageConfig(
            peak_lr=self.peak_lr,
            warmup_ratio=self.warmup_ratio,
            batch_size=self.batch_size,
        )

    def validate(self):
        self.stage().validate("pretrain")
        if self.max_steps < 1 or self.eval_every < 1:
            raise ConfigError("pretrain: max_steps and eval_every must be >= 1")


class SoftTargetConfig(NamedTuple):
    """Label smoothing of the training targets"""

    alpha: float = 0.01
    """Probability mass moved off the target token"""
    in_alignment: bool = True
    """Also smooth targets during the alignment stage"""


class LoRAConfig(NamedTuple):
    """Low-rank adapters on the LLM linear layers"""

    rank_fraction: float = 0.5
    """Rank as a fraction of min(in, out) of each target layer"""
    rank: Optional[int] = None
    """Explicit rank, overrides rank_fraction"""
    alpha: float = 8.0
    """Scaling numerator"""
    rank_stabilized: bool = True
    """Scale by alpha/sqrt(r) instead of alpha/r"""
    targets: str = "all_linear"
    """'all_linear' or 'attention_kqv'"""


class RehearsalConfig(NamedTuple):
    """Replay of past-task samples"""

    fraction: float = 0.01
    """Fraction of each past task's train split kept in the buffer"""


class MethodSpec(NamedTuple):
    """Active forgetting-mitigation method and its settings"""

    variant: str = "naive"
    soft: SoftTargetConfig = SoftTargetConfig()
    lora: LoRAConfig = LoRAConfig()
    rehearsal: RehearsalConfig = RehearsalConfig()

    def with_options(self, **kwargs):
        """Create a new MethodSpec instance with keywords updated"""
        return _with_options(self, kwargs)

    @property
    def uses_soft_targets(self):
        return self.variant in ("soft_targets", "msgm", "msgm_rehearsal")

    @property
    def uses_lora(self):
        return self.variant in ("lora", "msgm", "msgm_rehearsal")

    @property
    def uses_rehearsal(self):
        return self.variant in ("rehearsal", "msgm_rehearsal")

    def validate(self, vocab_size):
        if self.variant not in METHOD_VARIANTS:
            raise ConfigError(
                f"method: unknown variant '{self.variant}', "
                f"expected one of {', '.join(METHOD_VARIANTS)}"
            )
        alpha = self.soft.alpha
        if not 0.0 < alpha < 1.0 - 1.0 / vocab_size:
            raise ConfigError(
                f"method: soft-target alpha={alpha} must lie in (0, 1 - 1/N)"
            )
        lora = self.lora
        if lora.targets not in LORA_TARGET_SETS:
            raise ConfigError(f"method: unknown LoRA target set '{lora.targets}'")
        if lora.rank is None and not 0.0 < lora.rank_fraction <= 1.0:
            raise ConfigError("method: LoRA rank_fraction must lie in (0, 1]")
        if lora.rank is not None and lora.rank < 1:
            raise ConfigError("method: LoRA rank must be >= 1")
        if lora.alpha <= 0:
            raise ConfigError("method: LoRA alpha must be positive")
        if not 0.0 < self.rehearsal.fraction <= 1.0:
            raise ConfigError("method: rehearsal fraction must lie in (0, 1]")


class Seeds(NamedTuple):
    """Explicit seeds; nothing is drawn from wall-clock entropy"""

    data: int = 0
    """Pretraining corpus and vision-language tasks"""
    init: int = 0
    """Parameter initialisation"""
    train: int = 0
    """Data order, adapter initialisation and rehearsal selection"""
    eval: int = 0
    """Natural-language evaluation suite"""


class RunConfig(NamedTuple):
    """Complete description of an experiment"""

    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    pretrain: PretrainConfig = PretrainConfig()
    alignment: StageConfig = ALIGNMENT_STAGE
    finetune: StageConfig = FINETUNE_STAGE
    method: MethodSpec = MethodSpec()
    mode: str = "continual"
    """'two_task' or 'continual'"""
    seeds: Seeds = Seeds()
    out_dir: str = "cltools_out"
    """Root of the data, pretrain, runs and sweeps directories"""
    threads: int = 1
    """torch intra-op threads, fixed for bit-reproducibility"""

    def with_options(self, **kwargs):
        """Create a new RunConfig instance with keywords updated"""
        return _with_options(self, kwargs)

    def validate(self):
        self.model.validate()
        self.data.validate()
        self.pretrain.validate()
        self.alignment.validate("alignment")
        self.finetune.validate("finetune")
        self.method.validate(self.model.vocab_size)
        if self.mode not in RUN_MODES:
            raise ConfigError(
                f"mode: unknown mode '{self.mode}', expected two_task or continual"
            )
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for name in SEED_NAMES:
            seed = getattr(self.seeds, name)
            if not isinstance(seed, int) or seed < 0:
                raise ConfigError(f"seeds.{name} must be a non-negative integer")
        return self


# -----------------------------------------------------------------------------#
def _is_record(hint):
    return isinstance(hint, type) and issubclass(hint, tuple) and hasattr(hint, "_fields")


def _coerce(hint, value, key):
    """Cast a plain value to the annotated type of its field.

    Integers are accepted for float fields and integral floats for int
    fields; anything else of the wrong type raises ConfigError.
    """
    args = typing.get_args(hint)
    if typing.get_origin(hint) is typing.Union:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if hint in (int, float, bool, str) and not (
        isinstance(value, hint) and (hint is bool or not isinstance(value, bool))
    ):
        raise ConfigError(f"{key}: expected {hint.__name__}, got {value!r}")
    return value


def config_to_dict(record):
    """Convert a (nested) configuration record into a plain dictionary."""
    hints = typing.get_type_hints(type(record))
    out = {}
    for name, value in record._asdict().items():
        if _is_record(type(value)):
            out[name] = config_to_dict(value)
        else:
            out[name] = _coerce(hints[name], value, name)
    return out


def config_from_dict(cls, data, where=""):
    """Build a configuration record of type cls from a plain dictionary.

    Missing keys take their defaults; unknown keys raise ConfigError.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping")
    unknown = sorted(set(data) - set(cls._fields))
    if unknown:
        raise ConfigError(
            f"{where or cls.__name__}: unknown key(s) {', '.join(unknown)}"
        )
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        key = f"{where}.{name}" if where else name
        kwargs[name] = (
            config_from_dict(hint, value, key) if _is_record(hint) else _coerce(hint, value, key)
        )
    return cls(**kwargs)


def load_config(path):
    """Read a JSON run configuration and validate it."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as err:
        raise ConfigError(f"Config file {path} is not valid JSON: {err}") from err
    return config_from_dict(RunConfig, raw).validate()


def save_config(cfg, path):
    """Write a run configuration as JSON."""
    return write_json(path, config_to_dict(cfg))


def apply_seed_overrides(cfg, overrides):
    """Apply a list of 'name=value' seed overrides to a RunConfig."""
    seeds = cfg.seeds
    for item in overrides or []:
        name, sep, value = item.partition("=")
        name = name.strip()
        if not sep or name not in SEED_NAMES:
            raise ConfigError(
                f"bad seed override '{item}', expected K=V with K in "
                f"{', '.join(SEED_NAMES)}"
            )
        try:
            seeds = seeds._replace(**{name: int(value)})
        except ValueError as err:
            raise ConfigError(f"seed override '{item}' is not an integer") from err
    return cfg._replace(seeds=seeds)


# -----------------------------------------------------------------------------#
def config_hash(cfg):
    """Hash of everything that determines a run's results.

    The output directory and the thread count are excluded.
    """
    content = config_to_dict(cfg)
    content.pop("out_dir", None)
    content.pop("threads", None)
    return sha256_hex(canonical_json(content))


def data_hash(cfg):
    """Provenance hash of the generated datasets."""
    content = {
        "data": config_to_dict(cfg.data),
        "vocab_size": cfg.model.vocab_size,
        "n_patches": cfg.model.n_patches,
        "patch_dim": cfg.model.patch_dim,
        "seeds": {"data": cfg.seeds.data, "eval": cfg.seeds.eval},
    }
    return sha256_hex(canonical_json(content))


def pretrain_hash(cfg, steps_cap=None):
    """Provenance hash of the base LM checkpoint."""
    content = {
        "data_hash": data_hash(cfg),
        "model": config_to_dict(cfg.model),
        "pretrain": config_to_dict(cfg.pretrain),
        "seeds": {"init": cfg.seeds.init, "train": cfg.seeds.train},
        "steps_cap": steps_cap,
    }
    return sha256_hex(canonical_json(content))
