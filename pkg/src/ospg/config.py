"""Flat ``key = value`` run configuration.

Keys are ``section.field``; the registry is built by reflection over the
config dataclasses, so every knob those dataclasses expose is settable here
and appears in :func:`key_reference`.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable

from . import curriculum as cur
from .adapter import AdapterConfig
from .encoder import EncoderConfig
from .frontend import FrontendConfig
from .grammar import TaskTag
from .lm import LORA_SITES, LmConfig
from .model import ModelConfig, Placement
from .pretrain import PretrainConfig
from .synth import CorpusSpec


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str, line: int | None = None):
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {msg}")


@dataclass
class LmSettings:
    """LM knobs; vocab_size comes from the vocabulary, not the config."""

    d_llm: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    max_len: int = 512
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_targets: tuple[str, ...] = ("wq", "wk", "wv", "wo")
    embed_scale: float = 1.0


@dataclass
class StageSettings:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 50
    mix: dict[str, float] = field(default_factory=dict)
    unfreeze_encoder: bool = False
    lr_scale: dict[str, float] = field(default_factory=dict)


@dataclass
class EvalSettings:
    heldout: int = 200
    heldout_seed: int = 10_000
    max_new: int = 40
    batch_size: int = 50
    finl_per_task: int = 20
    judge: str = "rule"
    judge_endpoint: str = ""
    judge_timeout_ms: int = 10_000


@dataclass
class DataSettings:
    train_manifest: str = ""
    test_manifest: str = ""


# ASR and SRWT need the most examples; order follows corpus.tasks
DESK_TASK_WEIGHTS = (4.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0)


@dataclass
class RunConfig:
    seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    lm: LmSettings = field(default_factory=LmSettings)
    placement: Placement = field(default_factory=Placement)
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(task_weights=DESK_TASK_WEIGHTS))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: StageSettings = field(default_factory=lambda: StageSettings(1500, lr=3e-3))
    stage2: StageSettings = field(default_factory=lambda: StageSettings(150, lr=2e-3, warmup=20))
    stage3: StageSettings = field(default_factory=lambda: StageSettings(1350, lr=2e-3))
    eval: EvalSettings = field(default_factory=EvalSettings)
    data: DataSettings = field(default_factory=DataSettings)

    # -- derived objects --------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            frontend=self.frontend,
            encoder=replace(self.encoder, n_mels=self.frontend.n_mels, frozen=not self.stage3.unfreeze_encoder),
            adapter=replace(self.adapter, d_a=self.encoder.d_a, d_llm=self.lm.d_llm),
            lm=None,
            seed=self.seed,
        )

    def lm_config(self, vocab_size: int) -> LmConfig:
        return LmConfig(vocab_size=vocab_size, **dataclasses.asdict(self.lm))

    def stage_configs(self) -> tuple[cur.StageConfig, ...]:
        out = []
        for stage, s in ((cur.Stage.I, self.stage1), (cur.Stage.II, self.stage2), (cur.Stage.III, self.stage3)):
            out.append(cur.StageConfig(stage, s.steps, s.batch_size, s.lr, s.warmup, dict(s.mix),
                                       s.unfreeze_encoder and stage is cur.Stage.III, dict(s.lr_scale)))
        return tuple(out)


# Fields that are computed from other keys and therefore not settable.
DERIVED = {
    "encoder.n_mels": "equals frontend.n_mels",
    "encoder.frozen": "true unless stage3.unfreeze_encoder",
    "adapter.d_a": "equals encoder.d_a",
    "adapter.d_llm": "equals lm.d_llm",
    "stage1.unfreeze_encoder": "the encoder can only be unfrozen in stage III",
    "stage2.unfreeze_encoder": "the encoder can only be unfrozen in stage III",
}

DOCS = {
    "seed": "master seed for initialization, corpus generation and batch order",
    "frontend.sample_rate": "expected input sample rate in Hz",
    "frontend.frame_len": "analysis window length in samples",
    "frontend.frame_hop": "hop between frames in samples",
    "frontend.fft_size": "transform size (power of two, >= frame_len)",
    "frontend.n_mels": "number of mel bands",
    "frontend.f_min": "lowest mel edge in Hz",
    "frontend.f_max": "highest mel edge in Hz",
    "frontend.log_floor": "natural-log floor applied to band energies",
    "encoder.d_a": "acoustic embedding width",
    "encoder.n_layers": "encoder transformer blocks",
    "encoder.n_heads": "encoder attention heads",
    "encoder.ff_mult": "encoder feed-forward expansion",
    "encoder.positional": "add sinusoidal positions before the encoder blocks",
    "adapter.conv_channels": "channels of both downsampling convolutions",
    "adapter.n_layers": "adapter transformer blocks (N)",
    "adapter.n_heads": "adapter attention heads",
    "adapter.ff_mult": "adapter feed-forward expansion",
    "adapter.positional": "add sinusoidal positions after the convolutions",
    "lm.d_llm": "LM width, also the speech-token width",
    "lm.n_layers": "LM transformer blocks",
    "lm.n_heads": "LM attention heads",
    "lm.ff_mult": "LM feed-forward expansion",
    "lm.max_len": "maximum hybrid sequence length",
    "lm.lora_rank": "LoRA rank r",
    "lm.lora_alpha": "LoRA scale numerator (delta = alpha/r * B A)",
    "lm.lora_targets": f"comma-separated projections to adapt, from {','.join(LORA_SITES)}",
    "lm.embed_scale": "standard deviation of the frozen token embeddings",
    "placement.fixed": "side of the speech tokens for tag-only instructions (left|right)",
    "placement.natural": "side of the speech tokens for natural instructions (left|right)",
    "corpus.stage1_per_task": "stage I fixed-instruction speech samples per task",
    "corpus.stage1_text_qa": "stage I text-only question answering samples",
    "corpus.stage2_per_task": "stage II intent samples per task (speech tasks plus chat)",
    "corpus.stage3_per_task": "stage III natural-instruction speech samples per task",
    "corpus.test_per_task": "held-out natural-instruction samples per task written with the corpus",
    "corpus.compound_rate": "probability that a sample asks for two tasks at once",
    "corpus.tasks": "comma-separated speech tasks to generate",
    "corpus.task_weights": "relative per-task shares of the stage I and III budgets (empty = uniform)",
    "pretrain.steps": "base-LM text pretraining steps before the curriculum (0 = random frozen LM)",
    "pretrain.batch_size": "pretraining batch size",
    "pretrain.lr": "pretraining peak learning rate",
    "pretrain.warmup": "pretraining warmup steps",
    "pretrain.pool": "number of generated pretraining text pairs",
    "pretrain.weights": "shares of the copy, collapse, add and echo text kinds",
    "pretrain.noise_std": "Gaussian noise std on prompt embeddings during pretraining",
    "pretrain.seed": "seed of the pretraining text and batch order",
    "eval.heldout": "size of the held-out natural-instruction set used by the desk run",
    "eval.heldout_seed": "seed of the held-out set",
    "eval.max_new": "generation budget in tokens",
    "eval.batch_size": "inference batch size",
    "eval.finl_per_task": "paired fixed/natural items per task for the comparison report",
    "eval.judge": "instruction-following judge (rule|http)",
    "eval.judge_endpoint": "URL of the HTTP judge",
    "eval.judge_timeout_ms": "HTTP judge timeout in milliseconds",
    "data.train_manifest": "manifest used by train when no positional path is given",
    "data.test_manifest": "manifest used by eval when no positional path is given",
}
for _n in (1, 2, 3):
    DOCS.update({
        f"stage{_n}.steps": f"optimizer steps in stage {'I' * _n}",
        f"stage{_n}.batch_size": "samples per batch",
        f"stage{_n}.lr": "peak Adam learning rate",
        f"stage{_n}.warmup": "linear warmup steps before cosine decay",
        f"stage{_n}.mix": "data mix as name:weight pairs, comma-separated (empty = stage default)",
        f"stage{_n}.lr_scale": "per-group step multipliers as group:factor pairs (adapter, lora, encoder)",
    })
DOCS["stage3.unfreeze_encoder"] = "also train the encoder in stage III"

SECTIONS = ("frontend", "encoder", "adapter", "lm", "placement", "corpus", "pretrain", "stage1", "stage2",
            "stage3", "eval", "data")


def _section_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {s: hints[s] for s in SECTIONS}


def registered_keys() -> dict[str, Any]:
    """key -> type annotation, for every settable key."""
    keys: dict[str, Any] = {"seed": int}
    for sec, cls in _section_types().items():
        for f, tp in typing.get_type_hints(cls).items():
            if f not in {x.name for x in fields(cls)}:
                continue
            key = f"{sec}.{f}"
            if key not in DERIVED:
                keys[key] = tp
    return keys


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_pairs(s: str, allowed: tuple[str, ...]) -> dict[str, float]:
    out = {}
    for part in filter(None, (p.strip() for p in s.split(","))):
        name, sep, w = part.partition(":")
        if not sep:
            raise ValueError(f"entry {part!r} is not name:value")
        if name.strip() not in allowed:
            raise ValueError(f"unknown name {name.strip()!r}; choose from {', '.join(allowed)}")
        out[name.strip()] = float(w)
    return out


def _converter(key: str, tp) -> Callable[[str], Any]:
    if key == "corpus.tasks":
        return lambda s: tuple(TaskTag.from_name(t.strip()) for t in s.split(",") if t.strip())
    if key.endswith(".mix"):
        return lambda s: _parse_pairs(s, cur.MIXES)
    if key.endswith(".lr_scale"):
        return lambda s: _parse_pairs(s, ("encoder", "adapter", "lora"))
    if tp is bool:
        return _parse_bool
    if tp is int:
        return lambda s: int(s, 0)
    if tp is float:
        return float
    if tp is str:
        return str
    if typing.get_origin(tp) is tuple:
        return lambda s: tuple(t.strip() for t in s.split(",") if t.strip())
    raise TypeError(f"no parser for {key} ({tp})")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(v.name.lower() if isinstance(v, TaskTag) else str(v) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{v}" for k, v in value.items())
    return str(value)


def get_value(cfg: RunConfig, key: str):
    if "." not in key:
        return getattr(cfg, key)
    sec, f = key.split(".", 1)
    return getattr(getattr(cfg, sec), f)


def apply(cfg: RunConfig, values: dict[str, str], lines: dict[str, int] | None = None) -> RunConfig:
    """Return a copy of ``cfg`` with string ``values`` parsed and applied."""
    keys = registered_keys()
    lines = lines or {}
    updates: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for key, raw in values.items():
        if key not in keys:
            hint = f" ({DERIVED[key]})" if key in DERIVED else ""
            raise ConfigError(key, f"unknown key{hint}", lines.get(key))
        try:
            val = _converter(key, keys[key])(raw)
        except ValueError as e:
            raise ConfigError(key, f"bad value {raw!r}: {e}", lines.get(key)) from None
        if "." in key:
            sec, f = key.split(".", 1)
            updates.setdefault(sec, {})[f] = val
        else:
            top[key] = val
    kwargs = dict(top)
    for sec, kv in updates.items():
        try:
            kwargs[sec] = replace(getattr(cfg, sec), **kv)
        except (ValueError, TypeError) as e:
            key = f"{sec}.{next(iter(kv))}" if len(kv) == 1 else sec
            raise ConfigError(key, str(e)) from None
    out = replace(cfg, **kwargs)
    _validate(out)
    return out


def _validate(cfg: RunConfig) -> None:
    for side in ("fixed", "natural"):
        if getattr(cfg.placement, side) not in ("left", "right"):
            raise ConfigError(f"placement.{side}", "must be left or right")
    if cfg.eval.judge not in ("rule", "http"):
        raise ConfigError("eval.judge", f"must be rule or http, got {cfg.eval.judge!r}")
    for n in (1, 2, 3):
        s = getattr(cfg, f"stage{n}")
        if s.steps < 0 or s.batch_size < 1 or s.lr <= 0 or s.warmup < 0:
            raise ConfigError(f"stage{n}", "steps >= 0, batch_size >= 1, lr > 0 and warmup >= 0 required")
    for key, build in (("lm", lambda: cfg.lm_config(vocab_size=1)), ("model", cfg.model_config)):
        try:
            build()
        except ValueError as e:
            raise ConfigError(key, str(e)) from None
    stages = (cfg.stage1, cfg.stage2, cfg.stage3)
    for n, s in enumerate(stages, 1):
        try:
            cur.StageConfig(cur.Stage(n), s.steps, s.batch_size, s.lr, s.warmup, dict(s.mix), s.unfreeze_encoder,
                            dict(s.lr_scale))
        except ValueError as e:
            raise ConfigError(f"stage{n}", str(e)) from None


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(key or "?", "expected key = value", n)
        if key in values:
            raise ConfigError(key, f"duplicate key (first set on line {lines[key]})", n)
        values[key] = value.strip()
        lines[key] = n
    return apply(base or RunConfig(), values, lines)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e}") from e
    return parse_text(text)


def dump(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {_format(get_value(cfg, k))}" for k in registered_keys()) + "\n"


def key_reference() -> str:
    """Markdown table of every key, its default and meaning."""
    default = RunConfig()
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for k in registered_keys():
        rows.append(f"| `{k}` | `{_format(get_value(default, k))}` | {DOCS[k]} |")
    return "\n".join(rows) + "\n"
