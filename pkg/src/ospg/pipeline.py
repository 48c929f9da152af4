"""End-to-end glue: corpus -> examples -> curriculum -> held-out evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import curriculum as cur
from . import evaluation as ev
from . import synth
from .config import RunConfig
from .grammar import SPEECH_TASKS, Form, TaskTag, default_vocab, detokenize, parse_output
from .model import Example, Placement, SpeechLM, make_example
from .pretrain import pretrain_base

log = logging.getLogger(__name__)


def prepare(model: SpeechLM, samples: Sequence[synth.TrainingSample],
            placement: Placement = Placement()) -> dict[str, list[Example]]:
    """Tokenize samples and cache frozen encoder outputs, grouped by data mix."""
    pools: dict[str, list[Example]] = {}
    for s in samples:
        e = make_example(model, s.id, s.instruction, s.target, s.audio, placement,
                         {"tasks": s.tasks, "stage": s.extra.get("stage", "")})
        pools.setdefault(s.mix, []).append(e)
    return pools


def heldout_natural(n: int, seed: int) -> list[synth.TrainingSample]:
    """``n`` single-task speech samples with natural instructions, tasks round-robin."""
    rng = np.random.default_rng([seed, 0x5EED])
    out = []
    per = {t: 0 for t in SPEECH_TASKS}
    for i in range(n):
        per[SPEECH_TASKS[i % len(SPEECH_TASKS)]] += 1
    for task, count in per.items():
        for label in synth._balanced_labels(task, count, rng):
            s = synth.gen_sample(task, int(rng.integers(2**62)), Form.NATURAL, label, compound_rate=0.0)
            s.mix = "joint_multimodal"
            out.append(s)
    return out


@dataclass
class Outputs:
    samples: list[synth.TrainingSample]
    texts: list[str]

    def verdicts(self) -> list[ev.JudgeVerdict]:
        return [ev.rule_judge(s.instruction, t) for s, t in zip(self.samples, self.texts)]

    def items(self) -> list[ev.EvalItem]:
        return [ev.EvalItem(s.id, s.tasks[0], s.instruction, s.target, t) for s, t in zip(self.samples, self.texts)]


def run_inference(model: SpeechLM, samples: Sequence[synth.TrainingSample], placement: Placement = Placement(),
                  max_new: int = 40, batch_size: int = 50) -> Outputs:
    exs = [make_example(model, s.id, s.instruction, s.target, s.audio, placement) for s in samples]
    ids = model.generate(exs, max_new=max_new, batch_size=batch_size)
    return Outputs(list(samples), [detokenize(i, model.vocab) for i in ids])


def asr_token_accuracy(out: Outputs) -> float:
    pairs = []
    for s, t in zip(out.samples, out.texts):
        if s.tasks != (TaskTag.ASR,):
            continue
        hyp = ev.safe_parse(t)
        pairs.append((parse_output(s.target).content.split(), [] if hyp is None else hyp.content.split()))
    if not pairs:
        raise ValueError("no ASR items in the evaluation set")
    return ev.token_accuracy(pairs)


def build_model(cfg: RunConfig) -> SpeechLM:
    vocab = default_vocab()
    return SpeechLM(replace(cfg.model_config(), lm=cfg.lm_config(len(vocab))), vocab)


def finl_rows(model: SpeechLM, cfg: RunConfig, seed: int | None = None) -> list[ev.FiNlRow]:
    """Fixed-vs-natural comparison on freshly generated paired items."""
    pairs = synth.paired_test_set(cfg.eval.finl_per_task, cfg.eval.heldout_seed + 1 if seed is None else seed)
    out = run_inference(model, [s for p in pairs for s in p], cfg.placement, cfg.eval.max_new, cfg.eval.batch_size)
    return ev.fi_vs_nl_report(out.items())


@dataclass
class DeskResult:
    ifr: ev.IfrReport
    asr_accuracy: float
    seconds: float
    total_steps: int
    metrics: list[dict]
    outputs: Outputs
    model: SpeechLM


def desk_run(cfg: RunConfig | None = None, on_step: Callable[[dict], None] | None = None) -> DeskResult:
    """Corpus -> base-LM pretraining -> stages I-III -> held-out natural-instruction evaluation."""
    cfg = cfg or RunConfig()
    t0 = time.perf_counter()
    samples = synth.gen_entries(cfg.corpus, cfg.seed)
    model = build_model(cfg)
    pools = prepare(model, samples, cfg.placement)
    log.info("corpus ready: %d samples in %.1fs", len(samples), time.perf_counter() - t0)
    pretrain_base(model, cfg.pretrain, on_step)
    log.info("base LM pretrained at %.1fs", time.perf_counter() - t0)
    stages = cfg.stage_configs()
    metrics = cur.run_curriculum(model, stages, pools, seed=cfg.seed, on_step=on_step)
    held = heldout_natural(cfg.eval.heldout, cfg.eval.heldout_seed)
    out = run_inference(model, held, cfg.placement, cfg.eval.max_new, cfg.eval.batch_size)
    ifr = ev.compute_ifr(out.verdicts())
    acc = asr_token_accuracy(out)
    return DeskResult(ifr, acc, time.perf_counter() - t0, sum(s.steps for s in stages), metrics, out, model)
