"""``ospg`` command line: gen-data, train, infer, eval, merge-lora.

Every failure prints one line ``ospg-error: <category>: <message>`` on stderr
and exits nonzero (2 for usage problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import checkpoint as ckpt
from . import config as cfgmod
from . import curriculum as cur
from . import evaluation as ev
from . import lm
from . import pipeline
from . import synth
from .frontend import load_audio
from .grammar import Form, GrammarError, Instruction, TaskTag, detokenize, parse_output, render_target
from .model import SpeechLM, make_example
from .pretrain import pretrain_base

log = logging.getLogger("ospg")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


def _setup_logging() -> None:
    level = os.environ.get("OSPG_LOG", "info").strip().lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"OSPG_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def _run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def load_model(cfg: cfgmod.RunConfig, path) -> SpeechLM:
    model = pipeline.build_model(cfg)
    try:
        model.load_named(ckpt.load(path))
    except (KeyError, ValueError) as e:
        if isinstance(e, ckpt.CheckpointError):
            raise
        raise ckpt.FormatError(0, f"{path}: checkpoint does not fit the configured model: {e}") from None
    return model


def _records(path) -> list[synth.TrainingSample]:
    if not path:
        raise UsageError("no manifest given (pass a path or set data.*_manifest in the config)")
    if not Path(path).exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return [synth.sample_from_record(r) for r in synth.read_manifest(path)]


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg: cfgmod.RunConfig) -> int:
    out = Path(args.out or "corpus")
    samples = synth.gen_corpus(cfg.corpus, cfg.seed, out)
    mixes = Counter(s.mix for s in samples)
    n_audio = sum(s.audio is not None for s in samples)
    print(f"wrote {len(samples)} samples ({n_audio} audio files) to {out}")
    for mix, n in sorted(mixes.items()):
        print(f"  {mix}: {n}")
    return 0


def cmd_train(args, cfg: cfgmod.RunConfig) -> int:
    samples = _records(args.manifest or cfg.data.train_manifest)
    model = pipeline.build_model(cfg)
    pools = pipeline.prepare(model, samples, cfg.placement)
    out = Path(args.out or "model.ospg")
    metrics_path = out.with_suffix(".metrics.jsonl")
    t0 = time.perf_counter()
    with open(metrics_path, "w", encoding="utf-8") as mf:
        def on_step(rec):
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["stage"] != "pretrain" and rec["step"] % 100 == 0:
                log.info("%s step %d loss %.4f", rec["stage"], rec["step"], rec["loss_total"])

        pretrain_base(model, cfg.pretrain, on_step)
        cur.run_curriculum(model, cfg.stage_configs(), pools, seed=cfg.seed, on_step=on_step)
    ckpt.save(out, {k: t.data for k, t in model.named_tensors().items()})
    print(f"trained in {time.perf_counter() - t0:.1f}s; checkpoint {out}; metrics {metrics_path}")
    return 0


def _instruction(text: str) -> Instruction:
    try:
        parsed = parse_output(text)
        if not parsed.content and not parsed.attributes:
            return Instruction(text, Form.FIXED, frozenset(parsed.tasks))
    except GrammarError:
        pass
    return Instruction(text, Form.NATURAL, frozenset())


def cmd_infer(args, cfg: cfgmod.RunConfig) -> int:
    model = load_model(cfg, args.checkpoint)
    signal = load_audio(args.audio, cfg.frontend.sample_rate)
    instr = _instruction(args.instruction)
    ex = make_example(model, "infer", instr, "", signal, cfg.placement)
    ids = model.generate([ex], max_new=cfg.eval.max_new)[0]
    text = detokenize(ids, model.vocab)
    print(text)
    try:
        o = parse_output(text)
    except GrammarError as e:
        print(f"parse failed: {e}", file=sys.stderr)
        return 1
    print(json.dumps({"tasks": [t.name for t in o.tasks], "content": o.content, "attributes": list(o.attributes)}))
    return 0


def _judge(args, cfg: cfgmod.RunConfig):
    kind = args.judge or cfg.eval.judge
    if kind == "rule":
        return ev.rule_judge
    url = args.judge_endpoint or cfg.eval.judge_endpoint
    if not url:
        raise UsageError("--judge http needs --judge-endpoint (or eval.judge_endpoint)")
    endpoint = ev.JudgeEndpoint(url, args.judge_timeout_ms or cfg.eval.judge_timeout_ms)
    return lambda instr, out: ev.llm_judge_request(instr, out, endpoint)


def cmd_eval(args, cfg: cfgmod.RunConfig) -> int:
    samples = [s for s in _records(args.manifest or cfg.data.test_manifest) if s.audio is not None]
    if not samples:
        raise ValueError("manifest has no audio-bearing items to evaluate")
    model = load_model(cfg, args.checkpoint)
    outs = pipeline.run_inference(model, samples, cfg.placement, cfg.eval.max_new, cfg.eval.batch_size)
    report = Path(args.out or f"eval-{args.mode}.jsonl")
    lines: list[str] = []
    if args.mode == "ifr":
        judge = _judge(args, cfg)
        verdicts = ev.judge_all([(s.instruction, t) for s, t in zip(outs.samples, outs.texts)], judge)
        for s, t, v in zip(outs.samples, outs.texts, verdicts):
            lines.append(json.dumps({"id": s.id, "output": t, "correct": v.correct, "rationale": v.rationale}))
        r = ev.compute_ifr(verdicts)
        lines.append(json.dumps({"n_correct": r.n_correct, "n_total": r.n_total, "ifr_percent": r.ifr_percent}))
        print(r.summary())
    elif args.mode == "finl":
        rows = ev.fi_vs_nl_report(outs.items())
        lines = ev.finl_records(rows)
        print(ev.format_finl_table(rows))
    else:
        by_task: dict[TaskTag, list[int]] = {}
        for i, s in enumerate(outs.samples):
            if len(s.tasks) == 1:
                by_task.setdefault(s.tasks[0], []).append(i)
        for task in sorted(by_task, key=list(TaskTag).index):
            idx = by_task[task]
            value = ev.task_metric(task, [outs.samples[i].target for i in idx], [outs.texts[i] for i in idx])
            name = ev.metric_name(task)
            lines.append(json.dumps({"task": task.name, "metric": name, "value": value, "n": len(idx)}))
            print(f"{task.name} {name}: {value:.2f} ({len(idx)} items)")
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("report written to %s", report)
    return 0


def cmd_merge_lora(args, cfg: cfgmod.RunConfig) -> int:
    model = load_model(cfg, args.checkpoint)
    merged = lm.lora_merge(model.lm, model.lora, model.lm_cfg)
    tensors = {f"{g}.{k}": t.data for g in ("encoder", "adapter") for k, t in model.groups[g].tensors.items()}
    tensors.update({f"lm.{k}": t.data for k, t in merged.items()})
    out = Path(args.out or Path(args.checkpoint).with_suffix(".merged.ospg"))
    ckpt.save(out, tensors)
    print(f"merged checkpoint {out}")
    return 0


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output path")

    p = argparse.ArgumentParser(prog="ospg", description="Desk-scale speech understanding pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="run the three-stage curriculum")
    t.add_argument("manifest", nargs="?", help="corpus manifest.jsonl")
    i = sub.add_parser("infer", parents=[common], help="run one audio file through a checkpoint")
    i.add_argument("checkpoint")
    i.add_argument("audio")
    i.add_argument("instruction")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest", nargs="?")
    e.add_argument("--mode", choices=("ifr", "finl", "task"), default="ifr")
    e.add_argument("--judge", choices=("rule", "http"))
    e.add_argument("--judge-endpoint")
    e.add_argument("--judge-timeout-ms", type=int)
    m = sub.add_parser("merge-lora", parents=[common], help="fold LoRA deltas into the base weights")
    m.add_argument("checkpoint")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "merge-lora": cmd_merge_lora}


def _fail(category: str, msg: str, code: int) -> int:
    print(f"ospg-error: {category}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code == 0:
            return 0
        return _fail("usage", "invalid arguments (see --help)", 2)
    try:
        _setup_logging()
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        return _fail("usage", e, 2)
    except cfgmod.ConfigError as e:
        return _fail("config", e, 1)
    except ckpt.CheckpointError as e:
        return _fail("checkpoint", e, 1)
    except (OSError, FileNotFoundError) as e:
        return _fail("io", e, 1)
    except ev.JudgeError as e:
        return _fail("judge", e, 1)
    except (ValueError, KeyError) as e:
        return _fail("data", e, 1)
    except Exception as e:  # noqa: BLE001 - last-resort single-line report
        log.debug("unhandled failure", exc_info=True)
        return _fail("runtime", f"{type(e).__name__}: {e}", 1)


if __name__ == "__main__":
    sys.exit(main())
