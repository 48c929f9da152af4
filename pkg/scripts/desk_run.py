"""Full desk run: corpus, base-LM pretraining, stages I-III, held-out evaluation.

Prints the natural-instruction IFR, ASR token accuracy and the fixed-vs-natural
table, and saves the trained checkpoint plus a JSON summary.

    python scripts/desk_run.py [--config run.cfg] [--out desk]
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from ospg import checkpoint as ckpt
from ospg import config as cfgmod
from ospg import evaluation as ev
from ospg import pipeline


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="desk")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("ospg.pretrain").setLevel(logging.WARNING)  # on_step below reports with timings
    cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def on_step(rec):
        if rec["step"] % 250 == 0:
            logging.info("%s step %d loss %.4f (%.0fs)", rec["stage"], rec["step"], rec["loss_total"],
                         time.perf_counter() - t0)

    res = pipeline.desk_run(cfg, on_step)
    rows = pipeline.finl_rows(res.model, cfg)
    print(res.ifr.summary())
    print(f"ASR token accuracy: {res.asr_accuracy:.1f}%")
    print(f"curriculum steps: {res.total_steps}; wall clock {res.seconds:.0f}s")
    print(ev.format_finl_table(rows))
    ckpt.save(out / "model.ospg", {k: t.data for k, t in res.model.named_tensors().items()})
    (out / "config.cfg").write_text(cfgmod.dump(cfg), encoding="utf-8")
    summary = {"ifr_percent": res.ifr.ifr_percent, "asr_token_accuracy": res.asr_accuracy,
               "seconds": res.seconds, "total_steps": res.total_steps,
               "finl": [json.loads(r) for r in ev.finl_records(rows)]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")


if __name__ == "__main__":
    main()
