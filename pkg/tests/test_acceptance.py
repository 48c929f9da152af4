"""Acceptance suite: one group of checks per criterion.

Each test carries a ``criterion`` mark; the terminal summary prints one PASS/FAIL
line per criterion (see conftest.py). The end-to-end run trains the desk-scale
model once per session and takes roughly ten minutes on one CPU core.
"""

import math
import struct
import time

import numpy as np
import pytest

from conftest import tiny_speech_model
from ospg import adapter as ad
from ospg import checkpoint as ckpt
from ospg import curriculum as cur
from ospg import evaluation as ev
from ospg import frontend as fe
from ospg import gradcheck, lm, pipeline, synth
from ospg.config import RunConfig
from ospg.curriculum import Stage, StageConfig
from ospg.evaluation import JudgeVerdict
from ospg.frontend import AudioSignal, FrontendConfig
from ospg.grammar import (ATTRIBUTES, CHARSET, SPEECH_TASKS, Form, StructuredOutput, TaskTag, default_vocab,
                          detokenize, parse_output, render_target, tokenize)
from ospg.lm import LmConfig
from ospg.model import make_example
from ospg.numerics import Tensor

crit = pytest.mark.criterion


# -- 1. gradient suite --------------------------------------------------------------

@crit(1, "finite-difference gradient suite, max rel err < 1e-4, under 2 min")
def test_c01_gradient_suite():
    t0 = time.perf_counter()
    reports = gradcheck.run_suite(seed=0, h=1e-3)
    elapsed = time.perf_counter() - t0
    assert "encode_adapt_forward_ce" in reports and len(reports) > 10
    worst = max(reports.items(), key=lambda kv: kv[1].max_rel_err)
    assert worst[1].max_rel_err < 1e-4, worst
    assert elapsed < 120


# -- 2. adapter compression law -----------------------------------------------------

@crit(2, "adapter output length == ceil(T/4), width == D_llm, T in 1..64")
def test_c02_adapter_compression_law():
    cfg = ad.AdapterConfig()
    params = ad.init_adapter(cfg, 0)
    rng = np.random.default_rng(2)
    for t in range(1, 65):
        z = ad.adapt(Tensor(rng.standard_normal((t, cfg.d_a)).astype(np.float32)), params, cfg)
        assert z.shape == (math.ceil(t / 4), cfg.d_llm), t


# -- 3. hybrid splice ---------------------------------------------------------------

@crit(3, "hybrid splice length and bit-equal speech slice")
def test_c03_hybrid_splice():
    cfg = LmConfig(vocab_size=30, d_llm=16, n_layers=1, n_heads=2, max_len=64)
    params = lm.init_lm(cfg, 0)
    rng = np.random.default_rng(3)
    for _ in range(500):
        nl, nr, L = (int(v) for v in rng.integers(0, 17, 3))
        L = max(L, 1)
        z = rng.standard_normal((L, 16)).astype(np.float32)
        left, right = rng.integers(0, 30, nl).tolist(), rng.integers(0, 30, nr).tolist()
        x = lm.assemble_hybrid(left, z, right, params)
        assert x.shape[0] == nl + L + nr
        assert np.array_equal(x.data[nl:nl + L], z)


# -- 4. grammar and tokenizer round trips -----------------------------------------

def _random_output(rng):
    tasks = tuple(list(TaskTag)[i] for i in rng.permutation(len(TaskTag))[:int(rng.integers(1, 4))])
    pool = [a for t in tasks for a in ATTRIBUTES.get(t, ())]
    attrs = tuple(pool[i] for i in rng.permutation(len(pool))[:int(rng.integers(0, len(pool) + 1))])
    content = "".join(CHARSET[i] for i in rng.integers(0, len(CHARSET), int(rng.integers(0, 20))))
    return StructuredOutput(tasks, content, attrs)


@crit(4, "1000 render->parse and 1000 tokenize->detokenize round trips")
def test_c04_round_trips():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        o = _random_output(rng)
        assert parse_output(render_target(o)) == o
    v = default_vocab()
    surfaces = v.tokens[3:]  # skip pad/bos/eos
    for _ in range(1000):
        s = "".join(surfaces[i] for i in rng.integers(0, len(surfaces), int(rng.integers(0, 30))))
        assert detokenize(tokenize(s, v), v) == s


# -- 5. loss decomposition ----------------------------------------------------------

def _natural_pool(model, n):
    out = []
    for i in range(n):
        s = synth.gen_sample(SPEECH_TASKS[i % 7], i, Form.NATURAL, compound_rate=0.1)
        out.append(make_example(model, f"n{i}", s.instruction, s.target, s.audio))
    return out


class _Uniform:
    def __init__(self, model):
        self.model = model

    def batch_logits(self, batch):
        logits, labels, mask, intent = self.model.batch_logits(batch)
        return Tensor(np.zeros(logits.shape, np.float32)), labels, mask, intent


@crit(5, "stage III total == intent + speech on 100 batches; uniform logits give ln V per term")
def test_c05_loss_decomposition():
    model = tiny_speech_model()
    pool = _natural_pool(model, 30)
    rng = np.random.default_rng(5)
    for _ in range(100):
        batch = [pool[i] for i in rng.choice(len(pool), size=int(rng.integers(1, 6)), replace=False)]
        lb = cur.stage3_loss(model, batch)
        assert lb.total == lb.intent + lb.speech
        _, labels, mask, intent = model.batch_logits(batch)
        speech = mask & ~intent
        assert not (intent & speech).any() and np.array_equal(intent | speech, mask)
        assert intent.any(axis=1).all()  # every row has its task tag(s) in the intent term
    lnv = math.log(len(model.vocab))
    lb = cur.stage3_loss(_Uniform(model), pool[:8])
    assert abs(lb.intent - lnv) < 1e-5 and abs(lb.speech - lnv) < 1e-5


# -- 6. freezing --------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_pools():
    model = tiny_speech_model()
    spec = synth.CorpusSpec(stage1_per_task=2, stage1_text_qa=3, stage2_per_task=2, stage3_per_task=2)
    return model, pipeline.prepare(model, synth.gen_entries(spec, 0))


@crit(6, "groups outside trainable_params(stage) bit-identical after 5 steps")
@pytest.mark.parametrize("stage", list(Stage))
def test_c06_freezing(stage, small_pools):
    model, pools = small_pools
    before = {g: grp.snapshot() for g, grp in model.groups.items()}
    cur.run_curriculum(model, [StageConfig(stage, steps=5, batch_size=6, lr=1e-2)], pools)
    trainable = cur.trainable_params(stage)
    assert "encoder" not in trainable and "lm" not in trainable
    for g, grp in model.groups.items():
        after = grp.snapshot()
        same = all(np.array_equal(before[g][k], after[k]) for k in after)
        assert same == (g not in trainable), g


# -- 7. LoRA ------------------------------------------------------------------------

@crit(7, "zero-B LoRA equals base; merged vs adapter |dlogit| < 1e-5 for r in 1,2,4")
@pytest.mark.parametrize("r", [1, 2, 4])
def test_c07_lora(r):
    cfg = LmConfig(vocab_size=24, d_llm=16, n_layers=2, n_heads=2, max_len=64, lora_rank=r, lora_alpha=2.0 * r)
    params = lm.init_lm(cfg, r)
    rng = np.random.default_rng(70 + r)
    x = Tensor(rng.standard_normal((11, 16)).astype(np.float32))
    lora = lm.init_lora(cfg, r)
    base = lm.forward_embeddings(x, params, cfg).data
    assert np.array_equal(base, lm.forward_embeddings(x, params, cfg, lora).data)
    for k in lora:
        if k.endswith(".B"):
            lora[k] = Tensor(rng.standard_normal(lora[k].shape).astype(np.float32) * 0.2)
    a = lm.forward_embeddings(x, params, cfg, lora).data
    b = lm.forward_embeddings(x, lm.lora_merge(params, lora, cfg), cfg).data
    assert not np.allclose(a, base)
    assert np.abs(a - b).max() < 1e-5


# -- 8. IFR -------------------------------------------------------------------------

@crit(8, "IFR equals the hand count; 451/500 -> 90.2")
def test_c08_ifr():
    flags = [True, False, True, True, False, True, True, True, False, True]
    r = ev.compute_ifr([JudgeVerdict(f, "" if f else "task mismatch") for f in flags])
    assert (r.n_correct, r.n_total, r.ifr_percent) == (7, 10, 70.0)
    r = ev.compute_ifr([JudgeVerdict(True)] * 451 + [JudgeVerdict(False, "x")] * 49)
    assert r.ifr_percent == 90.2


# -- 9. WER -------------------------------------------------------------------------

def _dp_wer(ref, hyp):
    d = np.zeros((len(ref) + 1, len(hyp) + 1), int)
    d[:, 0] = np.arange(len(ref) + 1)
    d[0, :] = np.arange(len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        for j in range(1, len(hyp) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    return 100.0 * d[-1, -1] / len(ref)


@crit(9, "WER matches brute-force DP on 1000 random pairs")
def test_c09_wer_oracle():
    rng = np.random.default_rng(9)
    for _ in range(1000):
        ref = rng.integers(0, 5, int(rng.integers(1, 11))).tolist()
        hyp = rng.integers(0, 5, int(rng.integers(0, 11))).tolist()
        assert ev.compute_wer(ref, hyp) == _dp_wer(ref, hyp)


# -- 10. frontend oracles ----------------------------------------------------------

@crit(10, "fast transform vs naive DFT, Parseval, 1 kHz band, ASR recoverability")
def test_c10_transform_and_parseval():
    rng = np.random.default_rng(10)
    for n in list(range(1, 65)) + [100, 128, 255, 256]:
        x = rng.standard_normal(n)
        assert np.max(np.abs(np.fft.rfft(x) - fe.naive_dft(x))) < 1e-4
        if n >= 2:
            half = fe.power_spectrum(x[None], n)[0]
            full = half.sum() + half[1:(n + 1) // 2].sum()
            energy = (x ** 2).sum()
            assert abs(full / n - energy) <= 1e-4 * energy


@crit(10, "fast transform vs naive DFT, Parseval, 1 kHz band, ASR recoverability")
def test_c10_1khz_band():
    cfg = FrontendConfig()
    x = (0.5 * np.sin(2 * np.pi * 1000.0 * np.arange(16000) / 16000)).astype(np.float32)
    mel = fe.log_mel(AudioSignal(x), cfg)
    assert np.all(np.argmax(mel.frames, axis=1) == int(np.argmin(np.abs(fe.mel_centers(cfg) - 1000.0))))


@crit(10, "fast transform vs naive DFT, Parseval, 1 kHz band, ASR recoverability")
def test_c10_asr_recoverable():
    corpus = synth.gen_entries(RunConfig().corpus, RunConfig().seed)
    asr = [s for s in corpus if s.audio is not None and TaskTag.ASR in s.tasks]
    assert asr
    ok = sum(synth.decode_symbols(s.audio, len(s.clip.symbols)) == list(s.clip.symbols) for s in asr)
    assert ok == len(asr)


# -- 11 / 12. end-to-end desk run --------------------------------------------------

@pytest.fixture(scope="module")
def desk():
    cfg = RunConfig()
    return cfg, pipeline.desk_run(cfg)


@crit(11, "desk run: IFR >= 90%, ASR token accuracy >= 80%, <= 3000 steps, < 30 min")
@pytest.mark.slow
def test_c11_desk_run(desk):
    cfg, res = desk
    print(f"\n{res.ifr.summary()}; ASR token accuracy {res.asr_accuracy:.1f}%; "
          f"{res.total_steps} steps; {res.seconds:.0f}s")
    assert len(synth.gen_entries(cfg.corpus, cfg.seed)) == 2000 and cfg.lm.d_llm == 64
    assert all(s.batch_size == 16 for s in cfg.stage_configs())
    assert res.ifr.n_total == 200
    assert res.total_steps <= 3000
    assert res.seconds < 30 * 60
    assert res.ifr.ifr_percent >= 90.0
    assert res.asr_accuracy >= 80.0


@crit(11, "desk run: IFR >= 90%, ASR token accuracy >= 80%, <= 3000 steps, < 30 min")
@pytest.mark.slow
def test_c11_stage1_sample_emits_task_tag(desk):
    cfg, res = desk
    samples = [synth.gen_sample(t, 900 + i, Form.FIXED, compound_rate=0.0) for i, t in enumerate(SPEECH_TASKS)]
    out = pipeline.run_inference(res.model, samples, cfg.placement)
    for s, text in zip(samples, out.texts):
        assert text.startswith(s.tasks[0].surface), (s.tasks, text)


@crit(12, "FI-vs-NL rows per task with delta == NL - FI; |delta ASR| <= 10 WER")
@pytest.mark.slow
def test_c12_fi_vs_nl(desk):
    cfg, res = desk
    rows = pipeline.finl_rows(res.model, cfg)
    print("\n" + ev.format_finl_table(rows))
    assert sorted(r.task.value for r in rows) == sorted(t.value for t in SPEECH_TASKS)
    for r in rows:
        assert r.delta == r.metric_nl - r.metric_fi
    asr = next(r for r in rows if r.task is TaskTag.ASR)
    assert abs(asr.delta) <= 10.0


# -- 13. checkpoint -----------------------------------------------------------------

@crit(13, "checkpoint bit-exact round trip; magic/size/version errors structured")
def test_c13_checkpoint(tmp_path):
    rng = np.random.default_rng(13)
    table = {"w": rng.standard_normal((3, 5)).astype(np.float32), "b": rng.standard_normal(4).astype(np.float32),
             "s": np.array(1.5, np.float32)}
    ckpt.save(tmp_path / "m.ospg", table)
    back = ckpt.load(tmp_path / "m.ospg")
    assert list(back) == list(table)
    assert all(back[k].tobytes() == table[k].tobytes() and back[k].shape == table[k].shape for k in table)
    buf = ckpt.encode(table)
    bad = bytearray(buf)
    bad[:4] = b"XXXX"
    with pytest.raises(ckpt.BadMagic) as e:
        ckpt.decode(bytes(bad))
    assert e.value.offset == 0
    with pytest.raises(ckpt.SizeMismatch):
        ckpt.decode(buf[:-2])
    bad = bytearray(buf)
    struct.pack_into("<I", bad, 4, ckpt.VERSION + 1)
    with pytest.raises(ckpt.VersionMismatch) as e:
        ckpt.decode(bytes(bad))
    assert e.value.offset == 4
