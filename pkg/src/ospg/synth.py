"""Deterministic synthetic speech-task corpus.

Every waveform is built the same way, so all attribute labels are defined for
every clip and multi-task targets stay consistent:

    [tones: n x 100 ms] [event burst] [trailing silence]

* tones: ``n`` distinct symbols from a 16-tone alphabet, ``f_k = 200 * 2**(k/4)`` Hz,
  named ``a`` .. ``p``.  The transcript is the space-joined names.
* pitch hum (SGC): a quiet constant tone under the symbols; below 400 Hz is male.
* amplitude modulation rate (SER) and per-tone envelope shape (SSR).
* event burst (VED): laugh pulses, a cough, a noise stretch, or nothing.
* total duration (SAP): < 0.5 s child, < 1.0 s adult, otherwise old.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .frontend import AudioSignal, naive_dft, write_raw
from .grammar import (ATTRIBUTES, Form, Instruction, StructuredOutput, TaskTag, SPEECH_TASKS,
                      fixed_instruction, parse_output, render_target)

SAMPLE_RATE = 16000
TONE_SEC = 0.1
N_SYMBOLS = 16
SYMBOL_NAMES = tuple("abcdefghijklmnop")
SYMBOL_FREQS = tuple(200.0 * 2 ** (k / 4) for k in range(N_SYMBOLS))
FRAMES_PER_TONE = 10  # 100 ms at a 10 ms hop

TONE_AMP = 0.5
HUM_AMP = 0.05
NOISE_AMP = 0.3

PITCH_RANGES = {"<MALE>": (110.0, 330.0), "<FEMALE>": (470.0, 900.0)}
AM_RATES = {"<NEUTRAL>": (0.0, 0.0), "<SAD>": (3.0, 5.0), "<HAPPY>": (7.0, 10.0),
            "<ANGRY>": (13.0, 17.0), "<SURPRISE>": (22.0, 28.0)}
ENVELOPES = {"<NEWS>": "square", "<CHAT>": "ramp", "<STORY>": "sine"}
BURST_SEC = {"<LAUGH>": 0.15, "<COUGH>": 0.1, "<NOISE>": 0.15, "<NONE>": 0.0}
AGE_RANGES = {"<CHILD>": (0.30, 0.47), "<ADULT>": (0.55, 0.95), "<OLD>": (1.05, 1.35)}

TASK_INDEX = {t: i for i, t in enumerate(TaskTag)}


def age_label(duration: float) -> str:
    if duration < 0.5:
        return "<CHILD>"
    if duration < 1.0:
        return "<ADULT>"
    return "<OLD>"


def gender_label(pitch: float) -> str:
    return "<MALE>" if pitch < 400.0 else "<FEMALE>"


def emotion_label(rate: float) -> str:
    for label, (lo, hi) in AM_RATES.items():
        if lo <= rate <= hi:
            return label
    raise ValueError(f"modulation rate {rate} outside every bucket")


@dataclass(frozen=True)
class ClipSpec:
    """Everything needed to synthesize one clip; labels follow from these fields."""

    symbols: tuple[int, ...]
    pitch: float
    am_rate: float
    envelope: str
    burst: str
    duration: float
    noise_seed: int

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * SAMPLE_RATE))

    def labels(self) -> dict[TaskTag, str]:
        shape = {v: k for k, v in ENVELOPES.items()}[self.envelope]
        return {TaskTag.SAP: age_label(self.duration), TaskTag.SGC: gender_label(self.pitch),
                TaskTag.SER: emotion_label(self.am_rate), TaskTag.SSR: shape, TaskTag.VED: self.burst}

    def transcript(self) -> str:
        return " ".join(SYMBOL_NAMES[k] for k in self.symbols)

    def aligned_transcript(self) -> str:
        return " ".join(f"{SYMBOL_NAMES[k]}|{i * FRAMES_PER_TONE}" for i, k in enumerate(self.symbols))


def _envelope(shape: str, n: int) -> np.ndarray:
    u = np.arange(n) / n
    if shape == "square":
        return np.ones(n)
    if shape == "ramp":
        return 0.25 + 0.75 * u
    if shape == "sine":
        return 0.25 + 0.75 * np.sin(np.pi * u)
    raise ValueError(f"unknown envelope {shape!r}")


def synthesize(spec: ClipSpec) -> AudioSignal:
    tone_n = int(round(TONE_SEC * SAMPLE_RATE))
    total = spec.n_samples
    x = np.zeros(total)
    voiced = tone_n * len(spec.symbols)
    t = np.arange(voiced) / SAMPLE_RATE
    env = np.tile(_envelope(spec.envelope, tone_n), len(spec.symbols))
    carrier = np.concatenate([np.sin(2 * np.pi * SYMBOL_FREQS[k] * np.arange(tone_n) / SAMPLE_RATE)
                              for k in spec.symbols])
    am = 0.75 + 0.25 * np.cos(2 * np.pi * spec.am_rate * t)
    x[:voiced] = TONE_AMP * env * am * carrier + HUM_AMP * np.sin(2 * np.pi * spec.pitch * t)
    rng = np.random.default_rng(spec.noise_seed)
    burst_n = int(round(BURST_SEC[spec.burst] * SAMPLE_RATE))
    if burst_n:
        noise = rng.standard_normal(burst_n) * NOISE_AMP
        gate = np.ones(burst_n)
        if spec.burst == "<LAUGH>":
            pulse = int(0.03 * SAMPLE_RATE)
            gate = ((np.arange(burst_n) // pulse) % 2 == 0).astype(float)
        elif spec.burst == "<COUGH>":
            gate = np.exp(-np.arange(burst_n) / (0.03 * SAMPLE_RATE)) * 2.0
        x[voiced:voiced + burst_n] = np.clip(noise * gate, -1, 1)
    return AudioSignal(x.astype(np.float32), SAMPLE_RATE)


def decode_symbols(signal: AudioSignal, n_symbols: int) -> list[int]:
    """Oracle: per 100 ms tone, the alphabet frequency holding the most DFT energy.

    Energy is summed over bins within 15 Hz of each candidate, which absorbs
    leakage from off-bin tones and modulation sidebands.
    """
    tone_n = int(round(TONE_SEC * SAMPLE_RATE))
    freqs = np.arange(tone_n // 2 + 1) * SAMPLE_RATE / tone_n
    near = np.abs(freqs[None, :] - np.asarray(SYMBOL_FREQS)[:, None]) <= 15.0
    out = []
    for i in range(n_symbols):
        seg = np.asarray(signal.samples[i * tone_n:(i + 1) * tone_n], dtype=np.float64)
        power = np.abs(naive_dft(seg)) ** 2
        out.append(int(np.argmax(near @ power)))
    return out


# -- instructions -------------------------------------------------------------

NATURAL_TEMPLATES: dict[TaskTag, tuple[str, ...]] = {
    TaskTag.ASR: ("what does this audio say?", "transcribe the audio", "please write down what is said",
                  "can you transcribe this clip?", "give me the transcript", "what words are spoken here?",
                  "convert this speech to text", "tell me exactly what was said"),
    TaskTag.SRWT: ("transcribe with word timestamps", "when is each word spoken?", "give me word level timing",
                   "align each word to its start frame", "list the words with their start times",
                   "provide a time aligned transcript", "at what time does each word begin?",
                   "mark the timing of every word"),
    TaskTag.VED: ("is there any sound event in the clip?", "detect vocal events like laughs or coughs",
                  "did anyone cough or laugh?", "what non-speech sound do you hear?",
                  "identify the event in this recording", "is there laughter, coughing or noise?",
                  "tell me about background events", "any coughs or laughs in there?"),
    TaskTag.SER: ("what emotion does the speaker convey?", "how does the speaker feel?",
                  "recognize the emotion in this voice", "is the speaker happy or sad?",
                  "what is the mood of this speech?", "classify the emotional tone",
                  "does the speaker sound angry?", "detect the speaker emotion"),
    TaskTag.SSR: ("what speaking style is this?", "is this news, chat or a story?", "identify the style of speech",
                  "classify the speaking style", "what kind of delivery is this?",
                  "does this sound like a news report?", "what is the style of the talk?",
                  "recognize the speaking manner"),
    TaskTag.SGC: ("is the speaker male or female?", "what is the gender of the speaker?",
                  "identify the speaker gender", "was this spoken by a man or a woman?",
                  "classify the gender of the voice", "guess the gender of this voice", "man or woman?",
                  "tell me if the voice is male or female"),
    TaskTag.SAP: ("how old is the speaker?", "estimate the speaker age",
                  "is the speaker a child, an adult or elderly?", "guess the age of this voice",
                  "what age group does the speaker belong to?", "predict the age of the speaker",
                  "is this a kid or an old person?", "tell me the approximate age"),
    TaskTag.STTC: ("answer the question", "please reply to this question", "can you answer this?",
                   "respond to the following", "solve this for me", "help me with this question",
                   "quick question for you", "i need an answer"),
}

COMPOUND_TEMPLATES: dict[tuple[TaskTag, TaskTag], tuple[str, ...]] = {
    (TaskTag.ASR, TaskTag.SAP): ("how old is the speaker and what did they say?",
                                 "transcribe this and estimate the speaker age"),
    (TaskTag.ASR, TaskTag.SGC): ("transcribe this and tell me if the speaker is male or female",
                                 "what was said, and by a man or a woman?"),
    (TaskTag.ASR, TaskTag.SER): ("what was said and how does the speaker feel?",
                                 "transcribe the clip and name the emotion"),
    (TaskTag.ASR, TaskTag.VED): ("transcribe this and detect any sound events",
                                 "what is said, and is there a laugh or cough?"),
    (TaskTag.SGC, TaskTag.SAP): ("what are the gender and age of the speaker?",
                                 "guess the speaker gender and age group"),
    (TaskTag.SER, TaskTag.SSR): ("what emotion and speaking style does this have?",
                                 "classify both the mood and the style"),
}

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


def make_target(tasks: Sequence[TaskTag], clip: ClipSpec | None, answer: str = "") -> StructuredOutput:
    content = answer
    attrs: list[str] = []
    if clip is not None:
        labels = clip.labels()
        if TaskTag.ASR in tasks:
            content = clip.transcript()
        elif TaskTag.SRWT in tasks:
            content = clip.aligned_transcript()
        attrs = [labels[t] for t in tasks if t in labels]
    return StructuredOutput(tuple(tasks), content, tuple(attrs))


@dataclass
class TrainingSample:
    id: str
    instruction: Instruction
    target: str
    audio: AudioSignal | None = None
    clip: ClipSpec | None = None
    seed: int = 0
    mix: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def tasks(self) -> tuple[TaskTag, ...]:
        return parse_output(self.target).tasks


def _clip_rng(task: TaskTag, seed: int) -> np.random.Generator:
    return np.random.default_rng([TASK_INDEX[task], seed & 0xFFFFFFFFFFFFFFFF])


def draw_clip(task: TaskTag, seed: int, label: str | None = None) -> ClipSpec:
    """Pure function of (task, seed); ``label`` pins the task's own attribute."""
    rng = _clip_rng(task, seed)

    def pick(options, own: TaskTag):
        choice = options[int(rng.integers(len(options)))]
        return label if (task is own and label is not None) else choice

    gender = pick(ATTRIBUTES[TaskTag.SGC], TaskTag.SGC)
    emotion = pick(ATTRIBUTES[TaskTag.SER], TaskTag.SER)
    style = pick(ATTRIBUTES[TaskTag.SSR], TaskTag.SSR)
    burst = pick(ATTRIBUTES[TaskTag.VED], TaskTag.VED)
    age = pick(ATTRIBUTES[TaskTag.SAP], TaskTag.SAP)
    lo, hi = AGE_RANGES[age]
    burst_sec = BURST_SEC[burst]
    n_max = min(8, int(np.floor((hi - burst_sec) / TONE_SEC + 1e-9)))
    n = int(rng.integers(3, n_max + 1))
    floor = n * TONE_SEC + burst_sec
    duration = float(rng.uniform(max(lo, floor), max(hi, floor)))
    duration = round(duration * SAMPLE_RATE) / SAMPLE_RATE
    symbols = tuple(int(s) for s in rng.permutation(N_SYMBOLS)[:n])
    plo, phi = PITCH_RANGES[gender]
    alo, ahi = AM_RATES[emotion]
    return ClipSpec(symbols, float(rng.uniform(plo, phi)), float(rng.uniform(alo, ahi)),
                    ENVELOPES[style], burst, duration, int(rng.integers(2**31)))


def natural_instruction(tasks: Sequence[TaskTag], rng: np.random.Generator) -> Instruction:
    tasks = tuple(tasks)
    pool = COMPOUND_TEMPLATES[tasks] if len(tasks) > 1 else NATURAL_TEMPLATES[tasks[0]]
    return Instruction(pool[int(rng.integers(len(pool)))], Form.NATURAL, frozenset(tasks))


def compound_for(task: TaskTag, rng: np.random.Generator) -> tuple[TaskTag, ...] | None:
    options = [k for k in COMPOUND_TEMPLATES if task in k]
    if not options:
        return None
    return options[int(rng.integers(len(options)))]


def gen_sample(task: TaskTag, seed: int, form: Form = Form.NATURAL, label: str | None = None,
               compound_rate: float = 0.1, tasks: Sequence[TaskTag] | None = None) -> TrainingSample:
    """One audio/instruction/target triple; a pure function of its arguments."""
    if task is TaskTag.STTC:
        return gen_text_qa(seed, form)
    clip = draw_clip(task, seed, label)
    rng = np.random.default_rng([TASK_INDEX[task], seed & 0xFFFFFFFFFFFFFFFF, 1])
    if tasks is None:
        tasks = (task,)
        if rng.random() < compound_rate:
            tasks = compound_for(task, rng) or tasks
    tasks = tuple(tasks)
    instr = fixed_instruction(tasks) if form is Form.FIXED else natural_instruction(tasks, rng)
    target = render_target(make_target(tasks, clip))
    return TrainingSample(f"{task.name.lower()}-{seed}", instr, target, synthesize(clip), clip, seed)


def gen_text_qa(seed: int, form: Form = Form.NATURAL) -> TrainingSample:
    """Text-only question answering (the STTC stand-in): small sums in words."""
    rng = np.random.default_rng([TASK_INDEX[TaskTag.STTC], seed & 0xFFFFFFFFFFFFFFFF])
    a, b = int(rng.integers(0, 5)), int(rng.integers(0, 5))
    question = f"what is {NUMBER_WORDS[a]} plus {NUMBER_WORDS[b]}?"
    answer = str(a + b)
    if form is Form.FIXED:
        instr = Instruction(TaskTag.STTC.surface, Form.FIXED, frozenset({TaskTag.STTC}))
    else:
        lead = NATURAL_TEMPLATES[TaskTag.STTC][int(rng.integers(8))]
        instr = Instruction(f"{lead}, {question}", Form.NATURAL, frozenset({TaskTag.STTC}))
    target = render_target(make_target((TaskTag.STTC,), None, answer))
    return TrainingSample(f"sttc-{seed}", instr, target, None, None, seed, extra={"question": question})


def gen_intent_text(task: TaskTag, seed: int, compound_rate: float = 0.1) -> TrainingSample:
    """Text-to-text intent sample: natural instruction -> task identifier string."""
    rng = np.random.default_rng([TASK_INDEX[task], seed & 0xFFFFFFFFFFFFFFFF, 2])
    tasks: tuple[TaskTag, ...] = (task,)
    if task is not TaskTag.STTC and rng.random() < compound_rate:
        tasks = compound_for(task, rng) or tasks
    instr = natural_instruction(tasks, rng)
    target = "".join(t.surface for t in tasks)
    return TrainingSample(f"intent-{task.name.lower()}-{seed}", instr, target, None, None, seed)


# -- corpus -------------------------------------------------------------------

@dataclass
class CorpusSpec:
    stage1_per_task: int = 120
    stage1_text_qa: int = 155
    stage2_per_task: int = 25
    stage3_per_task: int = 115
    test_per_task: int = 0
    compound_rate: float = 0.1
    tasks: tuple[TaskTag, ...] = SPEECH_TASKS
    # relative share of each task in the per-task budgets; empty means uniform
    task_weights: tuple[float, ...] = ()

    def __post_init__(self):
        self.tasks = tuple(TaskTag.from_name(t) if isinstance(t, str) else t for t in self.tasks)
        bad = [t.name for t in self.tasks if t not in SPEECH_TASKS]
        if bad:
            raise ValueError(f"corpus tasks must be speech tasks, got {bad}")
        self.task_weights = tuple(float(w) for w in self.task_weights)
        if self.task_weights and (len(self.task_weights) != len(self.tasks) or min(self.task_weights) <= 0):
            raise ValueError("task_weights needs one positive weight per task")
        counts = (self.stage1_per_task, self.stage1_text_qa, self.stage2_per_task, self.stage3_per_task,
                  self.test_per_task)
        if min(counts) < 0:
            raise ValueError("corpus counts must be non-negative")
        if not 0.0 <= self.compound_rate <= 1.0:
            raise ValueError(f"compound_rate must be in [0, 1], got {self.compound_rate}")

    def split(self, per_task: int) -> dict[TaskTag, int]:
        """Distribute ``per_task * len(tasks)`` items by weight (largest remainder)."""
        w = np.asarray(self.task_weights or [1.0] * len(self.tasks))
        exact = per_task * len(self.tasks) * w / w.sum()
        counts = np.floor(exact).astype(int)
        short = per_task * len(self.tasks) - counts.sum()
        for i in np.argsort(-(exact - counts), kind="stable")[:short]:
            counts[i] += 1
        return dict(zip(self.tasks, (int(c) for c in counts)))


def _balanced_labels(task: TaskTag, count: int, rng: np.random.Generator) -> list[str | None]:
    labels = ATTRIBUTES.get(task)
    if not labels:
        return [None] * count
    out = [labels[i % len(labels)] for i in range(count)]
    rng.shuffle(out)
    return out


def gen_entries(spec: CorpusSpec, seed: int) -> list[TrainingSample]:
    """Stratified, seed-deterministic sample list (audio kept in memory)."""
    rng = np.random.default_rng(seed)
    out: list[TrainingSample] = []
    base = seed * 1_000_003

    def next_seed():
        return int(rng.integers(2**62)) ^ base

    def add(sample: TrainingSample, stage: str, mix: str):
        sample.id = f"{stage}-{len(out):05d}-{sample.id.split('-')[0]}"
        sample.mix = mix
        sample.extra["stage"] = stage
        out.append(sample)

    for task, count in spec.split(spec.stage1_per_task).items():
        for label in _balanced_labels(task, count, rng):
            s = gen_sample(task, next_seed(), Form.FIXED, label, spec.compound_rate)
            add(s, "I", "multi_task_speech" if len(s.instruction.intended_tasks) > 1 else "single_task_speech")
    for _ in range(spec.stage1_text_qa):
        add(gen_text_qa(next_seed(), Form.NATURAL), "I", "text_qa")
    for task in (*spec.tasks, TaskTag.STTC):
        for _ in range(spec.stage2_per_task):
            add(gen_intent_text(task, next_seed(), spec.compound_rate), "II", "intent_text")
    for task, count in spec.split(spec.stage3_per_task).items():
        for label in _balanced_labels(task, count, rng):
            add(gen_sample(task, next_seed(), Form.NATURAL, label, spec.compound_rate), "III", "joint_multimodal")
    for task in spec.tasks:
        for label in _balanced_labels(task, spec.test_per_task, rng):
            seed_ = next_seed()
            for form in (Form.FIXED, Form.NATURAL):
                s = gen_sample(task, seed_, form, label, compound_rate=0.0)
                s.extra["pair"] = len(out) if form is Form.FIXED else len(out) - 1
                add(s, "test", "test")
    return out


def paired_test_set(per_task: int, seed: int) -> list[tuple[TrainingSample, TrainingSample]]:
    """(FIXED, NATURAL) variants over identical audio for each test item."""
    rng = np.random.default_rng(seed)
    pairs = []
    for task in SPEECH_TASKS:
        for label in _balanced_labels(task, per_task, rng):
            s = int(rng.integers(2**62))
            nat = gen_sample(task, s, Form.NATURAL, label, compound_rate=0.0)
            fix = gen_sample(task, s, Form.FIXED, label, compound_rate=0.0)
            pairs.append((fix, nat))
    return pairs


def manifest_record(s: TrainingSample, audio_ref: str | None) -> dict:
    rec = {
        "id": s.id,
        "tasks": [t.name.lower() for t in parse_output(s.target).tasks],
        "instruction": s.instruction.text,
        "form": s.instruction.form.value,
        "intended": sorted(t.name.lower() for t in s.instruction.intended_tasks),
        "audio": audio_ref,
        "target": s.target,
        "seed": s.seed,
        "mix": s.mix,
    }
    for key in ("stage", "pair"):
        if key in s.extra:
            rec[key] = s.extra[key]
    return rec


def write_corpus(samples: Sequence[TrainingSample], out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    ids = set()
    lines = []
    for s in samples:
        if s.id in ids:
            raise ValueError(f"duplicate sample id {s.id}")
        ids.add(s.id)
        ref = None
        if s.audio is not None:
            ref = f"audio/{s.id}.f32"
            path = out_dir / ref
            try:
                write_raw(path, s.audio)
            except OSError as e:
                raise OSError(f"cannot write {path}: {e}") from e
        lines.append(json.dumps(manifest_record(s, ref), sort_keys=True))
    path = out_dir / manifest_name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def gen_corpus(spec: CorpusSpec, seed: int, out_dir=None) -> list[TrainingSample]:
    samples = gen_entries(spec, seed)
    if out_dir is not None:
        write_corpus(samples, out_dir)
    return samples


def read_manifest(path) -> list[dict]:
    from .frontend import load_audio

    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        try:
            parse_output(rec["target"])
        except ValueError as e:
            raise ValueError(f"{path}:{n}: invalid target {rec['target']!r}: {e}") from e
        if rec.get("audio"):
            rec["signal"] = load_audio(path.parent / rec["audio"])
        records.append(rec)
    return records


def sample_from_record(rec: dict) -> TrainingSample:
    tasks = frozenset(TaskTag.from_name(t) for t in rec.get("intended", rec["tasks"]))
    instr = Instruction(rec["instruction"], Form(rec["form"]), tasks)
    s = TrainingSample(rec["id"], instr, rec["target"], rec.get("signal"), None, rec.get("seed", 0),
                       rec.get("mix", ""))
    for key in ("stage", "pair"):
        if key in rec:
            s.extra[key] = rec[key]
    return s
