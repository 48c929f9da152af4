import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_speech_model(d: int = 32, targets=("wq", "wk", "wv", "wo", "ff1", "ff2"), seed: int = 0):
    from ospg import adapter as ad
    from ospg import encoder as enc
    from ospg import lm
    from ospg.grammar import default_vocab
    from ospg.model import ModelConfig, SpeechLM

    v = default_vocab()
    cfg = ModelConfig(
        encoder=enc.EncoderConfig(d_a=16, n_layers=1, n_heads=2, ff_mult=2),
        adapter=ad.AdapterConfig(d_a=16, conv_channels=4, n_layers=1, n_heads=2, ff_mult=2, d_llm=d),
        lm=lm.LmConfig(vocab_size=len(v), d_llm=d, n_layers=2, n_heads=2, ff_mult=2, max_len=256,
                       lora_rank=16, lora_alpha=32.0, lora_targets=tuple(targets)),
        seed=seed,
    )
    return SpeechLM(cfg, v)


@pytest.fixture
def tiny_model():
    return tiny_speech_model()


# -- acceptance reporting ---------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, title = mark.args
    rec = _criteria.setdefault(n, {"title": title, "ok": True, "tests": 0})
    if call.when == "call":
        rec["tests"] += 1
    if call.excinfo is not None:
        rec["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        rec = _criteria[n]
        verdict = "PASS" if rec["ok"] and rec["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {rec['title']}")
