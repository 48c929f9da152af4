import http.server
import socket
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ospg import evaluation as ev
from ospg.evaluation import EvalItem, JudgeVerdict
from ospg.grammar import Form, Instruction, TaskTag, fixed_instruction

ASR = Instruction("what does this audio say?", Form.NATURAL, frozenset({TaskTag.ASR}))


def brute_force_dp(ref, hyp):
    n, m = len(ref), len(hyp)
    table = np.zeros((n + 1, m + 1), int)
    table[:, 0] = np.arange(n + 1)
    table[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            table[i, j] = min(table[i - 1, j] + 1, table[i, j - 1] + 1,
                              table[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    return 100.0 * table[n, m] / n


# -- judge ------------------------------------------------------------------------

def test_rule_judge_correct():
    assert ev.rule_judge(ASR, "<asr>hello").correct


def test_rule_judge_task_mismatch():
    v = ev.rule_judge(ASR, "<sap><ADULT>")
    assert not v.correct and "task mismatch" in v.rationale


def test_rule_judge_multi_task():
    ins = Instruction("how old and what?", Form.NATURAL, frozenset({TaskTag.ASR, TaskTag.SAP}))
    assert ev.rule_judge(ins, "<asr><sap>hi<ADULT>").correct


def test_rule_judge_unparseable():
    v = ev.rule_judge(ASR, "hello")
    assert not v.correct and "unparseable" in v.rationale


def test_verdict_needs_rationale_when_wrong():
    with pytest.raises(ValueError):
        JudgeVerdict(False, "")


# -- IFR ---------------------------------------------------------------------------

def test_ifr_all_and_none():
    assert ev.compute_ifr([JudgeVerdict(True)] * 10).ifr_percent == 100.0
    assert ev.compute_ifr([JudgeVerdict(False, "x")] * 10).ifr_percent == 0.0


def test_ifr_451_of_500():
    r = ev.compute_ifr([JudgeVerdict(True)] * 451 + [JudgeVerdict(False, "x")] * 49)
    assert (r.n_correct, r.n_total, r.ifr_percent) == (451, 500, 90.2)
    assert r.summary() == "IFR: 90.2% (451/500)"


def test_ifr_empty():
    with pytest.raises(ValueError):
        ev.compute_ifr([])


@given(st.lists(st.booleans(), min_size=1, max_size=60))
def test_ifr_equals_fold(flags):
    r = ev.compute_ifr([JudgeVerdict(f, "" if f else "no") for f in flags])
    count = 0
    for f in flags:
        count += f
    assert r.n_correct == count and r.ifr_percent == 100.0 * count / len(flags)


# -- WER / accuracy ----------------------------------------------------------------

def test_wer_examples():
    assert ev.compute_wer(list("abcd"), list("abcd")) == 0.0
    assert ev.compute_wer(["a", "b", "c", "d"], ["a", "x", "c", "d"]) == 25.0
    assert ev.compute_wer(["a"], []) == 100.0
    with pytest.raises(ValueError):
        ev.compute_wer([], ["a"])


def test_wer_matches_brute_force_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ref = list(rng.integers(0, 4, int(rng.integers(1, 11))))
        hyp = list(rng.integers(0, 4, int(rng.integers(0, 11))))
        assert ev.compute_wer(ref, hyp) == brute_force_dp(ref, hyp)


def test_token_accuracy_is_100_minus_corpus_wer():
    pairs = [(["a", "b"], ["a", "b"]), (["c", "d"], ["c"])]
    assert ev.corpus_wer(pairs) == 25.0 and ev.token_accuracy(pairs) == 75.0
    assert ev.token_accuracy([(["a"], ["x", "y", "z"])]) == 0.0


def test_task_accuracy():
    assert ev.task_accuracy([(["<ADULT>"], ["<ADULT>"])] * 3) == 100.0
    assert ev.task_accuracy([(["<A>"], ["<A>"])] * 3 + [(["<A>"], ["<B>"])]) == 75.0
    assert ev.task_accuracy([(["<MALE>", "<ADULT>"], ["<ADULT>", "<MALE>"])]) == 100.0


def test_task_metric_dispatch():
    assert ev.metric_name(TaskTag.ASR) == "WER" and ev.metric_name(TaskTag.SER) == "ACC"
    assert ev.task_metric(TaskTag.ASR, ["<asr>a b c d"], ["<asr>a x c d"]) == 25.0
    assert ev.task_metric(TaskTag.SGC, ["<sgc><MALE>", "<sgc><FEMALE>"], ["<sgc><MALE>", "garbage"]) == 50.0


# -- FI vs NL ----------------------------------------------------------------------

def _items(outputs_fixed, outputs_nat, task=TaskTag.ASR, target="<asr>a b c d"):
    nat = Instruction("transcribe the audio", Form.NATURAL, frozenset({task}))
    out = [EvalItem(f"f{i}", task, fixed_instruction([task]), target, o) for i, o in enumerate(outputs_fixed)]
    out += [EvalItem(f"n{i}", task, nat, target, o) for i, o in enumerate(outputs_nat)]
    return out


def test_finl_identical_outputs_zero_delta():
    rows = ev.fi_vs_nl_report(_items(["<asr>a b c d", "<asr>a"], ["<asr>a b c d", "<asr>a"]))
    assert len(rows) == 1 and rows[0].delta == 0.0


def test_finl_delta_is_nl_minus_fi():
    rows = ev.fi_vs_nl_report(_items(["<asr>a b c d"], ["<asr>a x c d"]))
    r = rows[0]
    assert (r.metric_fi, r.metric_nl, r.delta) == (0.0, 25.0, 25.0)
    assert r.delta == r.metric_nl - r.metric_fi


def test_finl_one_row_per_task_and_schema():
    items = _items(["<asr>a"], ["<asr>a"]) + _items(["<sgc><MALE>"], ["<sgc><FEMALE>"], TaskTag.SGC, "<sgc><MALE>")
    rows = ev.fi_vs_nl_report(items)
    assert [r.task for r in rows] == [TaskTag.ASR, TaskTag.SGC]
    table = ev.format_finl_table(rows)
    assert table.splitlines()[0].split() == ["Task", "Test", "Metric", "FI", "NL", "Delta"]
    assert rows[1].delta == -100.0
    recs = ev.finl_records(rows)
    assert len(recs) == 2 and '"delta": -100.0' in recs[1]
    assert ev.fi_vs_nl_report(items) == rows


def test_finl_missing_form():
    with pytest.raises(ValueError, match="no natural"):
        ev.fi_vs_nl_report(_items(["<asr>a"], []))


# -- HTTP judge --------------------------------------------------------------------

class _Handler(http.server.BaseHTTPRequestHandler):
    reply = b"YES"
    bodies: list = []

    def do_POST(self):
        n = int(self.headers["Content-Length"])
        type(self).bodies.append(self.rfile.read(n).decode())
        self.send_response(200)
        self.end_headers()
        self.wfile.write(type(self).reply)

    def log_message(self, *a):
        pass


@pytest.fixture
def judge_server():
    srv = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    _Handler.bodies = []
    yield srv, f"http://127.0.0.1:{srv.server_port}/judge"
    srv.shutdown()


def test_http_judge_yes(judge_server):
    _, url = judge_server
    _Handler.reply = b"YES"
    v = ev.llm_judge_request(ASR, "<asr>a b", ev.JudgeEndpoint(url, 2000))
    assert v.correct
    body = _Handler.bodies[-1]
    assert body == ev.PROMPT_TEMPLATE.format(instruction=ASR.text, output="<asr>a b")
    assert "Does the output fulfill the instruction? Answer YES or NO with a reason." in body


def test_http_judge_no_with_reason(judge_server):
    _, url = judge_server
    _Handler.reply = b"NO: wrong task"
    v = ev.llm_judge_request(ASR, "<sap><ADULT>", ev.JudgeEndpoint(url))
    assert not v.correct and v.rationale == "wrong task"


def test_http_judge_malformed(judge_server):
    _, url = judge_server
    _Handler.reply = b"maybe"
    with pytest.raises(ev.JudgeError, match="YES/NO"):
        ev.llm_judge_request(ASR, "x", ev.JudgeEndpoint(url))


def test_http_judge_unreachable():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(ev.JudgeError, match="unreachable"):
        ev.llm_judge_request(ASR, "x", ev.JudgeEndpoint(f"http://127.0.0.1:{port}/", 500))


def test_judge_all_keeps_order():
    pairs = [(ASR, "<asr>x"), (ASR, "nope"), (ASR, "<sgc><MALE>"), (ASR, "<asr>")] * 5
    serial = ev.judge_all(pairs, ev.rule_judge)
    assert ev.judge_all(pairs, ev.rule_judge, workers=4) == serial
    assert [v.correct for v in serial[:4]] == [True, False, False, True]
