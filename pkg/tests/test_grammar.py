import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ospg import grammar as gr
from ospg.grammar import (ATTRIBUTES, CHARSET, Form, Instruction, StructuredOutput, TaskTag, default_vocab,
                          detokenize, parse_output, render_target, task_identifier_positions, tokenize)

V = default_vocab()


def random_output(rng: np.random.Generator) -> StructuredOutput:
    k = int(rng.integers(1, 4))
    tasks = tuple(TaskTag(list(TaskTag)[i].value) for i in rng.permutation(len(TaskTag))[:k])
    pool = [a for t in tasks for a in ATTRIBUTES.get(t, ())]
    n_attr = int(rng.integers(0, len(pool) + 1)) if pool else 0
    attrs = tuple(pool[i] for i in rng.permutation(len(pool))[:n_attr])
    content = "".join(CHARSET[i] for i in rng.integers(0, len(CHARSET), int(rng.integers(0, 20))))
    return StructuredOutput(tasks, content, attrs)


def random_text(rng: np.random.Generator) -> str:
    tokens = V.tokens[3:]
    return "".join(tokens[i] for i in rng.integers(0, len(tokens), int(rng.integers(0, 30))))


# -- parse / render -------------------------------------------------------------

def test_parse_worked_example():
    o = parse_output("<asr><sap>hello world<ADULT>")
    assert o == StructuredOutput((TaskTag.ASR, TaskTag.SAP), "hello world", ("<ADULT>",))


def test_parse_content_only():
    assert parse_output("<asr>good morning") == StructuredOutput((TaskTag.ASR,), "good morning", ())


def test_missing_task_tag():
    with pytest.raises(gr.MissingTaskTag):
        parse_output("good morning")


def test_unknown_tag():
    with pytest.raises(gr.UnknownTag):
        parse_output("<asr>hi<BOGUS>")


def test_orphan_attribute():
    with pytest.raises(gr.OrphanAttribute):
        parse_output("<asr>hi<ADULT>")


def test_age_alias_maps_to_sap():
    assert parse_output("<asr><age>hello<ADULT>").tasks == (TaskTag.ASR, TaskTag.SAP)


def test_render_empty_content():
    assert render_target(StructuredOutput((TaskTag.SGC,), "", ("<FEMALE>",))) == "<sgc><FEMALE>"


def test_render_canonical_order():
    assert render_target(StructuredOutput((TaskTag.ASR, TaskTag.SAP), "hi", ("<ADULT>",))) == "<asr><sap>hi<ADULT>"


def test_render_rejects_invalid():
    with pytest.raises(gr.GrammarError):
        render_target(StructuredOutput((), "x"))
    with pytest.raises(gr.OrphanAttribute):
        render_target(StructuredOutput((TaskTag.ASR,), "x", ("<MALE>",)))


def test_round_trip_1000_outputs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        o = random_output(rng)
        assert parse_output(render_target(o)) == o


# -- tokenizer ------------------------------------------------------------------

def test_tokenize_tag_then_chars():
    assert tokenize("<asr>ab", V) == [V.id("<asr>"), V.id("a"), V.id("b")]


def test_tokenize_empty():
    assert tokenize("", V) == []


def test_tokenize_round_trip_1000():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s = random_text(rng)
        assert detokenize(tokenize(s, V), V) == s


@given(st.text(alphabet=CHARSET, max_size=40))
def test_tokenize_round_trip_chars(s):
    assert detokenize(tokenize(s, V), V) == s


def test_unrepresentable_character_listed():
    with pytest.raises(ValueError, match="'A'"):
        tokenize("hello A", V)


def test_every_tag_is_one_token():
    tags = [t.surface for t in TaskTag] + [a for labels in ATTRIBUTES.values() for a in labels]
    for tag in tags:
        assert tokenize(tag, V) == [V.id(tag)]


def test_vocabulary_file_round_trip(tmp_path):
    V.save(tmp_path / "vocab.txt")
    back = gr.Vocabulary.load(tmp_path / "vocab.txt")
    assert back.tokens == V.tokens
    lines = (tmp_path / "vocab.txt").read_text().split("\n")
    assert lines[V.id("<asr>")] == "<asr>"


# -- task identifier mask --------------------------------------------------------

def test_mask_worked_example():
    assert task_identifier_positions(tokenize("<asr><sap>hi<ADULT>", V), V) == [True, True, False, False, False]


def test_mask_pure_text():
    assert not any(task_identifier_positions(tokenize("plain words", V), V))


def test_mask_attribute_not_identifier():
    assert task_identifier_positions(tokenize("<ser><HAPPY>", V), V) == [True, False]


def test_mask_partition():
    rng = np.random.default_rng(2)
    for _ in range(200):
        ids = tokenize(random_text(rng), V)
        m = task_identifier_positions(ids, V)
        assert len(m) == len(ids)
        assert sum(m) + sum(not x for x in m) == len(ids)
        assert all(x == (i in V.task_ids) for i, x in zip(ids, m))


# -- instructions ----------------------------------------------------------------

def test_fixed_instruction_only_tags():
    ins = gr.fixed_instruction([TaskTag.ASR, TaskTag.SAP])
    assert ins.text == "<asr><sap>" and ins.form is Form.FIXED
    with pytest.raises(ValueError):
        Instruction("<asr> please", Form.FIXED, frozenset({TaskTag.ASR}))


def test_instruction_needs_tasks():
    with pytest.raises(ValueError):
        Instruction("hello", Form.NATURAL, frozenset())
