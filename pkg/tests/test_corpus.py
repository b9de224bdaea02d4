import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gptlab.corpus import (DEFAULT_DISEASES, DEFAULT_DRUGS, DEFAULT_SYMPTOMS,
                           Dialogue, EntitySpan, SyntheticSpec, Turn,
                           generate_synthetic, linearize, load_corpus,
                           save_corpus, split)
from gptlab.errors import (ConfigError, DataError, MalformedRecordError,
                           OverlappingSpanError, SpanOutOfBoundsError)
from gptlab.vocab import build_vocab


def two_turn(idx="d0", patient="ab", doctor="c", spans=()):
    return Dialogue(id=idx, turns=(
        Turn("patient", patient, tuple(spans)),
        Turn("doctor", doctor),
    ))


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def record(idx="d0", spans=()):
    return {
        "id": idx,
        "turns": [
            {"speaker": "patient", "text": "stomach ache",
             "entities": [dict(zip(("start", "end", "label"), s))
                          for s in spans]},
            {"speaker": "doctor", "text": "rest well", "entities": []},
        ],
    }


def test_load_well_formed_file(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [record(spans=[(0, 7, "part")])])
    corpus = load_corpus(path)
    assert len(corpus) == 1
    assert corpus[0].turns[0].entities[0] == EntitySpan(0, 7, "part")


def test_load_rejects_span_past_text_end(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [record(idx="bad-span", spans=[(5, 99, "x")])])
    with pytest.raises(SpanOutOfBoundsError, match="bad-span"):
        load_corpus(path)


def test_load_rejects_overlapping_spans(tmp_path):
    path = tmp_path / "c.jsonl"
    write_jsonl(path, [record(idx="olap", spans=[(0, 3, "a"), (2, 5, "b")])])
    with pytest.raises(OverlappingSpanError, match="olap"):
        load_corpus(path)


def test_load_rejects_malformed_records(tmp_path):
    path = tmp_path / "c.jsonl"
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(MalformedRecordError):
        load_corpus(path)

    write_jsonl(path, [{"id": "x"}])  # missing turns
    with pytest.raises(MalformedRecordError):
        load_corpus(path)

    rec = record(idx="short")
    rec["turns"] = rec["turns"][:1]
    write_jsonl(path, [rec])
    with pytest.raises(MalformedRecordError, match="short"):
        load_corpus(path)


def test_corpus_round_trip(tmp_path):
    spec = SyntheticSpec(DEFAULT_SYMPTOMS, DEFAULT_DISEASES, DEFAULT_DRUGS,
                         n_dialogues=5)
    corpus = generate_synthetic(spec, seed=3)
    path = tmp_path / "c.jsonl"
    save_corpus(corpus, path)
    assert load_corpus(path) == corpus


def test_split_hundred_to_one():
    corpus = [two_turn(f"d{i}") for i in range(101)]
    train, test = split(corpus, (100, 1), seed=0)
    assert len(train) == 100 and len(test) == 1


def test_split_eight_to_two():
    corpus = [two_turn(f"d{i}") for i in range(10)]
    train, test = split(corpus, (8, 2), seed=0)
    assert len(train) == 8 and len(test) == 2


def test_split_deterministic_and_partitions():
    corpus = [two_turn(f"d{i}") for i in range(23)]
    t1 = split(corpus, (8, 2), seed=9)
    t2 = split(corpus, (8, 2), seed=9)
    assert t1 == t2
    train, test = t1
    ids = {d.id for d in train} | {d.id for d in test}
    assert len(ids) == 23
    assert not ({d.id for d in train} & {d.id for d in test})


def test_split_too_small_rejected():
    with pytest.raises(DataError):
        split([two_turn()], (8, 2), seed=0)


def test_linearize_layout():
    corpus = [two_turn()]
    vocab = build_vocab(corpus)
    seq = linearize(corpus[0], vocab, max_len=32)
    a, b, c = (vocab.symbol_to_id[ch] for ch in "abc")
    assert seq.ids == [vocab.bos_id, vocab.patient_id, a, b,
                       vocab.doctor_id, c, vocab.eos_id]
    assert seq.position_ids == list(range(7))


def test_linearize_entity_flags():
    corpus = [two_turn(spans=[EntitySpan(0, 2, "thing")])]
    vocab = build_vocab(corpus)
    seq = linearize(corpus[0], vocab, max_len=32)
    assert seq.entity_flags == [0, 0, 1, 1, 0, 0, 0]


def test_linearize_loss_masks_by_mode():
    corpus = [two_turn()]
    vocab = build_vocab(corpus)
    pre = linearize(corpus[0], vocab, 32, mode="pretrain")
    assert pre.loss_mask == [False, True, True, True, True, True, True]
    tune = linearize(corpus[0], vocab, 32, mode="tune")
    # only the final doctor text and EOS carry loss
    assert tune.loss_mask == [False, False, False, False, False, True, True]


def test_linearize_truncation_keeps_suffix():
    long_text = "x" * 600
    dlg = Dialogue(id="long", turns=(Turn("patient", long_text),
                                     Turn("doctor", "ok")))
    vocab = build_vocab([dlg])
    seq = linearize(dlg, vocab, max_len=512)
    assert len(seq) == 512
    # the tail (doctor turn + EOS) must be intact
    assert seq.ids[-1] == vocab.eos_id
    assert seq.ids[-4] == vocab.doctor_id
    assert seq.position_ids == list(range(512))


def test_linearize_equal_length_lists():
    spec = SyntheticSpec(DEFAULT_SYMPTOMS, DEFAULT_DISEASES, DEFAULT_DRUGS,
                         n_dialogues=8)
    corpus = generate_synthetic(spec, seed=1)
    vocab = build_vocab(corpus)
    for dlg in corpus:
        seq = linearize(dlg, vocab, max_len=64)  # force truncation
        assert len(seq.ids) == len(seq.lexical_tags) == len(seq.entity_flags)
        assert len(seq.loss_mask) == len(seq.position_ids) == len(seq.ids)
        assert len(seq) <= 64


def test_generate_synthetic_validates_and_is_deterministic():
    spec = SyntheticSpec(DEFAULT_SYMPTOMS, DEFAULT_DISEASES, DEFAULT_DRUGS,
                         n_dialogues=3, turns_min=2, turns_max=2)
    c1 = generate_synthetic(spec, seed=7)
    c2 = generate_synthetic(spec, seed=7)
    assert len(c1) == 3
    assert c1 == c2
    assert c1 != generate_synthetic(spec, seed=8)


def test_generate_synthetic_spans_are_lexicon_members():
    spec = SyntheticSpec(DEFAULT_SYMPTOMS, DEFAULT_DISEASES, DEFAULT_DRUGS,
                         n_dialogues=20)
    lexicon = set(DEFAULT_SYMPTOMS) | set(DEFAULT_DISEASES) | set(DEFAULT_DRUGS)
    for dlg in generate_synthetic(spec, seed=11):
        for turn in dlg.turns:
            for span in turn.entities:
                assert turn.text[span.start:span.end] in lexicon


def test_generate_synthetic_disease_is_function_of_flagged_symptom():
    spec = SyntheticSpec(DEFAULT_SYMPTOMS, DEFAULT_DISEASES, DEFAULT_DRUGS,
                         n_dialogues=40)
    for dlg in generate_synthetic(spec, seed=13):
        pturn = dlg.turns[0]
        (span,) = pturn.entities
        symptom = pturn.text[span.start:span.end]
        idx = DEFAULT_SYMPTOMS.index(symptom)
        dturn = dlg.turns[-1]
        disease = dturn.text[dturn.entities[0].start:dturn.entities[0].end]
        assert disease == DEFAULT_DISEASES[idx % len(DEFAULT_DISEASES)]


def test_generate_synthetic_empty_lexicon_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticSpec([], DEFAULT_DISEASES, DEFAULT_DRUGS,
                                         n_dialogues=1), seed=0)


@settings(deadline=None, max_examples=20)
@given(st.integers(2, 60), st.integers(0, 2 ** 31 - 1))
def test_split_union_and_disjoint_property(n, seed):
    corpus = [two_turn(f"d{i}") for i in range(n)]
    train, test = split(corpus, (4, 1), seed=seed)
    assert len(train) + len(test) == n
    assert len(test) >= 1 and len(train) >= 1
    assert {d.id for d in train}.isdisjoint({d.id for d in test})
