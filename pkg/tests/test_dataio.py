from __future__ import annotations

import json

import pytest

from pers import dataio


def make_interaction(lid="u1", eid="p1", ts=0, status="accepted", **kw):
    return dataio.Interaction(lid, eid, ts, status, kw.pop("t", 10), kw.pop("m", 100), **kw)


def write_lines(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def valid_record(**over):
    rec = {
        "learner_id": "u1",
        "exercise_id": "p1",
        "timestamp": 100,
        "status": "accepted",
        "exec_time_ms": 12,
        "exec_memory_kb": 256,
    }
    rec.update(over)
    return rec


def test_parse_empty_file(tmp_path):
    p = tmp_path / "log.jsonl"
    p.write_text("")
    interactions, issues = dataio.parse_log(p)
    assert interactions == [] and issues == []


def test_parse_three_valid_lines_in_order(tmp_path):
    p = tmp_path / "log.jsonl"
    write_lines(p, [valid_record(exercise_id=f"p{i}") for i in range(3)])
    interactions, issues = dataio.parse_log(p)
    assert [it.exercise_id for it in interactions] == ["p0", "p1", "p2"]
    assert issues == []


def test_parse_reports_line_number_of_bad_record(tmp_path):
    p = tmp_path / "log.jsonl"
    bad = valid_record()
    del bad["exercise_id"]
    write_lines(p, [valid_record(), bad, valid_record()])
    interactions, issues = dataio.parse_log(p)
    assert len(interactions) == 2
    assert len(issues) == 1
    assert issues[0].line == 2
    assert "exercise_id" in issues[0].message


def test_parse_strict_raises(tmp_path):
    p = tmp_path / "log.jsonl"
    write_lines(p, [{"nope": 1}])
    with pytest.raises(dataio.DataError, match="line 1"):
        dataio.parse_log(p, strict=True)


def test_parse_unreadable_file():
    with pytest.raises(dataio.DataError):
        dataio.parse_log("/nonexistent/nowhere.jsonl")


def test_parse_rejects_unknown_keys(tmp_path):
    p = tmp_path / "log.jsonl"
    write_lines(p, [valid_record(extra=1)])
    _, issues = dataio.parse_log(p)
    assert issues and "extra" in issues[0].message


def test_unseen_status_maps_to_other(tmp_path):
    p = tmp_path / "log.jsonl"
    write_lines(p, [valid_record(status="presentation_error")])
    interactions, issues = dataio.parse_log(p)
    assert issues == []
    assert interactions[0].status == "other"


def test_round_trip(tmp_path):
    original = [
        make_interaction(eid="p1", ts=5, code="print(1)"),
        make_interaction(eid="p2", ts=9, status="wrong_answer", code_vec_ref="v1"),
    ]
    p = tmp_path / "log.jsonl"
    dataio.write_log(p, original)
    parsed, issues = dataio.parse_log(p)
    assert issues == []
    assert parsed == original


def test_build_sequences_windows_of_120_events():
    interactions = [make_interaction(eid=f"p{i % 7}", ts=i) for i in range(120)]
    seqs, _ = dataio.build_sequences(interactions, max_len=50)
    assert [len(s) for s in seqs] == [50, 50, 20]


def test_build_sequences_never_mixes_learners():
    interactions = [make_interaction(lid="a", ts=1), make_interaction(lid="b", ts=0)]
    seqs, _ = dataio.build_sequences(interactions, max_len=50)
    assert [(s.learner_id, len(s)) for s in seqs] == [("a", 1), ("b", 1)]


def test_build_sequences_sorts_by_timestamp_with_stable_ties():
    interactions = [
        make_interaction(eid="late", ts=10),
        make_interaction(eid="tie_first", ts=3),
        make_interaction(eid="tie_second", ts=3),
        make_interaction(eid="early", ts=1),
    ]
    seqs, _ = dataio.build_sequences(interactions, max_len=50)
    assert [e.exercise_id for e in seqs[0].events] == ["early", "tie_first", "tie_second", "late"]


def test_build_sequences_rejects_small_max_len():
    with pytest.raises(ValueError):
        dataio.build_sequences([make_interaction()], max_len=1)


def test_build_sequences_sliding_windows():
    interactions = [make_interaction(eid=f"p{i}", ts=i) for i in range(5)]
    seqs, _ = dataio.build_sequences(interactions, max_len=3, sliding=True)
    assert [[e.exercise_id for e in s.events] for s in seqs] == [
        ["p0", "p1", "p2"],
        ["p1", "p2", "p3"],
        ["p2", "p3", "p4"],
    ]


def test_vocabulary_round_trip_and_unknown():
    _, vocab = dataio.build_sequences([make_interaction(eid=f"p{i}", ts=i) for i in range(5)])
    assert vocab.size == 7
    for i in range(2, vocab.size):
        assert vocab.encode(vocab.decode(i)) == i
    assert vocab.encode("never-seen") == dataio.UNKNOWN_INDEX
    with pytest.raises(KeyError):
        vocab.decode(0)


def make_learner(lid, n):
    return [make_interaction(lid=lid, eid=f"p{i}", ts=i) for i in range(n)]


def split_counts(windows):
    return sum(len(mw.target_steps) for mw in windows)


def test_split_len10_ratio02_gives_two_test_targets():
    seqs, _ = dataio.build_sequences(make_learner("u", 10))
    train, test = dataio.split(seqs, ratio=0.2)
    assert split_counts(test) == 2
    assert split_counts(train) == 7  # 9 targets total
    # test targets are the chronologically last ones
    assert test[0].target_steps == (7, 8)


def test_split_len2_is_train_only():
    seqs, _ = dataio.build_sequences(make_learner("u", 2))
    train, test = dataio.split(seqs, ratio=0.2)
    assert split_counts(train) == 1 and test == []


def test_split_len5_ratio05_gives_three_test_targets():
    seqs, _ = dataio.build_sequences(make_learner("u", 5))
    train, test = dataio.split(seqs, ratio=0.5)
    assert split_counts(test) == 3


def test_split_rejects_bad_ratio():
    with pytest.raises(ValueError):
        dataio.split([], ratio=1.0)


def test_split_spans_windows():
    # 6 events, windows of 3: targets live at steps 0,1 of each window.
    seqs, _ = dataio.build_sequences(make_learner("u", 6), max_len=3)
    train, test = dataio.split(seqs, ratio=0.4)  # ceil(2.4) = 3 test targets
    assert split_counts(test) == 3
    assert split_counts(train) == 1
    assert [mw.window.events[0].exercise_id for mw in test] == ["p0", "p3"]


def test_stats_all_accepted_single_attempts():
    interactions = [make_interaction(lid=f"u{i}", eid=f"p{i}", ts=i) for i in range(4)]
    s = dataio.stats(interactions)
    assert s.pass_rate == 1.0 and s.ape == 1.0
    assert s.learners == 4 and s.exercises == 4 and s.interactions == 4


def test_stats_sparsity_formula():
    # 2 learners x 3 exercises, 4 interactions: 1 - 4/6
    interactions = [
        make_interaction(lid="a", eid="p1", ts=0),
        make_interaction(lid="a", eid="p2", ts=1, status="wrong_answer"),
        make_interaction(lid="b", eid="p3", ts=0),
        make_interaction(lid="b", eid="p3", ts=1),
    ]
    s = dataio.stats(interactions)
    assert s.sparsity == pytest.approx(1.0 - 4.0 / 6.0)
    assert s.pass_rate == pytest.approx(0.75)
    assert s.ape == pytest.approx(4.0 / 3.0)


def test_stats_empty_input_raises():
    with pytest.raises(dataio.DataError):
        dataio.stats([])


def test_format_stats_is_tab_separated():
    s = dataio.stats([make_interaction()])
    text = dataio.format_stats("toy", s)
    header, row = text.strip().split("\n")
    assert header.split("\t") == list(dataio.STATS_COLUMNS)
    assert row.split("\t")[0] == "toy"
    assert row.split("\t")[4] == "0.00%"
