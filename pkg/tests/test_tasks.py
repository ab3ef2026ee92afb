import json

import numpy as np
import pytest
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.linear_model import LogisticRegression

from olora.tasks import (InstructionExample, TaskParseError, TaskSpec, TaskValidationError, Tokenizer,
                         build_answer_vocab, build_tokenizer, format_instruction, gen_synthetic_suite,
                         load_task_file, load_tasks, save_tasks, tokenize)


def test_format_instruction_template():
    ex = InstructionExample("classify sentiment", ("pos", "neg"), "great", "pos")
    assert format_instruction(ex) == "Definition: classify sentiment\nOptions: pos | neg\nText: great\nAnswer:"


def test_single_option_has_no_separator():
    ex = InstructionExample("d", ("only",), "t", "only")
    assert "|" not in format_instruction(ex)


def test_answer_outside_options_is_validation_error():
    with pytest.raises(TaskValidationError, match="answer"):
        format_instruction(InstructionExample("d", ("yes", "no"), "t", "maybe"))


def test_format_is_injective_on_fields():
    a = InstructionExample("d", ("x", "y"), "t u", "x")
    b = InstructionExample("d t", ("x", "y"), "u", "x")
    assert format_instruction(a) != format_instruction(b)


# --- tokenizer ----------------------------------------------------------------

def test_tokenize_empty_string():
    assert tokenize(Tokenizer.build(["a b"]), "") == []


def test_tokenize_lowercases():
    tok = Tokenizer.build(["a"])
    ids = tokenize(tok, "A a")
    assert len(ids) == 2 and ids[0] == ids[1] != tok.unk_index


def test_tokenize_oov_maps_to_unk():
    tok = Tokenizer.build(["a"])
    assert tokenize(tok, "zzz") == [tok.unk_index]


def test_tokenize_keeps_trailing_window():
    words = [f"w{i}" for i in range(100)]
    tok = Tokenizer.build([" ".join(words)], max_len=64)
    ids = tokenize(tok, " ".join(words))
    assert tok.decode(ids) == words[-64:]


def test_decode_round_trip_of_in_vocab_tokens():
    tok = Tokenizer.build(["the cat sat"])
    assert tok.decode(tokenize(tok, "The cat SAT")) == ["the", "cat", "sat"]


def test_answer_cue_survives_truncation():
    ex = InstructionExample("d", ("x", "y"), " ".join(["w"] * 200), "x")
    tok = build_tokenizer([TaskSpec("t", [ex], [])], max_len=16)
    assert tok.decode(tokenize(tok, format_instruction(ex)))[-1] == "answer:"


# --- file I/O -----------------------------------------------------------------

def _write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def test_empty_sequence_file_gives_empty_list(tmp_path):
    seq = tmp_path / "seq.txt"
    seq.write_text("", encoding="utf-8")
    assert load_tasks(seq) == []


def test_missing_answer_field_names_line(tmp_path):
    f = tmp_path / "t.jsonl"
    good = {"task_definition": "d", "options": ["a", "b"], "text": "x", "answer": "a"}
    bad = dict(good)
    del bad["answer"]
    _write_jsonl(f, [good, bad])
    with pytest.raises(TaskParseError, match=r":2:.*answer"):
        load_task_file(f)


def test_malformed_json_names_line(tmp_path):
    f = tmp_path / "t.jsonl"
    f.write_text('{"task_definition": "d"\n', encoding="utf-8")
    with pytest.raises(TaskParseError, match=":1:"):
        load_task_file(f)


def test_schema_violation_names_field(tmp_path):
    f = tmp_path / "t.jsonl"
    _write_jsonl(f, [{"task_definition": "d", "options": ["a", "a"], "text": "x", "answer": "a"}])
    with pytest.raises(TaskValidationError, match="options"):
        load_task_file(f)


def test_missing_sequence_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        load_tasks(tmp_path / "nope.txt")


def test_unsplit_file_holds_out_every_fifth(tmp_path):
    f = tmp_path / "t.jsonl"
    _write_jsonl(f, [{"task_definition": "d", "options": ["a", "b"], "text": f"x{i}", "answer": "a"}
                     for i in range(10)])
    task = load_task_file(f)
    assert [e.text for e in task.examples_test] == ["x4", "x9"]
    assert len(task.examples_train) == 8


def test_two_task_round_trip_bitwise(tmp_path):
    tasks = gen_synthetic_suite(2, 12, seed=4)
    seq = save_tasks(tasks, tmp_path / "a")
    loaded = load_tasks(seq)
    assert [(t.name, t.examples_train, t.examples_test) for t in loaded] == \
           [(t.name, t.examples_train, t.examples_test) for t in tasks]
    seq2 = save_tasks(loaded, tmp_path / "b")
    for name in ["sequence.txt", "task0.jsonl", "task1.jsonl"]:
        assert (seq.parent / name).read_bytes() == (seq2.parent / name).read_bytes()


# --- synthetic suite ----------------------------------------------------------

def test_suite_needs_two_tasks():
    with pytest.raises(ValueError):
        gen_synthetic_suite(1, 10, seed=0)


def test_suite_same_seed_same_bytes(tmp_path):
    a = save_tasks(gen_synthetic_suite(3, 20, seed=9), tmp_path / "a").parent
    b = save_tasks(gen_synthetic_suite(3, 20, seed=9), tmp_path / "b").parent
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_suite_label_sets_disjoint_and_indices_unique():
    tasks = gen_synthetic_suite(4, 20, seed=1)
    labels = [set(t.labels) for t in tasks]
    for i in range(len(labels)):
        for j in range(i):
            assert not labels[i] & labels[j]
    vocab = tasks[0].answer_vocab
    assert all(t.answer_vocab is vocab for t in tasks)
    assert sorted(vocab.values()) == list(range(len(vocab)))


def test_suite_train_test_disjoint():
    for t in gen_synthetic_suite(3, 100, seed=2):
        assert not set(t.examples_train) & set(t.examples_test)
        assert len(t.examples_test) == 50


def test_suite_shares_inputs_across_tasks():
    tasks = gen_synthetic_suite(3, 100, seed=3)
    # each task's texts mention the other tasks' markers
    texts = " ".join(e.text for e in tasks[0].examples_train).split()
    assert {"mk2", "mk3", "mk4", "mk5"} <= set(texts)


def test_linear_probe_learns_first_task():
    task = gen_synthetic_suite(3, 400, seed=0)[0]
    vec = CountVectorizer(token_pattern=r"\S+")
    X = vec.fit_transform([e.text for e in task.examples_train])
    probe = LogisticRegression(max_iter=2000).fit(X, [e.answer for e in task.examples_train])
    acc = probe.score(vec.transform([e.text for e in task.examples_test]), [e.answer for e in task.examples_test])
    assert acc >= 0.95


def test_build_answer_vocab_first_seen_order():
    a = TaskSpec("a", [InstructionExample("d", ("p", "q"), "t", "p")], [])
    b = TaskSpec("b", [InstructionExample("d", ("r", "p"), "t", "r")], [])
    assert build_answer_vocab([a, b]) == {"p": 0, "q": 1, "r": 2}
    assert b.answer_vocab == a.answer_vocab


def test_tokenizer_ids_are_dense_and_reserve_pad_unk():
    tok = build_tokenizer(gen_synthetic_suite(2, 10, seed=0))
    assert tok.pad_index == 0 and tok.unk_index == 1
    assert sorted(tok.vocab.values()) == list(range(len(tok)))
    assert np.all(np.array(tokenize(tok, "Answer:")) > 1)
