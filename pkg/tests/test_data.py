import json

import numpy as np
import pytest

from ctxlab.data import (
    END_ID, VOCAB_SIZE, build_instruction_sample, cycle_samples, detokenize, filter_by_length, load_corpus,
    load_instructions, pack_pretraining_batches, read_token_file, split_holdout, tokenize, write_token_file,
)
from ctxlab.errors import DataError, FormatError, RejectedSampleError


def test_byte_round_trip():
    text = "Tomorrow, and tomorrow, and tomorrow ☃ ünïcode".encode()
    assert detokenize(tokenize(text)) == text
    assert tokenize("A").tolist() == [65]


def test_detokenize_skips_end_marker():
    assert detokenize([104, 105, END_ID]) == b"hi"
    with pytest.raises(DataError):
        detokenize([VOCAB_SIZE])


def test_token_file_round_trip(tmp_path):
    ids = np.array([0, 255, 256, 7])
    write_token_file(tmp_path / "t.tok", ids)
    np.testing.assert_array_equal(read_token_file(tmp_path / "t.tok"), ids)
    raw = (tmp_path / "t.tok").read_bytes()
    (tmp_path / "bad.tok").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_token_file(tmp_path / "bad.tok")


def test_corpus_manifest_reconstructs(tmp_path):
    (tmp_path / "a.txt").write_bytes(b"first file\n")
    (tmp_path / "b.txt").write_bytes(b"second")
    write_token_file(tmp_path / "c.tok", [1, 2, 3])
    corpus = load_corpus([tmp_path / "a.txt", tmp_path / "b.txt", tmp_path / "c.tok"])
    assert len(corpus) == 11 + 6 + 3
    np.testing.assert_array_equal(corpus.reconstruct(), corpus.ids)
    assert [len(d) for d in corpus.documents()] == [11, 6, 3]
    assert json.loads(corpus.manifest_json())[1]["token_start"] == 11


def test_missing_corpus(tmp_path):
    with pytest.raises(DataError):
        load_corpus([tmp_path / "nope.txt"])


def test_length_filter_bounds():
    docs = [np.zeros(n) for n in (4095, 4096, 32768, 32769)]
    result = filter_by_length(docs)
    assert [len(d) for d in result.kept] == [4096, 32768]
    assert (result.kept_count, result.dropped_count) == (2, 2)


def test_instruction_example_without_end_marker():
    s = build_instruction_sample(np.arange(10), np.arange(5) + 100, 12, append_end=False)
    assert s.mask.tolist() == [False] * 7 + [True] * 5
    assert s.tokens[:7].tolist() == list(range(3, 10))


def test_instruction_sample_appends_end_marker():
    s = build_instruction_sample([1, 2, 3], [9], 8)
    assert s.tokens.tolist() == [1, 2, 3, 9, END_ID]
    assert s.mask.tolist() == [False, False, False, True, True]


def test_overlong_target_rejected():
    with pytest.raises(RejectedSampleError):
        build_instruction_sample([1], np.arange(12), 12)


def test_load_instructions(tmp_path):
    path = tmp_path / "i.jsonl"
    path.write_text(json.dumps({"prompt": "ab", "target": "cd"}) + "\n\n"
                    + json.dumps({"prompt": "x", "target": "y" * 50}) + "\n")
    samples, rejected = load_instructions(path, 16)
    assert len(samples) == 1 and rejected == 1
    path.write_text("{not json}\n")
    with pytest.raises(FormatError):
        load_instructions(path, 16)


def test_packing_is_a_seeded_permutation():
    ids = np.arange(100)
    a = pack_pretraining_batches(ids, 10, seed=1)
    b = pack_pretraining_batches(ids, 10, seed=1)
    assert [s.tokens.tolist() for s in a] == [s.tokens.tolist() for s in b]
    starts = sorted(int(s.tokens[0]) for s in a)
    assert starts == list(range(0, 100, 10))
    with pytest.raises(DataError):
        pack_pretraining_batches(np.arange(10), 10)


def test_cycle_reshuffles_each_epoch():
    samples = list(range(5))
    stream = cycle_samples(samples, seed=0)
    first = [next(stream) for _ in range(5)]
    epochs = [[next(stream) for _ in range(5)] for _ in range(3)]
    assert first == samples
    assert all(sorted(e) == samples for e in epochs)
    assert any(e != samples for e in epochs)


def test_holdout_split():
    train, held = split_holdout(np.arange(100), 0.1)
    assert train.size == 90 and held.tolist() == list(range(90, 100))
