import numpy as np
import pytest

from seqlab.data import (
    Batch,
    SyntheticTask,
    generate_task,
    load_pairs,
    make_batch,
    sample_batch,
    save_pairs,
)
from seqlab.errors import ConfigError, DataError
from seqlab.model import BOS, EOS, PAD


class TestTaskDefinitions:
    def test_copy_target(self):
        t = SyntheticTask(variant="copy")
        assert t.target_for((5, 6, 7)) == (5, 6, 7)

    def test_reverse_target(self):
        t = SyntheticTask(variant="reverse")
        assert t.target_for((5, 6, 7)) == (7, 6, 5)

    def test_lexicon_applies_stored_permutation(self):
        t = SyntheticTask(variant="lexicon", lexicon_seed=3)
        perm = t.content_permutation()
        src = (5, 9, 20, 5)
        tgt = t.target_for(src)
        assert tgt == tuple(int(perm[s]) for s in src)
        # permutation fixes reserved ids and permutes content ids bijectively
        assert all(perm[i] == i for i in range(3))
        assert sorted(perm[3:].tolist()) == list(range(3, t.vocab_size))

    def test_invalid_ranges_rejected(self):
        with pytest.raises(ConfigError):
            SyntheticTask(len_min=0)
        with pytest.raises(ConfigError):
            SyntheticTask(len_min=9, len_max=5)
        with pytest.raises(ConfigError):
            SyntheticTask(vocab_size=3)
        with pytest.raises(ConfigError):
            SyntheticTask(variant="rot13")


class TestGeneration:
    def test_deterministic_given_seeds(self, tmp_path):
        t = SyntheticTask(n_train=50, n_valid=20, n_test=20)
        a = generate_task(t)
        b = generate_task(t)
        assert a == b
        save_pairs(tmp_path / "a.txt", a["train"])
        save_pairs(tmp_path / "b.txt", b["train"])
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_different_seed_changes_split(self):
        base = SyntheticTask(n_train=50, n_valid=20, n_test=20)
        other = SyntheticTask(n_train=50, n_valid=20, n_test=20, seed_train=99)
        assert generate_task(base)["train"] != generate_task(other)["train"]

    def test_split_sizes_and_disjointness(self):
        t = SyntheticTask(vocab_size=8, len_min=2, len_max=4, n_train=300,
                          n_valid=60, n_test=60)
        splits = generate_task(t)
        assert len(splits["train"]) == 300
        assert len(splits["valid"]) == 60
        assert len(splits["test"]) == 60
        train_srcs = {s for s, _ in splits["train"]}
        for name in ("valid", "test"):
            assert all(s not in train_srcs for s, _ in splits[name])
        valid_srcs = {s for s, _ in splits["valid"]}
        assert all(s not in valid_srcs for s, _ in splits["test"])

    def test_lengths_within_range_and_tokens_content_only(self):
        t = SyntheticTask(len_min=4, len_max=6, n_train=100, n_valid=10, n_test=10)
        for split in generate_task(t).values():
            for s, tgt in split:
                assert 4 <= len(s) <= 6 and len(tgt) == len(s)
                assert all(3 <= tok < t.vocab_size for tok in s + tgt)


class TestBatching:
    def test_shift_invariant(self):
        pairs = [((5, 6, 7), (7, 6, 5)), ((8, 9), (9, 8))]
        b = make_batch(pairs)
        for i in range(b.n_sentences):
            n = b.tgt_lengths[i]
            assert b.tgt_input[i, 0] == BOS
            for t in range(1, n):
                assert b.tgt_input[i, t] == b.tgt_output[i, t - 1]
            assert b.tgt_output[i, n - 1] == EOS

    def test_padding_and_mask(self):
        pairs = [((5, 6, 7, 8), (8, 7, 6, 5)), ((9,), (9,))]
        b = make_batch(pairs)
        assert b.src.shape == (2, 4)
        assert b.src_pad[1, 1:].all() and not b.src_pad[0].any()
        np.testing.assert_array_equal(b.tgt_mask[1], [1, 1, 0, 0, 0])
        assert (b.src[1, 1:] == PAD).all()

    def test_sample_batch_deterministic(self):
        t = SyntheticTask(n_train=64, n_valid=8, n_test=8)
        pairs = generate_task(t)["train"]
        a = sample_batch(pairs, 16, np.random.default_rng(5))
        b = sample_batch(pairs, 16, np.random.default_rng(5))
        np.testing.assert_array_equal(a.src, b.src)

    def test_empty_batch_rejected(self):
        with pytest.raises(DataError):
            make_batch([])


class TestFileFormat:
    def test_roundtrip(self, tmp_path):
        pairs = [((5, 6, 7), (7, 6, 5)), ((10, 11), (11, 10))]
        path = tmp_path / "data.txt"
        save_pairs(path, pairs)
        assert load_pairs(path) == pairs
        assert path.read_text().splitlines()[0] == "5 6 7 ||| 7 6 5"

    def test_malformed_line_names_lineno(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("5 6 ||| 6 5\nno separator here\n")
        with pytest.raises(DataError, match=r"bad\.txt:2"):
            load_pairs(path)

    def test_non_integer_token_names_lineno(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("5 x ||| 6 5\n")
        with pytest.raises(DataError, match=r"bad\.txt:1"):
            load_pairs(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.txt"
        path.write_text("")
        with pytest.raises(DataError, match="no sentence pairs"):
            load_pairs(path)
