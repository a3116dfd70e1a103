import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wakesleep_nmt.corpus import (
    Bitext, CorpusError, Monotext, OOVError, Sentence, Vocabulary, load_bitext, load_monotext, union, write_bitext,
    write_monotext,
)
from wakesleep_nmt.subword import learn_bpe

VOCAB = Vocabulary(["a", "b", "c", "d"])


def write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


class TestVocabulary:
    def test_eos_first_and_dense(self):
        v = Vocabulary(["x", "y"])
        assert v.tokens[0] == "</s>" and v.eos_id == 0
        assert [v.id(t) for t in v.tokens] == list(range(len(v)))

    def test_duplicates_rejected(self):
        with pytest.raises(CorpusError):
            Vocabulary(["x", "x"])

    def test_build_is_sorted_and_deterministic(self):
        v = Vocabulary.build([["b", "a"], ["c", "a"]])
        assert v.tokens == ("</s>", "a", "b", "c")
        assert v == Vocabulary.build([["c"], ["a", "b"]])

    def test_sentence_appends_eos(self):
        s = VOCAB.sentence(["a", "c"])
        assert s.token_ids == (1, 3, 0)
        VOCAB.validate(s)

    def test_oov_strict(self):
        with pytest.raises(OOVError):
            VOCAB.sentence(["a", "zz"])

    def test_validate_rejects_inner_eos(self):
        with pytest.raises(CorpusError):
            VOCAB.validate(Sentence((1, 0, 2, 0)))
        with pytest.raises(CorpusError):
            VOCAB.validate(Sentence((1, 2)))

    def test_save_load(self, tmp_path):
        VOCAB.save(tmp_path / "v")
        assert Vocabulary.load(tmp_path / "v") == VOCAB


class TestLoadMonotext:
    def test_three_lines(self, tmp_path):
        m = load_monotext(write(tmp_path / "m", ["a b", "c", "d d a"]), VOCAB)
        assert len(m) == 3
        assert all(s.token_ids[-1] == 0 and 0 not in s.token_ids[:-1] for s in m)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "m"
        p.write_bytes(b"")
        assert len(load_monotext(p, VOCAB)) == 0

    def test_blank_line_skipped_with_warning(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            m = load_monotext(write(tmp_path / "m", ["a", "", "b", "c"]), VOCAB)
        assert len(m) == 3
        assert sum("blank" in r.message for r in caplog.records) == 1

    def test_invalid_utf8(self, tmp_path):
        p = tmp_path / "m"
        p.write_bytes(b"a \xff\n")
        with pytest.raises(CorpusError, match="UTF-8"):
            load_monotext(p, VOCAB)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CorpusError):
            load_monotext(tmp_path / "nope", VOCAB)

    def test_oov_word_level_is_error(self, tmp_path):
        with pytest.raises(OOVError):
            load_monotext(write(tmp_path / "m", ["a q"]), VOCAB)

    def test_oov_falls_back_to_characters_with_bpe(self, tmp_path):
        merges = learn_bpe(["abc abc"], 5)
        assert merges.merges == (("a", "b"), ("ab", "c</w>"))
        # "abd" segments to "ab d</w>", and "ab" is not in the vocabulary
        vocab = Vocabulary(["abc</w>"] + list("abcd") + [c + "</w>" for c in "abcd"])
        m = load_monotext(write(tmp_path / "m", ["abc abd"]), vocab, merges)
        assert vocab.words(m.sentences[0]) == ["abc</w>", "a", "b", "d</w>"]
        with pytest.raises(OOVError):
            load_monotext(write(tmp_path / "m2", ["abc abd"]), vocab, merges, strict=True)


class TestLoadBitext:
    def test_five_pairs(self, tmp_path):
        lines = ["a", "b c", "d", "a a", "c"]
        b = load_bitext(write(tmp_path / "s", lines), write(tmp_path / "t", lines[::-1]), VOCAB, VOCAB)
        assert len(b) == 5 and b.role == "observed"

    def test_count_mismatch_names_both_counts(self, tmp_path):
        with pytest.raises(CorpusError, match=r"5 lines.*4"):
            load_bitext(write(tmp_path / "s", ["a"] * 5), write(tmp_path / "t", ["a"] * 4), VOCAB, VOCAB)

    def test_identical_files(self, tmp_path):
        lines = ["a b", "c d"]
        p = write(tmp_path / "s", lines)
        b = load_bitext(p, p, VOCAB, VOCAB)
        assert all(x == y for x, y in b)

    def test_blank_line_fatal(self, tmp_path):
        with pytest.raises(CorpusError, match="blank"):
            load_bitext(write(tmp_path / "s", ["a", ""]), write(tmp_path / "t", ["a", "b"]), VOCAB, VOCAB)


def bitext(n, role="observed", offset=0):
    pairs = tuple((Sentence(((i + offset) % 4 + 1, 0)), Sentence((i % 3 + 1, 0))) for i in range(n))
    return Bitext(pairs, VOCAB, VOCAB, role)


class TestUnion:
    def test_sizes(self):
        assert len(union(bitext(100), bitext(50))) == 150

    def test_empty_identity(self):
        a = bitext(7)
        u = union(a, bitext(0))
        assert u.pairs == a.pairs and u.role == "observed"

    def test_duplicates_preserved(self):
        a = bitext(5)
        u = union(a, a)
        assert u.pairs == a.pairs + a.pairs

    def test_role_when_mixed(self):
        assert union(bitext(2, "back"), bitext(2, "back")).role == "back"
        assert union(bitext(2), bitext(2, "back")).role == "observed"

    def test_order_a_first(self):
        a, b = bitext(3), bitext(2, offset=1)
        assert union(a, b).pairs[:3] == a.pairs

    def test_associative(self):
        a, b, c = bitext(3), bitext(2, offset=1), bitext(4, offset=2)
        assert union(union(a, b), c).pairs == union(a, union(b, c)).pairs

    def test_vocab_mismatch(self):
        other = Bitext((), Vocabulary(["z"]), VOCAB)
        with pytest.raises(CorpusError):
            union(bitext(1), other)

    def test_bad_role(self):
        with pytest.raises(CorpusError):
            Bitext((), VOCAB, VOCAB, "imagined")


token_lists = st.lists(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=6), max_size=12)


class TestRoundTrip:
    @settings(max_examples=30, deadline=None)
    @given(token_lists)
    def test_monotext(self, tmp_path_factory, lines):
        d = tmp_path_factory.mktemp("m")
        m = Monotext(tuple(VOCAB.sentence(t) for t in lines), VOCAB)
        write_monotext(d / "m", m)
        assert load_monotext(d / "m", VOCAB).sentences == m.sentences

    @settings(max_examples=30, deadline=None)
    @given(token_lists, st.randoms(use_true_random=False))
    def test_bitext(self, tmp_path_factory, lines, rnd):
        d = tmp_path_factory.mktemp("b")
        targets = [rnd.sample(t, len(t)) for t in lines]
        b = Bitext(tuple((VOCAB.sentence(s), VOCAB.sentence(t)) for s, t in zip(lines, targets)), VOCAB, VOCAB)
        write_bitext(d / "s", d / "t", b)
        assert load_bitext(d / "s", d / "t", VOCAB, VOCAB).pairs == b.pairs
