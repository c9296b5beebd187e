from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constraint_qt.textproc import (
    EOS, PAD, UNK, BpeModel, TokenSequence, Vocabulary, apply_bpe, build_vocab,
    learn_bpe, load_bpe, read_bitext, save_bpe, strip_bpe, tokenize,
)


def seq(text):
    return TokenSequence(tuple(text.split()))


class TestTokenize:
    def test_lowercase_and_split(self):
        assert tokenize("Meizu Phone 6").tokens == ("meizu", "phone", "6")

    def test_empty(self):
        assert tokenize("").tokens == ()
        assert tokenize("   \t\n").tokens == ()

    def test_punctuation_split(self):
        assert tokenize("red,shoes").tokens == ("red", ",", "shoes")

    @pytest.mark.parametrize(
        "text, expected",
        [
            ("  a   b  ", ("a", "b")),
            ("usb-c!!", ("usb", "-", "c", "!", "!")),
            ("Чехол для Meizu", ("чехол", "для", "meizu")),
            ("e\u0301te", ("\u00e9te",)),  # combining accent composed by NFC
        ],
    )
    def test_rule_table(self, text, expected):
        assert tokenize(text).tokens == expected

    @given(st.text())
    def test_no_whitespace_in_tokens(self, text):
        toks = tokenize(text).tokens
        assert all(t and not any(c.isspace() for c in t) for t in toks)
        if text.strip():
            assert toks


class TestBpe:
    def test_zero_merges_is_character_level(self):
        model = learn_bpe([seq("ab abc")], 0)
        assert model.num_merges == 0
        assert apply_bpe(model, seq("ab")).tokens == ("a", "b</w>")

    def test_first_merge_matches_brute_force_pair_counts(self):
        corpus = [seq("aaab")] * 5
        # Brute force: count adjacent symbol pairs over the marked words.
        counts = Counter()
        for s in corpus:
            for w in s:
                symbols = list(w[:-1]) + [w[-1] + "</w>"]
                for pair in zip(symbols, symbols[1:]):
                    counts[pair] += 1
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        assert best == ("a", "a")
        assert learn_bpe(corpus, 1).merges[0] == best

    def test_ties_are_lexicographic(self):
        model = learn_bpe([seq("ab cd")], 1)
        assert model.merges == (("a", "b</w>"),)

    def test_deterministic(self):
        corpus = [seq("low lower lowest newer wider new")] * 3
        assert learn_bpe(corpus, 10).merges == learn_bpe(corpus, 10).merges

    def test_seen_word_becomes_single_token(self):
        corpus = [seq("hello hello world")]
        model = learn_bpe(corpus, 50)
        assert apply_bpe(model, seq("hello")).tokens == ("hello</w>",)

    def test_hand_applied_merges(self):
        model = BpeModel((("l", "o"), ("lo", "w</w>"), ("e", "r</w>")))
        assert apply_bpe(model, seq("low lower")).tokens == ("low</w>", "lo", "w", "er</w>")

    def test_empty_corpus_raises(self):
        with pytest.raises(ValueError):
            learn_bpe([], 5)

    def test_duplicate_merges_rejected(self):
        with pytest.raises(ValueError):
            BpeModel((("a", "b"), ("a", "b")))

    def test_roundtrip_random_words(self):
        rng = np.random.default_rng(0)
        alphabet = list("abcdefgh")
        train = [TokenSequence(tuple("".join(rng.choice(alphabet, rng.integers(1, 8))) for _ in range(50)))
                 for _ in range(20)]
        model = learn_bpe(train, 40)
        words = ["".join(rng.choice(alphabet + ["x", "ю"], rng.integers(1, 12))) for _ in range(1000)]
        out = apply_bpe(model, TokenSequence(tuple(words)))
        assert strip_bpe(out.tokens) == words

    def test_idempotent(self):
        model = learn_bpe([seq("banana bandana cabana")], 6)
        once = apply_bpe(model, seq("banana bandit"))
        assert apply_bpe(model, once) == once

    def test_file_roundtrip(self, tmp_path):
        model = learn_bpe([seq("banana bandana cabana")], 6)
        save_bpe(model, tmp_path / "bpe.txt")
        assert load_bpe(tmp_path / "bpe.txt").merges == model.merges


class TestVocabulary:
    def test_specials_and_size(self):
        v = build_vocab([seq("a b c a")], 10)
        assert len(v) == 7
        assert v.token_of[:4] == ["<pad>", "<s>", "</s>", "<unk>"]
        assert (v.pad, v.eos, v.unk) == (PAD, EOS, UNK)

    def test_unknown_maps_to_unk(self):
        v = build_vocab([seq("a b c")], 10)
        assert v.encode(["zzz"]) == [UNK]

    def test_topk_matches_brute_force_sort(self):
        rng = np.random.default_rng(1)
        corpus = [TokenSequence(tuple(f"w{i}" for i in rng.integers(0, 40, size=30))) for _ in range(20)]
        v = build_vocab(corpus, 20)
        counts = {}
        for s in corpus:
            for t in s:
                counts[t] = counts.get(t, 0) + 1
        expected = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:16]
        assert v.words() == expected

    def test_encode_decode_identity(self):
        v = build_vocab([seq("x y z y")], 10)
        toks = ["y", "z", "x", "x"]
        assert v.decode(v.encode(toks)) == toks

    def test_errors(self):
        with pytest.raises(ValueError):
            build_vocab([], 10)
        with pytest.raises(ValueError):
            build_vocab([seq("a")], 4)

    def test_file_roundtrip(self, tmp_path):
        v = build_vocab([seq("a b c a")], 10)
        v.save(tmp_path / "v.tsv")
        assert Vocabulary.load(tmp_path / "v.tsv") == v
        assert (tmp_path / "v.tsv").read_text().splitlines()[4] == "a\t4"


@settings(max_examples=50)
@given(st.lists(st.sampled_from(["ab", "abc", "bca", "cab", "aa"]), min_size=1, max_size=20))
def test_bpe_learning_is_byte_identical(words):
    corpus = [TokenSequence(tuple(words))]
    assert learn_bpe(corpus, 8).merges == learn_bpe(list(corpus), 8).merges


def test_read_bitext(tmp_path):
    p = tmp_path / "b.tsv"
    p.write_text("Чехол Meizu\tMeizu case\n\nA, B\tc\n", encoding="utf-8")
    pairs = read_bitext(p)
    assert [(s.tokens, t.tokens) for s, t in pairs] == [
        (("чехол", "meizu"), ("meizu", "case")),
        (("a", ",", "b"), ("c",)),
    ]
    p.write_text("no tab here\n")
    with pytest.raises(ValueError):
        read_bitext(p)
