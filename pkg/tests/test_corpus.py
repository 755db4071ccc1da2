import numpy as np
import pytest

from pesimt.corpus import (
    CorpusError, FUNCTION_TOKEN, SentencePair, SynthConfig, SyntheticLanguage, Vocab,
    generate_synthetic_corpus, load_parallel, make_batches, read_parallel, write_parallel,
)
from pesimt.model import BOS, EOS, PAD, UNK


def small_synth(**kw):
    base = dict(vocab_size=20, n_train=50, n_dev=10, n_test=10, seed=4)
    base.update(kw)
    return SynthConfig(**base)


def test_degenerate_config_is_token_mapping():
    cfg = small_synth(swap_prob=0.0, insert_prob=0.0)
    lang = SyntheticLanguage(cfg)
    for x, y in generate_synthetic_corpus(cfg)["train"]:
        assert y == [lang.mapping[t] for t in x]


def test_full_swap_on_length_two():
    cfg = small_synth(swap_prob=1.0, insert_prob=0.0, min_len=2, max_len=2)
    lang = SyntheticLanguage(cfg)
    for x, y in generate_synthetic_corpus(cfg)["train"]:
        assert y == [lang.mapping[x[1]], lang.mapping[x[0]]]


def test_insertion_adds_function_token():
    cfg = small_synth(swap_prob=0.0, insert_prob=1.0)
    for x, y in generate_synthetic_corpus(cfg)["train"]:
        assert len(y) == 2 * len(x) and y[::2] == [FUNCTION_TOKEN] * len(x)


def test_deterministic_and_disjoint():
    a = generate_synthetic_corpus(small_synth())
    b = generate_synthetic_corpus(small_synth())
    assert a == b
    train = {tuple(x) for x, _ in a["train"]}
    assert not train & {tuple(x) for x, _ in a["test"]}
    assert not train & {tuple(x) for x, _ in a["dev"]}
    c = generate_synthetic_corpus(small_synth(seed=99))
    assert c != a


def test_vocab_size_validated():
    with pytest.raises(ValueError):
        SynthConfig(vocab_size=7)


def test_vocab_reserved_and_threshold():
    v = Vocab.build([["a"] * 5 + ["b"] * 4], min_freq=5)
    assert v.itos[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert (PAD, BOS, EOS, UNK) == (0, 1, 2, 3)
    assert v.encode(["a", "b"]) == [4, UNK]


def test_vocab_file_round_trip(tmp_path):
    v = Vocab.build([["x", "y", "x"]], min_freq=1)
    v.save(tmp_path / "v.txt")
    w = Vocab.load(tmp_path / "v.txt")
    assert w.itos == v.itos and w.freqs["x"] == 2


def test_load_identical_files(tmp_path):
    text = "a b c\nd e\nf\n"
    (tmp_path / "c.src").write_text(text)
    (tmp_path / "c.tgt").write_text(text)
    pairs, sv, tv, oov = load_parallel(tmp_path / "c.src", tmp_path / "c.tgt", min_freq=1)
    assert len(pairs) == 3 and oov == {"src": 0.0, "tgt": 0.0}
    assert all(UNK not in p.x for p in pairs)


def test_load_errors(tmp_path):
    (tmp_path / "a.src").write_text("a\nb\nc\n")
    (tmp_path / "a.tgt").write_text("a\nb\n")
    with pytest.raises(CorpusError, match="3.*2"):
        read_parallel(tmp_path / "a.src", tmp_path / "a.tgt")
    (tmp_path / "b.src").write_text("a\n\nc\n")
    (tmp_path / "b.tgt").write_text("a\nb\nc\n")
    with pytest.raises(CorpusError):
        read_parallel(tmp_path / "b.src", tmp_path / "b.tgt")
    with pytest.raises(CorpusError):
        read_parallel(tmp_path / "missing.src", tmp_path / "a.tgt")


def test_serialisation_round_trip(tmp_path):
    raw = generate_synthetic_corpus(small_synth())["train"]
    write_parallel(raw, tmp_path / "train")
    pairs, sv, tv, _ = load_parallel(tmp_path / "train.src", tmp_path / "train.tgt", min_freq=1)
    again, *_ = load_parallel(tmp_path / "train.src", tmp_path / "train.tgt", vocabs=(sv, tv))
    assert [(p.x, p.y) for p in pairs] == [(p.x, p.y) for p in again]
    assert [sv.decode(p.x) for p in pairs] == [x for x, _ in raw]


def test_batching_arithmetic():
    pairs = [SentencePair([4] * 4, [5] * 4) for _ in range(3)]
    batches = make_batches(pairs, max_tokens=8, seed=0)
    assert sorted(len(b) for b in batches) == [1, 2]


def test_batching_deterministic_and_complete(rng):
    pairs = [SentencePair(list(rng.integers(4, 9, size=n)), list(rng.integers(4, 9, size=m)))
             for n, m in rng.integers(1, 10, size=(40, 2))]
    a = make_batches(pairs, 30, seed=5)
    b = make_batches(pairs, 30, seed=5)
    assert [x.index.tolist() for x in a] == [x.index.tolist() for x in b]
    assert sorted(i for x in a for i in x.index.tolist()) == list(range(40))
    for x in a:
        assert len(x) * max(max(pairs[i].I, pairs[i].M) for i in x.index) <= 30


def test_batching_rejects_oversize():
    pairs = [SentencePair([4], [4]), SentencePair([4] * 9, [4])]
    with pytest.raises(CorpusError, match="sentence 1"):
        make_batches(pairs, 8)


def test_collate_layout():
    from pesimt.corpus import collate
    b = collate([SentencePair([4, 5], [6]), SentencePair([7], [8, 9])])
    assert b.src.tolist() == [[4, 5, EOS], [7, EOS, PAD]]
    assert b.tgt_in.tolist() == [[BOS, 6, PAD], [BOS, 8, 9]]
    assert b.tgt_out.tolist() == [[6, EOS, PAD], [8, 9, EOS]]
    assert b.src_len.tolist() == [3, 2] and b.tgt_len.tolist() == [2, 3]
