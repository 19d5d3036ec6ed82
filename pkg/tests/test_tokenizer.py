import pytest
from hypothesis import given, settings, strategies as st

from moekit.errors import ConfigError, FormatError
from moekit.tokenizer import (
    CLOSE_TAG,
    EOS,
    OPEN_TAG,
    BbpeModel,
    bbpe_train,
    efficiency_eval,
)


def naive_bpe_oracle(docs, n_merges):
    """Brute-force BPE: recount every pair from scratch each iteration.

    Written independently of the trainer; same tie rules (count desc,
    earliest first occurrence, lexicographic byte pair).
    """
    vocab = {i: bytes([i]) for i in range(256)}
    next_id = 260  # 256 bytes + 4 reserved ids
    seqs = [list(d) for d in docs]
    merges = []
    for _ in range(n_merges):
        stats = {}
        position = 0
        for seq in seqs:
            for i in range(len(seq) - 1):
                key = (seq[i], seq[i + 1])
                if key in stats:
                    stats[key][0] += 1
                else:
                    stats[key] = [1, position, vocab[key[0]], vocab[key[1]]]
                position += 1
        if not stats:
            break
        ranked = sorted(stats.items(), key=lambda kv: (-kv[1][0], kv[1][1], kv[1][2], kv[1][3]))
        pair = ranked[0][0]
        merges.append(pair)
        vocab[next_id] = vocab[pair[0]] + vocab[pair[1]]
        new_seqs = []
        for seq in seqs:
            ns, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == pair:
                    ns.append(next_id)
                    i += 2
                else:
                    ns.append(seq[i])
                    i += 1
            new_seqs.append(ns)
        seqs = new_seqs
        next_id += 1
    return merges


def test_single_pair_corpus_first_merge():
    model = bbpe_train("aaaa", target_vocab=261)
    assert model.merges == [(ord("a"), ord("a"))]


def test_merge_sequence_equals_naive_oracle():
    corpus = [
        "the quick brown fox jumps over the lazy dog. " * 4,
        "안녕하세요 세계! hello world, hello tokens.",
        "def f(x):\n    return x + x\n" * 3,
    ]
    model = bbpe_train(corpus, target_vocab=260 + 60)
    oracle = naive_bpe_oracle([c.encode("utf-8") for c in corpus], 60)
    assert model.merges == oracle


def test_multiple_of_128_target_hit_exactly():
    corpus = [
        "lorem ipsum dolor sit amet, consectetur adipiscing elit",
        "sed do eiusmod tempor incididunt ut labore et dolore magna aliqua",
        "ut enim ad minim veniam, quis nostrud exercitation ullamco laboris",
        "duis aute irure dolor in reprehenderit in voluptate velit esse",
        "excepteur sint occaecat cupidatat non proident, sunt in culpa qui",
        "officia deserunt mollit anim id est laborum 0123456789",
    ]
    model = bbpe_train(corpus, target_vocab=384)
    assert model.vocab_size == 384
    assert model.vocab_size % 128 == 0


def test_target_below_minimum_rejected():
    with pytest.raises(ConfigError):
        bbpe_train("abc", target_vocab=260)
    with pytest.raises(ConfigError):
        bbpe_train("", target_vocab=300)


def test_roundtrip_multibyte_text():
    model = bbpe_train("가나다라 마바사아 가나다라", target_vocab=280)
    for text in ["안녕하세요", "héllo wörld", "가나다라 마바사", "plain ascii"]:
        ids = model.encode(text)
        assert model.decode(ids) == text
        assert model.decode_bytes(ids) == text.encode("utf-8")


def test_empty_string_encodes_to_empty():
    model = BbpeModel()
    assert model.encode("") == []
    assert model.decode([]) == ""


def test_encode_matches_manual_merge_trace():
    # 5-byte string "ababa": train on it, then replay the merges by hand.
    model = bbpe_train("ababa", target_vocab=262)
    a, b = ord("a"), ord("b")
    # merge 1: (a,b) occurs twice (positions 0 and 2) vs (b,a) twice at 1, 3
    # -> tie on count, (a,b) seen first -> id 260; "ababa" -> [260, 260, a]
    assert model.merges[0] == (a, b)
    # merge 2: pairs in [260, 260, a]: (260,260) once, (260,a) once ->
    # tie, (260,260) first -> id 261
    assert model.merges[1] == (260, 260)
    assert model.encode("ababa") == [261, a]


def test_reserved_ids_fixed_and_never_merged():
    model = bbpe_train("xyxyxyxy", target_vocab=265)
    assert model.token_id(OPEN_TAG) == 256
    assert model.token_id(CLOSE_TAG) == 257
    assert model.vocab_size >= 260
    for left, right in model.merges:
        assert left not in range(256, 260) and right not in range(256, 260)
    for ids in [model.encode("xyxy"), model.encode(OPEN_TAG)]:
        assert all(i < 256 or i >= 260 for i in ids)


def test_decode_renders_tags_and_strips_eos():
    model = BbpeModel()
    ids = [model.token_id(OPEN_TAG)] + model.encode("hi") + [model.token_id(CLOSE_TAG),
                                                             model.token_id(EOS)]
    assert model.decode(ids) == "<think>hi</think>"


def test_decode_unknown_id_raises():
    model = BbpeModel()
    with pytest.raises(IndexError):
        model.decode([99_999])


@settings(max_examples=300, deadline=None)
@given(st.binary(min_size=0, max_size=64))
def test_roundtrip_arbitrary_bytes_property(data):
    model = _shared_model()
    assert model.decode_bytes(model.encode(data)) == data


_MODEL_CACHE = {}


def _shared_model():
    if "m" not in _MODEL_CACHE:
        _MODEL_CACHE["m"] = bbpe_train(
            ["hello hello world", bytes(range(256)), "가나다 가나다"], target_vocab=300)
    return _MODEL_CACHE["m"]


def test_merge_determinism():
    corpus = ["banana bandana", "a man a plan a canal"]
    m1 = bbpe_train(corpus, target_vocab=280)
    m2 = bbpe_train(corpus, target_vocab=280)
    assert m1.merges == m2.merges


def test_monotone_compression_with_longer_merge_list():
    corpus = "to be or not to be, that is the question " * 8
    small = bbpe_train(corpus, target_vocab=270)
    large = bbpe_train(corpus, target_vocab=310)
    assert small.merges == large.merges[: len(small.merges)]
    for text in ["to be or not to be", "the question is", "not that"]:
        assert len(large.encode(text)) <= len(small.encode(text))


def test_save_load_roundtrip(tmp_path):
    model = bbpe_train(["round trip\x00\xff data", "with spaces  and\ttabs"],
                       target_vocab=290)
    path = tmp_path / "tok.bbpe"
    model.save(path)
    loaded = BbpeModel.load(path)
    assert loaded.merges == model.merges
    assert loaded.vocab == model.vocab
    assert loaded.reserved == model.reserved
    text = "round trip data with spaces"
    assert loaded.encode(text) == model.encode(text)


def test_load_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.bbpe"
    path.write_text("not a tokenizer\n")
    with pytest.raises(FormatError):
        BbpeModel.load(path)


def test_efficiency_single_sample():
    model = _shared_model()
    n = len(model.encode("hello world"))
    report = efficiency_eval(model, {"d": ["hello world"]})
    assert report.averages["d"] == n
    assert report.counts["d"] == 1


def test_efficiency_larger_vocab_never_worse_in_domain():
    corpus = "structured repetitive corpus with repetitive structure " * 12
    small = bbpe_train(corpus, target_vocab=276)
    large = bbpe_train(corpus, target_vocab=340)
    samples = ["structured corpus", "repetitive structure with", "corpus structure"]
    r_small = efficiency_eval(small, {"in_domain": samples})
    r_large = efficiency_eval(large, {"in_domain": samples})
    assert r_large.averages["in_domain"] <= r_small.averages["in_domain"]


def test_efficiency_groups_are_independent_and_empty_flagged():
    model = _shared_model()
    report = efficiency_eval(model, {"a": ["xx"], "b": ["yy yy"], "c": []})
    assert report.averages["a"] == len(model.encode("xx"))
    assert report.averages["b"] == len(model.encode("yy yy"))
    assert report.empty_labels == ("c",)
    with pytest.raises(ConfigError):
        efficiency_eval(model, {})
