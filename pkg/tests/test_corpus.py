import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zslab.bpe import PAD, learn_bpe
from zslab.corpus import (
    Batch,
    BatchStats,
    Family,
    ParallelCorpus,
    SentencePair,
    SyntheticFamilySpec,
    TransformSpec,
    _local_reorder,
    batch_iterator,
    encode_pairs,
    generate_family,
    load_parallel,
    pair_batch_iterator,
    project_word_alignment,
)


def _small_spec(**kw) -> SyntheticFamilySpec:
    base = dict(
        vocab_size=40,
        sentence_count=60,
        mono_count=50,
        test_count=20,
        length_range=(3, 7),
        seed=7,
    )
    base.update(kw)
    return SyntheticFamilySpec(**base)


def test_no_reorder_gives_identity_alignment():
    fam = generate_family(_small_spec(source_transform=TransformSpec(0, 0.0)))
    for links, src in zip(fam.src_piv.alignments, fam.src_piv.src):
        n = len(src.split())
        assert links == {(i, i) for i in range(n)}


def test_cipher_only_preserves_lengths():
    fam = generate_family(_small_spec())
    for s, p in fam.src_piv.pairs():
        assert len(s.split()) == len(p.split())
    for p, t in fam.piv_tgt.pairs():
        assert len(p.split()) == len(t.split())


def test_fixed_seed_regenerates_byte_identical_files(tmp_path):
    spec = _small_spec()
    sums1 = generate_family(spec).save(tmp_path / "a")
    sums2 = generate_family(_small_spec()).save(tmp_path / "b")
    assert sums1 == sums2


def test_different_seed_changes_corpora(tmp_path):
    sums1 = generate_family(_small_spec()).save(tmp_path / "a")
    sums2 = generate_family(_small_spec(seed=8)).save(tmp_path / "b")
    assert sums1 != sums2


def test_train_test_sentence_sets_disjoint():
    fam = generate_family(_small_spec())
    train_piv = set(fam.src_piv.piv) | set(fam.piv_tgt.src) | set(fam.pivot_mono)
    assert train_piv.isdisjoint(set(fam.test_piv))
    # and the two parallel corpora do not share pivot sentences either
    assert set(fam.src_piv.piv).isdisjoint(set(fam.piv_tgt.src))


def test_inverse_cipher_recovers_pivot_sentence():
    fam = generate_family(
        _small_spec(
            source_transform=TransformSpec(0, 0.0),
            target_transform=TransformSpec(0, 0.0),
        )
    )
    inv_tgt = {form: i for i, form in enumerate(fam.target_forms)}
    for piv, tgt in fam.piv_tgt.pairs():
        recovered = " ".join(fam.pivot_forms[inv_tgt[w]] for w in tgt.split())
        assert recovered == piv


def test_shared_roots_overlap_fraction():
    frac = 0.25
    fam = generate_family(_small_spec(source_transform=TransformSpec(0, frac)))
    shared = sum(s == p for s, p in zip(fam.source_forms, fam.pivot_forms))
    assert shared == round(frac * 40)
    # disjoint alphabets mean zero overlap elsewhere, including vs target
    assert all(s != t for s, t in zip(fam.source_forms, fam.target_forms))


def test_surface_alphabets_disjoint_by_default():
    fam = generate_family(_small_spec())
    src_chars = set("".join(fam.source_forms))
    piv_chars = set("".join(fam.pivot_forms))
    tgt_chars = set("".join(fam.target_forms))
    assert src_chars.isdisjoint(piv_chars)
    assert src_chars.isdisjoint(tgt_chars)
    assert piv_chars.isdisjoint(tgt_chars)


def test_window_of_min_length_rejected():
    with pytest.raises(ValueError, match="window"):
        generate_family(_small_spec(source_transform=TransformSpec(3, 0.0)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 30), st.integers(0, 4), st.integers(0, 10_000))
def test_local_reorder_is_bounded_permutation(n, w, seed):
    if w >= n:
        return
    rng = np.random.default_rng(seed)
    perm = _local_reorder(n, w, rng)
    assert sorted(perm) == list(range(n))
    assert max(abs(int(p) - i) for i, p in enumerate(perm)) <= w


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def test_load_parallel_basic(tmp_path):
    (tmp_path / "a.txt").write_text("x1\nx2\nx3\n")
    (tmp_path / "b.txt").write_text("y1\ny2\ny3\n")
    corpus = load_parallel(tmp_path / "a.txt", tmp_path / "b.txt")
    assert len(corpus) == 3
    assert list(corpus.pairs())[2] == ("x3", "y3")


def test_load_parallel_drops_empty_pairs(tmp_path):
    (tmp_path / "a.txt").write_text("x1\n\nx3\n")
    (tmp_path / "b.txt").write_text("y1\ny2\ny3\n")
    corpus = load_parallel(tmp_path / "a.txt", tmp_path / "b.txt")
    assert len(corpus) == 2
    assert corpus.src == ["x1", "x3"]


def test_load_parallel_crlf_equals_lf(tmp_path):
    (tmp_path / "a.txt").write_bytes(b"x1\r\nx2\r\n")
    (tmp_path / "b.txt").write_bytes(b"y1\r\ny2\r\n")
    (tmp_path / "c.txt").write_bytes(b"x1\nx2\n")
    (tmp_path / "d.txt").write_bytes(b"y1\ny2\n")
    c1 = load_parallel(tmp_path / "a.txt", tmp_path / "b.txt")
    c2 = load_parallel(tmp_path / "c.txt", tmp_path / "d.txt")
    assert c1.src == c2.src and c1.piv == c2.piv


def test_load_parallel_count_mismatch(tmp_path):
    (tmp_path / "a.txt").write_text("x1\nx2\n")
    (tmp_path / "b.txt").write_text("y1\n")
    with pytest.raises(ValueError, match="2.*1"):
        load_parallel(tmp_path / "a.txt", tmp_path / "b.txt")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def test_three_len4_sentences_max8_gives_two_batches():
    seqs = [[5, 6, 7, 8]] * 3
    batches = list(batch_iterator(seqs, max_tokens=8, shuffle=False))
    assert [b.ids.shape[0] for b in batches] == [2, 1]


def test_no_shuffle_preserves_order():
    seqs = [[5], [6], [7], [8]]
    batches = list(batch_iterator(seqs, max_tokens=2, shuffle=False))
    flat = [int(i) for b in batches for i in b.ids[b.mask]]
    assert flat == [5, 6, 7, 8]


def test_same_seed_identical_batches():
    rng = np.random.default_rng(0)
    seqs = [list(map(int, rng.integers(5, 50, size=rng.integers(1, 9)))) for _ in range(40)]
    a = [b.ids.tolist() for b in batch_iterator(seqs, 32, seed=3)]
    b = [b.ids.tolist() for b in batch_iterator(seqs, 32, seed=3)]
    assert a == b
    c = [b.ids.tolist() for b in batch_iterator(seqs, 32, seed=4)]
    assert a != c


def test_overlong_sentences_dropped_and_counted():
    stats = BatchStats()
    seqs = [[5] * 4, [6] * 101, [7] * 2]
    batches = list(batch_iterator(seqs, 16, shuffle=False, stats=stats))
    assert stats.dropped_overlong == 1
    kept = {int(i) for b in batches for i in b.ids[b.mask]}
    assert kept == {5, 7}


def test_padding_is_pad_token():
    batches = list(batch_iterator([[9, 9, 9], [8]], 8, shuffle=False))
    b = batches[0]
    assert (b.ids[~b.mask] == PAD).all()


def test_pair_batch_iterator_respects_budget():
    pairs = [SentencePair([1] * 4, [2] * 4) for _ in range(5)]
    batches = list(pair_batch_iterator(pairs, max_tokens=16, shuffle=False))
    assert [len(b) for b in batches] == [2, 2, 1]


# ---------------------------------------------------------------------------
# Subword projection
# ---------------------------------------------------------------------------


def test_project_word_alignment_cross_product():
    links = {(0, 1), (1, 0)}
    src_spans = [(0, 2), (2, 3)]
    piv_spans = [(0, 1), (1, 3)]
    out = project_word_alignment(links, src_spans, piv_spans)
    assert out == {(0, 1), (0, 2), (1, 1), (1, 2), (2, 0)}


def test_encode_pairs_projects_gold_alignment():
    fam = generate_family(_small_spec(source_transform=TransformSpec(0, 0.0)))
    bpe = learn_bpe(iter(fam.pivot_mono + fam.source_mono), num_merges=30)
    pairs = encode_pairs(bpe, fam.src_piv)
    for pair, (s_text, p_text) in zip(pairs[:10], fam.src_piv.pairs()):
        s_spans = bpe.word_spans(s_text)
        p_spans = bpe.word_spans(p_text)
        # identity word alignment -> word i's subword block aligns to word i's
        for (ws, we), (ps, pe) in zip(s_spans, p_spans):
            for a in range(ws, we):
                for b in range(ps, pe):
                    assert (a, b) in pair.gold_alignment
        assert max(i for i, _ in pair.gold_alignment) < len(pair.src)
        assert max(j for _, j in pair.gold_alignment) < len(pair.piv)
