"""Synthetic language families with known ground truth, plus corpus plumbing.

A family starts from a generated "pivot" language: sentences are drawn from a
Zipfian unigram distribution blended with per-word preferred successors, so
masked-token prediction has learnable signal. The source and target languages
are word-substitution ciphers of the pivot over disjoint surface alphabets
(optionally locally reordered), so gold translations and gold word alignments
exist by construction. A configurable fraction of source word types can keep
their pivot surface form to emulate related languages sharing vocabulary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import yaml

from .bpe import PAD, BpeModel

WordAlignment = set[tuple[int, int]]


@dataclass
class ParallelCorpus:
    """Line-aligned bilingual text with optional gold word alignments."""

    src: list[str]
    piv: list[str]
    alignments: Optional[list[WordAlignment]] = None
    pseudo: Optional[list[bool]] = None  # provenance: True for back-translated rows

    def __post_init__(self):
        if len(self.src) != len(self.piv):
            raise ValueError(
                f"line count mismatch: {len(self.src)} source vs {len(self.piv)} pivot"
            )

    def __len__(self) -> int:
        return len(self.src)

    def pairs(self) -> Iterable[tuple[str, str]]:
        return zip(self.src, self.piv)


@dataclass
class SentencePair:
    """One encoded pair: subword ids plus an optional subword-level alignment."""

    src: list[int]
    piv: list[int]
    gold_alignment: Optional[set[tuple[int, int]]] = None
    pseudo: bool = False


def project_word_alignment(
    word_links: WordAlignment,
    src_spans: Sequence[tuple[int, int]],
    piv_spans: Sequence[tuple[int, int]],
) -> set[tuple[int, int]]:
    """Expand word-level links to the cross product of their subword spans."""
    links = set()
    for i, j in word_links:
        s0, s1 = src_spans[i]
        p0, p1 = piv_spans[j]
        for a in range(s0, s1):
            for b in range(p0, p1):
                links.add((a, b))
    return links


def encode_pairs(bpe: BpeModel, corpus: ParallelCorpus) -> list[SentencePair]:
    out = []
    for idx, (s, p) in enumerate(corpus.pairs()):
        sub_align = None
        if corpus.alignments is not None:
            sub_align = project_word_alignment(
                corpus.alignments[idx], bpe.word_spans(s), bpe.word_spans(p)
            )
        pseudo = bool(corpus.pseudo[idx]) if corpus.pseudo is not None else False
        out.append(SentencePair(bpe.encode(s), bpe.encode(p), sub_align, pseudo))
    return out


# ---------------------------------------------------------------------------
# Family generation
# ---------------------------------------------------------------------------


@dataclass
class TransformSpec:
    """Word-level bijection from pivot: substitution cipher plus optional
    bounded local reordering. shared_with_pivot keeps that fraction of word
    types identical to the pivot surface form."""

    reorder_window: int = 0
    shared_with_pivot: float = 0.0


@dataclass
class SyntheticFamilySpec:
    vocab_size: int = 200
    sentence_count: int = 5000
    mono_count: int = 5000
    test_count: int = 300
    length_range: tuple[int, int] = (3, 9)
    seed: int = 1
    zipf_exponent: float = 1.1
    bigram_blend: float = 0.5
    source_transform: TransformSpec = field(default_factory=lambda: TransformSpec(2, 0.0))
    target_transform: TransformSpec = field(default_factory=TransformSpec)

    def validate(self) -> None:
        if self.vocab_size < 10:
            raise ValueError(f"vocab_size must be >= 10, got {self.vocab_size}")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad length_range {self.length_range}")
        for which, t in (("source", self.source_transform), ("target", self.target_transform)):
            if t.reorder_window >= lo:
                raise ValueError(
                    f"{which} reorder window {t.reorder_window} >= minimum sentence length {lo}"
                )
            if not 0.0 <= t.shared_with_pivot <= 1.0:
                raise ValueError("shared_with_pivot must be in [0, 1]")


_ALPHABETS = {
    "pivot": ("bdgkt", "ae"),
    "source": ("fmnrs", "iu"),
    "target": ("pvzlc", "oy"),
}


def _word_forms(language: str, count: int, rng: np.random.Generator) -> list[str]:
    """Distinct word surfaces built from syllables over a per-language
    alphabet; frequent ranks get shorter forms."""
    consonants, vowels = _ALPHABETS[language]
    syllables = [c + v for c in consonants for v in vowels]
    forms: list[str] = []
    n_syl = len(syllables)
    for length in (1, 2, 3):
        combos = n_syl**length
        order = rng.permutation(combos)
        for key in order:
            parts = []
            k = int(key)
            for _ in range(length):
                parts.append(syllables[k % n_syl])
                k //= n_syl
            forms.append("".join(parts))
            if len(forms) >= count:
                return forms
    raise ValueError(f"cannot build {count} distinct word forms for {language}")


@dataclass
class Family:
    """Everything one experiment needs, with ground truth attached.

    The three form lists are the word-type surfaces per language (index =
    type id), i.e. the cipher tables themselves.
    """

    spec: SyntheticFamilySpec
    pivot_forms: list[str]
    source_forms: list[str]
    target_forms: list[str]
    pivot_mono: list[str]
    source_mono: list[str]
    src_piv: ParallelCorpus
    piv_tgt: ParallelCorpus
    test_src: list[str]
    test_piv: list[str]
    test_tgt: list[str]
    test_align: list[WordAlignment]  # src <-> piv word links for the test set

    def save(self, out_dir) -> dict[str, str]:
        from .aligner import write_pharaoh

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "pivot_mono.txt": self.pivot_mono,
            "source_mono.txt": self.source_mono,
            "srcpiv.src": self.src_piv.src,
            "srcpiv.piv": self.src_piv.piv,
            "pivtgt.piv": self.piv_tgt.src,
            "pivtgt.tgt": self.piv_tgt.piv,
            "test.src": self.test_src,
            "test.piv": self.test_piv,
            "test.tgt": self.test_tgt,
        }
        for name, lines in files.items():
            (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
        write_pharaoh(out / "srcpiv.align", self.src_piv.alignments)
        write_pharaoh(out / "test.align", self.test_align)
        paths = sorted([*files, "srcpiv.align", "test.align"])
        manifest = {
            "spec": _spec_to_dict(self.spec),
            "files": {name: _sha256(out / name) for name in paths},
        }
        (out / "family.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True))
        return manifest["files"]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _spec_to_dict(spec: SyntheticFamilySpec) -> dict:
    d = dict(spec.__dict__)
    d["length_range"] = list(spec.length_range)
    d["source_transform"] = dict(spec.source_transform.__dict__)
    d["target_transform"] = dict(spec.target_transform.__dict__)
    return d


def _local_reorder(n: int, window: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation of range(n) where no element moves more than `window`."""
    if window == 0:
        return np.arange(n)
    if window >= n:
        raise ValueError(f"reorder window {window} >= sentence length {n}")
    keys = np.arange(n) + rng.uniform(0.0, float(window), size=n)
    return np.argsort(keys, kind="stable")


class _PivotSampler:
    def __init__(self, spec: SyntheticFamilySpec, rng: np.random.Generator):
        v = spec.vocab_size
        ranks = np.arange(1, v + 1, dtype=np.float64)
        self.probs = ranks ** -spec.zipf_exponent
        self.probs /= self.probs.sum()
        self.successors = rng.choice(v, size=(v, 3), p=self.probs)
        self.blend = spec.bigram_blend
        self.lo, self.hi = spec.length_range
        self.vocab = v

    def sentence(self, rng: np.random.Generator) -> tuple[int, ...]:
        n = int(rng.integers(self.lo, self.hi + 1))
        words = [int(rng.choice(self.vocab, p=self.probs))]
        for _ in range(n - 1):
            if rng.random() < self.blend:
                words.append(int(self.successors[words[-1], rng.integers(0, 3)]))
            else:
                words.append(int(rng.choice(self.vocab, p=self.probs)))
        return tuple(words)


def generate_family(spec: SyntheticFamilySpec) -> Family:
    """Build all corpora of one family with disjoint sentence sets.

    Sections are drawn in a fixed order from one seeded stream, so a given
    seed always reproduces byte-identical corpora.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    piv_forms = _word_forms("pivot", spec.vocab_size, rng)
    src_forms = _word_forms("source", spec.vocab_size, rng)
    tgt_forms = _word_forms("target", spec.vocab_size, rng)
    for forms, t in ((src_forms, spec.source_transform), (tgt_forms, spec.target_transform)):
        n_shared = int(round(t.shared_with_pivot * spec.vocab_size))
        shared = rng.choice(spec.vocab_size, size=n_shared, replace=False)
        for idx in shared:
            forms[int(idx)] = piv_forms[int(idx)]

    sampler = _PivotSampler(spec, rng)
    seen: set[tuple[int, ...]] = set()

    def draw(count: int) -> list[tuple[int, ...]]:
        out = []
        attempts = 0
        while len(out) < count:
            s = sampler.sentence(rng)
            attempts += 1
            if s not in seen:
                seen.add(s)
                out.append(s)
            if attempts > 50 * count + 1000:
                raise ValueError(
                    "cannot draw enough distinct sentences; enlarge vocab or lengths"
                )
        return out

    def render(sent, forms, transform: TransformSpec):
        order = _local_reorder(len(sent), transform.reorder_window, rng)
        words = [forms[sent[int(k)]] for k in order]
        links = {(new, int(orig)) for new, orig in enumerate(order)}
        return " ".join(words), links

    piv_mono_sents = draw(spec.mono_count)
    src_mono_sents = draw(spec.mono_count)
    srcpiv_sents = draw(spec.sentence_count)
    pivtgt_sents = draw(spec.sentence_count)
    test_sents = draw(spec.test_count)

    pivot_mono = [" ".join(piv_forms[w] for w in s) for s in piv_mono_sents]
    source_mono = [render(s, src_forms, spec.source_transform)[0] for s in src_mono_sents]

    sp_src, sp_piv, sp_align = [], [], []
    for s in srcpiv_sents:
        text, links = render(s, src_forms, spec.source_transform)
        sp_src.append(text)
        sp_piv.append(" ".join(piv_forms[w] for w in s))
        sp_align.append(links)
    src_piv = ParallelCorpus(sp_src, sp_piv, sp_align)

    pt_piv, pt_tgt = [], []
    for s in pivtgt_sents:
        pt_piv.append(" ".join(piv_forms[w] for w in s))
        pt_tgt.append(render(s, tgt_forms, spec.target_transform)[0])
    piv_tgt = ParallelCorpus(pt_piv, pt_tgt)

    test_src, test_piv, test_tgt, test_align = [], [], [], []
    for s in test_sents:
        text, links = render(s, src_forms, spec.source_transform)
        test_src.append(text)
        test_piv.append(" ".join(piv_forms[w] for w in s))
        test_tgt.append(render(s, tgt_forms, spec.target_transform)[0])
        test_align.append(links)

    return Family(
        spec=spec,
        pivot_forms=piv_forms,
        source_forms=src_forms,
        target_forms=tgt_forms,
        pivot_mono=pivot_mono,
        source_mono=source_mono,
        src_piv=src_piv,
        piv_tgt=piv_tgt,
        test_src=test_src,
        test_piv=test_piv,
        test_tgt=test_tgt,
        test_align=test_align,
    )


# ---------------------------------------------------------------------------
# Loading and batching
# ---------------------------------------------------------------------------


def load_parallel(src_path, piv_path) -> ParallelCorpus:
    """Pair two one-sentence-per-line files by index; a pair is dropped when
    either side is empty."""
    src_lines = Path(src_path).read_text(encoding="utf-8").split("\n")
    piv_lines = Path(piv_path).read_text(encoding="utf-8").split("\n")
    src_lines = [l.rstrip("\r") for l in src_lines]
    piv_lines = [l.rstrip("\r") for l in piv_lines]
    if src_lines and src_lines[-1] == "":
        src_lines.pop()
    if piv_lines and piv_lines[-1] == "":
        piv_lines.pop()
    if len(src_lines) != len(piv_lines):
        raise ValueError(
            f"line count mismatch: {len(src_lines)} in {src_path} vs {len(piv_lines)} in {piv_path}"
        )
    src, piv = [], []
    for s, p in zip(src_lines, piv_lines):
        if s.strip() == "" or p.strip() == "":
            continue
        src.append(s)
        piv.append(p)
    return ParallelCorpus(src, piv)


def save_parallel(prefix, corpus: ParallelCorpus) -> list[str]:
    """Write a pair of line-aligned files (and a 0/1 provenance sidecar when
    any row is pseudo data). Returns the paths written."""
    prefix = str(prefix)
    paths = [prefix + ".src", prefix + ".piv"]
    Path(paths[0]).write_text("\n".join(corpus.src) + "\n", encoding="utf-8")
    Path(paths[1]).write_text("\n".join(corpus.piv) + "\n", encoding="utf-8")
    if corpus.pseudo is not None and any(corpus.pseudo):
        flag_path = prefix + ".pseudo"
        Path(flag_path).write_text("\n".join("1" if f else "0" for f in corpus.pseudo) + "\n")
        paths.append(flag_path)
    return paths


def load_parallel_prefix(prefix) -> ParallelCorpus:
    prefix = str(prefix)
    corpus = load_parallel(prefix + ".src", prefix + ".piv")
    flag_path = Path(prefix + ".pseudo")
    if flag_path.exists():
        flags = [line == "1" for line in flag_path.read_text().split() if line]
        if len(flags) != len(corpus):
            raise ValueError(
                f"provenance flag count {len(flags)} does not match corpus {len(corpus)}"
            )
        corpus.pseudo = flags
    return corpus


def load_lines(path) -> list[str]:
    lines = [l.rstrip("\r") for l in Path(path).read_text(encoding="utf-8").split("\n")]
    if lines and lines[-1] == "":
        lines.pop()
    return [l for l in lines if l.strip()]


@dataclass
class Batch:
    """Padded id matrix plus validity mask; PAD fills positions past each
    sentence's length."""

    ids: np.ndarray  # [B, L] int64
    mask: np.ndarray  # [B, L] bool
    rows: list[int]  # indices into the source sequence list


@dataclass
class BatchStats:
    dropped_overlong: int = 0


def pad_batch(seqs: list[list[int]], rows: Optional[list[int]] = None) -> Batch:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for r, s in enumerate(seqs):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return Batch(ids=ids, mask=mask, rows=rows or list(range(len(seqs))))


def batch_iterator(
    seqs: list[list[int]],
    max_tokens: int,
    seed: int = 0,
    shuffle: bool = True,
    length_limit: int = 100,
    stats: Optional[BatchStats] = None,
):
    """Yield padded batches holding at most max_tokens padded positions.

    Sentences longer than length_limit are dropped (counted in stats);
    the epoch's batch sequence is deterministic given the seed.
    """
    kept = [(i, s) for i, s in enumerate(seqs) if len(s) <= length_limit]
    if stats is not None:
        stats.dropped_overlong += len(seqs) - len(kept)
    if not kept:
        return
    longest = max(len(s) for _, s in kept)
    if max_tokens < longest:
        raise ValueError(
            f"max_tokens {max_tokens} smaller than longest retained sentence {longest}"
        )
    order = np.random.default_rng(seed).permutation(len(kept)) if shuffle else range(len(kept))
    cur: list[list[int]] = []
    cur_rows: list[int] = []
    width = 0
    for k in order:
        i, s = kept[int(k)]
        new_width = max(width, len(s))
        if cur and (len(cur) + 1) * new_width > max_tokens:
            yield pad_batch(cur, cur_rows)
            cur, cur_rows, width = [], [], 0
            new_width = len(s)
        cur.append(s)
        cur_rows.append(i)
        width = new_width
    if cur:
        yield pad_batch(cur, cur_rows)


def pair_batch_iterator(
    pairs: list[SentencePair],
    max_tokens: int,
    seed: int = 0,
    shuffle: bool = True,
    length_limit: int = 100,
    stats: Optional[BatchStats] = None,
):
    """Group sentence pairs so that the sum of both padded sides stays within
    max_tokens; pairs with either side over length_limit are dropped."""
    kept = [
        p for p in pairs if len(p.src) <= length_limit and len(p.piv) <= length_limit
    ]
    if stats is not None:
        stats.dropped_overlong += len(pairs) - len(kept)
    if not kept:
        return
    longest = max(len(p.src) + len(p.piv) for p in kept)
    if max_tokens < longest:
        raise ValueError(
            f"max_tokens {max_tokens} smaller than longest retained pair {longest}"
        )
    order = np.random.default_rng(seed).permutation(len(kept)) if shuffle else range(len(kept))
    cur: list[SentencePair] = []
    ws = wp = 0
    for k in order:
        p = kept[int(k)]
        nws, nwp = max(ws, len(p.src)), max(wp, len(p.piv))
        if cur and (len(cur) + 1) * (nws + nwp) > max_tokens:
            yield cur
            cur, ws, wp = [], 0, 0
            nws, nwp = len(p.src), len(p.piv)
        cur.append(p)
        ws, wp = nws, nwp
    if cur:
        yield cur
