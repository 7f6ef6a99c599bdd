"""EM-trained lexical word aligner (IBM Model 1) with intersection
symmetrization.

Alignment runs over whitespace words, not subwords; callers project word
links down to subword indices with :func:`zslab.corpus.project_word_alignment`
when an objective needs token-level links. A NULL word on the conditioning
side absorbs unalignable words, and intersection symmetrization keeps only
links proposed by both directions, trading recall for precision.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

NULL = "<null>"
_PROB_FLOOR = 1e-9


@dataclass
class TranslationTable:
    """t[e][f] = probability of source-side word f given pivot-side word e."""

    t: dict[str, dict[str, float]] = field(default_factory=dict)
    log_likelihoods: list[float] = field(default_factory=list)

    def prob(self, f: str, e: str) -> float:
        return self.t.get(e, {}).get(f, 0.0)

    def save(self, path) -> None:
        lines = []
        for e in sorted(self.t):
            for f in sorted(self.t[e]):
                lines.append(f"{e} {f} {self.t[e][f]:.12g}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TranslationTable":
        table: dict[str, dict[str, float]] = defaultdict(dict)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            e, f, p = line.split(" ")
            table[e][f] = float(p)
        return cls(t=dict(table))


@dataclass
class Alignment:
    links: set[tuple[int, int]] = field(default_factory=set)


def _tokenized(pairs: Iterable[tuple[str, str]]) -> list[tuple[list[str], list[str]]]:
    return [(s.split(), p.split()) for s, p in pairs]


def train_ibm1(pairs: Iterable[tuple[str, str]], iterations: int = 5) -> TranslationTable:
    """Classic IBM Model 1 EM estimating t(src_word | piv_word).

    The pivot side includes NULL. The per-iteration corpus log-likelihood
    (computed with the parameters entering that iteration) is recorded and is
    non-decreasing. After each M-step, probabilities of co-occurring pairs are
    floored at 1e-9 and renormalized so no pair can lock at exactly zero.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    bitext = _tokenized(pairs)
    if not bitext:
        raise ValueError("empty corpus")

    cooc: dict[str, set[str]] = defaultdict(set)
    for fs, es in bitext:
        for e in es + [NULL]:
            cooc[e].update(fs)
    t: dict[str, dict[str, float]] = {
        e: {f: 1.0 / len(fset) for f in fset} for e, fset in cooc.items()
    }

    lls: list[float] = []
    for _ in range(iterations):
        counts: dict[str, Counter] = defaultdict(Counter)
        totals: Counter = Counter()
        ll = 0.0
        for fs, es in bitext:
            es_null = es + [NULL]
            for f in fs:
                denom = sum(t[e][f] for e in es_null)
                ll += math.log(denom / len(es_null)) if denom > 0 else -1e9
                for e in es_null:
                    frac = t[e][f] / denom
                    counts[e][f] += frac
                    totals[e] += frac
        lls.append(ll)
        for e, cnt in counts.items():
            total = totals[e]
            row = {f: max(c / total, _PROB_FLOOR) for f, c in cnt.items()}
            norm = sum(row.values())
            t[e] = {f: p / norm for f, p in row.items()}

    return TranslationTable(t=t, log_likelihoods=lls)


def _best_links(
    fs: Sequence[str], es: Sequence[str], table: TranslationTable
) -> dict[int, int]:
    """For each f position, the argmax e position (or none if NULL wins or
    f is unknown). Exact probability ties (repeated words) resolve to the
    position nearest the diagonal, so duplicates stay monotone."""
    out = {}
    for i, f in enumerate(fs):
        null_p = table.prob(f, NULL)
        best_j, best_p = None, null_p
        for j, e in enumerate(es):
            p = table.prob(f, e)
            if p > best_p or (
                best_j is not None and p == best_p and abs(j - i) < abs(best_j - i)
            ):
                best_j, best_p = j, p
        if best_j is not None and best_p > 0.0:
            out[i] = best_j
    return out


def viterbi_align(
    src_text: str,
    piv_text: str,
    table: TranslationTable,
    reverse_table: TranslationTable,
) -> Alignment:
    """Best-link alignment in both directions, symmetrized by intersection."""
    fs, es = src_text.split(), piv_text.split()
    if not fs or not es:
        return Alignment(set())
    forward = _best_links(fs, es, table)  # src i -> piv j
    reverse = _best_links(es, fs, reverse_table)  # piv j -> src i
    links = {(i, j) for i, j in forward.items() if reverse.get(j) == i}
    return Alignment(links)


def align_corpus(
    pairs: Iterable[tuple[str, str]],
    table: TranslationTable,
    reverse_table: TranslationTable,
) -> list[Alignment]:
    return [viterbi_align(s, p, table, reverse_table) for s, p in pairs]


# ---------------------------------------------------------------------------
# Pharaoh format: line k holds pair k's links "i-j i-j ...", sorted by i.
# ---------------------------------------------------------------------------


def write_pharaoh(path, alignments: Iterable) -> None:
    lines = []
    for a in alignments:
        links = a.links if isinstance(a, Alignment) else a
        lines.append(" ".join(f"{i}-{j}" for i, j in sorted(links)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pharaoh(path) -> list[Alignment]:
    out = []
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        links = set()
        for tok in line.split():
            left, sep, right = tok.partition("-")
            if sep != "-" or not left.isdigit() or not right.isdigit():
                raise ValueError(f"malformed alignment token {tok!r} on line {lineno}")
            links.add((int(left), int(right)))
        out.append(Alignment(links))
    return out
