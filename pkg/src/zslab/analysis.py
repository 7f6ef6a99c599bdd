"""Measurement suite: corpus BLEU, cross-lingual similarity probes, and
masked-prediction accuracy.

BLEU replicates the classic script semantics: case-sensitive space-split
tokens, clipped n-gram counts aggregated over the corpus before the geometric
mean, exponential brevity penalty, and a hard zero when any n-gram precision
is zero.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bpe import BpeModel
from .corpus import SentencePair, pad_batch
from .model import ModelConfig, encode, objective_accuracy, with_eos
from .tensor import Tensor


@dataclass
class BleuReport:
    bleu: float  # percentage in [0, 100]
    precisions: list[float]  # p1..pn
    brevity_penalty: float
    hyp_length: int
    ref_length: int

    @property
    def ratio(self) -> float:
        return self.hyp_length / self.ref_length if self.ref_length else 0.0

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (
            f"BLEU = {self.bleu:.2f}, {ps} "
            f"(BP={self.brevity_penalty:.3f}, ratio={self.ratio:.3f}, "
            f"hyp_len={self.hyp_length}, ref_len={self.ref_length})"
        )


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: list[str], references: list[str], max_n: int = 4) -> BleuReport:
    """Corpus-level BLEU over whitespace tokens, single reference per line."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"count mismatch: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    if not references:
        raise ValueError("empty reference set")
    clipped = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = hyp.split()
        r = ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc = _ngram_counts(h, n)
            rc = _ngram_counts(r, n)
            totals[n - 1] += sum(hc.values())
            clipped[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
    precisions = [c / t if t > 0 else 0.0 for c, t in zip(clipped, totals)]
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


# ---------------------------------------------------------------------------
# Representation similarity
# ---------------------------------------------------------------------------


@dataclass
class SimilarityReport:
    per_layer: list[float]  # mean cosine per encoder layer
    pairs: int

    def save_csv(self, path) -> None:
        lines = ["layer,mean_cosine,pairs"]
        for i, v in enumerate(self.per_layer):
            lines.append(f"{i},{v:.6f},{self.pairs}")
        Path(path).write_text("\n".join(lines) + "\n")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def _layer_states(params, cfg, ids_rows: list[list[int]]) -> tuple[list[np.ndarray], np.ndarray]:
    batch = pad_batch([with_eos(r) for r in ids_rows])
    states = encode(params, cfg, batch.ids, batch.mask)
    return [layer.data for layer in states.layers], batch.mask


def sentence_similarity_by_layer(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    pairs: list[SentencePair],
    batch_sentences: int = 64,
) -> SimilarityReport:
    """Max-pool each side's non-pad positions per layer and average the
    cosine between the pooled vectors over all pairs."""
    if not pairs:
        raise ValueError("no pairs to analyze")
    sums = np.zeros(cfg.layers)
    count = 0
    for start in range(0, len(pairs), batch_sentences):
        chunk = pairs[start : start + batch_sentences]
        src_layers, src_mask = _layer_states(params, cfg, [p.src for p in chunk])
        piv_layers, piv_mask = _layer_states(params, cfg, [p.piv for p in chunk])
        for li in range(cfg.layers):
            s_pool = _masked_max_pool(src_layers[li], src_mask)
            p_pool = _masked_max_pool(piv_layers[li], piv_mask)
            for b in range(len(chunk)):
                sums[li] += _cosine(s_pool[b], p_pool[b])
        count += len(chunk)
    return SimilarityReport(per_layer=list(sums / count), pairs=count)


def _masked_max_pool(states: np.ndarray, mask: np.ndarray) -> np.ndarray:
    neg = np.where(mask[:, :, None], states, -np.inf)
    return neg.max(axis=1)


def word_similarity_matrix(
    params: dict[str, Tensor], cfg: ModelConfig, pair: SentencePair
) -> np.ndarray:
    """Cosine between top-layer states of every (source, pivot) position;
    the EOS terminator is excluded from the matrix."""
    if not pair.src or not pair.piv:
        raise ValueError("empty pair")
    sb = pad_batch([with_eos(pair.src)])
    cb = pad_batch([with_eos(pair.piv)])
    h_src = encode(params, cfg, sb.ids, sb.mask).final.data[0][: len(pair.src)]
    h_piv = encode(params, cfg, cb.ids, cb.mask).final.data[0][: len(pair.piv)]
    out = np.zeros((len(pair.src), len(pair.piv)))
    for i in range(len(pair.src)):
        for j in range(len(pair.piv)):
            out[i, j] = _cosine(h_src[i], h_piv[j])
    return out


def alignment_argmax_match_rate(
    params: dict[str, Tensor], cfg: ModelConfig, pairs: list[SentencePair]
) -> float:
    """Fraction of source positions whose top-layer nearest pivot position is
    gold-aligned to them."""
    hits = total = 0
    for pair in pairs:
        if not pair.gold_alignment:
            continue
        sim = word_similarity_matrix(params, cfg, pair)
        gold = pair.gold_alignment
        for i in range(sim.shape[0]):
            row_gold = {j for a, j in gold if a == i}
            if not row_gold:
                continue
            total += 1
            if int(sim[i].argmax()) in row_gold:
                hits += 1
    if total == 0:
        raise ValueError("no aligned positions to score")
    return hits / total


def save_word_matrix_csv(path, matrix: np.ndarray, src_tokens: list[str], piv_tokens: list[str]):
    lines = ["," + ",".join(piv_tokens)]
    for tok, row in zip(src_tokens, matrix):
        lines.append(tok + "," + ",".join(f"{v:.6f}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def save_heatmap_svg(path, matrix: np.ndarray, cell: int = 18) -> None:
    """Self-contained grayscale SVG heatmap (white = +1, black = -1)."""
    rows, cols = matrix.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell}" height="{rows * cell}">'
    ]
    for i in range(rows):
        for j in range(cols):
            shade = int(round(255 * (matrix[i, j] + 1.0) / 2.0))
            shade = min(255, max(0, shade))
            parts.append(
                f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},{shade})"/>'
            )
    parts.append("</svg>")
    Path(path).write_text("".join(parts))


def masked_accuracy(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    heldout_sentences: list[list[int]],
    seed: int,
) -> float:
    """Masked-prediction accuracy under a fixed evaluation masking, so equal
    parameters always score identically."""
    if not heldout_sentences:
        raise ValueError("empty held-out set")
    correct, total = objective_accuracy("mlm", params, cfg, heldout_sentences, mask_seed=seed)
    return correct / total
