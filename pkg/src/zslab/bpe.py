"""Joint byte-pair-encoding subword model shared by all languages of a run.

Words are whitespace tokens; the final character of each word carries an
end-of-word suffix so detokenization is exact. One model covers every
language in an experiment, which is what lets identical word forms in two
languages land on identical subword ids.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator

EOW = "▁"  # suffix marking the last subword of a word

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<mask>", "<unk>")
NUM_SPECIALS = len(SPECIAL_TOKENS)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]]
    vocab: dict[str, int]
    lowercase: bool = True
    _ranks: dict[tuple[str, str], int] = field(default_factory=dict, repr=False)
    _itos: dict[int, str] = field(default_factory=dict, repr=False)
    _cache: dict[str, tuple[str, ...]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._ranks:
            self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        if not self._itos:
            self._itos = {i: t for t, i in self.vocab.items()}

    @property
    def size(self) -> int:
        return len(self.vocab)

    # -- encoding ----------------------------------------------------------

    def _segment_word(self, word: str) -> tuple[str, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word[:-1]) + [word[-1] + EOW]
        while len(symbols) > 1:
            best, best_rank = None, None
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best, best_rank = pair, rank
            if best is None:
                break
            symbols = _merge_pair(symbols, best)
        out = tuple(symbols)
        self._cache[word] = out
        return out

    def encode_word(self, word: str) -> list[int]:
        if self.lowercase:
            word = word.lower()
        return [self.vocab.get(s, UNK) for s in self._segment_word(word)]

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            ids.extend(self.encode_word(word))
        return ids

    def word_spans(self, text: str) -> list[tuple[int, int]]:
        """Subword index span [start, end) of each whitespace word of text."""
        spans = []
        pos = 0
        for word in text.split():
            n = len(self.encode_word(word))
            spans.append((pos, pos + n))
            pos += n
        return spans

    # -- decoding ----------------------------------------------------------

    def decode(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        current: list[str] = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.vocab):
                raise ValueError(f"token id {i} out of range for vocab of {len(self.vocab)}")
            if i < NUM_SPECIALS:
                continue
            tok = self._itos[i]
            if tok.endswith(EOW):
                current.append(tok[: -len(EOW)])
                words.append("".join(current))
                current = []
            else:
                current.append(tok)
        if current:
            words.append("".join(current))
        return " ".join(words)

    # -- persistence: plain text, deterministic bytes -----------------------

    def save(self, path) -> None:
        lines = [f"{len(self.merges)} {len(self.vocab)} lowercase={int(self.lowercase)}"]
        lines += [f"{a} {b}" for a, b in self.merges]
        lines += [f"{tok}\t{idx}" for tok, idx in sorted(self.vocab.items(), key=lambda kv: kv[1])]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        n_merges, n_vocab, flag = lines[0].split()
        n_merges, n_vocab = int(n_merges), int(n_vocab)
        merges = []
        for line in lines[1 : 1 + n_merges]:
            a, b = line.split(" ")
            merges.append((a, b))
        vocab = {}
        for line in lines[1 + n_merges : 1 + n_merges + n_vocab]:
            tok, idx = line.split("\t")
            vocab[tok] = int(idx)
        return cls(merges=merges, vocab=vocab, lowercase=flag == "lowercase=1")


def _merge_pair(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def learn_bpe(corpus: Iterator[str], num_merges: int, lowercase: bool = True) -> BpeModel:
    """Learn merge rules by iterated most-frequent-pair replacement.

    Deterministic given corpus order; frequency ties break on the
    lexicographically smaller pair.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq: Counter[str] = Counter()
    for sentence in corpus:
        if lowercase:
            sentence = sentence.lower()
        word_freq.update(sentence.split())
    if not word_freq:
        raise ValueError("empty corpus: no words to learn from")

    words: dict[str, tuple[list[str], int]] = {
        w: (list(w[:-1]) + [w[-1] + EOW], f) for w, f in word_freq.items()
    }
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_freq: Counter[tuple[str, str]] = Counter()
        for symbols, freq in words.values():
            for pair in zip(symbols, symbols[1:]):
                pair_freq[pair] += freq
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        for w, (symbols, freq) in words.items():
            if best[0] in symbols:
                words[w] = (_merge_pair(symbols, best), freq)

    alphabet = set()
    for w in word_freq:
        alphabet.update(w[:-1])
        alphabet.add(w[-1] + EOW)
    produced = {a + b for a, b in merges}
    tokens = sorted(alphabet | produced)
    vocab = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    for t in tokens:
        vocab[t] = len(vocab)
    return BpeModel(merges=merges, vocab=vocab, lowercase=lowercase)
