"""Word n-gram LM (order 1 or 2) with absolute discounting and ARPA I/O."""
from __future__ import annotations

import math
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS, EOS = "<s>", "</s>"
LOG10 = math.log(10.0)


class NgramLM:
    """Backoff LM over a fixed vocabulary.

    ``log_matrix[h, w]`` holds natural-log probabilities with history row 0 =
    ``<s>`` and row ``1 + k`` = word ``k``; successor column ``V`` is ``</s>``.
    """

    def __init__(self, vocab: Sequence[str], order: int, unigram: dict[str, float],
                 bigram: dict[tuple[str, str], float] | None = None,
                 backoff: dict[str, float] | None = None):
        if order not in (1, 2):
            raise ValueError("only unigram and bigram LMs are supported")
        self.vocab = list(vocab)
        self.order = order
        self.unigram = dict(unigram)  # log10
        self.bigram = dict(bigram or {})  # log10
        self.backoff = dict(backoff or {})  # log10
        self._index = {w: k for k, w in enumerate(self.vocab)}
        missing = [w for w in [*self.vocab, EOS] if w not in self.unigram]
        if missing:
            raise ValueError(f"LM lacks unigrams for {missing[:5]}")
        self.log_matrix = self._dense()

    def _dense(self) -> np.ndarray:
        succ = [*self.vocab, EOS]
        hist = [BOS, *self.vocab]
        out = np.empty((len(hist), len(succ)))
        for i, h in enumerate(hist):
            for j, w in enumerate(succ):
                out[i, j] = self.logprob10(w, h) * LOG10
        return out

    def logprob10(self, word: str, history: str | None = None) -> float:
        if self.order == 2 and history is not None:
            lp = self.bigram.get((history, word))
            if lp is not None:
                return lp
            return self.backoff.get(history, 0.0) + self.unigram[word]
        return self.unigram[word]

    def logprob(self, word: int | str, history: int | str | None = None) -> float:
        """Natural-log probability; ints index the vocabulary, ``None`` means ``<s>``."""
        w = EOS if word == EOS else (self.vocab[word] if isinstance(word, (int, np.integer)) else word)
        h = BOS if history is None else (self.vocab[history] if isinstance(history, (int, np.integer)) else history)
        return self.logprob10(w, h) * LOG10

    def sentence_logprob(self, words: Sequence[int]) -> float:
        rows = [0, *(1 + int(w) for w in words)]
        cols = [*(int(w) for w in words), len(self.vocab)]
        return float(self.log_matrix[rows, cols].sum())

    # -- training ----------------------------------------------------------
    @classmethod
    def train(cls, sentences: Iterable[Sequence[str]], vocab: Sequence[str], order: int = 2,
              discount: float = 0.5) -> "NgramLM":
        """Add-one unigram; bigram by absolute discounting interpolated with it."""
        vocab = list(vocab)
        uni_c: Counter = Counter()
        bi_c: Counter = Counter()
        for s in sentences:
            toks = [BOS, *s, EOS]
            uni_c.update(toks[1:])
            bi_c.update(zip(toks[:-1], toks[1:]))
        succ = [*vocab, EOS]
        total = sum(uni_c[w] for w in succ)
        p_uni = {w: (uni_c[w] + 1.0) / (total + len(succ)) for w in succ}
        unigram = {w: math.log10(p) for w, p in p_uni.items()}
        unigram[BOS] = -99.0
        if order == 1:
            return cls(vocab, 1, unigram)
        hist_c: Counter = Counter()
        types: Counter = Counter()
        for (h, w), c in bi_c.items():
            hist_c[h] += c
            types[h] += 1
        bigram, backoff = {}, {}
        for h in [BOS, *vocab]:
            if hist_c[h] == 0:
                backoff[h] = 0.0
                continue
            lam = discount * types[h] / hist_c[h]
            seen = [w for w in succ if bi_c[(h, w)] > 0]
            for w in seen:
                p = (bi_c[(h, w)] - discount) / hist_c[h] + lam * p_uni[w]
                bigram[(h, w)] = math.log10(p)
            mass_seen = sum(10 ** bigram[(h, w)] for w in seen)
            uni_seen = sum(p_uni[w] for w in seen)
            # equals lam up to rounding; computed this way so rows sum to one
            backoff[h] = math.log10(max(1.0 - mass_seen, 1e-300) / max(1.0 - uni_seen, 1e-300))
        return cls(vocab, 2, unigram, bigram, backoff)

    # -- ARPA --------------------------------------------------------------
    def write_arpa(self, path: str | Path) -> None:
        uni_words = [BOS, *self.vocab, EOS]
        lines = ["\\data\\", f"ngram 1={len(uni_words)}"]
        if self.order == 2:
            lines.append(f"ngram 2={len(self.bigram)}")
        lines += ["", "\\1-grams:"]
        for w in uni_words:
            row = f"{self.unigram[w]:.7f}\t{w}"
            if self.order == 2 and w != EOS:
                row += f"\t{self.backoff.get(w, 0.0):.7f}"
            lines.append(row)
        if self.order == 2:
            lines += ["", "\\2-grams:"]
            for (h, w), lp in sorted(self.bigram.items(), key=lambda kv: (uni_words.index(kv[0][0]),
                                                                        uni_words.index(kv[0][1]))):
                lines.append(f"{lp:.7f}\t{h} {w}")
        lines += ["", "\\end\\", ""]
        Path(path).write_text("\n".join(lines))

    @classmethod
    def read_arpa(cls, path: str | Path, vocab: Sequence[str] | None = None) -> "NgramLM":
        text = Path(path).read_text().splitlines()
        counts: dict[int, int] = {}
        section = None
        unigram, bigram, backoff = {}, {}, {}
        seen_end = False
        for ln in text:
            ln = ln.strip()
            if not ln:
                continue
            if ln == "\\data\\":
                section = "data"
                continue
            if ln == "\\end\\":
                seen_end = True
                break
            if ln.startswith("\\") and ln.endswith("-grams:"):
                section = int(ln[1:ln.index("-")])
                continue
            if section == "data":
                if not ln.startswith("ngram "):
                    raise ValueError(f"{path}: bad \\data\\ line {ln!r}")
                n, c = ln[6:].split("=")
                counts[int(n)] = int(c)
            elif section == 1:
                toks = ln.split()
                unigram[toks[1]] = float(toks[0])
                if len(toks) > 2:
                    backoff[toks[1]] = float(toks[2])
            elif section == 2:
                toks = ln.split()
                bigram[(toks[1], toks[2])] = float(toks[0])
            else:
                raise ValueError(f"{path}: unexpected line {ln!r}")
        if not seen_end or not counts:
            raise ValueError(f"{path}: not a complete ARPA file")
        order = max(counts)
        if order > 2:
            raise ValueError(f"{path}: order {order} not supported")
        if vocab is None:
            vocab = [w for w in unigram if w not in (BOS, EOS)]
        return cls(vocab, order, unigram, bigram, backoff)
