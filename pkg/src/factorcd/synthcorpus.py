"""Synthetic co-articulated corpus: generator, lexicon and corpus file format.

Corpus file layout (little-endian)::

    magic      8 bytes   b"FCDCORP1"
    header     4 x u32   version (=1), P, D, number of utterances
    per utterance:
      u16 + utf8         utterance id
      u32 N, i32[N]      word ids
      u32 M, i32[M]      phone string (context indices, silence = P)
      u32 T, u32 D       frame count and feature dimension
      f32[T*D]           frames, row-major
      u32 R, i32[2R]     alignment runs as (context id, length) pairs

Context ids follow :func:`factorcd.inventory.context_id`.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .inventory import PhonemeInventory, context_id, context_table, phone_contexts

MAGIC = b"FCDCORP1"
VERSION = 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_phonemes: int = 10
    dim: int = 20
    n_words: int = 50
    word_length: tuple[int, int] = (2, 5)
    alpha: float = 0.6
    noise: float = 3.0
    mean_duration: float = 3.0
    silence_duration: float = 5.0
    silence_prob: float = 0.3
    utterance_words: tuple[int, int] = (1, 5)
    bigram_concentration: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_phonemes < 1 or self.dim < 1 or self.n_words < 1:
            raise ValueError("inventory size, dimension and word count must be positive")
        for name in ("word_length", "utterance_words"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range [lo, hi] with 1 <= lo <= hi")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.noise <= 0:
            raise ValueError("emission noise must be positive")
        if self.mean_duration < 1 or self.silence_duration < 1:
            raise ValueError("mean durations must be >= 1 frame")
        if not 0.0 <= self.silence_prob <= 1.0:
            raise ValueError("silence_prob must lie in [0, 1]")

    @property
    def inventory(self) -> PhonemeInventory:
        return PhonemeInventory.default(self.n_phonemes)


@dataclass
class Lexicon:
    """Word id -> pronunciation (tuple of phoneme indices)."""

    prons: list[tuple[int, ...]]
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"w{k:03d}" for k in range(len(self.prons))]
        if len(self.names) != len(self.prons):
            raise ValueError("lexicon names and pronunciations differ in length")
        if any(len(p) == 0 for p in self.prons):
            raise ValueError("empty pronunciation in lexicon")

    def __len__(self) -> int:
        return len(self.prons)

    def __getitem__(self, word: int) -> tuple[int, ...]:
        return self.prons[word]

    def word_index(self, name: str) -> int:
        return self.names.index(name)

    def validate(self, inv: PhonemeInventory) -> None:
        for name, pron in zip(self.names, self.prons):
            if any(not 0 <= p < inv.size for p in pron):
                raise ValueError(f"word {name}: phoneme outside inventory")

    def spell(self, words: Sequence[int], silences: Sequence[bool] | None = None,
              sil: int | None = None) -> list[int]:
        """Phone string ``[sil] w1 [sil?] w2 ... [sil]`` for a word sequence."""
        if sil is None:
            raise ValueError("silence index required")
        silences = silences or [False] * max(len(words) - 1, 0)
        phones = [sil]
        for k, w in enumerate(words):
            if k > 0 and silences[k - 1]:
                phones.append(sil)
            phones.extend(self.prons[w])
        phones.append(sil)
        return phones

    def write(self, path: str | Path, inv: PhonemeInventory) -> None:
        lines = [" ".join([n, *(inv.symbol(p) for p in pron)])
                 for n, pron in zip(self.names, self.prons)]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path, inv: PhonemeInventory) -> "Lexicon":
        names, prons = [], []
        for ln in Path(path).read_text().splitlines():
            toks = ln.split()
            if not toks:
                continue
            if len(toks) < 2:
                raise ValueError(f"{path}: word {toks[0]} has no pronunciation")
            names.append(toks[0])
            prons.append(tuple(inv.symbol_index(t) for t in toks[1:]))
        lex = cls(prons, names)
        lex.validate(inv)
        return lex


@dataclass
class Utterance:
    utt_id: str
    frames: np.ndarray  # (T, D) float32
    words: np.ndarray  # (N,)
    phones: np.ndarray  # (M,)
    alignment: np.ndarray  # (T, 3) left/center/right per frame

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def runs(self, inv: PhonemeInventory) -> np.ndarray:
        """Alignment as (context id, length) runs."""
        ids = context_id(inv, self.alignment[:, 0], self.alignment[:, 1], self.alignment[:, 2])
        if len(ids) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        lengths = np.diff(np.r_[starts, len(ids)])
        return np.stack([ids[starts], lengths], axis=1)

    def state_segments(self) -> np.ndarray:
        """Start frame of every HMM state segment (consecutive states differ)."""
        a = self.alignment
        change = np.any(a[1:] != a[:-1], axis=1)
        return np.flatnonzero(np.r_[True, change])


@dataclass
class Corpus:
    n_phonemes: int
    dim: int
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return Corpus(self.n_phonemes, self.dim, self.utterances[k])
        return self.utterances[k]

    @property
    def n_frames(self) -> int:
        return sum(u.n_frames for u in self.utterances)


class EmissionTables:
    """Context-dependent Gaussian means ``base[c] + alpha * (dl[l] + dr[r])``."""

    def __init__(self, cfg: GeneratorConfig):
        inv = cfg.inventory
        rng = np.random.default_rng([cfg.seed, 1])
        self.base = rng.standard_normal((inv.n_states, cfg.dim))
        self.delta_left = rng.standard_normal((inv.n_context, cfg.dim))
        self.delta_right = rng.standard_normal((inv.n_context, cfg.dim))
        self.alpha = cfg.alpha
        self.noise = cfg.noise

    def mean(self, left, center, right) -> np.ndarray:
        return self.base[center] + self.alpha * (self.delta_left[left] + self.delta_right[right])


def generate_lexicon(cfg: GeneratorConfig) -> Lexicon:
    rng = np.random.default_rng([cfg.seed, 0])
    lo, hi = cfg.word_length
    prons = []
    for _ in range(cfg.n_words):
        n = int(rng.integers(lo, hi + 1))
        prons.append(tuple(int(p) for p in rng.integers(0, cfg.n_phonemes, size=n)))
    return Lexicon(prons)


def word_bigram(cfg: GeneratorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Generator's (start distribution, word->word transition matrix)."""
    rng = np.random.default_rng([cfg.seed, 2])
    conc = np.full(cfg.n_words, cfg.bigram_concentration)
    start = rng.dirichlet(conc)
    trans = rng.dirichlet(conc, size=cfg.n_words)
    return start, trans


def generate_corpus(cfg: GeneratorConfig, lexicon: Lexicon, n_utterances: int,
                    stream: int = 0, prefix: str = "utt") -> Corpus:
    """Sample ``n_utterances`` utterances; ``stream`` separates train/dev/test draws.

    Emission tables and word statistics depend only on ``cfg.seed`` so all
    streams share one acoustic world.
    """
    inv = cfg.inventory
    lexicon.validate(inv)
    tables = EmissionTables(cfg)
    start, trans = word_bigram(cfg)
    rng = np.random.default_rng([cfg.seed, 100 + stream])
    lo, hi = cfg.utterance_words
    p_phone = 1.0 / cfg.mean_duration
    p_sil = 1.0 / cfg.silence_duration

    utts = []
    for k in range(n_utterances):
        n_words = int(rng.integers(lo, hi + 1))
        words = [int(rng.choice(cfg.n_words, p=start))]
        for _ in range(n_words - 1):
            words.append(int(rng.choice(cfg.n_words, p=trans[words[-1]])))
        silences = list(rng.random(n_words - 1) < cfg.silence_prob)
        phones = lexicon.spell(words, silences, sil=inv.sil)
        ctx = phone_contexts(inv, phones)
        is_sil = ctx[:, 1] == inv.sil_state
        durs = np.where(is_sil, rng.geometric(p_sil, size=len(ctx)),
                        rng.geometric(p_phone, size=len(ctx)))
        align = np.repeat(ctx, durs, axis=0)
        mu = tables.mean(align[:, 0], align[:, 1], align[:, 2])
        frames = mu + cfg.noise * rng.standard_normal(mu.shape)
        utts.append(Utterance(
            utt_id=f"{prefix}{k:05d}",
            frames=frames.astype(np.float32),
            words=np.asarray(words, dtype=np.int64),
            phones=np.asarray(phones, dtype=np.int64),
            alignment=align,
        ))
    return Corpus(cfg.n_phonemes, cfg.dim, utts)


def _write_array(buf, arr, dtype) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    buf.write(struct.pack("<I", len(arr)))
    buf.write(arr.tobytes())


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    inv = PhonemeInventory.default(corpus.n_phonemes)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<4I", VERSION, corpus.n_phonemes, corpus.dim, len(corpus)))
    for u in corpus:
        uid = u.utt_id.encode("utf-8")
        buf.write(struct.pack("<H", len(uid)))
        buf.write(uid)
        _write_array(buf, u.words, "<i4")
        _write_array(buf, u.phones, "<i4")
        T, D = u.frames.shape
        buf.write(struct.pack("<2I", T, D))
        buf.write(np.ascontiguousarray(u.frames, dtype="<f4").tobytes())
        runs = u.runs(inv)
        buf.write(struct.pack("<I", len(runs)))
        buf.write(np.ascontiguousarray(runs, dtype="<i4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise EOFError(what)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_corpus(path: str | Path) -> Corpus:
    r = _Reader(Path(path).read_bytes())
    try:
        if r.take(8, "magic") != MAGIC:
            raise CorpusFormatError(f"{path}: malformed header (bad magic)")
        version, P, D, n = r.unpack("<4I", "header")
    except EOFError:
        raise CorpusFormatError(f"{path}: malformed header (file too short)") from None
    if version != VERSION or P < 1 or D < 1:
        raise CorpusFormatError(f"{path}: malformed header (version={version}, P={P}, D={D})")
    inv = PhonemeInventory.default(P)
    table = context_table(inv)
    utts = []
    for k in range(n):
        uid = f"#{k}"
        try:
            (ln,) = r.unpack("<H", "id length")
            uid = r.take(ln, "id").decode("utf-8")
            (nw,) = r.unpack("<I", "word count")
            words = np.frombuffer(r.take(4 * nw, "words"), dtype="<i4").astype(np.int64)
            (nm,) = r.unpack("<I", "phone count")
            phones = np.frombuffer(r.take(4 * nm, "phones"), dtype="<i4").astype(np.int64)
            T, Du = r.unpack("<2I", "frame header")
            if Du != D:
                raise CorpusFormatError(
                    f"{path}: utterance {uid}: dimension mismatch (header D={D}, utterance D={Du})")
            frames = np.frombuffer(r.take(4 * T * D, "frames"), dtype="<f4").reshape(T, D)
            (nr,) = r.unpack("<I", "run count")
            runs = np.frombuffer(r.take(8 * nr, "alignment runs"), dtype="<i4").reshape(nr, 2)
        except EOFError as e:
            raise CorpusFormatError(f"{path}: utterance {uid}: truncated ({e} incomplete)") from None
        if runs[:, 1].sum() != T or np.any(runs[:, 0] >= len(table)) or np.any(runs < 0):
            raise CorpusFormatError(f"{path}: utterance {uid}: alignment does not cover {T} frames")
        align = np.repeat(table[runs[:, 0]], runs[:, 1], axis=0)
        utts.append(Utterance(uid, frames.astype(np.float32), words, phones, align))
    if r.pos != len(r.data):
        raise CorpusFormatError(f"{path}: trailing bytes after {n} utterances")
    return Corpus(P, D, utts)
