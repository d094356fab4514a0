"""Time-synchronous prefix-tree Viterbi beam search with triphone contexts.

The lexicon prefix tree is expanded into a static state graph:

* one tree copy per LM history (``<s>`` or the previous word) so bigram
  scores recombine exactly;
* every phoneme node is split by its right context (the child phoneme, or
  at a word end each possible successor start phoneme and silence);
* first-phoneme nodes are further split by their left context.

Each graph state carries one triphone context, so the emission of a state
is a lookup into the per-frame context score table.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .factormodel import FactorScores, PriorTable, ScoreTable, batch_context_scores, emission_score
from .inventory import STATES_PER_PHONEME, PhonemeInventory, context_id, context_table, phone_contexts
from .lm import NgramLM
from .synthcorpus import Lexicon

NEG_INF = -np.inf


class DecodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransitionModel:
    loop: float = 0.5
    silence_loop: float = 0.8

    def __post_init__(self):
        for name in ("loop", "silence_loop"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} probability must lie in (0, 1)")

    @property
    def forward(self) -> float:
        return 1.0 - self.loop

    @property
    def silence_exit(self) -> float:
        return 1.0 - self.silence_loop


@dataclass
class DecoderConfig:
    beam: int = 2000
    score_beam: float = 200.0  # no LM lookahead, so word ends cost lm_scale * -log p at once
    lm_scale: float = 3.0
    prior_scales: float | dict = 1.0
    transitions: TransitionModel = field(default_factory=TransitionModel)
    word_end_beam: float = math.inf
    within_word_context_only: bool = False
    factors: tuple[str, ...] | None = None  # decode with a subset of factors

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        scales = self.prior_scales.values() if isinstance(self.prior_scales, dict) else [self.prior_scales]
        if self.lm_scale < 0 or any(s < 0 for s in scales):
            raise ValueError("scales must be non-negative")


@dataclass
class DecodeResult:
    words: list[int]
    score: float
    active_counts: np.ndarray
    seconds: float

    def same_as(self, other: "DecodeResult", tol: float = 0.0) -> bool:
        return (self.words == other.words and abs(self.score - other.score) <= tol
                and np.array_equal(self.active_counts, other.active_counts))


# ---------------------------------------------------------------------------
# prefix tree


@dataclass
class TreeNode:
    phoneme: int
    parent: int
    depth: int
    children: dict = field(default_factory=dict)  # phoneme -> node id
    words: list = field(default_factory=list)


class PrefixTree:
    """Lexicon pronunciations with shared prefixes merged; node 0 is the root."""

    def __init__(self, nodes: list[TreeNode]):
        self.nodes = nodes

    @property
    def n_nodes(self) -> int:
        return len(self.nodes) - 1

    @property
    def num_states(self) -> int:
        return STATES_PER_PHONEME * self.n_nodes

    def word_end(self, pron: Sequence[int]) -> int:
        n = 0
        for p in pron:
            n = self.nodes[n].children[p]
        return n

    def path(self, node: int) -> list[int]:
        out = []
        while node:
            out.append(self.nodes[node].phoneme)
            node = self.nodes[node].parent
        return out[::-1]


def build_prefix_tree(lexicon: Lexicon) -> PrefixTree:
    if len(lexicon) == 0:
        raise ValueError("empty lexicon")
    nodes = [TreeNode(-1, -1, 0)]
    for w, pron in enumerate(lexicon.prons):
        if not pron:
            raise ValueError(f"word {lexicon.names[w]} has an empty pronunciation")
        n = 0
        for p in pron:
            child = nodes[n].children.get(p)
            if child is None:
                child = len(nodes)
                nodes.append(TreeNode(p, n, nodes[n].depth + 1))
                nodes[n].children[p] = child
            n = child
        nodes[n].words.append(w)
    return PrefixTree(nodes)


# ---------------------------------------------------------------------------
# graph compilation


@dataclass
class SearchGraph:
    state_ctx: np.ndarray
    edge_ptr: np.ndarray
    edge_dst: np.ndarray
    edge_trans: np.ndarray
    edge_lm: np.ndarray
    edge_word: np.ndarray
    init_state: int
    final_lm: np.ndarray  # per state; -inf unless a final silence state
    block_size: int
    n_contexts: int

    @property
    def n_states(self) -> int:
        return len(self.state_ctx)


def compile_graph(tree: PrefixTree, lexicon: Lexicon, lm: NgramLM, inv: PhonemeInventory,
                  transitions: TransitionModel = TransitionModel(),
                  within_word_context_only: bool = False) -> SearchGraph:
    nodes = tree.nodes
    sil = inv.sil
    V = len(lexicon)
    if lm.log_matrix.shape != (V + 1, V + 1):
        raise ValueError("LM vocabulary does not match the lexicon")
    first_phones = sorted(nodes[0].children)
    last_phones = sorted({pron[-1] for pron in lexicon.prons})
    if within_word_context_only:
        cross_right, first_left = [sil], [sil]
    else:
        cross_right, first_left = sorted({sil, *first_phones}), sorted({sil, *last_phones})

    def rights(n):
        rs = set(nodes[n].children)
        if nodes[n].words:
            rs.update(cross_right)
        return sorted(rs)

    def lefts(n):
        return first_left if nodes[n].depth == 1 else [nodes[nodes[n].parent].phoneme]

    # local state numbering inside one history block
    base: dict[tuple[int, int, int], int] = {}
    ctx = [context_id(inv, sil, inv.sil_state, sil)]
    for n in range(1, len(nodes)):
        p = nodes[n].phoneme
        for left in lefts(n):
            for r in rights(n):
                base[(n, left, r)] = len(ctx)
                ctx.extend(context_id(inv, left, inv.state_index(p, i), r) for i in range(STATES_PER_PHONEME))
    S0 = len(ctx)

    lp_loop, lp_fwd = math.log(transitions.loop), math.log(transitions.forward)
    lp_sloop, lp_sexit = math.log(transitions.silence_loop), math.log(transitions.silence_exit)
    # template edges: (src, dst, trans, word); word >= 0 means dst lives in block word+1
    edges: list[tuple[int, int, float, int]] = []

    def enter_tree(left, trans, word):
        for n1 in first_phones:
            c = nodes[0].children[n1]
            for r in rights(c):
                edges.append((0, base[(c, left, r)], trans, word))

    # silence: loop, then any first phoneme with silence as left context
    edges.append((0, 0, lp_sloop, -1))
    enter_tree(sil, lp_sexit, -1)
    for (n, left, r), b in base.items():
        node = nodes[n]
        for i in range(STATES_PER_PHONEME - 1):
            edges.append((b + i, b + i, lp_loop, -1))
            edges.append((b + i, b + i + 1, lp_fwd, -1))
        last = b + STATES_PER_PHONEME - 1
        edges.append((last, last, lp_loop, -1))
        if r in node.children:
            c = node.children[r]
            for r2 in rights(c):
                edges.append((last, base[(c, node.phoneme, r2)], lp_fwd, -1))
        if node.words and r in cross_right:
            for w in node.words:
                if r == sil:
                    edges.append((last, 0, lp_fwd, w))
                    if within_word_context_only:
                        for n1 in first_phones:
                            c = nodes[0].children[n1]
                            for r2 in rights(c):
                                edges.append((last, base[(c, sil, r2)], lp_fwd, w))
                else:
                    c = nodes[0].children[r]
                    for r2 in rights(c):
                        edges.append((last, base[(c, node.phoneme, r2)], lp_fwd, w))
    edges.sort(key=lambda e: (e[0], e[1], e[3]))
    src = np.array([e[0] for e in edges], dtype=np.int64)
    dst = np.array([e[1] for e in edges], dtype=np.int64)
    trans = np.array([e[2] for e in edges])
    word = np.array([e[3] for e in edges], dtype=np.int64)

    n_blocks = V + 1
    blocks = np.arange(n_blocks)
    g_dst = np.where(word[None, :] >= 0, (word[None, :] + 1) * S0, blocks[:, None] * S0) + dst[None, :]
    g_lm = np.where(word[None, :] >= 0, lm.log_matrix[blocks[:, None], np.maximum(word, 0)[None, :]], 0.0)
    counts = np.bincount(src, minlength=S0)
    ptr0 = np.r_[0, np.cumsum(counts)]
    E0 = len(edges)
    edge_ptr = (blocks[:, None] * E0 + ptr0[None, :-1]).ravel()
    edge_ptr = np.r_[edge_ptr, n_blocks * E0]

    final_lm = np.full(n_blocks * S0, NEG_INF)
    final_lm[blocks[1:] * S0] = lm.log_matrix[1:, V]
    return SearchGraph(
        state_ctx=np.tile(np.asarray(ctx, dtype=np.int64), n_blocks),
        edge_ptr=edge_ptr.astype(np.int64),
        edge_dst=g_dst.ravel().astype(np.int64),
        edge_trans=np.tile(trans, n_blocks),
        edge_lm=g_lm.ravel(),
        edge_word=np.tile(word, n_blocks),
        init_state=0,
        final_lm=final_lm,
        block_size=S0,
        n_contexts=inv.n_contexts,
    )


# ---------------------------------------------------------------------------
# search


def decode_scores(scores: np.ndarray, graph: SearchGraph, cfg: DecoderConfig,
                  use_numba: bool | None = None) -> DecodeResult:
    """Beam search over a precomputed ``(T, n_contexts)`` emission score table."""
    if scores.shape[1] != graph.n_contexts:
        raise ValueError("score table does not cover the context inventory")
    t0 = time.perf_counter()
    out = _kernels.viterbi_search(
        np.ascontiguousarray(scores, dtype=np.float64), graph.state_ctx, graph.edge_ptr, graph.edge_dst,
        graph.edge_trans, graph.edge_lm, graph.edge_word, float(cfg.lm_scale), int(graph.init_state),
        graph.final_lm, int(cfg.beam), float(cfg.score_beam), float(cfg.word_end_beam),
        use_numba=use_numba)
    status, score, _state, hist, links_word, links_prev, _n, counts = out
    if status >= 0:
        raise DecodeError(f"beam collapse at frame {status}: no surviving hypothesis")
    words = []
    while hist >= 0:
        words.append(int(links_word[hist]))
        hist = links_prev[hist]
    return DecodeResult(words[::-1], float(score), np.asarray(counts), time.perf_counter() - t0)


class Decoder:
    """Compiled search network for one lexicon/LM pair."""

    def __init__(self, lexicon: Lexicon, lm: NgramLM, inv: PhonemeInventory,
                 cfg: DecoderConfig | None = None):
        self.lexicon = lexicon
        self.lm = lm
        self.inv = inv
        self.cfg = cfg or DecoderConfig()
        self.tree = build_prefix_tree(lexicon)
        self.graph = compile_graph(self.tree, lexicon, lm, inv, self.cfg.transitions,
                                   self.cfg.within_word_context_only)

    def scores(self, model, priors: PriorTable, frames: np.ndarray, naive: bool = False,
               cfg: DecoderConfig | None = None) -> ScoreTable:
        cfg = cfg or self.cfg
        check_tags(model, priors)
        enc = model.encode(frames)
        if not naive:
            return batch_context_scores(model, priors, enc, None, cfg.prior_scales, cfg.factors)
        contexts = context_table(self.inv)
        table = np.empty((len(enc), len(contexts)))
        for k, c in enumerate(contexts):
            table[:, k] = emission_score(model, priors, enc, c, cfg.prior_scales, cfg.factors)
        return ScoreTable(table, contexts, {})

    def decode(self, model, priors: PriorTable, frames: np.ndarray, cfg: DecoderConfig | None = None,
               naive: bool = False, use_numba: bool | None = None) -> DecodeResult:
        cfg = cfg or self.cfg
        t0 = time.perf_counter()
        table = self.scores(model, priors, frames, naive, cfg)
        res = decode_scores(table.scores, self.graph, cfg, use_numba)
        res.seconds = time.perf_counter() - t0
        return res

    def decode_factor_scores(self, fs: FactorScores, cfg: DecoderConfig,
                             use_numba: bool | None = None) -> DecodeResult:
        return decode_scores(fs.combine(cfg.prior_scales, cfg.factors).scores, self.graph, cfg, use_numba)


def check_tags(model, priors: PriorTable) -> None:
    tag = getattr(priors, "tag", None)
    if tag is not None and tag != model.decomposition.tag:
        raise ValueError(f"decomposition mismatch: model is {model.decomposition.tag!r}, priors are {tag!r}")
    for f in model.decomposition.factors:
        if f.name not in priors:
            raise ValueError(f"priors lack factor {f.name} required by {model.decomposition.tag}")


def viterbi_decode(frames: np.ndarray, model, priors: PriorTable, lexicon: Lexicon, lm: NgramLM,
                   cfg: DecoderConfig | None = None, **kw) -> DecodeResult:
    return Decoder(lexicon, lm, model.inv, cfg).decode(model, priors, frames, **kw)


# ---------------------------------------------------------------------------
# forced alignment


def linear_transitions(inv: PhonemeInventory, contexts: np.ndarray, tm: TransitionModel):
    is_sil = contexts[:, 1] == inv.sil_state
    loop = np.where(is_sil, math.log(tm.silence_loop), math.log(tm.loop))
    fwd = np.where(is_sil, math.log(tm.silence_exit), math.log(tm.forward))
    return loop, fwd


def align_scores(scores: np.ndarray, inv: PhonemeInventory, phones: Sequence[int],
                 tm: TransitionModel = TransitionModel(), use_numba: bool | None = None):
    """Best monotone path of a phone string's HMM; returns (score, state index per frame)."""
    contexts = phone_contexts(inv, phones)
    if len(scores) < len(contexts):
        raise DecodeError(f"{len(scores)} frames cannot cover {len(contexts)} HMM states")
    loop, fwd = linear_transitions(inv, contexts, tm)
    ids = context_id(inv, contexts[:, 0], contexts[:, 1], contexts[:, 2])
    score, path = _kernels.linear_align(scores, ids, loop, fwd, use_numba=use_numba)
    return float(score), path


def forced_align(frames: np.ndarray, words: Sequence[int], model, priors: PriorTable, lexicon: Lexicon,
                 cfg: DecoderConfig | None = None, silences: Sequence[bool] | None = None):
    """Align frames to the spelled word sequence; returns (score, per-frame contexts)."""
    cfg = cfg or DecoderConfig()
    inv = model.inv
    phones = lexicon.spell(list(words), silences, sil=inv.sil)
    enc = model.encode(frames)
    table = batch_context_scores(model, priors, enc, None, cfg.prior_scales, cfg.factors)
    score, path = align_scores(table.scores, inv, phones, cfg.transitions)
    return score, phone_contexts(inv, phones)[path]
