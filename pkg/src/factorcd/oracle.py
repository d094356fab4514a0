"""Brute-force references on small discrete problems.

A :class:`TabularTask` is an explicit joint table ``p(x, left, center,
right)`` over a handful of discrete feature symbols, so every posterior,
factor and prior of the decompositions can be computed exactly.  The
exhaustive decoder enumerates word sequences and scores each with its own
linear-chain Viterbi pass; it shares no code with the prefix-tree search.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .factormodel import VAR_COLUMN, Decomposition, Factor, PriorTable, get_decomposition, var_size
from .inventory import PhonemeInventory, context_id, context_table, phone_contexts
from .lm import NgramLM
from .synthcorpus import Corpus, Lexicon, Utterance

log = logging.getLogger(__name__)

AXES = {"l": 1, "c": 2, "r": 3}


class EnumerationCapError(RuntimeError):
    pass


@dataclass
class TabularTask:
    inv: PhonemeInventory
    joint: np.ndarray  # (X, P+1, 3P+1, P+1)

    def __post_init__(self):
        if np.any(self.joint < 0) or not math.isclose(self.joint.sum(), 1.0, rel_tol=0, abs_tol=1e-12):
            raise ValueError("joint table must be non-negative and sum to one")

    @property
    def n_symbols(self) -> int:
        return self.joint.shape[0]


def valid_context_mask(inv: PhonemeInventory) -> np.ndarray:
    L, S = inv.n_context, inv.n_states
    mask = np.zeros((L, S, L), dtype=bool)
    mask[:, :inv.sil_state, :] = True
    mask[inv.sil, inv.sil_state, inv.sil] = True
    return mask


def random_task(n_phonemes: int = 2, n_symbols: int = 6, seed: int = 0, independent: bool = False,
                concentration: float = 0.3) -> TabularTask:
    """Seeded random task.

    ``independent=True`` builds ``p(x) p(l|x) p(r|x) p(c|l,r,x)`` so left and
    right contexts are conditionally independent given ``x``; otherwise the
    joint is a peaked Dirichlet draw over all valid contexts.
    """
    if not 1 <= n_phonemes <= 3 or not 1 <= n_symbols <= 8:
        raise ValueError("tabular tasks are limited to P <= 3 and |X| <= 8")
    inv = PhonemeInventory.default(n_phonemes)
    rng = np.random.default_rng([seed, 31])
    mask = valid_context_mask(inv)
    L, S = inv.n_context, inv.n_states
    if not independent:
        joint = np.zeros((n_symbols, L, S, L))
        n_valid = int(mask.sum())
        joint[:, mask] = rng.dirichlet(np.full(n_symbols * n_valid, concentration)).reshape(n_symbols, n_valid)
        joint /= joint.sum()
        return TabularTask(inv, joint)
    px = rng.dirichlet(np.ones(n_symbols))
    pl = rng.dirichlet(np.full(L, concentration), size=n_symbols)
    pr = rng.dirichlet(np.full(L, concentration), size=n_symbols)
    pc = np.zeros((n_symbols, L, S, L))
    for x in range(n_symbols):
        for left in range(L):
            for r in range(L):
                allowed = mask[left, :, r]
                pc[x, left, allowed, r] = rng.dirichlet(np.full(allowed.sum(), concentration))
    joint = px[:, None, None, None] * pl[:, :, None, None] * pr[:, None, None, :] * pc
    joint /= joint.sum()
    return TabularTask(inv, joint)


def deterministic_task(n_phonemes: int = 2, seed: int = 0) -> TabularTask:
    """One context per feature symbol (posteriors are one-hot)."""
    inv = PhonemeInventory.default(n_phonemes)
    ctx = context_table(inv)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(ctx), size=min(8, len(ctx)), replace=False)
    joint = np.zeros((len(picks), inv.n_context, inv.n_states, inv.n_context))
    for x, k in enumerate(picks):
        joint[(x, *ctx[k])] = 1.0 / len(picks)
    return TabularTask(inv, joint)


def exact_posteriors(task: TabularTask) -> np.ndarray:
    """``p(l, c, r | x)``; rows of symbols with zero mass are NaN (and logged)."""
    px = task.joint.sum(axis=(1, 2, 3))
    dead = px == 0
    if dead.any():
        log.info("excluding %d feature symbols with zero marginal", int(dead.sum()))
    with np.errstate(invalid="ignore", divide="ignore"):
        post = task.joint / px[:, None, None, None]
    post[dead] = np.nan
    return post


def _conditional(table: np.ndarray, target_axis: int, keep_axes: Sequence[int]) -> np.ndarray:
    """Marginalize onto ``(*keep_axes, target_axis)`` and normalize over the target (NaN if undefined)."""
    drop = tuple(a for a in range(table.ndim) if a not in (*keep_axes, target_axis))
    marg = table.sum(axis=drop)
    remaining = [a for a in range(table.ndim) if a not in drop]
    marg = np.transpose(marg, [remaining.index(a) for a in (*keep_axes, target_axis)])
    denom = marg.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, marg / np.where(denom > 0, denom, 1.0), np.nan)


def exact_factors(task: TabularTask, decomposition: str | Decomposition) -> dict[str, np.ndarray]:
    """Exact ``p(target | cond, x)`` tables shaped ``(X, *cond sizes, K)``.

    Entries with a zero-probability conditioning event are NaN.
    """
    dec = get_decomposition(decomposition) if isinstance(decomposition, str) else decomposition
    px = task.joint.sum(axis=(1, 2, 3)) > 0
    out = {}
    for f in dec.factors:
        tab = _conditional(task.joint, AXES[f.target], [0, *(AXES[v] for v in f.cond)])
        tab[~px] = np.nan
        out[f.name] = tab
    return out


def factor_product(task: TabularTask, tables: dict[str, np.ndarray],
                   decomposition: str | Decomposition) -> np.ndarray:
    """Product of factor tables at every (x, l, c, r), same layout as the joint."""
    dec = get_decomposition(decomposition) if isinstance(decomposition, str) else decomposition
    X = task.n_symbols
    L, S = task.inv.n_context, task.inv.n_states
    x, l, c, r = np.meshgrid(np.arange(X), np.arange(L), np.arange(S), np.arange(L), indexing="ij")
    val = {"l": l, "c": c, "r": r}
    prod = np.ones((X, L, S, L))
    for f in dec.factors:
        idx = (x, *(val[v] for v in f.cond), val[f.target])
        prod = prod * tables[f.name][idx]
    return prod


def chain_rule_deviation(task: TabularTask, decomposition: str) -> float:
    """Max |product of exact factors - exact joint posterior| over valid contexts."""
    post = exact_posteriors(task)
    prod = factor_product(task, exact_factors(task, decomposition), decomposition)
    mask = np.broadcast_to(valid_context_mask(task.inv), post.shape) & ~np.isnan(post)
    return float(np.nanmax(np.abs(prod - post)[mask]))


def exact_prior_table(task: TabularTask, decomposition: str, floor: float = 0.0) -> PriorTable:
    """Exact ``p(target | cond)`` (no feature) for each factor."""
    dec = get_decomposition(decomposition)
    joint = task.joint.sum(axis=0)
    axes = {"l": 0, "c": 1, "r": 2}
    tables = {}
    for f in dec.factors:
        tab = _conditional(joint, axes[f.target], [axes[v] for v in f.cond])
        K = tab.shape[-1]
        tab = np.where(np.isnan(tab), 1.0 / K, tab)
        tables[f.name] = tab
    return PriorTable(tables, floor, dec.tag)


class TabularModel:
    """Exact factor posteriors of a task behind the scoring interface of a model.

    ``frames`` are ``(T, 1)`` arrays of feature symbols.  Undefined
    conditionals are filled with uniform distributions.
    """

    def __init__(self, task: TabularTask, decomposition: str):
        self.inv = task.inv
        self.decomposition = get_decomposition(decomposition)
        self.tables = {}
        for name, tab in exact_factors(task, self.decomposition).items():
            K = tab.shape[-1]
            self.tables[name] = np.where(np.isnan(tab), 1.0 / K, tab)
        self.head_evaluations: dict[str, int] = {}

    def encode(self, frames) -> np.ndarray:
        return np.asarray(frames).reshape(len(frames), -1)[:, 0].astype(np.int64)

    def head_posteriors(self, enc, factor: Factor, cond_labels) -> np.ndarray:
        cond_labels = np.asarray(cond_labels).reshape(len(enc), len(factor.cond))
        return self.tables[factor.name][(enc, *cond_labels.T)]

    def head_log_posterior_naive(self, enc, factor: Factor, cond_values) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.tables[factor.name][(enc, *(np.full(len(enc), v) for v in cond_values))])

    def factor_log_posteriors(self, enc, factor: Factor, tuples) -> np.ndarray:
        tuples = np.asarray(tuples, dtype=np.int64).reshape(len(tuples), len(factor.cond))
        tab = self.tables[factor.name]
        if not factor.cond:
            out = tab[enc][:, None, :]
        else:
            out = tab[(enc[:, None], *(tuples[None, :, j] for j in range(len(factor.cond))))]
        self.head_evaluations[factor.name] = self.head_evaluations.get(factor.name, 0) + len(tuples) * len(enc)
        with np.errstate(divide="ignore"):
            return np.log(out)


def sample_corpus(task: TabularTask, n_frames: int, seed: int = 0, n_utterances: int = 10) -> Corpus:
    """Frames drawn i.i.d. from the joint, packed into a corpus for prior estimation."""
    rng = np.random.default_rng([seed, 53])
    flat = task.joint.ravel()
    draws = rng.choice(flat.size, size=n_frames, p=flat / flat.sum())
    x, l, c, r = np.unravel_index(draws, task.joint.shape)
    utts = []
    for k, chunk in enumerate(np.array_split(np.arange(n_frames), n_utterances)):
        frames = x[chunk].astype(np.float32)[:, None]
        align = np.stack([l[chunk], c[chunk], r[chunk]], axis=1).astype(np.int64)
        utts.append(Utterance(f"tab{k:03d}", frames, np.zeros(0, np.int64), np.zeros(0, np.int64), align))
    return Corpus(task.inv.size, 1, utts)


def count_priors(corpus: Corpus, inv: PhonemeInventory, factor: Factor) -> np.ndarray:
    """Relative frequencies of the aligned target per conditioning group (NaN if unseen)."""
    shape = tuple(var_size(inv, v) for v in factor.cond) + (var_size(inv, factor.target),)
    counts = np.zeros(shape)
    for u in corpus:
        idx = tuple(u.alignment[:, VAR_COLUMN[v]] for v in (*factor.cond, factor.target))
        np.add.at(counts, idx, 1.0)
    tot = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        return np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), np.nan)


# ---------------------------------------------------------------------------
# exhaustive decoding


def _chain_viterbi(scores: np.ndarray, ids: np.ndarray, loop: np.ndarray, fwd: np.ndarray) -> float:
    T, n = scores.shape[0], len(ids)
    if T < n:
        return -math.inf
    emis = scores[:, ids]
    delta = np.full(n, -np.inf)
    delta[0] = emis[0, 0]
    for t in range(1, T):
        move = np.r_[-np.inf, delta[:-1] + fwd[:-1]]
        delta = np.maximum(delta + loop, move) + emis[t]
    return float(delta[-1])


def hypothesis_count(n_words: int, max_words: int) -> int:
    return sum(n_words ** k * 2 ** (k - 1) for k in range(1, max_words + 1))


def exhaustive_decode(scores: np.ndarray, lexicon: Lexicon, lm: NgramLM, inv: PhonemeInventory,
                      lm_scale: float, max_words: int, loop: float = 0.5, silence_loop: float = 0.8,
                      cap: int = 10 ** 6) -> tuple[list[int], float]:
    """Exact argmax over word sequences of 1..max_words words, optional inter-word silences
    and all monotone alignments; returns (words, total score)."""
    n = hypothesis_count(len(lexicon), max_words)
    if n > cap:
        raise EnumerationCapError(f"{n} hypotheses exceed the enumeration cap {cap}")
    scores = np.asarray(scores, dtype=np.float64)
    lp = {"loop": math.log(loop), "fwd": math.log(1 - loop),
          "sloop": math.log(silence_loop), "sexit": math.log(1 - silence_loop)}
    best_words, best = None, -math.inf
    for k in range(1, max_words + 1):
        for words in itertools.product(range(len(lexicon)), repeat=k):
            lm_score = 0.0
            h = None
            for w in words:
                lm_score += lm.logprob(w, h)
                h = w
            lm_score += lm.logprob("</s>", h)
            for sils in itertools.product((False, True), repeat=k - 1):
                phones = lexicon.spell(list(words), list(sils), sil=inv.sil)
                ctx = phone_contexts(inv, phones)
                is_sil = ctx[:, 1] == inv.sil_state
                ids = np.asarray(context_id(inv, ctx[:, 0], ctx[:, 1], ctx[:, 2]))
                loops = np.where(is_sil, lp["sloop"], lp["loop"])
                fwds = np.where(is_sil, lp["sexit"], lp["fwd"])
                total = _chain_viterbi(scores, ids, loops, fwds) + lm_scale * lm_score
                if total > best:
                    best, best_words = total, list(words)
    if best_words is None:
        raise RuntimeError("no hypothesis fits the utterance length")
    return best_words, best
