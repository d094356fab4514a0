"""Factorized context-dependent acoustic model.

A model is an encoder (windowed feed-forward net) followed by one
independent MLP head per factor of a chain-rule decomposition of
``p(left, center, right | x)``.  Each head sees the encoder output
concatenated with embeddings of exactly its conditioning labels.

Variables are named ``"l"`` (left phoneme), ``"c"`` (center CI state) and
``"r"`` (right phoneme); a factor is written ``target|cond,...``.
"""
from __future__ import annotations

import copy
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensornet as tn
from .inventory import PhonemeInventory, context_table
from .synthcorpus import Corpus

log = logging.getLogger(__name__)

VAR_COLUMN = {"l": 0, "c": 1, "r": 2}


@dataclass(frozen=True)
class Factor:
    target: str
    cond: tuple[str, ...] = ()

    @property
    def name(self) -> str:
        return self.target + ("|" + ",".join(self.cond) if self.cond else "")

    @classmethod
    def parse(cls, name: str) -> "Factor":
        target, _, cond = name.partition("|")
        return cls(target, tuple(cond.split(",")) if cond else ())

    def __str__(self) -> str:
        return self.name


def _f(name: str) -> Factor:
    return Factor.parse(name)


@dataclass(frozen=True)
class Decomposition:
    tag: str
    factors: tuple[Factor, ...]

    @property
    def center_factor(self) -> Factor:
        return next(f for f in self.factors if f.target == "c")


DECOMPOSITIONS = {
    "monophone": Decomposition("monophone", (_f("c"),)),
    "diphone": Decomposition("diphone", (_f("c|l"), _f("l"))),
    "tri-forward": Decomposition("tri-forward", (_f("r|l,c"), _f("c|l"), _f("l"))),
    "tri-symmetric": Decomposition("tri-symmetric", (_f("c|l,r"), _f("l"), _f("r"))),
    "tri-backward": Decomposition("tri-backward", (_f("l|c,r"), _f("r|c"), _f("c"))),
}

# pre-training stage architectures
MONO_STAGE = (_f("l"), _f("c"), _f("r"))
DI_STAGE = (_f("c|l"), _f("l"))
RIGHT_BRANCH = _f("r|c")


def get_decomposition(tag: str) -> Decomposition:
    try:
        return DECOMPOSITIONS[tag]
    except KeyError:
        raise ValueError(f"unknown decomposition {tag!r}; choose from {sorted(DECOMPOSITIONS)}") from None


def var_size(inv: PhonemeInventory, var: str) -> int:
    return inv.n_states if var == "c" else inv.n_context


@dataclass(frozen=True)
class ModelDims:
    context_window: int = 4
    encoder_hidden: tuple[int, ...] = (128, 128)
    head_hidden: int = 128
    emb_left: int = 10
    emb_right: int = 10
    emb_center: int = 30
    dropout: float = 0.1

    def emb_dim(self, var: str) -> int:
        return {"l": self.emb_left, "r": self.emb_right, "c": self.emb_center}[var]


@dataclass
class TrainConfig:
    batch_size: int = 256
    gamma: float = 2.0
    lr: float = 5e-4
    lr_floor: float = 5e-6
    lr_decay: float = math.sqrt(0.8)
    l2: float = 0.01
    gradient_noise: bool = False
    noise_variance: float = 0.3
    nesterov: bool = True
    epochs: int = 8
    seed: int = 0


def _stable_seed(*parts) -> list[int]:
    return [zlib.crc32(str(p).encode()) for p in parts]


class FactoredModel:
    """Encoder plus per-factor heads for one decomposition (or stage)."""

    def __init__(self, inv: PhonemeInventory, feature_dim: int, decomposition: str | Decomposition,
                 dims: ModelDims = ModelDims(), seed: int = 0, dtype=np.float32,
                 factors: Sequence[Factor] | None = None):
        self.inv = inv
        self.feature_dim = feature_dim
        self.decomposition = (decomposition if isinstance(decomposition, Decomposition)
                              else get_decomposition(decomposition))
        self.dims = dims
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(_stable_seed(seed, "dropout"))
        self.stage_history: list[str] = []
        W = 2 * dims.context_window + 1
        enc_rng = np.random.default_rng(_stable_seed(seed, "encoder"))
        sizes = [W * feature_dim, *dims.encoder_hidden]
        layers: list[tn.Layer] = []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers += [tn.Dense(a, b, enc_rng, f"encoder.{k}", dtype), tn.Tanh()]
            if dims.dropout:
                layers.append(tn.Dropout(dims.dropout, self.rng))
        self.encoder = tn.Sequential(layers)
        emb_rng = np.random.default_rng(_stable_seed(seed, "embedding"))
        self.embeddings = {v: tn.Embedding(var_size(inv, v), dims.emb_dim(v), emb_rng, f"emb.{v}", dtype)
                           for v in ("l", "c", "r")}
        self.feat_mean = np.zeros(feature_dim, dtype=dtype)
        self.feat_std = np.ones(feature_dim, dtype=dtype)
        self.heads: dict[str, tn.Sequential] = {}
        self.set_heads(factors if factors is not None else self.decomposition.factors)
        self.head_evaluations: dict[str, int] = {}

    # -- structure ---------------------------------------------------------
    @property
    def enc_dim(self) -> int:
        return self.dims.encoder_hidden[-1]

    @property
    def factors(self) -> list[Factor]:
        return [Factor.parse(n) for n in self.heads]

    def head_input_dim(self, factor: Factor) -> int:
        return self.enc_dim + sum(self.dims.emb_dim(v) for v in factor.cond)

    def set_heads(self, factors: Iterable[Factor], tag: str = "") -> None:
        """Keep heads listed in ``factors`` verbatim, add fresh ones, drop the rest."""
        new = {}
        for f in factors:
            if f.name in self.heads:
                new[f.name] = self.heads[f.name]
                continue
            rng = np.random.default_rng(_stable_seed(self.seed, "head", f.name, tag))
            new[f.name] = tn.mlp([self.head_input_dim(f), self.dims.head_hidden, var_size(self.inv, f.target)],
                                 rng, f"head[{f.name}]", dropout=self.dims.dropout, dtype=self.dtype)
            for layer in new[f.name].layers:
                if isinstance(layer, tn.Dropout):
                    layer.rng = self.rng
        self.heads = new

    def params(self) -> list[tn.Parameter]:
        ps = self.encoder.params()
        ps += [e.table for e in self.embeddings.values()]
        for name in sorted(self.heads):
            ps += self.heads[name].params()
        return ps

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype) -> "FactoredModel":
        """Deep copy with every parameter cast to ``dtype``."""
        out = copy.deepcopy(self)
        out.dtype = np.dtype(dtype)
        for p in out.params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        out.feat_mean = out.feat_mean.astype(dtype)
        out.feat_std = out.feat_std.astype(dtype)
        return out

    # -- features ----------------------------------------------------------
    def set_normalization(self, corpus: Corpus) -> None:
        x = np.concatenate([u.frames for u in corpus]).astype(np.float64)
        self.feat_mean = x.mean(axis=0).astype(self.dtype)
        self.feat_std = np.maximum(x.std(axis=0), 1e-6).astype(self.dtype)

    def windows(self, frames: np.ndarray) -> np.ndarray:
        c = self.dims.context_window
        x = ((frames - self.feat_mean) / self.feat_std).astype(self.dtype)
        padded = np.concatenate([np.repeat(x[:1], c, axis=0), x, np.repeat(x[-1:], c, axis=0)])
        idx = np.arange(len(x))[:, None] + np.arange(2 * c + 1)[None, :]
        return padded[idx].reshape(len(x), -1)

    def encode(self, frames: np.ndarray) -> np.ndarray:
        """Encoder output for an utterance's raw frames, ``(T, H)``."""
        return self.encoder.forward(self.windows(frames), train=False)

    # -- heads -------------------------------------------------------------
    def _head_input(self, enc, factor: Factor, cond_labels):
        parts = [enc]
        for j, v in enumerate(factor.cond):
            parts.append(self.embeddings[v].table.value[cond_labels[:, j]])
        return np.concatenate(parts, axis=1) if len(parts) > 1 else enc

    def head_posteriors(self, enc, factor: Factor, cond_labels) -> np.ndarray:
        """Per-frame posteriors with per-frame conditioning labels ``(T, k)``."""
        cond_labels = np.asarray(cond_labels).reshape(len(enc), len(factor.cond))
        logits = self.heads[factor.name].forward(self._head_input(enc, factor, cond_labels), train=False)
        return tn.softmax(logits)

    def head_log_posterior_naive(self, enc, factor: Factor, cond_values: Sequence[int]) -> np.ndarray:
        """``(T, K)`` log posteriors for one fixed conditioning tuple (reference path)."""
        labels = np.tile(np.asarray(cond_values, dtype=np.int64), (len(enc), 1))
        logits = self.heads[factor.name].forward(self._head_input(enc, factor, labels), train=False)
        self.head_evaluations[factor.name] = self.head_evaluations.get(factor.name, 0) + len(enc)
        return tn.log_softmax(logits)

    def factor_log_posteriors(self, enc, factor: Factor, tuples: np.ndarray) -> np.ndarray:
        """``(T, n_tuples, K)`` log posteriors, one head pass per conditioning tuple.

        The first dense layer is linear in the concatenated input, so its
        encoder part is computed once per frame and the embedding part once
        per tuple.
        """
        head = self.heads[factor.name]
        first, last = head.layers[0], head.layers[-1]
        W0, b0 = first.W.value, first.b.value
        H = self.enc_dim
        a = enc @ W0[:H] + b0  # (T, Hh)
        tuples = np.asarray(tuples, dtype=np.int64).reshape(len(tuples), len(factor.cond))
        b = np.zeros((len(tuples), W0.shape[1]), dtype=W0.dtype)
        off = H
        for j, v in enumerate(factor.cond):
            d = self.dims.emb_dim(v)
            b += self.embeddings[v].table.value[tuples[:, j]] @ W0[off:off + d]
            off += d
        n_tup = max(len(tuples), 1)
        self.head_evaluations[factor.name] = self.head_evaluations.get(factor.name, 0) + n_tup * len(enc)
        hidden = np.tanh(a[:, None, :] + b[None, :, :]) if factor.cond else np.tanh(a)[:, None, :]
        # middle layers (if the head is deeper than one hidden layer)
        for layer in head.layers[2:-1]:
            hidden = layer.forward(hidden, train=False)
        return tn.log_softmax(hidden @ last.W.value + last.b.value)

    # -- training ----------------------------------------------------------
    def loss_and_grad(self, x: np.ndarray, labels: np.ndarray, gamma: float,
                      heads: Sequence[str] | None = None, train: bool = True) -> float:
        """Summed focal loss of the active heads; accumulates gradients."""
        names = list(heads) if heads is not None else list(self.heads)
        enc = self.encoder.forward(x, train)
        g_enc = np.zeros_like(enc)
        total = 0.0
        for name in names:
            f = Factor.parse(name)
            cond = labels[:, [VAR_COLUMN[v] for v in f.cond]]
            target = labels[:, VAR_COLUMN[f.target]]
            if target.size and (target.max() >= var_size(self.inv, f.target) or target.min() < 0):
                raise ValueError(f"label for {name} outside inventory")
            head = self.heads[name]
            logits = head.forward(self._head_input(enc, f, cond), train)
            loss, g = tn.focal_cross_entropy(tn.softmax(logits), target, gamma)
            total += loss
            g_in = head.backward(g)
            g_enc += g_in[:, :self.enc_dim]
            off = self.enc_dim
            for j, v in enumerate(f.cond):
                d = self.dims.emb_dim(v)
                np.add.at(self.embeddings[v].table.grad, cond[:, j], g_in[:, off:off + d])
                off += d
        self.encoder.backward(g_enc)
        return total

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.value for p in self.params()}
        out["features.mean"] = self.feat_mean
        out["features.std"] = self.feat_std
        return out

    def meta(self) -> dict:
        return {
            "decomposition": self.decomposition.tag,
            "heads": list(self.heads),
            "phonemes": list(self.inv.phonemes),
            "silence": self.inv.silence,
            "feature_dim": self.feature_dim,
            "dims": asdict(self.dims),
            "seed": self.seed,
            "stage_history": self.stage_history,
        }

    def save(self, path: str | Path, **extra) -> None:
        tn.save_checkpoint(path, self.state_dict(), {**self.meta(), **extra})

    @classmethod
    def load(cls, path: str | Path) -> "FactoredModel":
        arrays, meta = tn.load_checkpoint(path)
        dims = meta["dims"]
        dims["encoder_hidden"] = tuple(dims["encoder_hidden"])
        inv = PhonemeInventory(tuple(meta["phonemes"]), meta["silence"])
        model = cls(inv, meta["feature_dim"], meta["decomposition"], ModelDims(**dims), seed=meta["seed"],
                    factors=[Factor.parse(n) for n in meta["heads"]])
        for p in model.params():
            if p.name not in arrays or arrays[p.name].shape != p.value.shape:
                raise ValueError(f"{path}: checkpoint lacks or mis-shapes {p.name}")
            p.value[...] = arrays[p.name]
        model.feat_mean = arrays["features.mean"]
        model.feat_std = arrays["features.std"]
        model.stage_history = list(meta.get("stage_history", []))
        model.checkpoint_meta = meta
        return model


# ---------------------------------------------------------------------------
# training


class FrameData:
    """All frames of a corpus as padded windows gathered on demand."""

    def __init__(self, model: FactoredModel, corpus: Corpus):
        c = model.dims.context_window
        blocks, centers, labels = [], [], []
        off = 0
        for u in corpus:
            x = ((u.frames - model.feat_mean) / model.feat_std).astype(model.dtype)
            blocks.append(np.concatenate([np.repeat(x[:1], c, axis=0), x, np.repeat(x[-1:], c, axis=0)]))
            centers.append(off + c + np.arange(len(x)))
            labels.append(u.alignment)
            off += len(x) + 2 * c
        D = corpus.dim
        self.padded = np.concatenate(blocks) if blocks else np.zeros((0, D), model.dtype)
        self.centers = np.concatenate(centers) if centers else np.zeros(0, np.int64)
        self.labels = np.concatenate(labels) if labels else np.zeros((0, 3), np.int64)
        self._offsets = np.arange(-c, c + 1)

    def __len__(self) -> int:
        return len(self.centers)

    def windows(self, idx: np.ndarray) -> np.ndarray:
        rows = self.centers[idx][:, None] + self._offsets[None, :]
        return self.padded[rows].reshape(len(idx), -1)


@dataclass
class TrainState:
    opt: tn.OptimizerState
    newbob: tn.NewbobState
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, hyper: TrainConfig, stage: str = "") -> "TrainState":
        opt = tn.OptimizerState(lr=hyper.lr, l2=hyper.l2, nesterov=hyper.nesterov,
                                noise_variance=hyper.noise_variance if hyper.gradient_noise else 0.0,
                                seed=_stable_seed(hyper.seed, stage, "opt")[0])
        newbob = tn.NewbobState(lr=hyper.lr, decay=hyper.lr_decay, floor=hyper.lr_floor)
        return cls(opt, newbob)


def frame_error_rate(model: FactoredModel, data: FrameData, batch: int = 4096) -> float:
    """Center-state frame error with teacher-forced conditioning labels."""
    if len(data) == 0:
        return 0.0
    f = next(Factor.parse(n) for n in model.heads if n.startswith("c"))
    errors = 0
    for s in range(0, len(data), batch):
        idx = np.arange(s, min(s + batch, len(data)))
        enc = model.encoder.forward(data.windows(idx), train=False)
        y = data.labels[idx]
        post = model.head_posteriors(enc, f, y[:, [VAR_COLUMN[v] for v in f.cond]])
        errors += int(np.sum(post.argmax(axis=1) != y[:, 1]))
    return errors / len(data)


def train_epoch(model: FactoredModel, data: FrameData, state: TrainState, hyper: TrainConfig,
                dev: FrameData | None = None, heads: Sequence[str] | None = None) -> tuple[float, float]:
    """One shuffled pass; returns (mean train loss, dev frame error rate)."""
    rng = np.random.default_rng(_stable_seed(hyper.seed, "shuffle", state.epoch, *model.stage_history))
    perm = rng.permutation(len(data))
    total, n = 0.0, 0
    params = model.params()
    for s in range(0, len(perm), hyper.batch_size):
        idx = perm[s:s + hyper.batch_size]
        for p in params:
            p.zero_grad()
        loss = model.loss_and_grad(data.windows(idx), data.labels[idx], hyper.gamma, heads, train=True)
        tn.adam_step(params, state.opt)
        total += loss * len(idx)
        n += len(idx)
    fer = frame_error_rate(model, dev if dev is not None else data)
    tn.newbob_update(state.newbob, fer)
    state.opt.lr = state.newbob.lr
    state.epoch += 1
    train_loss = total / max(n, 1)
    state.history.append({"epoch": state.epoch, "loss": train_loss, "dev_fer": fer, "lr": state.opt.lr})
    log.info("epoch %d loss %.4f dev FER %.4f lr %.3g", state.epoch, train_loss, fer, state.opt.lr)
    return train_loss, fer


def train(model: FactoredModel, train_corpus: Corpus, dev_corpus: Corpus | None,
          hyper: TrainConfig, epochs: int | None = None, stage: str = "final") -> TrainState:
    if not model.stage_history:
        model.set_normalization(train_corpus)
    data = FrameData(model, train_corpus)
    dev = FrameData(model, dev_corpus) if dev_corpus is not None else None
    state = TrainState.fresh(hyper, stage)
    model.stage_history.append(stage)
    for _ in range(hyper.epochs if epochs is None else epochs):
        train_epoch(model, data, state, hyper, dev)
    return state


# ---------------------------------------------------------------------------
# multi-stage training

STAGE_ORDER = ("monophone", "diphone", "triphone")
SUPPORTED_STAGES = {
    "monophone": ("monophone",),
    "diphone": ("monophone", "diphone"),
    "tri-forward": ("monophone", "diphone", "triphone"),
    "tri-symmetric": ("monophone", "triphone"),
    "tri-backward": ("monophone", "triphone"),
}


def final_stage(tag: str) -> str:
    return SUPPORTED_STAGES[tag][-1]


@dataclass
class StagePlan:
    stages: tuple[str, ...] = ()
    epochs: dict = field(default_factory=dict)
    include_right_branch: bool = False

    def resolve(self, tag: str) -> list[str]:
        """Validated stage list for ``tag``, with the final stage appended."""
        supported = SUPPORTED_STAGES[get_decomposition(tag).tag]
        stages = list(self.stages)
        pos = -1
        for s in stages:
            if s not in supported:
                raise ValueError(f"stage {s!r} is not supported for decomposition {tag!r}")
            k = supported.index(s)
            if k <= pos:
                raise ValueError(f"stage plan {stages} is out of order")
            pos = k
        if not stages or stages[-1] != supported[-1]:
            stages.append(supported[-1])
        if self.include_right_branch and "diphone" not in stages[:-1] and tag != "diphone":
            raise ValueError("right branch requires a diphone pre-training stage")
        return stages


def stage_factors(stage: str, tag: str, include_right_branch: bool = False) -> tuple[Factor, ...]:
    dec = get_decomposition(tag)
    if stage == final_stage(tag):
        factors = dec.factors
        if tag == "diphone" and include_right_branch:
            factors = factors + (RIGHT_BRANCH,)
        return factors
    if stage == "monophone":
        return MONO_STAGE
    if stage == "diphone":
        return DI_STAGE + ((RIGHT_BRANCH,) if include_right_branch else ())
    raise ValueError(f"unknown stage {stage!r}")


def run_stage_plan(plan: StagePlan, tag: str, train_corpus: Corpus, dev_corpus: Corpus | None,
                   dims: ModelDims, hyper: TrainConfig, seed: int | None = None,
                   inv: PhonemeInventory | None = None) -> FactoredModel:
    """Train stage by stage, carrying the encoder, embeddings and retained heads forward."""
    stages = plan.resolve(tag)
    inv = inv or PhonemeInventory.default(train_corpus.n_phonemes)
    seed = hyper.seed if seed is None else seed
    model = None
    for k, stage in enumerate(stages):
        factors = stage_factors(stage, tag, plan.include_right_branch)
        if model is None:
            model = FactoredModel(inv, train_corpus.dim, tag, dims, seed=seed, factors=factors)
        else:
            model.set_heads(factors, tag=stage)
        t0 = time.perf_counter()
        train(model, train_corpus, dev_corpus, hyper, epochs=plan.epochs.get(stage, hyper.epochs), stage=stage)
        log.info("stage %s (%s) done in %.1fs", stage, ",".join(model.heads), time.perf_counter() - t0)
    return model


# ---------------------------------------------------------------------------
# priors and scoring


class PriorTable:
    """Per-factor conditional prior tables ``table[cond..., target]``.

    Text format, one distribution per line::

        # floor <value>
        # decomposition <tag>
        <factor>\t<cond labels comma-separated or ->\t<probabilities ...>
    """

    def __init__(self, tables: dict[str, np.ndarray], floor: float = 1e-6, tag: str | None = None):
        self.tables = tables
        self.floor = floor
        self.tag = tag
        with np.errstate(divide="ignore"):
            self._log = {k: np.log(v) for k, v in tables.items()}

    def __contains__(self, name: str) -> bool:
        return name in self.tables

    def log_prob(self, factor: Factor, contexts: np.ndarray) -> np.ndarray:
        try:
            table = self._log[factor.name]
        except KeyError:
            raise KeyError(f"no prior for factor {factor.name}") from None
        contexts = np.atleast_2d(contexts)
        index = tuple(contexts[:, VAR_COLUMN[v]] for v in (*factor.cond, factor.target))
        return table[index]

    def write(self, path: str | Path) -> None:
        lines = [f"# floor {self.floor!r}"]
        if self.tag:
            lines.append(f"# decomposition {self.tag}")
        for name in sorted(self.tables):
            t = self.tables[name]
            flat = t.reshape(-1, t.shape[-1])
            for k, row in enumerate(flat):
                cond = np.unravel_index(k, t.shape[:-1]) if t.ndim > 1 else ()
                key = ",".join(str(int(c)) for c in cond) or "-"
                lines.append(f"{name}\t{key}\t" + " ".join(repr(float(x)) for x in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path: str | Path, inv: PhonemeInventory) -> "PriorTable":
        floor, tag = 1e-6, None
        rows: dict[str, list] = {}
        for ln in Path(path).read_text().splitlines():
            if ln.startswith("# floor"):
                floor = float(ln.split()[-1])
                continue
            if ln.startswith("# decomposition"):
                tag = ln.split()[-1]
                continue
            if not ln.strip() or ln.startswith("#"):
                continue
            name, key, probs = ln.split("\t")
            rows.setdefault(name, []).append((key, np.array(probs.split(), dtype=np.float64)))
        tables = {}
        for name, entries in rows.items():
            f = Factor.parse(name)
            shape = tuple(var_size(inv, v) for v in f.cond) + (var_size(inv, f.target),)
            t = np.zeros(shape)
            for key, probs in entries:
                cond = () if key == "-" else tuple(int(c) for c in key.split(","))
                t[cond] = probs
            tables[name] = t
        return cls(tables, floor, tag)


def _apply_floor(p: np.ndarray, floor: float) -> np.ndarray:
    p = p / p.sum(axis=-1, keepdims=True)
    return floor + (1.0 - p.shape[-1] * floor) * p


def grouped_average(posteriors: np.ndarray, groups: np.ndarray, n_groups: int):
    """Sum and count of per-frame distributions per group index."""
    sums = np.zeros((n_groups, posteriors.shape[1]))
    np.add.at(sums, groups, posteriors)
    counts = np.bincount(groups, minlength=n_groups)
    return sums, counts


def estimate_priors(model, corpus: Corpus, floor: float = 1e-6, max_utterances: int | None = None,
                    factors: Sequence[Factor] | None = None) -> PriorTable:
    """Average each head's outputs over frames grouped by the aligned conditioning labels.

    ``model`` needs ``inv``, ``encode`` and ``head_posteriors``.  Groups with
    no frames fall back to the factor's marginal average.
    """
    inv = model.inv
    factors = list(factors) if factors is not None else list(model.decomposition.factors)
    utts = list(corpus)[:max_utterances] if max_utterances else list(corpus)
    acc = {}
    for f in factors:
        shape = tuple(var_size(inv, v) for v in f.cond)
        acc[f.name] = [np.zeros((int(np.prod(shape)), var_size(inv, f.target))),
                       np.zeros(int(np.prod(shape)), dtype=np.int64), shape]
    for u in utts:
        enc = model.encode(u.frames)
        for f in factors:
            cond = u.alignment[:, [VAR_COLUMN[v] for v in f.cond]]
            post = model.head_posteriors(enc, f, cond)
            sums, counts, shape = acc[f.name]
            groups = np.ravel_multi_index(cond.T, shape) if f.cond else np.zeros(len(cond), np.int64)
            s, c = grouped_average(post.astype(np.float64), groups, len(counts))
            sums += s
            counts += c
    tables = {}
    for f in factors:
        sums, counts, shape = acc[f.name]
        if counts.sum() == 0:
            raise ValueError("prior estimation needs at least one frame")
        marginal = sums.sum(axis=0) / counts.sum()
        empty = counts == 0
        if f.cond and empty.any():
            log.info("prior %s: %d of %d conditioning groups unseen, using marginal",
                     f.name, int(empty.sum()), len(counts))
        avg = np.where(empty[:, None], marginal[None, :], sums / np.maximum(counts, 1)[:, None])
        tables[f.name] = _apply_floor(avg, floor).reshape(*shape, -1)
    return PriorTable(tables, floor, getattr(model.decomposition, "tag", None))


def _scale_for(scales, factor: Factor) -> float:
    if isinstance(scales, dict):
        return float(scales.get(factor.name, 0.0))
    return float(scales)


def _active_factors(model, factors) -> list[Factor]:
    if factors is None:
        return list(model.decomposition.factors)
    return [f if isinstance(f, Factor) else Factor.parse(f) for f in factors]


def emission_score(model, priors: PriorTable, enc, context, scales, factors=None) -> np.ndarray:
    """Scaled log likelihood (minus log p(x)) of one context at every frame of ``enc``.

    Evaluates each head on its own concatenated input; the reference path
    for :func:`batch_context_scores`.
    """
    ctx = np.asarray(context, dtype=np.int64).reshape(1, 3)
    total = 0.0
    for f in _active_factors(model, factors):
        cond = [int(ctx[0, VAR_COLUMN[v]]) for v in f.cond]
        lp = model.head_log_posterior_naive(enc, f, cond)[:, ctx[0, VAR_COLUMN[f.target]]]
        prior = priors.log_prob(f, ctx)[0]
        if not np.isfinite(prior):
            raise AssertionError(f"missing prior for {f.name}")
        total = total + lp - _scale_for(scales, f) * prior
    return np.asarray(total, dtype=np.float64)


@dataclass
class ScoreTable:
    scores: np.ndarray  # (T, n_contexts)
    contexts: np.ndarray  # (n_contexts, 3)
    head_evaluations: dict  # factor name -> distinct conditioning tuples per frame


@dataclass
class FactorScores:
    """Per-factor log posteriors/priors gathered per context; rescaled cheaply."""

    log_post: dict  # name -> (T, n) float64
    log_prior: dict  # name -> (n,)
    contexts: np.ndarray
    head_evaluations: dict

    def combine(self, scales, factors=None) -> ScoreTable:
        names = [f.name if isinstance(f, Factor) else f for f in factors] if factors else list(self.log_post)
        T = next(iter(self.log_post.values())).shape[0]
        out = np.zeros((T, len(self.contexts)))
        for name in names:
            f = Factor.parse(name)
            out += self.log_post[name] - _scale_for(scales, f) * self.log_prior[name][None, :]
        return ScoreTable(out, self.contexts, self.head_evaluations)


def factor_scores(model, priors: PriorTable, enc, contexts: np.ndarray | None = None,
                  factors=None) -> FactorScores:
    contexts = context_table(model.inv) if contexts is None else np.asarray(contexts, dtype=np.int64)
    log_post, log_prior, evals = {}, {}, {}
    for f in _active_factors(model, factors):
        cols = [VAR_COLUMN[v] for v in f.cond]
        if cols:
            tuples, inverse = np.unique(contexts[:, cols], axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
        else:
            tuples = np.zeros((1, 0), dtype=np.int64)
            inverse = np.zeros(len(contexts), dtype=np.int64)
        lp = model.factor_log_posteriors(enc, f, tuples)
        log_post[f.name] = lp[:, inverse, contexts[:, VAR_COLUMN[f.target]]].astype(np.float64)
        log_prior[f.name] = priors.log_prob(f, contexts)
        evals[f.name] = len(tuples)
    return FactorScores(log_post, log_prior, contexts, evals)


def batch_context_scores(model, priors: PriorTable, enc, contexts=None, scales=1.0,
                         factors=None) -> ScoreTable:
    """Scores of many contexts with each head run once per distinct conditioning tuple."""
    return factor_scores(model, priors, enc, contexts, factors).combine(scales, factors)


def model_gradient_check(tag: str = "tri-forward", gamma: float = 2.0, seed: int = 0, n_frames: int = 12,
                         n_phonemes: int = 3, feature_dim: int = 4, n_coords: int = 8) -> dict[str, float]:
    """Analytic vs central-difference gradients of a small float64 model.

    Returns the max relative error per parameter group (encoder layers,
    embeddings, each head).  Dropout is off so the loss is deterministic.
    """
    inv = PhonemeInventory.default(n_phonemes)
    dims = ModelDims(context_window=1, encoder_hidden=(6, 5), head_hidden=5, emb_left=3, emb_right=3,
                     emb_center=4, dropout=0.0)
    model = FactoredModel(inv, feature_dim, tag, dims, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(_stable_seed(seed, "gradcheck"))
    x = rng.normal(size=(n_frames, (2 * dims.context_window + 1) * feature_dim))
    labels = np.stack([rng.integers(0, inv.n_context, n_frames), rng.integers(0, inv.n_states, n_frames),
                       rng.integers(0, inv.n_context, n_frames)], axis=1)

    def loss_fn():
        model.zero_grad()
        return model.loss_and_grad(x, labels, gamma, train=False)

    groups: dict[str, list[tn.Parameter]] = {}
    for p in model.params():
        groups.setdefault(p.name.rsplit(".", 1)[0], []).append(p)
    return {name: tn.gradient_check(ps, loss_fn, eps=1e-6, n_coords=n_coords, seed=seed)
            for name, ps in sorted(groups.items())}
