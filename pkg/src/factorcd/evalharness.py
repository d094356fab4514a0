"""WER scoring, prior/LM scale grid search and the model-comparison runner."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .decoder import DecodeError, Decoder, DecoderConfig
from .factormodel import (FactoredModel, ModelDims, StagePlan, TrainConfig, estimate_priors, factor_scores,
                          get_decomposition, run_stage_plan)
from .lm import NgramLM
from .synthcorpus import Corpus, GeneratorConfig, Lexicon, generate_corpus, generate_lexicon

log = logging.getLogger(__name__)


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    ref_words: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        return 100.0 * self.errors / self.ref_words if self.ref_words else 0.0

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions, self.deletions + other.deletions,
                         self.insertions + other.insertions, self.ref_words + other.ref_words)


def align_words(ref: Sequence, hyp: Sequence) -> WerReport:
    """Unit-cost Levenshtein alignment with S/D/I counts from the backtrace."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return WerReport(int(s), dl, ins, n)


def wer(references: Mapping[str, Sequence], hypotheses: Mapping[str, Sequence]) -> WerReport:
    """Corpus-level WER over utterance ids (sum of edits / sum of reference words)."""
    if set(references) != set(hypotheses):
        missing = sorted(set(references) ^ set(hypotheses))
        raise KeyError(f"utterance id mismatch: {missing[:5]}")
    total = WerReport()
    for uid in sorted(references):
        total = total + align_words(list(references[uid]), list(hypotheses[uid]))
    return total


@dataclass
class GridSpec:
    prior_scales: tuple[float, ...] = (0.0, 0.3, 0.7, 1.0)
    lm_scales: tuple[float, ...] = (2.0, 3.0, 5.0, 8.0)
    per_factor: bool = False

    def __post_init__(self):
        if not self.prior_scales or not self.lm_scales:
            raise ValueError("grid lists must be non-empty")
        if min(self.prior_scales) < 0 or min(self.lm_scales) < 0:
            raise ValueError("grid values must be >= 0")

    def points(self, factor_names: Sequence[str]) -> list[tuple[tuple[float, ...], float]]:
        """Grid points ``(per-factor prior scales, lm scale)`` in lexicographic order."""
        if self.per_factor:
            prior = list(itertools.product(self.prior_scales, repeat=len(factor_names)))
        else:
            prior = [(s,) * len(factor_names) for s in self.prior_scales]
        return sorted((p, float(lm)) for p in prior for lm in self.lm_scales)


@dataclass
class GridResult:
    prior_scales: dict
    lm_scale: float
    wer: float
    table: list  # (prior scales, lm scale, wer, failed utterances) for every point


def grid_search(model, priors, dev: Corpus, decoder: Decoder, grid: GridSpec,
                cfg: DecoderConfig | None = None) -> GridResult:
    """Decode the dev set at every grid point; the lexicographically first minimum wins.

    An utterance whose search collapses counts as an empty hypothesis at that
    point, so fragile settings lose on WER instead of aborting the sweep.
    """
    cfg = cfg or decoder.cfg
    names = [f.name for f in model.decomposition.factors] if cfg.factors is None else list(cfg.factors)
    points = grid.points(names)
    hyps: list[dict] = [dict() for _ in points]
    failed = [0] * len(points)
    refs = {u.utt_id: list(u.words) for u in dev}
    for u in dev:
        fs = factor_scores(model, priors, model.encode(u.frames), factors=cfg.factors)
        for k, (ps, lm_scale) in enumerate(points):
            pcfg = replace(cfg, prior_scales=dict(zip(names, ps)), lm_scale=lm_scale)
            try:
                hyps[k][u.utt_id] = decoder.decode_factor_scores(fs, pcfg).words
            except DecodeError as e:
                log.debug("grid point prior=%s lm=%g, utterance %s: %s", ps, lm_scale, u.utt_id, e)
                hyps[k][u.utt_id] = []
                failed[k] += 1
    table = [(ps, lm, wer(refs, h).wer, f) for (ps, lm), h, f in zip(points, hyps, failed)]
    if sum(failed):
        log.warning("%d decodes collapsed during the grid search", sum(failed))
    best = min(range(len(table)), key=lambda k: (table[k][2], k))
    ps, lm, w, _ = table[best]
    return GridResult(dict(zip(names, ps)), lm, w, table)


def decode_corpus(model, priors, corpus: Corpus, decoder: Decoder, cfg: DecoderConfig):
    """Decode a corpus; collapsed utterances are scored as empty hypotheses and counted."""
    hyps, active, seconds, failed = {}, [], 0.0, 0
    for u in corpus:
        try:
            res = decoder.decode(model, priors, u.frames, cfg)
        except DecodeError as e:
            log.warning("utterance %s: %s", u.utt_id, e)
            hyps[u.utt_id] = []
            failed += 1
            continue
        hyps[u.utt_id] = res.words
        active.append(res.active_counts.mean())
        seconds += res.seconds
    refs = {u.utt_id: list(u.words) for u in corpus}
    return wer(refs, hyps), hyps, float(np.mean(active)) if active else 0.0, seconds, failed


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class ModelRow:
    name: str
    decomposition: str
    stages: tuple[str, ...] = ()
    include_right_branch: bool = False
    factors: tuple[str, ...] | None = None  # partial-factor decoding
    source: str | None = None  # reuse the trained model of another row


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    dims: ModelDims = field(default_factory=ModelDims)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage_epochs: dict = field(default_factory=dict)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    prior_utterances: int = 500
    seeds: tuple[int, ...] = (0,)
    rows: list[ModelRow] = field(default_factory=lambda: [ModelRow("mono", "monophone")])


@dataclass
class Workspace:
    lexicon: Lexicon
    lm: NgramLM
    train: Corpus
    dev: Corpus
    test: Corpus


def prepare_data(exp: ExperimentConfig) -> Workspace:
    g = exp.generator
    lex = generate_lexicon(g)
    train = generate_corpus(g, lex, exp.n_train, stream=0, prefix="train")
    dev = generate_corpus(g, lex, exp.n_dev, stream=1, prefix="dev")
    test = generate_corpus(g, lex, exp.n_test, stream=2, prefix="test")
    lm = NgramLM.train([[lex.names[w] for w in u.words] for u in train], lex.names, order=2)
    return Workspace(lex, lm, train, dev, test)


REPORT_COLUMNS = ("name", "decomposition", "stages", "right_branch", "factors", "seed", "dev_wer",
                  "test_wer", "sub", "del", "ins", "ref_words", "prior_scales", "lm_scale", "mean_active", "failed_utts")


def train_row(row: ModelRow, exp: ExperimentConfig, ws: Workspace, seed: int) -> FactoredModel:
    plan = StagePlan(tuple(row.stages), dict(exp.stage_epochs), row.include_right_branch)
    hyper = replace(exp.train, seed=seed)
    return run_stage_plan(plan, row.decomposition, ws.train, ws.dev, exp.dims, hyper, seed=seed,
                          inv=exp.generator.inventory)


def run_comparison(exp: ExperimentConfig, ws: Workspace | None = None,
                   cache: dict | None = None) -> tuple[list[dict], list[dict]]:
    """Train, tune and test every row for every seed.

    Returns (report rows, timing rows).  Report rows hold only deterministic
    values; wall-clock figures go to the timing rows.  ``cache`` may carry
    trained models between calls, keyed by (decomposition, stages, branch, seed).
    """
    ws = ws or prepare_data(exp)
    cache = {} if cache is None else cache
    inv = exp.generator.inventory
    decoder = Decoder(ws.lexicon, ws.lm, inv, exp.decoder)
    report, timing = [], []
    by_name = {r.name: r for r in exp.rows}
    for row in exp.rows:
        src = by_name[row.source] if row.source else row
        for seed in exp.seeds:
            key = (src.decomposition, tuple(src.stages), src.include_right_branch, seed, exp.generator.alpha)
            try:
                t0 = time.perf_counter()
                if key not in cache:
                    model = train_row(src, exp, ws, seed)
                    priors = estimate_priors(model, ws.train, max_utterances=exp.prior_utterances)
                    cache[key] = (model, priors)
                model, priors = cache[key]
                t_train = time.perf_counter() - t0
                cfg = replace(exp.decoder, factors=row.factors)
                t1 = time.perf_counter()
                g = grid_search(model, priors, ws.dev, decoder, exp.grid, cfg)
                best = replace(cfg, prior_scales=g.prior_scales, lm_scale=g.lm_scale)
                rep, _hyps, mean_active, dec_s, n_failed = decode_corpus(model, priors, ws.test, decoder, best)
                t_dec = time.perf_counter() - t1
            except Exception as e:  # one failing row must not sink the table
                log.exception("row %s seed %d failed", row.name, seed)
                report.append({"name": row.name, "decomposition": row.decomposition, "seed": seed,
                               "test_wer": "failed", "error": type(e).__name__})
                continue
            report.append({
                "name": row.name, "decomposition": row.decomposition,
                "stages": "+".join(model.stage_history), "right_branch": int(src.include_right_branch),
                "factors": ",".join(row.factors) if row.factors else "all", "seed": seed,
                "dev_wer": round(g.wer, 4), "test_wer": round(rep.wer, 4), "sub": rep.substitutions,
                "del": rep.deletions, "ins": rep.insertions, "ref_words": rep.ref_words,
                "prior_scales": ",".join(f"{v:g}" for v in g.prior_scales.values()),
                "lm_scale": f"{g.lm_scale:g}", "mean_active": round(mean_active, 2), "failed_utts": n_failed,
            })
            timing.append({"name": row.name, "seed": seed, "train_s": round(t_train, 2),
                           "tune_and_test_s": round(t_dec, 2), "test_decode_s": round(dec_s, 2)})
            log.info("%s seed %d: test WER %.2f (dev %.2f, prior %s, lm %g)", row.name, seed, rep.wer, g.wer,
                     g.prior_scales, g.lm_scale)
    return report, timing


def median_wer(report: list[dict], name: str) -> float:
    vals = [r["test_wer"] for r in report if r["name"] == name and r["test_wer"] != "failed"]
    if not vals:
        raise ValueError(f"no successful runs for {name}")
    return float(statistics.median(vals))


def report_tsv(report: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(REPORT_COLUMNS) + ["error"], delimiter="\t", lineterminator="\n",
                       extrasaction="ignore")
    w.writeheader()
    for row in report:
        w.writerow(row)
    return buf.getvalue()


def report_text(report: list[dict]) -> str:
    names = list(dict.fromkeys(r["name"] for r in report))
    lines = [f"{'model':<22} {'decomposition':<14} {'median test WER':>16}  seeds"]
    for n in names:
        rows = [r for r in report if r["name"] == n]
        try:
            med = f"{median_wer(report, n):.2f}"
        except ValueError:
            med = "failed"
        per = " ".join(str(r["test_wer"]) for r in rows)
        lines.append(f"{n:<22} {rows[0]['decomposition']:<14} {med:>16}  {per}")
    return "\n".join(lines) + "\n"


def write_report(report: list[dict], timing: list[dict], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.tsv").write_text(report_tsv(report))
    (out / "report.txt").write_text(report_text(report))
    buf = io.StringIO()
    if timing:
        w = csv.DictWriter(buf, fieldnames=list(timing[0]), delimiter="\t", lineterminator="\n")
        w.writeheader()
        w.writerows(timing)
    (out / "timing.tsv").write_text(buf.getvalue())


TABLE1_ROWS = [
    ModelRow("fwd-no-pretrain", "tri-forward"),
    ModelRow("fwd-di-only", "tri-forward", ("diphone",)),
    ModelRow("fwd-mono-only", "tri-forward", ("monophone",)),
    ModelRow("fwd-mono-di", "tri-forward", ("monophone", "diphone")),
    ModelRow("fwd-mono-di-right", "tri-forward", ("monophone", "diphone"), include_right_branch=True),
]

TABLE3_ROWS = [
    ModelRow("monophone", "monophone"),
    ModelRow("diphone", "diphone", ("monophone",)),
    ModelRow("tri-forward", "tri-forward", ("monophone", "diphone")),
    ModelRow("tri-symmetric", "tri-symmetric", ("monophone",)),
    ModelRow("tri-backward", "tri-backward", ("monophone",)),
    ModelRow("tri-symmetric-center-only", "tri-symmetric", factors=("c|l,r",), source="tri-symmetric"),
]
