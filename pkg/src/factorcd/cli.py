"""Command-line entry point: ``factorcd <subcommand> [--config FILE] [--set section.key=value ...]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import oracle
from .config import ConfigError, RunConfig, load_config
from .decoder import DecodeError, Decoder, check_tags
from .evalharness import ExperimentConfig, grid_search, prepare_data, report_text, run_comparison, wer, write_report
from .factormodel import FactoredModel, PriorTable, estimate_priors, model_gradient_check, run_stage_plan
from .inventory import PhonemeInventory
from .lm import NgramLM
from .synthcorpus import CorpusFormatError, Lexicon, read_corpus, write_corpus

log = logging.getLogger("factorcd")

LOG_ENV = "FACTORCD_LOG"


class CliError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"missing {what}: {path} (run the producing subcommand first)")
    return path


class Data:
    """Lazily loaded artifacts of a data directory written by ``gen-data``."""

    def __init__(self, cfg: RunConfig):
        self.dir = cfg.path("data_dir")
        self.inv = PhonemeInventory.read(_need(self.dir / "inventory.txt", "inventory"))
        self.lexicon = Lexicon.read(_need(self.dir / "lexicon.txt", "lexicon"), self.inv)
        self.lm = NgramLM.read_arpa(_need(cfg.path("lm"), "language model"), self.lexicon.names)

    def corpus(self, split: str):
        return read_corpus(_need(self.dir / f"{split}.fcd", f"{split} corpus"))


def _load_model(cfg: RunConfig) -> FactoredModel:
    model = FactoredModel.load(_need(cfg.path("model"), "model checkpoint"))
    if model.decomposition.tag != cfg.decomposition:
        raise CliError(f"decomposition mismatch: model was trained as {model.decomposition.tag!r} "
                       f"but the configuration requests {cfg.decomposition!r}")
    return model


def _load_priors(cfg: RunConfig, model: FactoredModel) -> PriorTable:
    priors = PriorTable.read(_need(cfg.path("priors"), "prior table"), model.inv)
    try:
        check_tags(model, priors)
    except ValueError as e:
        raise CliError(str(e)) from None
    return priors


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    sizes = cfg.split_sizes()
    exp = ExperimentConfig(generator=cfg.generator(), n_train=sizes["train"], n_dev=sizes["dev"],
                           n_test=sizes["test"])
    ws = prepare_data(exp)
    out = cfg.path("data_dir")
    out.mkdir(parents=True, exist_ok=True)
    exp.generator.inventory.write(out / "inventory.txt")
    ws.lexicon.write(out / "lexicon.txt", exp.generator.inventory)
    cfg.path("lm").parent.mkdir(parents=True, exist_ok=True)
    ws.lm.write_arpa(cfg.path("lm"))
    for split in ("train", "dev", "test"):
        write_corpus(getattr(ws, split), out / f"{split}.fcd")
    print(f"wrote {sizes['train']}/{sizes['dev']}/{sizes['test']} utterances to {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    data = Data(cfg)
    train, dev = data.corpus("train"), data.corpus("dev")
    model = run_stage_plan(cfg.stage_plan(), cfg.decomposition, train, dev, cfg.dims(), cfg.train(),
                           seed=cfg.seed, inv=data.inv)
    path = cfg.path("model")
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    print(f"saved {cfg.decomposition} model ({'+'.join(model.stage_history)}) to {path}")
    return 0


def cmd_priors(cfg: RunConfig, args) -> int:
    data = Data(cfg)
    model = _load_model(cfg)
    priors = estimate_priors(model, data.corpus("train"), floor=cfg.get("priors", "floor", 1e-6),
                             max_utterances=cfg.get("priors", "max_utterances", 500))
    path = cfg.path("priors")
    priors.write(path)
    print(f"wrote priors for {', '.join(priors.tables)} to {path}")
    return 0


def _hyp_path(cfg: RunConfig, split: str, given: str | None) -> Path:
    return Path(given) if given else cfg.out_dir / f"hyp.{split}.txt"


def cmd_decode(cfg: RunConfig, args) -> int:
    data = Data(cfg)
    model = _load_model(cfg)
    priors = _load_priors(cfg, model)
    dcfg = cfg.decoder()
    decoder = Decoder(data.lexicon, data.lm, data.inv, dcfg)
    lines, stats = [], ["utt_id\tframes\tmean_active\tmax_active\tscore\tseconds"]
    for u in data.corpus(args.split):
        res = decoder.decode(model, priors, u.frames, dcfg)
        lines.append(" ".join([u.utt_id, *(data.lexicon.names[w] for w in res.words)]))
        stats.append(f"{u.utt_id}\t{len(res.active_counts)}\t{res.active_counts.mean():.2f}\t"
                     f"{res.active_counts.max()}\t{res.score:.4f}\t{res.seconds:.4f}")
    out = _hyp_path(cfg, args.split, args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    out.with_name(f"decode_stats.{args.split}.tsv").write_text("\n".join(stats) + "\n")
    print(f"decoded {len(lines)} utterances to {out}")
    return 0


def _read_transcripts(path: Path) -> dict[str, list[str]]:
    out = {}
    for k, line in enumerate(_need(path, "transcript file").read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in out:
            raise CliError(f"{path}:{k}: duplicate utterance id {parts[0]!r}")
        out[parts[0]] = parts[1:]
    return out


def cmd_score(cfg: RunConfig, args) -> int:
    hyps = _read_transcripts(_hyp_path(cfg, args.split, args.hyp))
    if args.ref:
        refs = _read_transcripts(Path(args.ref))
    else:
        data = Data(cfg)
        refs = {u.utt_id: [data.lexicon.names[w] for w in u.words] for u in data.corpus(args.split)}
    try:
        rep = wer(refs, hyps)
    except KeyError as e:
        raise CliError(f"reference and hypothesis ids differ: {e.args[0]}") from None
    print(f"WER {rep.wer:.2f}% [S={rep.substitutions} D={rep.deletions} I={rep.insertions} N={rep.ref_words}]")
    return 0


def cmd_grid_search(cfg: RunConfig, args) -> int:
    data = Data(cfg)
    model = _load_model(cfg)
    priors = _load_priors(cfg, model)
    dcfg = cfg.decoder()
    decoder = Decoder(data.lexicon, data.lm, data.inv, dcfg)
    res = grid_search(model, priors, data.corpus("dev"), decoder, cfg.grid(), dcfg)
    out = cfg.path("report_dir")
    out.mkdir(parents=True, exist_ok=True)
    rows = ["prior_scales\tlm_scale\tdev_wer\tfailed_utts"]
    rows += [f"{','.join(f'{v:g}' for v in ps)}\t{lm:g}\t{w:.4f}\t{n}" for ps, lm, w, n in res.table]
    (out / "grid.tsv").write_text("\n".join(rows) + "\n")
    print(f"best prior scales {json.dumps(res.prior_scales)} lm scale {res.lm_scale:g} dev WER {res.wer:.2f}")
    return 0


def cmd_run_comparison(cfg: RunConfig, args) -> int:
    report, timing = run_comparison(cfg.experiment())
    out = cfg.path("report_dir")
    write_report(report, timing, out)
    sys.stdout.write(report_text(report))
    failed = [r["name"] for r in report if r.get("test_wer") == "failed"]
    if failed:
        log.error("rows failed: %s", ", ".join(sorted(set(failed))))
        return 1
    return 0


def cmd_oracle_check(cfg: RunConfig, args) -> int:
    worst = 0.0
    for k in range(args.tasks):
        rng = np.random.default_rng([cfg.seed, k])
        task = oracle.random_task(int(rng.integers(1, 4)), int(rng.integers(2, 9)), seed=int(rng.integers(2**31)))
        for tag in ("tri-forward", "tri-backward"):
            worst = max(worst, oracle.chain_rule_deviation(task, tag))
    print(f"max factorization deviation {worst:.3e} over {args.tasks} tasks")
    if not worst < 1e-10:
        raise CliError(f"factorization deviation {worst:.3e} exceeds 1e-10")
    return 0


def cmd_grad_check(cfg: RunConfig, args) -> int:
    worst = 0.0
    for gamma in (0.0, 2.0):
        for tag in ("monophone", "diphone", "tri-forward", "tri-symmetric", "tri-backward"):
            errs = model_gradient_check(tag, gamma, seed=cfg.seed)
            worst = max(worst, max(errs.values()))
            log.debug("%s gamma=%g %s", tag, gamma, errs)
    print(f"max relative gradient error {worst:.3e}")
    if not worst < 1e-4:
        raise CliError(f"gradient check failed: relative error {worst:.3e}")
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate corpora, lexicon and LM"),
    "train": (cmd_train, "train a model with the configured stage plan"),
    "priors": (cmd_priors, "estimate factor priors from the training corpus"),
    "decode": (cmd_decode, "decode a split to a hypothesis file"),
    "score": (cmd_score, "score hypotheses against references"),
    "grid-search": (cmd_grid_search, "tune prior and LM scales on the dev split"),
    "run-comparison": (cmd_run_comparison, "train, tune and test the configured model set"),
    "oracle-check": (cmd_oracle_check, "verify exact factorization identities on tabular tasks"),
    "grad-check": (cmd_grad_check, "compare analytic and finite-difference gradients"),
}


# file flags that are shorthand for [paths] overrides
PATH_FLAGS = {"out": "data_dir", "corpus": "data_dir", "model": "model", "priors": "priors", "lm": "lm"}
PATH_FLAGS_FOR = {
    "train": ("corpus", "model"),
    "priors": ("corpus", "model", "priors"),
    "decode": ("corpus", "model", "priors", "lm"),
    "grid-search": ("corpus", "model", "priors", "lm"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factorcd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value")
        p.add_argument("--seed", type=int, help="override [run] seed")
        if name in ("decode", "score"):
            p.add_argument("--split", default="test", choices=("train", "dev", "test"))
        if name == "gen-data":
            p.add_argument("--out", help="data directory (overrides [paths] data_dir)")
        if name in PATH_FLAGS_FOR:
            for flag in PATH_FLAGS_FOR[name]:
                p.add_argument(f"--{flag}", help=f"overrides [paths] {PATH_FLAGS[flag]}")
        if name == "decode":
            p.add_argument("--output", help="hypothesis file (default OUT_DIR/hyp.SPLIT.txt)")
        if name == "score":
            p.add_argument("--hyp", help="hypothesis file (default OUT_DIR/hyp.SPLIT.txt)")
            p.add_argument("--ref", help="reference transcript file (default: the corpus split)")
        if name == "oracle-check":
            p.add_argument("--tasks", type=int, default=20)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging()
    try:
        overrides = list(args.set) + ([f"run.seed={args.seed}"] if args.seed is not None else [])
        overrides += [f"paths.{key}={getattr(args, flag)}" for flag, key in PATH_FLAGS.items()
                      if getattr(args, flag, None) is not None]
        cfg = load_config(args.config, overrides)
        log.info("command %s, seed %d", args.command, cfg.seed)
        log.info("resolved config %s", json.dumps(cfg.resolved(), sort_keys=True))
        return COMMANDS[args.command][0](cfg, args)
    except (CliError, ConfigError, CorpusFormatError, DecodeError, OSError, ValueError) as e:
        print(f"factorcd {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
