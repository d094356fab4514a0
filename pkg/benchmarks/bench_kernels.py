"""Time the numba and pure-numpy search kernels on the same score tables.

    python benchmarks/bench_kernels.py [--utterances N] [--beam B]

Scores come from the generator's own Gaussian log-likelihoods, so no model
training is needed.  Both backends must return identical results.
"""
import argparse
import math
import time

import numpy as np

from factorcd import _kernels
from factorcd.decoder import Decoder, DecoderConfig, align_scores, decode_scores
from factorcd.inventory import context_table
from factorcd.lm import NgramLM
from factorcd.synthcorpus import EmissionTables, GeneratorConfig, generate_corpus, generate_lexicon


def gaussian_scores(cfg, tables, table, utt):
    mu = tables.mean(table[:, 0], table[:, 1], table[:, 2])
    d = (utt.frames ** 2).sum(1)[:, None] - 2 * utt.frames @ mu.T + (mu ** 2).sum(1)[None, :]
    return -d / (2 * cfg.noise ** 2)


def timed(fn, repeat):
    best = math.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--utterances", type=int, default=10)
    ap.add_argument("--beam", type=int, default=2000)
    ap.add_argument("--score-beam", type=float, default=200.0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    cfg = GeneratorConfig(noise=3.0)
    lex = generate_lexicon(cfg)
    train = generate_corpus(cfg, lex, 300)
    lm = NgramLM.train([[lex.names[w] for w in u.words] for u in train], lex.names)
    test = generate_corpus(cfg, lex, args.utterances, stream=2)
    tables, table = EmissionTables(cfg), context_table(cfg.inventory)
    scores = [gaussian_scores(cfg, tables, table, u) / 20.0 for u in test]
    dcfg = DecoderConfig(beam=args.beam, score_beam=args.score_beam, lm_scale=2.0)
    dec = Decoder(lex, lm, cfg.inventory, dcfg)
    n_frames = sum(len(s) for s in scores)
    print(f"numba available: {_kernels.numba is not None}; graph states {dec.graph.n_states}, "
          f"{args.utterances} utterances, {n_frames} frames")

    # compile once outside the timing
    decode_scores(scores[0], dec.graph, dcfg, use_numba=True)
    align_scores(scores[0], cfg.inventory, test[0].phones, use_numba=True)

    rows = []
    for name, fn in [
        ("viterbi", lambda nb: [decode_scores(s, dec.graph, dcfg, use_numba=nb) for s in scores]),
        ("align", lambda nb: [align_scores(s, cfg.inventory, u.phones, use_numba=nb) for s, u in zip(scores, test)]),
    ]:
        t_nb, out_nb = timed(lambda: fn(True), args.repeat)
        t_np, out_np = timed(lambda: fn(False), args.repeat)
        if name == "viterbi":
            same = all(a.words == b.words and a.score == b.score for a, b in zip(out_nb, out_np))
        else:
            same = all(a[0] == b[0] and np.array_equal(a[1], b[1]) for a, b in zip(out_nb, out_np))
        rows.append((name, t_nb, t_np, same))

    print(f"{'kernel':<10}{'numba ms/frame':>16}{'numpy ms/frame':>16}{'speedup':>9}  identical")
    for name, t_nb, t_np, same in rows:
        print(f"{name:<10}{1e3 * t_nb / n_frames:>16.4f}{1e3 * t_np / n_frames:>16.4f}{t_np / t_nb:>9.1f}  {same}")


if __name__ == "__main__":
    main()
