import math

import numpy as np
import pytest

from factorcd.decoder import (DecodeError, Decoder, DecoderConfig, TransitionModel, align_scores,
                              build_prefix_tree, check_tags, compile_graph, decode_scores)
from factorcd.factormodel import FactoredModel, PriorTable
from factorcd.inventory import PhonemeInventory, context_id, context_table
from factorcd.lm import NgramLM
from factorcd.oracle import exhaustive_decode
from factorcd.synthcorpus import (EmissionTables, GeneratorConfig, Lexicon, generate_corpus,
                                  generate_lexicon)

WIDE = DecoderConfig(beam=10 ** 6, score_beam=math.inf, lm_scale=2.0)


def truth_scores(inv, utt, rng, hit=4.0, noise=1.0):
    """Score table favouring each frame's true context (plus noise)."""
    n = inv.n_contexts
    s = rng.normal(0.0, noise, size=(utt.n_frames, n))
    ids = context_id(inv, utt.alignment[:, 0], utt.alignment[:, 1], utt.alignment[:, 2])
    s[np.arange(utt.n_frames), ids] += hit
    return s


@pytest.fixture(scope="module")
def setup():
    cfg = GeneratorConfig(n_phonemes=4, dim=6, n_words=5, word_length=(2, 3), utterance_words=(1, 3), seed=5)
    lex = generate_lexicon(cfg)
    train = generate_corpus(cfg, lex, 100)
    lm = NgramLM.train([[lex.names[w] for w in u.words] for u in train], lex.names)
    test = generate_corpus(cfg, lex, 12, stream=2)
    return cfg, lex, lm, test


def test_tree_shares_prefixes():
    lex = Lexicon([(0, 1), (0, 2)])
    tree = build_prefix_tree(lex)
    root = tree.nodes[0]
    assert list(root.children) == [0]
    a = tree.nodes[root.children[0]]
    assert sorted(a.children) == [1, 2] and tree.n_nodes == 3


def test_single_word_chain_and_node_bound():
    tree = build_prefix_tree(Lexicon([(2, 0, 1)]))
    assert tree.num_states == 9
    lex = generate_lexicon(GeneratorConfig(n_phonemes=3, n_words=30, seed=2))
    tree = build_prefix_tree(lex)
    assert tree.n_nodes <= sum(len(p) for p in lex.prons)
    for w, pron in enumerate(lex.prons):
        assert w in tree.nodes[tree.word_end(pron)].words
        assert tree.path(tree.word_end(pron)) == list(pron)


def test_homophones_fork_at_word_end():
    tree = build_prefix_tree(Lexicon([(0, 1), (0, 1)]))
    assert tree.n_nodes == 2 and tree.nodes[tree.word_end((0, 1))].words == [0, 1]


def test_empty_lexicon_rejected():
    with pytest.raises(ValueError):
        build_prefix_tree(Lexicon([]))


def test_single_word_lexicon_always_wins(rng):
    inv = PhonemeInventory.default(3)
    lex = Lexicon([(0, 2)])
    lm = NgramLM.train([], lex.names, order=1)
    dec = Decoder(lex, lm, inv, WIDE)
    for T in (8, 20):
        res = decode_scores(rng.normal(size=(T, inv.n_contexts)), dec.graph, WIDE)
        assert set(res.words) == {0} and np.isfinite(res.score)


def test_matches_exhaustive_on_toy_utterances(setup, rng):
    cfg, lex, lm, test = setup
    inv = cfg.inventory
    dec = Decoder(lex, lm, inv, WIDE)
    for u in test[:6]:
        s = truth_scores(inv, u, rng)
        res = decode_scores(s, dec.graph, WIDE)
        words, score = exhaustive_decode(s, lex, lm, inv, WIDE.lm_scale, 3)
        assert res.words == words and math.isclose(res.score, score, rel_tol=0, abs_tol=1e-8)


def test_numba_and_numpy_backends_agree(setup, rng):
    cfg, lex, lm, test = setup
    dec = Decoder(lex, lm, cfg.inventory, WIDE)
    for beam, score_beam in [(10 ** 6, math.inf), (50, 8.0), (300, 20.0)]:
        dcfg = DecoderConfig(beam=beam, score_beam=score_beam, lm_scale=2.0)
        for u in test[:4]:
            s = truth_scores(cfg.inventory, u, rng, hit=2.0, noise=2.0)
            try:
                a = decode_scores(s, dec.graph, dcfg, use_numba=True)
            except DecodeError as e:
                with pytest.raises(DecodeError, match=str(e).split(":")[0]):
                    decode_scores(s, dec.graph, dcfg, use_numba=False)
                continue
            b = decode_scores(s, dec.graph, dcfg, use_numba=False)
            assert a.words == b.words and a.score == b.score
            assert np.array_equal(a.active_counts, b.active_counts)
            assert a.active_counts.max() <= beam


def test_backends_agree_under_histogram_pruning_with_ties(setup, rng):
    cfg, lex, lm, test = setup
    dec = Decoder(lex, lm, cfg.inventory, WIDE)
    for beam in (7, 40):
        dcfg = DecoderConfig(beam=beam, score_beam=math.inf, lm_scale=0.0)
        for u in test[:4]:
            s = np.round(truth_scores(cfg.inventory, u, rng, hit=2.0, noise=1.0))
            a = decode_scores(s, dec.graph, dcfg, use_numba=True)
            b = decode_scores(s, dec.graph, dcfg, use_numba=False)
            assert a.words == b.words and a.score == b.score
            assert np.array_equal(a.active_counts, b.active_counts)
            assert a.active_counts.max() == beam


def test_shift_and_joint_scaling_invariance(setup, rng):
    cfg, lex, lm, test = setup
    dec = Decoder(lex, lm, cfg.inventory, WIDE)
    for u in test[:4]:
        s = truth_scores(cfg.inventory, u, rng, hit=2.0, noise=1.5)
        base = decode_scores(s, dec.graph, WIDE).words
        assert decode_scores(s + 3.7, dec.graph, WIDE).words == base
        scaled = DecoderConfig(beam=WIDE.beam, score_beam=math.inf, lm_scale=WIDE.lm_scale * 2.5)
        assert decode_scores(s * 2.5, dec.graph, scaled).words == base


def test_wider_beam_never_lowers_score(setup, rng):
    cfg, lex, lm, test = setup
    dec = Decoder(lex, lm, cfg.inventory, WIDE)
    u = test[3]
    s = truth_scores(cfg.inventory, u, rng, hit=1.5, noise=2.0)
    prev = -math.inf
    for sb in (15.0, 30.0, 60.0, math.inf):
        try:
            res = decode_scores(s, dec.graph, DecoderConfig(beam=10 ** 6, score_beam=sb, lm_scale=2.0))
        except DecodeError:
            continue
        assert res.score >= prev - 1e-9
        prev = res.score


def test_beam_collapse_reports_frame(setup):
    cfg, lex, lm, _ = setup
    dec = Decoder(lex, lm, cfg.inventory, WIDE)
    s = np.zeros((12, cfg.inventory.n_contexts))
    s[5] = -np.inf
    with pytest.raises(DecodeError, match="frame 5"):
        decode_scores(s, dec.graph, WIDE)


def test_within_word_context_only_graph(setup, rng):
    cfg, lex, lm, test = setup
    inv = cfg.inventory
    tree = build_prefix_tree(lex)
    full = compile_graph(tree, lex, lm, inv)
    ww = compile_graph(tree, lex, lm, inv, within_word_context_only=True)
    assert ww.n_states < full.n_states
    table = context_table(inv)
    last = table[ww.state_ctx]
    # every word-final state now sees a silence right context
    assert np.any(last[:, 2] == inv.sil)
    res = decode_scores(truth_scores(inv, test[0], rng), ww, WIDE)
    assert np.isfinite(res.score)


def test_transition_model_validation():
    with pytest.raises(ValueError):
        TransitionModel(loop=1.0)
    with pytest.raises(ValueError):
        DecoderConfig(beam=0)
    with pytest.raises(ValueError):
        DecoderConfig(lm_scale=-1.0)


def test_tag_mismatch_names_both():
    inv = PhonemeInventory.default(2)
    model = FactoredModel(inv, 3, "tri-forward")
    priors = PriorTable({}, tag="tri-backward")
    with pytest.raises(ValueError, match="tri-forward.*tri-backward"):
        check_tags(model, priors)


def _gauss_scores(cfg, utt):
    tables = EmissionTables(cfg)
    table = context_table(cfg.inventory)
    mu = tables.mean(table[:, 0], table[:, 1], table[:, 2])
    d = ((utt.frames[:, None, :] - mu[None, :, :]) ** 2).sum(axis=-1)
    return -d / (2 * cfg.noise ** 2)


def test_forced_alignment_recovers_boundaries():
    cfg = GeneratorConfig(n_phonemes=4, dim=10, n_words=6, noise=0.05, alpha=0.6, seed=4)
    lex = generate_lexicon(cfg)
    for u in generate_corpus(cfg, lex, 5):
        for use_numba in (True, False):
            score, path = align_scores(_gauss_scores(cfg, u), cfg.inventory, u.phones, use_numba=use_numba)
            starts = np.flatnonzero(np.r_[True, np.diff(path) != 0])
            truth = u.state_segments()
            assert len(starts) == len(truth)
            assert np.max(np.abs(starts - truth)) <= 1


def test_alignment_at_minimum_length_and_optimality(rng):
    inv = PhonemeInventory.default(3)
    phones = [inv.sil, 0, 2, inv.sil]
    n_states = 1 + 3 + 3 + 1
    _, path = align_scores(rng.normal(size=(n_states, inv.n_contexts)), inv, phones)
    assert np.array_equal(path, np.arange(n_states))
    with pytest.raises(DecodeError):
        align_scores(rng.normal(size=(n_states - 1, inv.n_contexts)), inv, phones)
    T = 20
    s = rng.normal(size=(T, inv.n_contexts))
    best, path = align_scores(s, inv, phones)
    from factorcd.decoder import linear_transitions
    from factorcd.inventory import phone_contexts
    ctx = phone_contexts(inv, phones)
    ids = context_id(inv, ctx[:, 0], ctx[:, 1], ctx[:, 2])
    loop, fwd = linear_transitions(inv, ctx, TransitionModel())

    def path_score(p):
        total = s[0, ids[p[0]]]
        for t in range(1, T):
            total += (loop[p[t]] if p[t] == p[t - 1] else fwd[p[t - 1]]) + s[t, ids[p[t]]]
        return total

    assert math.isclose(path_score(path), best, rel_tol=1e-12)
    for _ in range(100):
        cuts = np.sort(rng.choice(np.arange(1, T), n_states - 1, replace=False))
        p = np.repeat(np.arange(n_states), np.diff(np.r_[0, cuts, T]))
        assert path_score(p) <= best + 1e-9
