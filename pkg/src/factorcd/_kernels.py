"""Search kernels with a numba path and a pure-numpy fallback.

Set ``FACTORCD_NUMBA=0`` to force the numpy implementations (numba is used
whenever it imports otherwise).  Both paths break ties identically so their
results are bitwise equal.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NEG_INF = -np.inf


def numba_enabled() -> bool:
    return numba is not None and os.environ.get("FACTORCD_NUMBA", "1") not in ("0", "false", "no")


# ---------------------------------------------------------------------------
# time-synchronous Viterbi beam search over a compiled state graph
#
# Returns (status, final_score, final_state, final_hist, links_word,
# links_prev, n_links, active_counts).  status = -1 on success, otherwise the
# frame index at which every hypothesis was pruned or blocked.


def _viterbi_py(scores, state_ctx, edge_ptr, edge_dst, edge_trans, edge_lm, edge_word,
                lm_scale, init_state, final_lm, max_active, score_beam, word_end_beam):
    T = scores.shape[0]
    n = state_ctx.shape[0]
    best = np.full(n, NEG_INF)
    best_edge = np.full(n, -1, dtype=np.int64)
    best_hist = np.full(n, -1, dtype=np.int64)
    touched = np.empty(n, dtype=np.int64)

    cap = 1024
    links_word = np.empty(cap, dtype=np.int64)
    links_prev = np.empty(cap, dtype=np.int64)
    n_links = 0
    counts = np.zeros(T, dtype=np.int64)

    act = np.empty(1, dtype=np.int64)
    act[0] = init_state
    act_score = np.empty(1)
    act_score[0] = scores[0, state_ctx[init_state]]
    act_hist = np.full(1, -1, dtype=np.int64)
    counts[0] = 1
    if act_score[0] == NEG_INF:
        return 0, NEG_INF, -1, -1, links_word, links_prev, n_links, counts

    for t in range(1, T):
        frame_best = NEG_INF
        for i in range(act.shape[0]):
            if act_score[i] > frame_best:
                frame_best = act_score[i]
        n_touched = 0
        for i in range(act.shape[0]):
            s = act[i]
            sc = act_score[i]
            h = act_hist[i]
            for e in range(edge_ptr[s], edge_ptr[s + 1]):
                if edge_word[e] >= 0 and sc < frame_best - word_end_beam:
                    continue
                d = edge_dst[e]
                cand = sc + edge_trans[e] + lm_scale * edge_lm[e]
                if best_edge[d] < 0:
                    touched[n_touched] = d
                    n_touched += 1
                    best[d] = cand
                    best_edge[d] = e
                    best_hist[d] = h
                elif cand > best[d] or (cand == best[d] and e < best_edge[d]):
                    best[d] = cand
                    best_edge[d] = e
                    best_hist[d] = h
        top = NEG_INF
        for k in range(n_touched):
            d = touched[k]
            best[d] = best[d] + scores[t, state_ctx[d]]
            if best[d] > top:
                top = best[d]
        keep = np.empty(n_touched, dtype=np.int64)
        n_keep = 0
        if top > NEG_INF:
            thr = top - score_beam
            for k in range(n_touched):
                d = touched[k]
                if best[d] >= thr and best[d] > NEG_INF:
                    keep[n_keep] = d
                    n_keep += 1
        keep = np.sort(keep[:n_keep])
        if n_keep > max_active:
            # top max_active by score, ties to the lower state id (keep is id-sorted)
            vals = best[keep]
            kth = np.partition(vals, n_keep - max_active)[n_keep - max_active]
            need = max_active
            for k in range(n_keep):
                if vals[k] > kth:
                    need -= 1
            m = 0
            for k in range(n_keep):
                if vals[k] > kth or (vals[k] == kth and need > 0):
                    if vals[k] == kth:
                        need -= 1
                    keep[m] = keep[k]
                    m += 1
            keep = keep[:m]
            n_keep = m
        if n_links + n_keep > cap:
            while n_links + n_keep > cap:
                cap *= 2
            lw = np.empty(cap, dtype=np.int64)
            lp = np.empty(cap, dtype=np.int64)
            lw[:n_links] = links_word[:n_links]
            lp[:n_links] = links_prev[:n_links]
            links_word = lw
            links_prev = lp
        act = keep
        act_score = np.empty(n_keep)
        act_hist = np.empty(n_keep, dtype=np.int64)
        for k in range(n_keep):
            d = keep[k]
            act_score[k] = best[d]
            e = best_edge[d]
            if edge_word[e] >= 0:
                links_word[n_links] = edge_word[e]
                links_prev[n_links] = best_hist[d]
                act_hist[k] = n_links
                n_links += 1
            else:
                act_hist[k] = best_hist[d]
        for k in range(n_touched):
            d = touched[k]
            best[d] = NEG_INF
            best_edge[d] = -1
            best_hist[d] = -1
        counts[t] = n_keep
        if n_keep == 0:
            return t, NEG_INF, -1, -1, links_word, links_prev, n_links, counts

    final_score = NEG_INF
    final_state = -1
    final_hist = -1
    for i in range(act.shape[0]):
        s = act[i]
        if final_lm[s] == NEG_INF:
            continue
        total = act_score[i] + lm_scale * final_lm[s]
        if total > final_score:
            final_score = total
            final_state = s
            final_hist = act_hist[i]
    status = -1 if final_state >= 0 else T - 1
    return status, final_score, final_state, final_hist, links_word, links_prev, n_links, counts


def _viterbi_np(scores, state_ctx, edge_ptr, edge_dst, edge_trans, edge_lm, edge_word,
                lm_scale, init_state, final_lm, max_active, score_beam, word_end_beam):
    T = scores.shape[0]
    counts = np.zeros(T, dtype=np.int64)
    words_out: list[np.ndarray] = []
    prev_out: list[np.ndarray] = []
    n_links = 0
    act = np.array([init_state], dtype=np.int64)
    act_score = np.array([scores[0, state_ctx[init_state]]])
    act_hist = np.array([-1], dtype=np.int64)
    counts[0] = 1
    empty = np.empty(0, dtype=np.int64)
    if act_score[0] == NEG_INF:
        return 0, NEG_INF, -1, -1, empty, empty, 0, counts
    for t in range(1, T):
        frame_best = act_score.max()
        start, stop = edge_ptr[act], edge_ptr[act + 1]
        n_out = stop - start
        rep = np.repeat(np.arange(len(act)), n_out)
        e = np.repeat(start - np.cumsum(n_out) + n_out, n_out) + np.arange(n_out.sum())
        sc = act_score[rep]
        ok = ~((edge_word[e] >= 0) & (sc < frame_best - word_end_beam))
        e, rep, sc = e[ok], rep[ok], sc[ok]
        cand = sc + edge_trans[e] + lm_scale * edge_lm[e]
        dst = edge_dst[e]
        order = np.lexsort((e, -cand, dst))
        dsorted = dst[order]
        first = order[np.r_[True, dsorted[1:] != dsorted[:-1]]] if len(order) else order
        states = dst[first]
        new_score = cand[first] + scores[t, state_ctx[states]]
        top = new_score.max() if len(new_score) else NEG_INF
        if top > NEG_INF:
            mask = (new_score >= top - score_beam) & (new_score > NEG_INF)
        else:
            mask = np.zeros(len(new_score), dtype=bool)
        keep = np.flatnonzero(mask)
        if len(keep) > max_active:
            vals = new_score[keep]
            kth = np.partition(vals, len(vals) - max_active)[len(vals) - max_active]
            above = vals > kth
            ties = np.flatnonzero(vals == kth)[: max_active - int(above.sum())]
            above[ties] = True
            keep = keep[above]
        win_edge = e[first][keep]
        win_hist = act_hist[rep[first][keep]]
        act = states[keep]
        act_score = new_score[keep]
        is_word = edge_word[win_edge] >= 0
        n_new = int(is_word.sum())
        act_hist = win_hist.copy()
        act_hist[is_word] = n_links + np.arange(n_new)
        words_out.append(edge_word[win_edge][is_word])
        prev_out.append(win_hist[is_word])
        n_links += n_new
        counts[t] = len(act)
        if len(act) == 0:
            lw = np.concatenate(words_out) if words_out else empty
            lp = np.concatenate(prev_out) if prev_out else empty
            return t, NEG_INF, -1, -1, lw, lp, n_links, counts
    lw = np.concatenate(words_out) if words_out else empty
    lp = np.concatenate(prev_out) if prev_out else empty
    fl = final_lm[act]
    ok = fl > NEG_INF
    if not ok.any():
        return T - 1, NEG_INF, -1, -1, lw, lp, n_links, counts
    total = np.where(ok, act_score + lm_scale * np.where(ok, fl, 0.0), NEG_INF)
    k = int(np.argmax(total))
    return -1, float(total[k]), int(act[k]), int(act_hist[k]), lw, lp, n_links, counts


# ---------------------------------------------------------------------------
# forced alignment through a linear left-to-right HMM


def _align_py(scores, state_ctx, loop, fwd):
    T = scores.shape[0]
    n = state_ctx.shape[0]
    delta = np.full((T, n), NEG_INF)
    back = np.zeros((T, n), dtype=np.int8)
    delta[0, 0] = scores[0, state_ctx[0]]
    for t in range(1, T):
        for j in range(n):
            stay = delta[t - 1, j] + loop[j]
            move = delta[t - 1, j - 1] + fwd[j - 1] if j > 0 else NEG_INF
            if move > stay:
                delta[t, j] = move + scores[t, state_ctx[j]]
                back[t, j] = 1
            else:
                delta[t, j] = stay + scores[t, state_ctx[j]]
    path = np.empty(T, dtype=np.int64)
    j = n - 1
    for t in range(T - 1, -1, -1):
        path[t] = j
        if t > 0 and back[t, j] == 1:
            j -= 1
    return delta[T - 1, n - 1], path


def _align_np(scores, state_ctx, loop, fwd):
    T = scores.shape[0]
    n = state_ctx.shape[0]
    delta = np.full(n, NEG_INF)
    delta[0] = scores[0, state_ctx[0]]
    back = np.zeros((T, n), dtype=np.int8)
    for t in range(1, T):
        stay = delta + loop
        move = np.full(n, NEG_INF)
        move[1:] = delta[:-1] + fwd[:-1]
        choose = move > stay
        back[t] = choose
        delta = np.where(choose, move, stay) + scores[t, state_ctx]
    path = np.empty(T, dtype=np.int64)
    j = n - 1
    for t in range(T - 1, -1, -1):
        path[t] = j
        if t > 0 and back[t, j] == 1:
            j -= 1
    return delta[n - 1], path


if numba is not None:
    _viterbi_jit = numba.njit(cache=True)(_viterbi_py)
    _align_jit = numba.njit(cache=True)(_align_py)
else:  # pragma: no cover
    _viterbi_jit = _align_jit = None


def viterbi_search(*args, use_numba: bool | None = None):
    if use_numba is None:
        use_numba = numba_enabled()
    return _viterbi_jit(*args) if use_numba else _viterbi_np(*args)


def linear_align(scores, state_ctx, loop, fwd, use_numba: bool | None = None):
    if use_numba is None:
        use_numba = numba_enabled()
    fn = _align_jit if use_numba else _align_np
    return fn(np.ascontiguousarray(scores, dtype=np.float64), np.asarray(state_ctx, dtype=np.int64),
              np.asarray(loop, dtype=np.float64), np.asarray(fwd, dtype=np.float64))
