"""Exact log-space CTC: loss, greedy decoding, Viterbi forced alignment.

The loss is a fused autodiff primitive: the forward pass runs the standard
blank-interleaved alpha recursion, the backward pass the beta recursion, and
the gradient w.r.t. the per-frame log-probabilities is the negative state
occupancy. Small instances can be cross-checked against ``ctc_oracle``, which
enumerates every frame path.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np

from .numerics import Tensor, as_tensor, record_op, reshape

NEG_INF = -np.inf

ORACLE_MAX_FRAMES = 8
ORACLE_MAX_VOCAB = 5


class CtcInfeasibleError(ValueError):
    """Target cannot be emitted within the given number of frames."""


def min_frames(target: Sequence[int]) -> int:
    """Minimum frames needed: length plus one per adjacent repeated label."""
    t = list(target)
    return len(t) + sum(1 for a, b in zip(t, t[1:]) if a == b)


def expand_with_blanks(target: Sequence[int], blank: int = 0) -> list[int]:
    """Blank-interleaved label sequence of length 2L+1."""
    out = [blank]
    for y in target:
        out.append(int(y))
        out.append(blank)
    return out


def collapse_path(path: Sequence[int], blank: int = 0) -> list[int]:
    """Collapse repeats, then remove blanks."""
    return [k for k, _ in itertools.groupby(path) if k != blank]


def _check_target(target: Sequence[int], valid_len: int, vocab: int, blank: int) -> None:
    for y in target:
        if y == blank:
            raise ValueError("CTC target must not contain the blank id")
        if not 0 <= y < vocab:
            raise ValueError(f"target id {y} outside vocabulary of size {vocab}")
    need = min_frames(target)
    if need > valid_len:
        raise CtcInfeasibleError(
            f"target needs at least {need} frames but only {valid_len} are valid"
        )


def ctc_loss_batch(
    log_probs,
    targets: Sequence[Sequence[int]],
    valid_lens: Sequence[int],
    blank: int = 0,
) -> Tensor:
    """Per-utterance -log P_CTC for a batch; returns a (B,) Tensor.

    ``log_probs`` is (B, R, V) with rows that are log-softmax normalized;
    frames at or beyond each ``valid_lens[b]`` are ignored and receive zero
    gradient.
    """
    lp_t = as_tensor(log_probs)
    lp = lp_t.data
    if lp.ndim != 3:
        raise ValueError("ctc_loss_batch expects (B, R, V) log-probabilities")
    B, R, V = lp.shape
    if len(targets) != B or len(valid_lens) != B:
        raise ValueError("targets/valid_lens must match the batch size")
    valid = np.asarray(valid_lens, dtype=np.int64)
    if (valid < 1).any() or (valid > R).any():
        raise ValueError("valid lengths must lie in [1, R]")
    for tgt, vl in zip(targets, valid):
        _check_target(tgt, int(vl), V, blank)

    expanded = [expand_with_blanks(t, blank) for t in targets]
    S = max(len(e) for e in expanded)
    T = int(valid.max())

    lab = np.full((B, S), blank, dtype=np.int64)
    state_ok = np.zeros((B, S), dtype=bool)
    for b, e in enumerate(expanded):
        lab[b, : len(e)] = e
        state_ok[b, : len(e)] = True
    skip_ok = np.zeros((B, S), dtype=bool)
    if S >= 3:
        skip_ok[:, 2:] = (lab[:, 2:] != blank) & (lab[:, 2:] != lab[:, :-2])
    skip_ok &= state_ok
    s_len = np.array([len(e) for e in expanded], dtype=np.int64)

    b_idx = np.arange(B)[:, None, None]
    t_idx = np.arange(T)[None, :, None]
    lp_lab = lp[b_idx, t_idx, lab[:, None, :]]  # (B, T, S)

    alpha = np.full((B, T, S), NEG_INF)
    first = np.full((B, S), NEG_INF)
    first[:, 0] = lp_lab[:, 0, 0]
    if S >= 2:
        first[:, 1] = np.where(s_len >= 2, lp_lab[:, 0, 1], NEG_INF)
    alpha[:, 0] = np.where(state_ok, first, NEG_INF)
    for t in range(1, T):
        prev = alpha[:, t - 1]
        shift1 = np.full((B, S), NEG_INF)
        shift1[:, 1:] = prev[:, :-1]
        shift2 = np.full((B, S), NEG_INF)
        if S > 2:
            shift2[:, 2:] = prev[:, :-2]
        shift2 = np.where(skip_ok, shift2, NEG_INF)
        cur = np.logaddexp(np.logaddexp(prev, shift1), shift2) + lp_lab[:, t]
        alpha[:, t] = np.where(state_ok, cur, NEG_INF)

    last_t = valid - 1
    end_main = alpha[np.arange(B), last_t, s_len - 1]
    end_alt = np.where(
        s_len >= 2, alpha[np.arange(B), last_t, np.maximum(s_len - 2, 0)], NEG_INF
    )
    log_z = np.logaddexp(end_main, end_alt)
    out = Tensor(-log_z)

    def vjp(g):
        beta = np.full((B, T, S), NEG_INF)
        init = np.full((B, S), NEG_INF)
        init[np.arange(B), s_len - 1] = 0.0
        idx2 = np.maximum(s_len - 2, 0)
        init[np.arange(B), idx2] = np.where(s_len >= 2, 0.0, init[np.arange(B), idx2])
        is_final = (T - 1) == last_t
        beta[:, T - 1] = np.where(is_final[:, None], init, NEG_INF)
        skip_shift = np.concatenate(
            [skip_ok[:, 2:], np.zeros((B, 2), dtype=bool)], axis=1
        )
        for t in range(T - 2, -1, -1):
            q = lp_lab[:, t + 1] + beta[:, t + 1]
            next1 = np.full((B, S), NEG_INF)
            next1[:, :-1] = q[:, 1:]
            next2 = np.full((B, S), NEG_INF)
            if S > 2:
                next2[:, :-2] = q[:, 2:]
            next2 = np.where(skip_shift, next2, NEG_INF)
            cur = np.logaddexp(np.logaddexp(q, next1), next2)
            cur = np.where(state_ok, cur, NEG_INF)
            beta[:, t] = np.where((t == last_t)[:, None], init, cur)

        gamma = alpha + beta - log_z[:, None, None]
        frame_ok = np.arange(T)[None, :, None] < valid[:, None, None]
        occ = np.where(frame_ok, np.exp(gamma), 0.0)
        grad = np.zeros_like(lp)
        tt = np.repeat(np.arange(T), S)
        for b in range(B):
            np.add.at(grad[b], (tt, np.tile(lab[b], T)), occ[b].ravel())
        grad *= -g[:, None, None]
        return (grad,)

    return record_op(out, (lp_t,), vjp)


def ctc_loss(log_probs, target: Sequence[int], valid_len: int, blank: int = 0) -> Tensor:
    """-log P_CTC(target | log_probs[0..valid_len)) as a scalar Tensor."""
    lp = as_tensor(log_probs)
    if lp.data.ndim != 2:
        raise ValueError("ctc_loss expects a (T, V) grid")
    batched = reshape(lp, (1,) + lp.data.shape)
    losses = ctc_loss_batch(batched, [list(target)], [int(valid_len)], blank)
    return reshape(losses, ())


def ctc_oracle(probs: np.ndarray, target: Sequence[int], blank: int = 0) -> float:
    """Total probability of ``target`` by enumerating every frame path.

    Bounded to T <= 8 and V <= 5; this is the independent check for
    ``ctc_loss`` on small instances.
    """
    probs = np.asarray(probs, dtype=np.float64)
    T, V = probs.shape
    if T > ORACLE_MAX_FRAMES or V > ORACLE_MAX_VOCAB:
        raise ValueError(
            f"oracle bounded to T<={ORACLE_MAX_FRAMES}, V<={ORACLE_MAX_VOCAB}"
        )
    want = list(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse_path(path, blank) != want:
            continue
        p = 1.0
        for t, v in enumerate(path):
            p *= probs[t, v]
        total += p
    return total


def all_output_strings(T: int, V: int, blank: int = 0) -> list[tuple[int, ...]]:
    """Every label string emittable within T frames (for normalization sums)."""
    symbols = [v for v in range(V) if v != blank]
    out: list[tuple[int, ...]] = []
    for length in range(T + 1):
        for s in itertools.product(symbols, repeat=length):
            if min_frames(s) <= T:
                out.append(s)
    return out


def greedy_decode(log_probs, valid_len: int, blank: int = 0) -> tuple[list[int], list[int]]:
    """Best-per-frame decode: returns (collapsed tokens, frame path).

    Ties in the per-frame argmax break toward the lowest token id.
    """
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if not 0 <= valid_len <= lp.shape[0]:
        raise ValueError("valid_len outside the grid")
    path = lp[:valid_len].argmax(axis=-1)
    return collapse_path(path, blank), [int(v) for v in path]


def forced_align(log_probs, target: Sequence[int], valid_len: int, blank: int = 0) -> list[int]:
    """Max-probability frame path constrained to emit ``target`` (Viterbi)."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    if lp.ndim != 2:
        raise ValueError("forced_align expects a (T, V) grid")
    T_all, V = lp.shape
    valid_len = int(valid_len)
    if not 1 <= valid_len <= T_all:
        raise ValueError("valid_len outside the grid")
    _check_target(target, valid_len, V, blank)

    lab = np.array(expand_with_blanks(target, blank), dtype=np.int64)
    S = lab.size
    skip_ok = np.zeros(S, dtype=bool)
    if S >= 3:
        skip_ok[2:] = (lab[2:] != blank) & (lab[2:] != lab[:-2])

    lp_lab = lp[:valid_len][:, lab]  # (T, S)
    delta = np.full((valid_len, S), NEG_INF)
    back = np.zeros((valid_len, S), dtype=np.int64)
    delta[0, 0] = lp_lab[0, 0]
    if S >= 2:
        delta[0, 1] = lp_lab[0, 1]
    for t in range(1, valid_len):
        prev = delta[t - 1]
        cand = np.stack(
            [
                prev,
                np.concatenate([[NEG_INF], prev[:-1]]),
                np.where(skip_ok, np.concatenate([[NEG_INF, NEG_INF], prev[:-2]]), NEG_INF),
            ]
        )
        choice = cand.argmax(axis=0)
        delta[t] = cand[choice, np.arange(S)] + lp_lab[t]
        back[t] = choice

    ends = [S - 1] if S < 2 else [S - 1, S - 2]
    s = max(ends, key=lambda e: (delta[valid_len - 1, e], -e))
    path = np.zeros(valid_len, dtype=np.int64)
    for t in range(valid_len - 1, -1, -1):
        path[t] = lab[s]
        if t > 0:
            s -= back[t, s]
    return [int(v) for v in path]


def path_log_prob(log_probs, path: Sequence[int], valid_len: int | None = None) -> float:
    """Log probability of one explicit frame path under the grid."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    n = len(path) if valid_len is None else valid_len
    return float(sum(lp[t, path[t]] for t in range(n)))
