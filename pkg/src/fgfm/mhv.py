"""Multi-head voting: pick the most attended frames of a block.

Each head flags its ``v`` most attended frames, the flags are summed over
heads, the vote map is smoothed with the fixed kernel ``[1, 2, 3, 4, 3, 2, 1]``
and the ``v`` highest-scoring frames are kept. There are no trainable
parameters here; the attention weights upstream decide what gets voted.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as tn
from .errors import DimensionError, SelectionError

VOTE_KERNEL = np.array([1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0])


@dataclass
class ScoreMap:
    votes: np.ndarray     # int, summed over heads
    enhanced: np.ndarray  # float, votes convolved with the kernel


@dataclass
class SelectionResult:
    indices: list               # ascending frame indices (CLS excluded, 0-based over frames)
    representations: tn.Tensor  # [v, D] rows of the block output at those frames
    source_block: int
    score_map: ScoreMap = None


def _check_votes(v, T):
    if not 1 <= v <= T:
        raise SelectionError(f"cannot vote {v} frames out of {T}")


def vote_per_head(attn_row, v):
    row = np.asarray(attn_row, dtype=np.float64)
    _check_votes(v, row.shape[0])
    flags = np.zeros(row.shape[0], dtype=np.int64)
    flags[tn.topk_indices(row, v)] = 1
    return flags


def aggregate_votes(maps):
    maps = [np.asarray(m, dtype=np.int64) for m in maps]
    if not maps:
        raise DimensionError("no vote maps to aggregate")
    T = maps[0].shape[0]
    if any(m.shape != (T,) for m in maps):
        raise DimensionError("vote maps differ in length")
    return np.sum(maps, axis=0)


def enhance(m_prime, kernel=VOTE_KERNEL):
    m = np.asarray(m_prime, dtype=np.float64)
    if m.ndim != 1 or m.shape[0] < 1:
        raise DimensionError("enhance expects a non-empty 1-D vote map")
    return kernels.conv1d_same(m, np.asarray(kernel, dtype=np.float64))


def select_from_attention(cls_attention, v, enhance_votes=True, kernel=VOTE_KERNEL):
    """Frame indices chosen from a ``[K, T]`` attention array, plus the score map."""
    attn = np.ascontiguousarray(cls_attention, dtype=np.float64)
    if attn.ndim != 2:
        raise DimensionError(f"expected [K, T] attention rows, got {attn.shape}")
    _check_votes(v, attn.shape[1])
    votes, enhanced, idx = kernels.mhv_select(attn, int(v), np.asarray(kernel, dtype=np.float64),
                                              bool(enhance_votes))
    return [int(i) for i in idx], ScoreMap(np.asarray(votes), np.asarray(enhanced))


def select_frames(block_out, v, enhance_votes=True, kernel=VOTE_KERNEL, source_block=0):
    """Run voting on a block's CLS attention and gather the chosen output rows."""
    indices, score_map = select_from_attention(block_out.cls_attention, v, enhance_votes, kernel)
    # frame i lives at sequence row i + 1 (row 0 is CLS)
    reps = tn.take_rows(block_out.sequence, [i + 1 for i in indices])
    return SelectionResult(indices, reps, source_block, score_map)


def naive_select(cls_attention, v, enhance_votes=True, kernel=VOTE_KERNEL):
    """Loop-by-loop restatement of the voting pipeline, used as a cross-check."""
    rows = [list(map(float, r)) for r in np.asarray(cls_attention)]
    T = len(rows[0])
    votes = [0] * T
    for row in rows:
        for i in sorted(range(T), key=lambda i: (-row[i], i))[:v]:
            votes[i] += 1
    if enhance_votes:
        h = (len(kernel) - 1) // 2
        scores = [sum(float(kernel[j]) * votes[t + j - h] for j in range(len(kernel)) if 0 <= t + j - h < T)
                  for t in range(T)]
    else:
        scores = [float(x) for x in votes]
    return sorted(sorted(range(T), key=lambda i: (-scores[i], i))[:v])
