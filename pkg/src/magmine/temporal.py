"""Snippet/segment/frame conversions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SegmentBatch:
    video_id: str
    features: np.ndarray
    members: list[tuple[int, int]]

    @property
    def num_segments(self) -> int:
        return self.features.shape[0]


def segment_boundaries(T: int, S: int) -> list[tuple[int, int]]:
    """Split ``T`` snippets into ``S`` half-open ranges.

    Range j is ``[floor(j*T/S), floor((j+1)*T/S))``. When that is empty
    (only possible for T < S) it becomes the single snippet
    ``min(floor(j*T/S), T-1)``.
    """
    if T < 1 or S < 1:
        raise ValueError("T and S must be >= 1")
    out = []
    for j in range(S):
        lo = (j * T) // S
        hi = ((j + 1) * T) // S
        if hi <= lo:
            lo = min(lo, T - 1)
            hi = lo + 1
        out.append((lo, hi))
    return out


def aggregate_segments(matrix: np.ndarray, S: int, video_id: str = "") -> SegmentBatch:
    matrix = np.asarray(matrix, dtype=np.float64)
    members = segment_boundaries(matrix.shape[0], S)
    feats = np.stack([matrix[lo:hi].mean(axis=0) for lo, hi in members])
    return SegmentBatch(video_id, feats, members)


def multiset_average(matrix: np.ndarray, num_sets: int, rng) -> np.ndarray:
    """Mean of ``num_sets`` randomly drawn snippet rows.

    Draws without replacement when ``num_sets <= T``, otherwise with
    replacement. ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if num_sets < 1:
        raise ValueError("num_sets must be >= 1")
    rng = np.random.default_rng(rng)
    matrix = np.asarray(matrix, dtype=np.float64)
    T = matrix.shape[0]
    idx = rng.choice(T, size=num_sets, replace=num_sets > T)
    return matrix[idx].mean(axis=0)


def expand_to_frames(snippet_scores, snippet_len: int, num_frames: int) -> np.ndarray:
    """Per-frame scores; frame f takes snippet ``min(f // snippet_len, T-1)``."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    scores = np.asarray(snippet_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 1:
        raise ValueError("need at least one snippet score")
    idx = np.minimum(np.arange(num_frames) // snippet_len, scores.size - 1)
    return scores[idx]


def snippet_frame_range(j: int, num_snippets: int, snippet_len: int, num_frames: int) -> tuple[int, int]:
    """Frames credited to snippet ``j`` under the remainder rule of :func:`expand_to_frames`."""
    lo = j * snippet_len
    hi = num_frames if j == num_snippets - 1 else min((j + 1) * snippet_len, num_frames)
    return min(lo, num_frames), hi


def snippet_labels(record, num_snippets: int) -> np.ndarray:
    """1 for snippets whose credited frames lie entirely inside a span."""
    out = np.zeros(num_snippets, dtype=np.int8)
    for j in range(num_snippets):
        lo, hi = snippet_frame_range(j, num_snippets, record.snippet_len, record.num_frames)
        if hi <= lo:
            continue
        for span in record.spans:
            if span.start_frame <= lo and hi <= span.end_frame:
                out[j] = 1
                break
    return out
