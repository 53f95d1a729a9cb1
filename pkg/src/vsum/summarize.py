"""Turn frame scores into a budgeted keyshot summary.

A video is partitioned into contiguous shots; each shot is valued by its
mean frame score and weighted by its length; an exact 0/1 knapsack then
picks the best shot set whose total length fits the frame budget (15% of
the video by default). Shot boundaries normally come from annotation files;
uniform and change-point fallbacks are provided for raw feature input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UsageError


@dataclass(frozen=True)
class ShotSegmentation:
    """Contiguous shots covering frames 0..n_frames-1.

    ``boundaries`` holds the 0-based start index of every shot, strictly
    ascending and beginning with 0; shot s spans
    [boundaries[s], boundaries[s+1]) with the last shot ending at n_frames.
    """

    boundaries: tuple
    n_frames: int

    def __post_init__(self):
        b = tuple(int(v) for v in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if self.n_frames < 1:
            raise ShapeError("segmentation needs at least one frame")
        if not b or b[0] != 0:
            raise ShapeError(f"shot boundaries must start at frame 0, got {b[:3]}...")
        if any(y <= x for x, y in zip(b, b[1:])) or b[-1] >= self.n_frames:
            raise ShapeError(
                f"shot boundaries must ascend strictly and stay below n_frames={self.n_frames}")

    @property
    def n_shots(self) -> int:
        return len(self.boundaries)

    def shots(self) -> list:
        """(start, stop) pairs, stop exclusive."""
        ends = list(self.boundaries[1:]) + [self.n_frames]
        return list(zip(self.boundaries, ends))

    def lengths(self) -> np.ndarray:
        return np.array([stop - start for start, stop in self.shots()], dtype=int)


@dataclass
class SummaryMask:
    """Shot-aligned binary keyshot selection under a frame budget."""

    selected: np.ndarray          # bool, length n_frames
    budget_fraction: float = 0.15
    selected_shots: list = field(default_factory=list)

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=bool)


def budget_capacity(budget_fraction: float, n_frames: int) -> int:
    # tiny epsilon guards binary representation of fractions like 0.15
    return int(math.floor(budget_fraction * n_frames + 1e-9))


def segment_uniform(n_frames: int, target_len: int) -> ShotSegmentation:
    """ceil(n_frames / target_len) shots of target_len frames, last one shorter."""
    if target_len < 1:
        raise UsageError(f"target shot length must be >= 1, got {target_len}")
    if target_len > n_frames:
        raise UsageError(f"target shot length {target_len} exceeds frame count {n_frames}")
    return ShotSegmentation(tuple(range(0, n_frames, target_len)), n_frames)


def _prefix_stats(x: np.ndarray):
    s1 = np.zeros((x.shape[0] + 1, x.shape[1]))
    s2 = np.zeros(x.shape[0] + 1)
    np.cumsum(x, axis=0, out=s1[1:])
    np.cumsum((x * x).sum(axis=1), out=s2[1:])
    return s1, s2


def _segment_cost(s1, s2, a, b):
    # within-segment squared deviation from the segment mean over [a, b)
    n = b - a
    mean_sq = ((s1[b] - s1[a]) ** 2).sum() / n
    return s2[b] - s2[a] - mean_sq


def segment_changepoint(x: np.ndarray, max_shots: int) -> ShotSegmentation:
    """Greedy binary splitting of a feature sequence into piecewise-constant shots.

    Repeatedly splits whichever segment yields the largest drop in total
    within-segment squared deviation, until ``max_shots`` is reached or no
    split helps by at least 1e-9.
    """
    if max_shots < 1:
        raise UsageError(f"max_shots must be >= 1, got {max_shots}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"need a T x d sequence with T >= 2, got shape {x.shape}")
    t_len = x.shape[0]
    s1, s2 = _prefix_stats(x)

    def best_split(a, b):
        best = (0.0, None)
        base = _segment_cost(s1, s2, a, b)
        for cut in range(a + 1, b):
            gain = base - _segment_cost(s1, s2, a, cut) - _segment_cost(s1, s2, cut, b)
            if best[1] is None or gain > best[0]:
                best = (gain, cut)
        return best

    segments = [(0, t_len)]
    while len(segments) < max_shots:
        candidates = []
        for idx, (a, b) in enumerate(segments):
            if b - a >= 2:
                gain, cut = best_split(a, b)
                if cut is not None:
                    candidates.append((gain, idx, cut))
        if not candidates:
            break
        gain, idx, cut = max(candidates, key=lambda c: (c[0], -c[1]))
        if gain < 1e-9:
            break
        a, b = segments[idx]
        segments[idx:idx + 1] = [(a, cut), (cut, b)]
    return ShotSegmentation(tuple(a for a, _ in segments), t_len)


def shot_values(scores: np.ndarray, seg: ShotSegmentation):
    """Per-shot (mean frame score, frame count)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size != seg.n_frames:
        raise ShapeError(f"scores length {scores.size} != segmentation frames {seg.n_frames}")
    values = np.array([scores[a:b].mean() for a, b in seg.shots()])
    return values, seg.lengths()


def knapsack_select(values, lengths, capacity: int) -> list:
    """Exact 0/1 knapsack over shot lengths; returns selected shot indices.

    Maximizes total value subject to total length <= capacity via the
    classic O(S * capacity) table. Among equally valued optima the selection
    that is lexicographically smallest in shot index order is returned, so
    results are reproducible.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    if values.size != lengths.size:
        raise ShapeError(f"values ({values.size}) and lengths ({lengths.size}) differ")
    if (lengths < 1).any():
        raise UsageError("shot lengths must be positive integers")
    capacity = int(capacity)
    if capacity < 0:
        raise UsageError(f"capacity must be >= 0, got {capacity}")
    n = values.size
    # dp[i][c]: best value using shots i.. with capacity c
    dp = np.zeros((n + 1, capacity + 1))
    for i in range(n - 1, -1, -1):
        dp[i] = dp[i + 1]
        w = lengths[i]
        if w <= capacity:
            take = values[i] + dp[i + 1, :capacity + 1 - w]
            dp[i, w:] = np.maximum(dp[i + 1, w:], take)
    selected = []
    c = capacity
    for i in range(n):
        if dp[i, c] == 0.0:
            break  # nothing of value remains; stopping keeps the selection lex-smallest
        if lengths[i] <= c and values[i] + dp[i + 1, c - lengths[i]] == dp[i, c]:
            selected.append(i)
            c -= lengths[i]
    return selected


def make_summary(scores, seg: ShotSegmentation, budget_fraction: float = 0.15) -> SummaryMask:
    """Budgeted keyshot mask: capacity floor(budget_fraction * T) frames."""
    values, lengths = shot_values(scores, seg)
    capacity = budget_capacity(budget_fraction, seg.n_frames)
    chosen = knapsack_select(values, lengths, capacity)
    mask = np.zeros(seg.n_frames, dtype=bool)
    shots = seg.shots()
    for s in chosen:
        a, b = shots[s]
        mask[a:b] = True
    return SummaryMask(selected=mask, budget_fraction=budget_fraction, selected_shots=chosen)


def summary_to_json(mask: SummaryMask, seg: ShotSegmentation, video_id: str) -> dict:
    return {
        "video_id": video_id,
        "budget_fraction": mask.budget_fraction,
        "boundaries": list(seg.boundaries),
        "selected_shots": [int(s) for s in mask.selected_shots],
        "selected_frames": [int(i) for i in np.flatnonzero(mask.selected)],
    }
