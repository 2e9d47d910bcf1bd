"""Brute-force reference implementations the fast code is checked against."""
import functools
import itertools
import math
from typing import List, Sequence, Tuple

import numpy as np


def trellis_scores(probs: np.ndarray, labels: Sequence[int], blank_id: int = 0) -> List[float]:
    """Score[t] by enumerating every state chain of the max-product recurrence.

    Chains start in state 0 or 1 at frame 1 with value 1 and no emission; each
    later frame stays, moves one state, or (token states only) skips one.
    """
    frames = probs.shape[0]
    states = len(labels)
    best = [[0.0] * states for _ in range(frames)]

    def walk(t: int, u: int, value: float) -> None:
        if value > best[t][u]:
            best[t][u] = value
        if t + 1 == frames:
            return
        for step in (0, 1, 2):
            v = u + step
            if v >= states or (step == 2 and labels[v] == blank_id):
                continue
            walk(t + 1, v, value * probs[t + 1, labels[v]])

    walk(0, 0, 1.0)
    walk(0, 1, 1.0)
    return [max(best[t][states - 2], best[t][states - 1]) for t in range(frames)]


def collapse(path: Sequence[int], blank_id: int = 0) -> Tuple[int, ...]:
    out = []
    prev = None
    for label in path:
        if label != prev and label != blank_id:
            out.append(label)
        prev = label
    return tuple(out)


def ctc_probability(probs: np.ndarray, tokens: Sequence[int], blank_id: int = 0) -> float:
    frames, vocab = probs.shape
    target = tuple(tokens)
    total = 0.0
    for path in itertools.product(range(vocab), repeat=frames):
        if collapse(path, blank_id) == target:
            total += math.prod(probs[t, label] for t, label in enumerate(path))
    return total


def pairwise_auroc(pos: Sequence[float], neg: Sequence[float]) -> float:
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def sweep_eer(pos: Sequence[float], neg: Sequence[float]) -> float:
    thresholds = sorted(set(pos) | set(neg)) + [math.inf]
    points = []
    for tau in thresholds:
        far = sum(n >= tau for n in neg) / len(neg)
        frr = sum(p < tau for p in pos) / len(pos)
        points.append((far, frr))
    for (far0, frr0), (far1, frr1) in zip(points, points[1:]):
        if far0 == frr0:
            return far0
        if far0 > frr0 and far1 <= frr1:
            w = (far0 - frr0) / ((far0 - frr0) - (far1 - frr1))
            return far0 + w * (far1 - far0)
    return points[-1][0]


def best_recall(pos: Sequence[float], neg: Sequence[float], allowed: int) -> float:
    candidates = sorted({-math.inf, *pos, *neg, *(float(np.nextafter(n, math.inf)) for n in neg)})
    for tau in candidates:
        if sum(n >= tau for n in neg) <= allowed:
            return sum(p >= tau for p in pos) / len(pos)
    return 0.0


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    rows, inner = a.shape
    cols = b.shape[1]
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            total = 0.0
            for k in range(inner):
                total += a[i, k] * b[k, j]
            out[i, j] = total
    return out


def levenshtein(ref: Sequence[int], hyp: Sequence[int]) -> int:
    """Unit-cost edit distance by the textbook recursion, memoized on suffix offsets."""
    a, b = tuple(ref), tuple(hyp)

    @functools.lru_cache(maxsize=None)
    def dist(i: int, j: int) -> int:
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(dist(i + 1, j + 1) + (a[i] != b[j]), dist(i, j + 1) + 1, dist(i + 1, j) + 1)

    return dist(0, 0)


def sequences(alphabet: Sequence[int], max_len: int) -> List[Tuple[int, ...]]:
    return [seq for n in range(max_len + 1) for seq in itertools.product(alphabet, repeat=n)]
