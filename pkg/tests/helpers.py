"""Shared brute-force oracles used by module tests and the acceptance suite.

Everything here is deliberately independent of the package implementation:
plain loops, exhaustive enumeration, no shared helpers from ``lami``.
"""

from __future__ import annotations

import itertools

import numpy as np


def union_find_merge_groups(names: list[str], chains: dict[str, list[str]]) -> list[set[str]]:
    """Brute-force pairwise merge oracle: union names whose first chain node matches."""
    parent = {n: n for n in names}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    for a, b in itertools.combinations(names, 2):
        ca, cb = chains.get(a), chains.get(b)
        if ca and cb and ca[0] == cb[0]:
            parent[find(a)] = find(b)
    groups: dict[str, set[str]] = {}
    for n in names:
        groups.setdefault(find(n), set()).add(n)
    return list(groups.values())


def enumerate_draw_sequences(weights: np.ndarray, draws: int):
    """All ordered without-replacement draw sequences with their probabilities.

    Mirrors sequential proportional sampling: each draw picks index i with
    probability w_i / (sum of remaining weights), then removes it.
    """
    support = [i for i, w in enumerate(weights) if w > 0]
    draws = min(draws, len(support))
    sequences = []

    def recurse(chosen: tuple[int, ...], remaining: list[int], prob: float):
        if len(chosen) == draws:
            sequences.append((chosen, prob))
            return
        total = sum(weights[i] for i in remaining)
        for i in remaining:
            recurse(chosen + (i,), [j for j in remaining if j != i], prob * weights[i] / total)

    recurse((), support, 1.0)
    return sequences


def inclusion_probabilities(weights: np.ndarray, draws: int) -> np.ndarray:
    """Analytic per-index probability of being included in a without-replacement draw."""
    probs = np.zeros(len(weights))
    for seq, p in enumerate_draw_sequences(np.asarray(weights, dtype=float), draws):
        for i in seq:
            probs[i] += p
    return probs


def unordered_pair_probabilities(weights: np.ndarray, draws: int) -> dict[frozenset, float]:
    """Analytic probability of each unordered drawn set (for draws=2 this is pair frequency)."""
    out: dict[frozenset, float] = {}
    for seq, p in enumerate_draw_sequences(np.asarray(weights, dtype=float), draws):
        key = frozenset(seq)
        out[key] = out.get(key, 0.0) + p
    return out


def box_iou_xyxy(a, b) -> float:
    """Plain-scalar IoU of two xyxy boxes."""
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def cxcywh_to_xyxy(box):
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
