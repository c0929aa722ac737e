"""Per-iteration federated category selection with cluster-exclusion calibration.

Frequencies are per-category image occurrence rates over the training split.
Calibration zeroes the visually-similar set so those categories are never
drawn as negatives; the iteration vocabulary is the ground-truth categories
plus negatives drawn without replacement proportionally to the calibrated
frequencies (sequential proportional draws: draw one, zero it, renormalize).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lami.errors import SamplerError

logger = logging.getLogger(__name__)


def compute_frequencies(
    annotations: Iterable[tuple[int, int]], vocabulary: Sequence[int]
) -> np.ndarray:
    """Occurrence frequency per category: images containing it, normalized to sum 1.

    ``annotations`` is a stream of (image_id, category_id); ``vocabulary`` fixes
    the output order.
    """
    positions = {cid: i for i, cid in enumerate(vocabulary)}
    images_with: list[set[int]] = [set() for _ in vocabulary]
    empty = True
    for image_id, category_id in annotations:
        empty = False
        if category_id not in positions:
            raise SamplerError(f"annotation category {category_id} not in training vocabulary")
        images_with[positions[category_id]].add(image_id)
    if empty:
        raise SamplerError("empty dataset: no annotations")
    counts = np.array([len(s) for s in images_with], dtype=np.float64)
    total = counts.sum()
    if total == 0:
        raise SamplerError("no countable annotations")
    return counts / total


def calibrate_frequencies(p: np.ndarray, cg_indices: Iterable[int]) -> np.ndarray:
    """Zero the frequency of every visually-similar category; no renormalization here."""
    p_cal = np.array(p, dtype=np.float64, copy=True)
    idx = list(cg_indices)
    if idx:
        p_cal[np.asarray(idx, dtype=int)] = 0.0
    return p_cal


def sample_federated(
    p_cal: np.ndarray,
    c_fed: int,
    gt_indices: Iterable[int],
    rng: np.random.Generator,
) -> list[int]:
    """Iteration vocabulary: ground truth plus weighted negatives without replacement.

    Returns sorted ground-truth indices followed by drawn negatives in draw
    order. If the support is smaller than ``c_fed`` the whole support is taken.
    """
    p_cal = np.asarray(p_cal, dtype=np.float64)
    gt = sorted(set(gt_indices))
    if any(i < 0 or i >= len(p_cal) for i in gt):
        raise SamplerError(f"ground-truth index out of range for vocabulary of {len(p_cal)}")
    violating = [i for i in gt if p_cal[i] > 0.0]
    if violating:
        raise SamplerError(
            f"ground-truth categories {violating} still have non-zero calibrated frequency; "
            "they must be inside the excluded set"
        )
    support = np.nonzero(p_cal > 0.0)[0]
    if support.size == 0:
        if not gt:
            raise SamplerError("nothing to train on: empty support and no ground truth")
        logger.warning("federated sampling support is empty; using ground truth only")
        return gt
    draws = min(c_fed, int(support.size))
    weights = p_cal.copy()
    sampled: list[int] = []
    for _ in range(draws):
        probs = weights / weights.sum()
        idx = int(rng.choice(len(weights), p=probs))
        sampled.append(idx)
        weights[idx] = 0.0
    return gt + sampled


@dataclass(frozen=True)
class SamplingState:
    """Training-vocabulary frequencies plus the federated draw budget."""

    vocabulary: tuple[int, ...]  # concept ids, fixed order
    frequencies: np.ndarray
    c_fed: int
    rng_seed: int = 0

    def __post_init__(self):
        p = np.asarray(self.frequencies, dtype=np.float64)
        if p.shape != (len(self.vocabulary),):
            raise SamplerError(
                f"frequencies shape {p.shape} does not match vocabulary size {len(self.vocabulary)}"
            )
        if np.any(p < 0):
            raise SamplerError("frequencies must be non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise SamplerError(f"frequencies must sum to 1, got {p.sum()!r}")
        if self.c_fed > len(self.vocabulary):
            raise SamplerError(
                f"c_fed={self.c_fed} exceeds vocabulary size {len(self.vocabulary)}"
            )
        object.__setattr__(self, "frequencies", p)

    @classmethod
    def from_annotations(
        cls,
        annotations: Iterable[tuple[int, int]],
        vocabulary: Sequence[int],
        c_fed: int,
        rng_seed: int = 0,
    ) -> "SamplingState":
        p = compute_frequencies(annotations, vocabulary)
        return cls(vocabulary=tuple(vocabulary), frequencies=p, c_fed=c_fed, rng_seed=rng_seed)

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)

    def _positions(self, concept_ids: Iterable[int], *, strict: bool) -> set[int]:
        index = {cid: i for i, cid in enumerate(self.vocabulary)}
        out = set()
        for cid in concept_ids:
            if cid in index:
                out.add(index[cid])
            elif strict:
                raise SamplerError(f"concept id {cid} not in training vocabulary")
        return out

    def iteration_vocabulary(
        self,
        gt_concept_ids: Iterable[int],
        cg_concept_ids: Iterable[int],
        rng: np.random.Generator,
    ) -> list[int]:
        """Concept ids participating in this iteration's classification loss.

        ``cg_concept_ids`` may contain open-set concepts outside the training
        vocabulary; those are ignored (they could never be sampled anyway).
        """
        gt_pos = self._positions(gt_concept_ids, strict=True)
        cg_pos = self._positions(cg_concept_ids, strict=False)
        p_cal = calibrate_frequencies(self.frequencies, cg_pos)
        chosen = sample_federated(p_cal, self.c_fed, gt_pos, rng)
        return [self.vocabulary[i] for i in chosen]


def dump_frequencies(state: SamplingState, path: str | Path) -> None:
    payload = {
        "c_fed": state.c_fed,
        "frequencies": {str(cid): float(f) for cid, f in zip(state.vocabulary, state.frequencies)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
