"""Group visually similar categories by k-means over semantic description embeddings.

The fit is deliberately hand-rolled rather than delegated: determinism under a
fixed seed, the exact empty-cluster re-seeding rule, and the convergence
threshold are all contract-level behavior that the downstream sampler tests
rely on. Euclidean k-means on unit vectors orders identically to cosine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from lami.embeddings import EmbeddingMatrix, read_lemb_block, write_lemb_block
from lami.errors import ClusterError

MAX_ITERATIONS = 300
SHIFT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ClusterModel:
    K: int
    centroids: np.ndarray  # K x dim float64
    assignment: Mapping[int, int]  # concept_id -> cluster_id
    seed: int
    inertia: float
    _members: Mapping[int, tuple[int, ...]] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        if self.centroids.shape[0] != self.K:
            raise ClusterError(f"{self.centroids.shape[0]} centroids for K={self.K}")
        members: dict[int, list[int]] = {k: [] for k in range(self.K)}
        for cid, cluster in self.assignment.items():
            if not 0 <= cluster < self.K:
                raise ClusterError(f"cluster id {cluster} out of range for K={self.K}")
            members[cluster].append(cid)
        object.__setattr__(
            self, "_members", {k: tuple(sorted(v)) for k, v in members.items()}
        )

    def members_of(self, cluster_id: int) -> tuple[int, ...]:
        if cluster_id not in self._members:
            raise ClusterError(f"unknown cluster id {cluster_id}")
        return self._members[cluster_id]

    def cluster_of(self, concept_id: int) -> int:
        if concept_id not in self.assignment:
            raise ClusterError(f"concept id {concept_id} not in cluster model")
        return self.assignment[concept_id]


def _nearest(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # squared Euclidean distances; argmin takes the smallest cluster id on ties
    d2 = (
        np.sum(points**2, axis=1, keepdims=True)
        - 2.0 * points @ centroids.T
        + np.sum(centroids**2, axis=1)
    )
    labels = np.argmin(d2, axis=1)
    return labels, np.maximum(d2[np.arange(len(points)), labels], 0.0)


def _kmeanspp_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: several D^2-sampled candidates per step, keep the best."""
    n = len(points)
    n_candidates = 2 + int(np.log(K)) if K > 1 else 1
    centroids = np.empty((K, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for k in range(1, K):
        total = float(d2.sum())
        if total <= 0.0:
            candidates = rng.integers(n, size=n_candidates)  # all points already covered
        else:
            candidates = rng.choice(n, size=n_candidates, p=d2 / total)
        best_idx, best_d2, best_total = None, None, np.inf
        for idx in candidates:
            cand_d2 = np.minimum(d2, np.sum((points - points[int(idx)]) ** 2, axis=1))
            cand_total = float(cand_d2.sum())
            if cand_total < best_total:
                best_idx, best_d2, best_total = int(idx), cand_d2, cand_total
        centroids[k] = points[best_idx]
        d2 = best_d2
    return centroids


def fit_clusters(embeddings: EmbeddingMatrix, K: int, seed: int) -> ClusterModel:
    """Deterministic k-means (k-means++ init, fixed seed) over semantic embeddings."""
    if embeddings.space != "semantic":
        raise ClusterError("wrong embedding space: clustering needs semantic embeddings")
    n = len(embeddings)
    if K < 1:
        raise ClusterError(f"K must be >= 1, got {K}")
    if K > n:
        raise ClusterError(f"K={K} exceeds number of concepts ({n})")

    points = embeddings.rows.astype(np.float64)
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, K, rng)

    labels, _ = _nearest(points, centroids)
    for _ in range(MAX_ITERATIONS):
        new_centroids = np.empty_like(centroids)
        for k in range(K):
            mask = labels == k
            if mask.any():
                new_centroids[k] = points[mask].mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its old centroid
                far = int(np.argmax(np.sum((points - centroids[k]) ** 2, axis=1)))
                new_centroids[k] = points[far]
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        labels, d2 = _nearest(points, centroids)
        if shift < SHIFT_TOLERANCE:
            break
    else:
        labels, d2 = _nearest(points, centroids)

    assignment = {cid: int(labels[i]) for i, cid in enumerate(embeddings.ids)}
    return ClusterModel(
        K=K,
        centroids=centroids,
        assignment=assignment,
        seed=seed,
        inertia=float(d2.sum()),
    )


def visually_similar_set(model: ClusterModel, gt_ids: Iterable[int]) -> set[int]:
    """All concepts sharing a cluster with any ground-truth concept."""
    similar: set[int] = set()
    for gid in gt_ids:
        similar.update(model.members_of(model.cluster_of(gid)))
    return similar


def save_cluster_model(model: ClusterModel, path: str | Path) -> None:
    """JSON model description plus a LEMB centroid block at ``<path>.centroids.lemb``."""
    path = Path(path)
    centroid_name = path.name + ".centroids.lemb"
    write_lemb_block(path.with_name(centroid_name), "semantic", list(range(model.K)), model.centroids)
    payload = {
        "K": model.K,
        "seed": model.seed,
        "inertia": model.inertia,
        "assignment": {str(cid): cluster for cid, cluster in sorted(model.assignment.items())},
        "centroids": centroid_name,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cluster_model(path: str | Path) -> ClusterModel:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        centroid_path = path.with_name(payload["centroids"])
        _, _, rows = read_lemb_block(centroid_path)
        return ClusterModel(
            K=payload["K"],
            centroids=rows.astype(np.float64),
            assignment={int(k): int(v) for k, v in payload["assignment"].items()},
            seed=payload["seed"],
            inertia=payload["inertia"],
        )
    except (json.JSONDecodeError, KeyError, OSError) as exc:
        raise ClusterError(f"{path}: cannot load cluster model: {exc}") from exc
