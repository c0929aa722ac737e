"""Open-vocabulary inference: region pooling, VLM scoring, and score calibration.

The detector's scores are geometrically interpolated with scores obtained by
pooling the frozen backbone feature map inside each predicted box and
comparing against classifier text embeddings. Base and novel categories get
separate interpolation exponents, and novel scores can be boosted by a
configurable factor before the final NMS-free top-k ranking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from lami.descriptions import VisualDescription
from lami.detector import ImageFeatureMap
from lami.embeddings import EmbeddingMatrix, TextEmbeddingProvider, embed_classifier
from lami.errors import InferenceError

DEFAULT_VLM_TEMPERATURE = 0.01


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: float  # base-category exponent on the VLM score
    beta: float  # novel-category exponent on the VLM score
    novel_factor: float = 1.0
    base_ids: frozenset[int] = field(default_factory=frozenset)
    novel_ids: frozenset[int] = field(default_factory=frozenset)
    factor_stage: str = "score"  # score | logit

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InferenceError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise InferenceError(f"beta must be in [0, 1], got {self.beta}")
        if self.novel_factor <= 0:
            raise InferenceError(f"novel_factor must be positive, got {self.novel_factor}")
        if self.base_ids & self.novel_ids:
            raise InferenceError(
                f"ids tagged both base and novel: {sorted(self.base_ids & self.novel_ids)}"
            )
        if self.factor_stage not in ("score", "logit"):
            raise InferenceError(f"unknown factor stage {self.factor_stage!r}")

    @property
    def vocabulary(self) -> tuple[int, ...]:
        return tuple(sorted(self.base_ids | self.novel_ids))


def pool_region_feature(fmap: ImageFeatureMap, box: Sequence[float]) -> np.ndarray:
    """Average the feature cells whose centers fall inside a normalized cxcywh box.

    Sub-cell boxes snap to the single nearest cell. The result is L2-normalized.
    """
    cx, cy, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise InferenceError(f"degenerate box with w={w}, h={h}")
    gh, gw = fmap.height, fmap.width
    ys = (np.arange(gh) + 0.5) / gh
    xs = (np.arange(gw) + 0.5) / gw
    x1, x2 = cx - w / 2, cx + w / 2
    y1, y2 = cy - h / 2, cy + h / 2
    col_in = (xs >= x1) & (xs <= x2)
    row_in = (ys >= y1) & (ys <= y2)
    mask = row_in[:, None] & col_in[None, :]
    if not mask.any():
        dist = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        snap = np.unravel_index(int(np.argmin(dist)), dist.shape)
        mask[snap] = True
    pooled = fmap.features[mask].astype(np.float64).mean(axis=0)
    norm = np.linalg.norm(pooled)
    if norm == 0.0:
        return pooled
    return pooled / norm


def vlm_score(
    region_feats: np.ndarray,
    classifier: EmbeddingMatrix,
    temperature: float = DEFAULT_VLM_TEMPERATURE,
) -> np.ndarray:
    """Softmax over classes of region-feature/text cosine similarities."""
    region_feats = np.asarray(region_feats, dtype=np.float64)
    if region_feats.ndim == 1:
        region_feats = region_feats[None, :]
    if region_feats.shape[1] != classifier.dim:
        raise InferenceError(
            f"region feature dim {region_feats.shape[1]} does not match classifier dim {classifier.dim}"
        )
    if temperature <= 0:
        raise InferenceError(f"temperature must be positive, got {temperature}")
    logits = region_feats @ classifier.rows.astype(np.float64).T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    return exp / exp.sum(axis=1, keepdims=True)


def _column_exponents(cfg: CalibrationConfig, category_ids: Sequence[int]) -> np.ndarray:
    exponents = np.empty(len(category_ids))
    for i, cid in enumerate(category_ids):
        if cid in cfg.base_ids:
            exponents[i] = cfg.alpha
        elif cid in cfg.novel_ids:
            exponents[i] = cfg.beta
        else:
            raise InferenceError(f"category id {cid} is in neither base nor novel set")
    return exponents


def _power(base: np.ndarray, exponent: float) -> np.ndarray:
    # identity exponents bit-exactly, and 0^0 := 1
    if exponent == 0.0:
        return np.ones_like(base)
    if exponent == 1.0:
        return base.copy()
    return np.power(base, exponent)


def calibrate_scores(
    s_vlm: np.ndarray,
    s_det: np.ndarray,
    cfg: CalibrationConfig,
    category_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Per-class geometric interpolation: vlm^a * det^(1-a), a = alpha or beta."""
    s_vlm = np.asarray(s_vlm, dtype=np.float64)
    s_det = np.asarray(s_det, dtype=np.float64)
    if s_vlm.shape != s_det.shape:
        raise InferenceError(f"score shapes differ: {s_vlm.shape} vs {s_det.shape}")
    ids = tuple(category_ids) if category_ids is not None else cfg.vocabulary
    if len(ids) != s_vlm.shape[1]:
        raise InferenceError(
            f"{s_vlm.shape[1]} score columns but {len(ids)} category ids"
        )
    exponents = _column_exponents(cfg, ids)
    out = np.empty_like(s_vlm)
    for exponent in np.unique(exponents):
        cols = exponents == exponent
        out[:, cols] = _power(s_vlm[:, cols], float(exponent)) * _power(
            s_det[:, cols], 1.0 - float(exponent)
        )
    return out


def apply_novel_factor(
    scores: np.ndarray,
    cfg: CalibrationConfig,
    category_ids: Sequence[int] | None = None,
) -> np.ndarray:
    """Scale novel-category columns by the configured factor; base columns untouched."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = tuple(category_ids) if category_ids is not None else cfg.vocabulary
    if len(ids) != scores.shape[1]:
        raise InferenceError(f"{scores.shape[1]} score columns but {len(ids)} category ids")
    out = scores.copy()
    novel_cols = [i for i, cid in enumerate(ids) if cid in cfg.novel_ids]
    if novel_cols:
        out[:, novel_cols] *= cfg.novel_factor
    return out


def apply_novel_factor_to_logits(
    logits: np.ndarray,
    cfg: CalibrationConfig,
    category_ids: Sequence[int],
) -> np.ndarray:
    """Alternative stage: scale pre-sigmoid detector logits of novel categories."""
    logits = np.asarray(logits, dtype=np.float64)
    out = logits.copy()
    novel_cols = [i for i, cid in enumerate(category_ids) if cid in cfg.novel_ids]
    if novel_cols:
        out[:, novel_cols] *= cfg.novel_factor
    return out


def build_inference_classifier(
    contrastive_descs: Sequence[VisualDescription],
    classifier_provider: TextEmbeddingProvider,
    vocabulary_ids: Sequence[int],
) -> EmbeddingMatrix:
    """Classifier matrix over the inference vocabulary from contrastive descriptions."""
    by_id = {}
    for d in contrastive_descs:
        if d.concept_id in by_id:
            raise InferenceError(f"duplicate description for concept {d.concept_id}")
        by_id[d.concept_id] = d.text
    missing = sorted(set(vocabulary_ids) - set(by_id))
    if missing:
        raise InferenceError(f"missing descriptions for concept ids {missing}")
    texts = [(cid, by_id[cid]) for cid in sorted(set(vocabulary_ids))]
    return embed_classifier(texts, classifier_provider)


@dataclass(frozen=True)
class ImageDetections:
    """Final per-image detections after calibration and top-k ranking."""

    image_id: int
    boxes: np.ndarray  # K x 4 normalized cxcywh
    labels: tuple[int, ...]
    s_det: np.ndarray
    s_vlm: np.ndarray
    s_cal: np.ndarray
    score: np.ndarray  # ranking score (s_cal after the novel factor)


def rank_detections(
    image_id: int,
    boxes: np.ndarray,
    s_det: np.ndarray,
    s_vlm: np.ndarray,
    s_cal: np.ndarray,
    final_scores: np.ndarray,
    category_ids: Sequence[int],
    top_k: int = 100,
) -> ImageDetections:
    """Flatten (query, class) pairs, keep the top-k by final score."""
    n, c = final_scores.shape
    flat = final_scores.reshape(-1)
    k = min(top_k, flat.size)
    order = np.argsort(-flat, kind="stable")[:k]
    q_idx, c_idx = np.unravel_index(order, (n, c))
    ids = np.asarray(category_ids)
    return ImageDetections(
        image_id=image_id,
        boxes=np.asarray(boxes)[q_idx],
        labels=tuple(int(i) for i in ids[c_idx]),
        s_det=np.asarray(s_det)[q_idx, c_idx],
        s_vlm=np.asarray(s_vlm)[q_idx, c_idx],
        s_cal=np.asarray(s_cal)[q_idx, c_idx],
        score=flat[order],
    )


def write_detections_jsonl(detections: Sequence[ImageDetections], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(
                json.dumps(
                    {
                        "image_id": det.image_id,
                        "boxes": [[float(v) for v in b] for b in det.boxes],
                        "labels": list(det.labels),
                        "s_det": [float(v) for v in det.s_det],
                        "s_vlm": [float(v) for v in det.s_vlm],
                        "s_cal": [float(v) for v in det.s_cal],
                        "score": [float(v) for v in det.score],
                    }
                )
                + "\n"
            )


def read_detections_jsonl(path: str | Path) -> list[ImageDetections]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    ImageDetections(
                        image_id=rec["image_id"],
                        boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                        labels=tuple(rec["labels"]),
                        s_det=np.asarray(rec["s_det"]),
                        s_vlm=np.asarray(rec["s_vlm"]),
                        s_cal=np.asarray(rec["s_cal"]),
                        score=np.asarray(rec["score"]),
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise InferenceError(f"{path}: line {lineno}: bad detection record: {exc}")
    return out
