"""Miniature DETR-style detector with a frozen backbone and text-embedding classifier.

The backbone is a provider behind an interface: the seeded stub (a frozen
strided conv, effectively a patch embedding) for tests and toy training, or a
reader of precomputed feature files for real-VLM experiments. Encoder pixels
are scored against classifier text embeddings, the top N become queries, each
query is fused with its best-matching text embedding, and a small transformer
decoder refines them into boxes and cosine-similarity class logits.

Checkpoints use the LCKP container: magic, version, a JSON header (config plus
named parameter shapes/dtypes), then the raw little-endian parameter blobs in
header order. Feature files use the same layout with a single "features" blob.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from lami.embeddings import EmbeddingMatrix
from lami.errors import DetectorError

LCKP_MAGIC = b"LCKP"
LCKP_VERSION = 1


@dataclass(frozen=True)
class DetectorConfig:
    dim: int = 64
    image_size: int = 128
    stride: int = 16
    encoder_layers: int = 2
    decoder_layers: int = 2
    attention_heads: int = 4
    ffn_dim: int = 128
    n_queries: int = 25
    prior_wh: float = 0.2
    logit_scale_init: float = 10.0
    seed: int = 0
    backbone_seed: int = 0

    def __post_init__(self):
        if self.image_size % self.stride != 0:
            raise DetectorError(
                f"stride {self.stride} must divide image size {self.image_size}"
            )
        if self.n_queries > self.grid_cells:
            raise DetectorError(
                f"n_queries={self.n_queries} exceeds {self.grid_cells} encoder pixels "
                f"({self.image_size}px / stride {self.stride})"
            )

    @property
    def grid_size(self) -> int:
        return self.image_size // self.stride

    @property
    def grid_cells(self) -> int:
        return self.grid_size**2


@dataclass(frozen=True)
class ImageFeatureMap:
    """Frozen backbone output; never part of the autograd graph."""

    height: int
    width: int
    dim: int
    features: np.ndarray  # height x width x dim float32

    def __post_init__(self):
        if self.features.shape != (self.height, self.width, self.dim):
            raise DetectorError(
                f"feature shape {self.features.shape} does not match "
                f"({self.height}, {self.width}, {self.dim})"
            )


@dataclass(frozen=True)
class EncodedMap:
    features: torch.Tensor  # M x dim, requires grad during training
    proposal_boxes: torch.Tensor  # M x 4 cxcywh in [0, 1]
    grid_h: int
    grid_w: int


@dataclass(frozen=True)
class QuerySet:
    queries: torch.Tensor  # N x dim
    matched_text_ids: tuple[int, ...]
    boxes: torch.Tensor  # N x 4 cxcywh in [0, 1]

    def __post_init__(self):
        n = self.queries.shape[0]
        if len(self.matched_text_ids) != n or self.boxes.shape != (n, 4):
            raise DetectorError("query set fields disagree on N")


@dataclass(frozen=True)
class DetectionOutput:
    boxes: torch.Tensor  # N x 4 cxcywh
    logits: torch.Tensor  # N x C'
    det_scores: torch.Tensor  # sigmoid(logits)
    labels: tuple[int, ...]  # per-query argmax concept id
    category_ids: tuple[int, ...]  # concept id of each score column

    @classmethod
    def from_logits(
        cls, boxes: torch.Tensor, logits: torch.Tensor, category_ids: Sequence[int]
    ) -> "DetectionOutput":
        scores = torch.sigmoid(logits)
        cols = np.asarray(category_ids)
        labels = tuple(int(cols[i]) for i in scores.detach().cpu().numpy().argmax(axis=1))
        return cls(
            boxes=boxes,
            logits=logits,
            det_scores=scores,
            labels=labels,
            category_ids=tuple(int(c) for c in category_ids),
        )


def box_cxcywh_to_xyxy(box: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = box.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def generalized_box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise gIoU for xyxy boxes; differentiable."""
    area1 = (boxes1[:, 2] - boxes1[:, 0]).clamp(min=0) * (boxes1[:, 3] - boxes1[:, 1]).clamp(min=0)
    area2 = (boxes2[:, 2] - boxes2[:, 0]).clamp(min=0) * (boxes2[:, 3] - boxes2[:, 1]).clamp(min=0)
    lt = torch.max(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = torch.min(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2[None, :] - inter
    iou = inter / union.clamp(min=1e-9)
    hull_lt = torch.min(boxes1[:, None, :2], boxes2[None, :, :2])
    hull_rb = torch.max(boxes1[:, None, 2:], boxes2[None, :, 2:])
    hull_wh = (hull_rb - hull_lt).clamp(min=0)
    hull = (hull_wh[..., 0] * hull_wh[..., 1]).clamp(min=1e-9)
    return iou - (hull - union) / hull


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))


def sine_position_encoding(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Standard fixed 2D sine/cosine positional encoding, flattened row-major."""
    if dim % 4 != 0:
        raise DetectorError(f"positional encoding needs dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = torch.exp(torch.arange(quarter, dtype=torch.float32) * (-math.log(10000.0) / quarter))
    ys = torch.arange(grid_h, dtype=torch.float32).unsqueeze(1) * freqs
    xs = torch.arange(grid_w, dtype=torch.float32).unsqueeze(1) * freqs
    pos = torch.zeros(grid_h, grid_w, dim)
    pos[:, :, 0*quarter:1*quarter] = torch.sin(ys)[:, None, :].expand(grid_h, grid_w, quarter)
    pos[:, :, 1*quarter:2*quarter] = torch.cos(ys)[:, None, :].expand(grid_h, grid_w, quarter)
    pos[:, :, 2*quarter:3*quarter] = torch.sin(xs)[None, :, :].expand(grid_h, grid_w, quarter)
    pos[:, :, 3*quarter:4*quarter] = torch.cos(xs)[None, :, :].expand(grid_h, grid_w, quarter)
    return pos.reshape(grid_h * grid_w, dim)


class StubBackbone(nn.Module):
    """Frozen seeded patch-embedding conv standing in for a real VLM image encoder."""

    def __init__(self, config: DetectorConfig):
        super().__init__()
        torch.manual_seed(config.backbone_seed)
        self.config = config
        self.conv = nn.Conv2d(3, config.dim, kernel_size=config.stride, stride=config.stride)
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, image: np.ndarray) -> ImageFeatureMap:
        cfg = self.config
        if image.shape != (cfg.image_size, cfg.image_size, 3):
            raise DetectorError(
                f"image shape {image.shape} does not match configured "
                f"({cfg.image_size}, {cfg.image_size}, 3)"
            )
        if image.dtype == np.uint8:
            image = image.astype(np.float32) / 255.0
        x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        x = x.permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            out = self.conv(x)[0].permute(1, 2, 0).contiguous()
        features = out.numpy()
        return ImageFeatureMap(
            height=features.shape[0], width=features.shape[1], dim=cfg.dim, features=features
        )


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int, layers: int = 2):
        super().__init__()
        dims = [dim] + [hidden] * (layers - 1) + [out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = torch.relu(x)
        return x


class LamiDetector(nn.Module):
    """Frozen backbone + transformer encoder/decoder + text-embedding classifier."""

    def __init__(self, config: DetectorConfig, feature_provider=None):
        super().__init__()
        self.config = config
        self.backbone = StubBackbone(config) if feature_provider is None else None
        self._feature_provider = feature_provider
        torch.manual_seed(config.seed)
        d = config.dim
        self.input_norm = nn.LayerNorm(d)
        encoder_layer = nn.TransformerEncoderLayer(
            d, config.attention_heads, config.ffn_dim, dropout=0.0, batch_first=True
        )
        self.encoder = nn.TransformerEncoder(encoder_layer, config.encoder_layers)
        self.enc_box_head = MLP(d, d, 4)
        decoder_layer = nn.TransformerDecoderLayer(
            d, config.attention_heads, config.ffn_dim, dropout=0.0, batch_first=True
        )
        self.decoder = nn.TransformerDecoder(decoder_layer, config.decoder_layers)
        self.class_proj = nn.Linear(d, d)
        self.box_head = MLP(d, d, 4)
        self.log_logit_scale = nn.Parameter(torch.tensor(math.log(config.logit_scale_init)))
        gh = config.grid_size
        self.register_buffer("pos_encoding", sine_position_encoding(gh, gh, d))
        self.register_buffer("box_prior", self._cell_priors())

    def _cell_priors(self) -> torch.Tensor:
        g = self.config.grid_size
        centers = (torch.arange(g, dtype=torch.float32) + 0.5) / g
        cy, cx = torch.meshgrid(centers, centers, indexing="ij")
        wh = torch.full((g * g, 2), self.config.prior_wh)
        return torch.cat([cx.reshape(-1, 1), cy.reshape(-1, 1), wh], dim=1)

    def backbone_parameters(self) -> list[torch.Tensor]:
        return [] if self.backbone is None else list(self.backbone.parameters())

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def backbone_features(self, image: np.ndarray, image_id: int | None = None) -> ImageFeatureMap:
        if self._feature_provider is not None:
            return self._feature_provider.features(image, image_id=image_id)
        return self.backbone.features(image)

    def encode(self, fmap: ImageFeatureMap) -> EncodedMap:
        cfg = self.config
        g = cfg.grid_size
        if (fmap.height, fmap.width, fmap.dim) != (g, g, cfg.dim):
            raise DetectorError(
                f"feature map {fmap.height}x{fmap.width}x{fmap.dim} does not match "
                f"expected {g}x{g}x{cfg.dim}"
            )
        x = torch.from_numpy(fmap.features).reshape(1, g * g, cfg.dim)
        x = self.input_norm(x) + self.pos_encoding.unsqueeze(0)
        memory = self.encoder(x)[0]
        proposals = torch.sigmoid(
            self.enc_box_head(memory) + inverse_sigmoid(self.box_prior)
        )
        return EncodedMap(features=memory, proposal_boxes=proposals, grid_h=g, grid_w=g)

    def select_top_queries(
        self, encoded: EncodedMap, text: EmbeddingMatrix, n: int | None = None
    ) -> QuerySet:
        """Top-N encoder pixels by max text-embedding dot product, with argmax class ids."""
        n = self.config.n_queries if n is None else n
        m = encoded.features.shape[0]
        if n > m:
            raise DetectorError(f"cannot select {n} queries from {m} pixels")
        if len(text) == 0:
            raise DetectorError("empty classifier matrix")
        weights = torch.from_numpy(text.rows.copy())
        scores = (encoded.features.detach() @ weights.T).numpy()  # M x C
        best_per_pixel = scores.max(axis=1)
        best_class = scores.argmax(axis=1)  # first max wins: smaller concept id
        order = np.lexsort((np.arange(m), -best_per_pixel))[:n]
        matched = tuple(int(text.ids[best_class[i]]) for i in order)
        idx = torch.from_numpy(np.ascontiguousarray(order))
        return QuerySet(
            queries=encoded.features[idx],
            matched_text_ids=matched,
            boxes=encoded.proposal_boxes[idx],
        )

    def decode(
        self, qs: QuerySet, encoded: EncodedMap, text: EmbeddingMatrix
    ) -> DetectionOutput:
        """Refine queries against encoder memory; cosine class logits, box deltas."""
        refined = self.decoder(qs.queries.unsqueeze(0), encoded.features.unsqueeze(0))[0]
        class_feat = self.class_proj(refined)
        class_feat = class_feat / class_feat.norm(dim=-1, keepdim=True).clamp(min=1e-9)
        weights = torch.from_numpy(text.rows.copy())
        logits = torch.exp(self.log_logit_scale) * (class_feat @ weights.T)
        boxes = torch.sigmoid(self.box_head(refined) + inverse_sigmoid(qs.boxes))
        return DetectionOutput.from_logits(boxes=boxes, logits=logits, category_ids=text.ids)

    def detect(
        self,
        image: np.ndarray,
        text: EmbeddingMatrix,
        *,
        fusion_text: EmbeddingMatrix | None = None,
        image_id: int | None = None,
    ) -> tuple[DetectionOutput, ImageFeatureMap]:
        """Full forward pass. ``fusion_text`` None means no language fusion."""
        fmap = self.backbone_features(image, image_id=image_id)
        encoded = self.encode(fmap)
        qs = self.select_top_queries(encoded, text)
        qs = fuse_language(qs, fusion_text)
        return self.decode(qs, encoded, text), fmap


def fuse_language(
    qs: QuerySet, text: EmbeddingMatrix | Mapping[int, np.ndarray] | None
) -> QuerySet:
    """Element-wise add each query's matched text embedding.

    ``None`` disables fusion (identical to fusing all-zero embeddings). A plain
    mapping of id -> vector is accepted so ablations can fuse arbitrary rows.
    """
    if text is None:
        return qs
    if isinstance(text, EmbeddingMatrix):
        rows = {cid: text.row_for(cid) for cid in set(qs.matched_text_ids)}
    else:
        rows = {cid: np.asarray(text[cid]) for cid in set(qs.matched_text_ids)}
    dim = qs.queries.shape[1]
    for cid, row in rows.items():
        if row.shape != (dim,):
            raise DetectorError(f"fusion embedding for id {cid} has shape {row.shape}, want ({dim},)")
    stacked = torch.from_numpy(
        np.stack([rows[cid] for cid in qs.matched_text_ids]).astype(np.float32)
    )
    return QuerySet(
        queries=qs.queries + stacked,
        matched_text_ids=qs.matched_text_ids,
        boxes=qs.boxes,
    )


@dataclass(frozen=True)
class LossWeights:
    classification: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    match_classification: float = 2.0
    match_l1: float = 5.0
    match_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def hungarian_match(
    out: DetectionOutput,
    gt_boxes: torch.Tensor,
    gt_class_cols: np.ndarray,
    weights: LossWeights,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard DETR matching: class + L1 + gIoU costs, solved exactly."""
    with torch.no_grad():
        prob = out.det_scores
        cost_class = -prob[:, torch.from_numpy(gt_class_cols)]
        cost_l1 = torch.cdist(out.boxes, gt_boxes, p=1)
        cost_giou = -generalized_box_iou(
            box_cxcywh_to_xyxy(out.boxes), box_cxcywh_to_xyxy(gt_boxes)
        )
        cost = (
            weights.match_classification * cost_class
            + weights.match_l1 * cost_l1
            + weights.match_giou * cost_giou
        )
    rows, cols = linear_sum_assignment(cost.cpu().numpy())
    return rows, cols


def sigmoid_focal_loss(
    logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float
) -> torch.Tensor:
    prob = torch.sigmoid(logits)
    ce = nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = prob * targets + (1 - prob) * (1 - targets)
    loss = ce * ((1 - p_t) ** gamma)
    if alpha >= 0:
        alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
        loss = alpha_t * loss
    return loss


def encoder_selection_loss(
    encoded: EncodedMap,
    text: EmbeddingMatrix,
    gt_boxes: torch.Tensor | np.ndarray,
    gt_labels: Sequence[int],
    active_ids: Sequence[int],
    weights: LossWeights = LossWeights(),
    logit_scale: float = 20.0,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Auxiliary two-stage loss shaping the pixel scores used for query selection.

    Each ground-truth box claims the encoder cell nearest its center; that
    cell's raw text dot product is trained up for the gt class and down
    elsewhere, and its proposal box regresses to the gt. Classification is
    masked to the active (federated) categories exactly like the main loss.
    """
    col_of = {cid: i for i, cid in enumerate(text.ids)}
    active = sorted(set(active_ids))
    missing = [cid for cid in active if cid not in col_of]
    if missing:
        raise DetectorError(f"active categories {missing} not among classifier columns")
    bad = [c for c in gt_labels if c not in set(active)]
    if bad:
        raise DetectorError(
            f"ground-truth categories {sorted(set(bad))} missing from active set; "
            "sampler contract violated"
        )
    if isinstance(gt_boxes, np.ndarray):
        gt_boxes = torch.from_numpy(gt_boxes.astype(np.float32))
    gt_boxes = gt_boxes.to(encoded.features.dtype)

    weights_t = torch.from_numpy(text.rows.copy()).to(encoded.features.dtype)
    # cosine keeps the focal logits bounded; pixel norms are near-constant after
    # LayerNorm, so the cosine ranking matches the raw-dot ranking used by selection
    unit = encoded.features / encoded.features.norm(dim=-1, keepdim=True).clamp(min=1e-9)
    dots = unit @ weights_t.T
    active_cols = torch.tensor([col_of[cid] for cid in active], dtype=torch.long)
    logits = logit_scale * dots[:, active_cols]
    targets = torch.zeros_like(logits)
    active_pos = {cid: i for i, cid in enumerate(active)}

    num_gt = len(gt_labels)
    if num_gt > 0:
        g = encoded.grid_h
        cell_idx = []
        for box in gt_boxes:
            col = int(torch.clamp(box[0] * g - 0.5, 0, g - 1).round())
            row = int(torch.clamp(box[1] * g - 0.5, 0, g - 1).round())
            cell_idx.append(row * encoded.grid_w + col)
        for i, label in enumerate(gt_labels):
            targets[cell_idx[i], active_pos[label]] = 1.0
        pos = torch.tensor(cell_idx, dtype=torch.long)
        matched = encoded.proposal_boxes[pos]
        loss_l1 = torch.abs(matched - gt_boxes).sum() / num_gt
        giou = generalized_box_iou(box_cxcywh_to_xyxy(matched), box_cxcywh_to_xyxy(gt_boxes))
        loss_giou = (1.0 - torch.diagonal(giou)).sum() / num_gt
    else:
        loss_l1 = logits.new_zeros(())
        loss_giou = logits.new_zeros(())

    loss_cls = sigmoid_focal_loss(
        logits, targets, weights.focal_alpha, weights.focal_gamma
    ).sum() / max(1, num_gt)
    total = (
        weights.classification * loss_cls
        + weights.l1 * loss_l1
        + weights.giou * loss_giou
    )
    breakdown = {
        "enc_cls": float(loss_cls.detach()),
        "enc_l1": float(loss_l1.detach()),
        "enc_giou": float(loss_giou.detach()),
        "enc_total": float(total.detach()),
    }
    return total, breakdown


def detection_loss(
    out: DetectionOutput,
    gt_boxes: torch.Tensor | np.ndarray,
    gt_labels: Sequence[int],
    active_ids: Sequence[int],
    weights: LossWeights = LossWeights(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Federated set-prediction loss: classification restricted to active categories.

    Classification (sigmoid focal) runs only over the columns of
    ``active_ids``; box L1 + gIoU run on Hungarian-matched pairs. Gradients
    with respect to non-active columns are exactly zero.
    """
    col_of = {cid: i for i, cid in enumerate(out.category_ids)}
    active = sorted(set(active_ids))
    missing = [cid for cid in active if cid not in col_of]
    if missing:
        raise DetectorError(f"active categories {missing} not among detector output columns")
    bad = [c for c in gt_labels if c not in set(active)]
    if bad:
        raise DetectorError(
            f"ground-truth categories {sorted(set(bad))} missing from active set; "
            "sampler contract violated"
        )
    active_cols = torch.tensor([col_of[cid] for cid in active], dtype=torch.long)
    logits = out.logits[:, active_cols]
    active_pos = {cid: i for i, cid in enumerate(active)}

    if isinstance(gt_boxes, np.ndarray):
        gt_boxes = torch.from_numpy(gt_boxes.astype(np.float32))
    gt_boxes = gt_boxes.to(out.boxes.dtype)
    num_gt = len(gt_labels)
    targets = torch.zeros_like(logits)
    breakdown: dict[str, float] = {}

    if num_gt > 0:
        gt_cols_full = np.array([col_of[c] for c in gt_labels])
        rows, cols = hungarian_match(out, gt_boxes, gt_cols_full, weights)
        for r, c in zip(rows, cols):
            targets[r, active_pos[gt_labels[c]]] = 1.0
        matched_pred = out.boxes[torch.from_numpy(rows)]
        matched_gt = gt_boxes[torch.from_numpy(cols)]
        loss_l1 = torch.abs(matched_pred - matched_gt).sum() / num_gt
        giou = generalized_box_iou(
            box_cxcywh_to_xyxy(matched_pred), box_cxcywh_to_xyxy(matched_gt)
        )
        loss_giou = (1.0 - torch.diagonal(giou)).sum() / num_gt
    else:
        loss_l1 = logits.new_zeros(())
        loss_giou = logits.new_zeros(())

    loss_cls = sigmoid_focal_loss(
        logits, targets, weights.focal_alpha, weights.focal_gamma
    ).sum() / max(1, num_gt)

    total = (
        weights.classification * loss_cls
        + weights.l1 * loss_l1
        + weights.giou * loss_giou
    )
    breakdown["loss_cls"] = float(loss_cls.detach())
    breakdown["loss_l1"] = float(loss_l1.detach())
    breakdown["loss_giou"] = float(loss_giou.detach())
    breakdown["total"] = float(total.detach())
    return total, breakdown


def _state_arrays(model: LamiDetector) -> list[tuple[str, np.ndarray]]:
    return [(name, tensor.detach().cpu().numpy()) for name, tensor in model.state_dict().items()]


def save_checkpoint(model: LamiDetector, path: str | Path, extra: dict | None = None) -> None:
    """Single-file archive: JSON header (config + parameter table) then raw blobs."""
    arrays = _state_arrays(model)
    header = {
        "config": asdict(model.config),
        "extra": extra or {},
        "params": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in arrays
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", LCKP_MAGIC, LCKP_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path: str | Path) -> tuple[LamiDetector, dict]:
    path = Path(path)
    blob = path.read_bytes()
    head_size = struct.calcsize("<4sIQ")
    if len(blob) < head_size:
        raise DetectorError(f"{path}: truncated checkpoint header")
    magic, version, json_len = struct.unpack("<4sIQ", blob[:head_size])
    if magic != LCKP_MAGIC:
        raise DetectorError(f"{path}: bad checkpoint magic {magic!r}")
    if version != LCKP_VERSION:
        raise DetectorError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[head_size : head_size + json_len])
    model = LamiDetector(DetectorConfig(**header["config"]))
    offset = head_size + json_len
    state = {}
    for spec in header["params"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        dtype = np.dtype(spec["dtype"])
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(spec["shape"])
        state[spec["name"]] = torch.from_numpy(arr.copy())
        offset += nbytes
    if offset != len(blob):
        raise DetectorError(f"{path}: checkpoint has {len(blob) - offset} trailing bytes")
    model.load_state_dict(state)
    return model, header["extra"]


LFMP_MAGIC = b"LFMP"


def save_feature_map(fmap: ImageFeatureMap, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", LFMP_MAGIC, 1, fmap.height, fmap.width, fmap.dim))
        fh.write(np.ascontiguousarray(fmap.features, dtype="<f4").tobytes())


def load_feature_map(path: str | Path) -> ImageFeatureMap:
    path = Path(path)
    blob = path.read_bytes()
    head = struct.calcsize("<4sIIII")
    magic, version, h, w, d = struct.unpack("<4sIIII", blob[:head])
    if magic != LFMP_MAGIC or version != 1:
        raise DetectorError(f"{path}: not a feature-map file")
    data = np.frombuffer(blob, dtype="<f4", offset=head)
    if data.size != h * w * d:
        raise DetectorError(f"{path}: feature payload size mismatch")
    return ImageFeatureMap(height=h, width=w, dim=d, features=data.reshape(h, w, d).copy())


class FeatureFileProvider:
    """Frozen features from ``<root>/<image_id>.lfm`` written by a real backbone."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def features(self, image: np.ndarray, image_id: int | None = None) -> ImageFeatureMap:
        if image_id is None:
            raise DetectorError("feature-file provider needs an image_id")
        path = self.root / f"{image_id}.lfm"
        if not path.exists():
            raise DetectorError(f"no precomputed features at {path}")
        return load_feature_map(path)
