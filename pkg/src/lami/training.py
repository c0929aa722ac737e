"""Training harness: profiles, artifact building, the train loop, and evaluation.

Profiles mirror the cumulative ablation ladder:

  baseline    federated loss only
  +fusion     adds language embedding fusion into selected queries
  +sampling   adds cluster-exclusion concept sampling (the core mechanism)
  +update     classifier/fusion embeddings from description texts, not names
  +confusing  inference-time classifier from contrastive descriptions

Every pipeline stage is deterministic under the configured seeds: dataset
rendering, description fixtures, embeddings, clustering, batch order,
federated draws, and the torch model init.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from lami.clustering import ClusterModel, fit_clusters, visually_similar_set
from lami.concepts import ConceptDictionary
from lami.descriptions import (
    DescriptionCache,
    FixtureClient,
    VisualDescription,
    confusing_pairs,
    default_base_template,
    default_contrastive_template,
    generate_contrastive_descriptions,
    generate_descriptions,
)
from lami.detector import (
    DetectorConfig,
    LamiDetector,
    LossWeights,
    detection_loss,
    encoder_selection_loss,
    fuse_language,
    save_checkpoint,
)
from lami.embeddings import EmbeddingMatrix, TokenHashProvider, embed_classifier, embed_semantic
from lami.errors import ConfigError, DatasetError
from lami.inference import (
    CalibrationConfig,
    ImageDetections,
    apply_novel_factor,
    apply_novel_factor_to_logits,
    build_inference_classifier,
    calibrate_scores,
    pool_region_feature,
    rank_detections,
    vlm_score,
)
from lami.metrics import evaluate_map
from lami.sampler import SamplingState
from lami.toydata import DatasetSpec, ToyDataset, default_toy_spec, generate_toy_dataset

logger = logging.getLogger(__name__)

# full-scale profiles reported for the real datasets; the toy config overrides these
OV_LVIS_CLUSTER_K = 128
VG_DEDUP_CLUSTER_K = 256
OV_LVIS_C_FED = 100
VG_DEDUP_C_FED = 700


@dataclass(frozen=True)
class ProfileFlags:
    use_fusion: bool
    use_concept_sampling: bool
    classifier_text: str  # name | description
    inference_classifier: str  # training | contrastive


PROFILES: dict[str, ProfileFlags] = {
    "baseline": ProfileFlags(False, False, "name", "training"),
    "+fusion": ProfileFlags(True, False, "name", "training"),
    "+sampling": ProfileFlags(True, True, "name", "training"),
    "+update": ProfileFlags(True, True, "description", "training"),
    "+confusing": ProfileFlags(True, True, "description", "contrastive"),
}


@dataclass(frozen=True)
class TrainConfig:
    profile: str = "baseline"
    seed: int = 0
    steps: int = 250
    batch_size: int = 4
    learning_rate: float = 2e-3
    c_fed: int = 6
    cluster_k: int = 6
    cluster_seed: int = 0
    repeat_factor_t: float = 0.001
    semantic_seed: int = 101
    classifier_seed: int = 202
    alpha: float = 0.0
    beta: float = 0.0
    novel_factor: float = 1.0
    factor_stage: str = "score"
    vlm_temperature: float = 0.01
    top_k: int = 100
    loss_weights: LossWeights = LossWeights()
    detector: DetectorConfig = DetectorConfig()
    dataset: DatasetSpec = field(default_factory=default_toy_spec)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(
                f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}"
            )
        trainable = [c for c in self.dataset.categories if c.split in ("base", "novel")]
        if self.c_fed > len(trainable):
            raise ConfigError(
                f"c_fed={self.c_fed} exceeds training vocabulary size {len(trainable)}"
            )
        if self.dataset.image_size != self.detector.image_size:
            raise ConfigError(
                f"dataset image size {self.dataset.image_size} does not match "
                f"detector image size {self.detector.image_size}"
            )

    def flags(self) -> ProfileFlags:
        return PROFILES[self.profile]

    def detector_config(self) -> DetectorConfig:
        return dataclasses.replace(self.detector, seed=self.seed)


def repeat_factor_weights(
    image_categories: Sequence[Iterable[int]],
    frequencies: Mapping[int, float],
    t: float,
) -> np.ndarray:
    """Per-image oversampling weight: max over categories of max(1, sqrt(t / f(c)))."""
    if not 0.0 < t <= 1.0:
        raise ConfigError(f"repeat-factor threshold must be in (0, 1], got {t}")
    weights = np.ones(len(image_categories))
    for i, cats in enumerate(image_categories):
        factor = 1.0
        for c in cats:
            f = frequencies.get(c, 0.0)
            if f <= 0.0:
                raise ConfigError(f"category {c} present in an image but has zero frequency")
            factor = max(factor, math.sqrt(t / f))
        weights[i] = max(1.0, factor)
    return weights


@dataclass
class PipelineArtifacts:
    dataset: ToyDataset
    dictionary: ConceptDictionary
    base_descriptions: list[VisualDescription]
    semantic: EmbeddingMatrix
    name_classifier: EmbeddingMatrix
    description_classifier: EmbeddingMatrix
    cluster_model: ClusterModel
    sampling_state: SamplingState

    def classifier_for(self, flags: ProfileFlags) -> EmbeddingMatrix:
        full = (
            self.name_classifier
            if flags.classifier_text == "name"
            else self.description_classifier
        )
        vocab = sorted(
            set(self.dataset.base_ids()) | set(self.dataset.novel_ids())
        )
        return full.submatrix(vocab)


def build_artifacts(
    config: TrainConfig, cache_root: str | Path, dataset: ToyDataset | None = None
) -> PipelineArtifacts:
    """Run the language-side pipeline: dataset, descriptions, embeddings, clusters."""
    cache_root = Path(cache_root)
    dataset = dataset or generate_toy_dataset(config.dataset, config.seed)
    dictionary = dataset.vocabulary

    template = default_base_template()
    client = FixtureClient(dataset.base_transcript(template))
    cache = DescriptionCache(cache_root / "descriptions")
    descriptions = generate_descriptions(dictionary, client, template, cache=cache)

    dim = config.detector.dim
    semantic = embed_semantic(descriptions, TokenHashProvider(dim, config.semantic_seed))
    classifier_provider = TokenHashProvider(dim, config.classifier_seed)
    name_classifier = embed_classifier(
        [(c.id, c.name) for c in dictionary.concepts], classifier_provider
    )
    text_by_id = {d.concept_id: d.text for d in descriptions}
    description_classifier = embed_classifier(
        [(c.id, text_by_id[c.id]) for c in dictionary.concepts], classifier_provider
    )

    # best-of-N restarts by inertia; each restart is itself a deterministic fit
    cluster_model = min(
        (
            fit_clusters(semantic, K=config.cluster_k, seed=config.cluster_seed + i)
            for i in range(8)
        ),
        key=lambda m: m.inertia,
    )

    vocab = tuple(sorted(set(dataset.base_ids()) | set(dataset.novel_ids())))
    sampling_state = SamplingState.from_annotations(
        dataset.train_annotation_stream(), vocab, c_fed=config.c_fed, rng_seed=config.seed
    )
    return PipelineArtifacts(
        dataset=dataset,
        dictionary=dictionary,
        base_descriptions=descriptions,
        semantic=semantic,
        name_classifier=name_classifier,
        description_classifier=description_classifier,
        cluster_model=cluster_model,
        sampling_state=sampling_state,
    )


@dataclass
class IterationRecord:
    step: int
    gt_ids: tuple[int, ...]
    excluded: tuple[int, ...]  # C_g for the iteration
    active: tuple[int, ...]


@dataclass
class TrainResult:
    model: LamiDetector
    config: TrainConfig
    artifacts: PipelineArtifacts
    metrics_rows: list[dict]
    iteration_log: list[IterationRecord]


METRICS_COLUMNS = (
    "step", "total", "loss_cls", "loss_l1", "loss_giou",
    "enc_cls", "enc_l1", "enc_giou", "active_size",
)


def write_metrics_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) for c in METRICS_COLUMNS) + "\n")


def train(
    config: TrainConfig,
    cache_root: str | Path,
    dataset: ToyDataset | None = None,
    artifacts: PipelineArtifacts | None = None,
) -> TrainResult:
    """Per-iteration pipeline: weighted batch, C_g, calibrated federated draw,
    forward with fusion, masked detection loss, optimizer step."""
    artifacts = artifacts or build_artifacts(config, cache_root, dataset=dataset)
    dataset = artifacts.dataset
    flags = config.flags()
    novel_ids = set(dataset.novel_ids())

    classifier = artifacts.classifier_for(flags)
    model = LamiDetector(config.detector_config())
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate)

    train_ids = list(dataset.train_ids)
    image_categories = [
        {a.category_id for a in dataset.train_annotations(i)} for i in train_ids
    ]
    freq_by_id = {
        cid: float(f)
        for cid, f in zip(artifacts.sampling_state.vocabulary, artifacts.sampling_state.frequencies)
    }
    rf_weights = repeat_factor_weights(image_categories, freq_by_id, config.repeat_factor_t)
    batch_probs = rf_weights / rf_weights.sum()

    batch_rng = np.random.default_rng([config.seed, 7])
    sampler_rng = np.random.default_rng([config.seed, 13])

    rows: list[dict] = []
    iteration_log: list[IterationRecord] = []
    fmap_cache: dict[int, object] = {}
    for step in range(config.steps):
        batch = batch_rng.choice(len(train_ids), size=config.batch_size, p=batch_probs)
        batch_image_ids = [train_ids[i] for i in batch]
        gt_union: set[int] = set()
        per_image = []
        for image_id in batch_image_ids:
            anns = dataset.train_annotations(image_id)
            for a in anns:
                if a.category_id in novel_ids:
                    raise DatasetError(
                        f"protocol violation: novel category {a.category_id} in training batch"
                    )
            per_image.append((image_id, anns))
            gt_union.update(a.category_id for a in anns)

        if flags.use_concept_sampling:
            cg = visually_similar_set(artifacts.cluster_model, gt_union)
        else:
            cg = set(gt_union)
        active = artifacts.sampling_state.iteration_vocabulary(gt_union, cg, sampler_rng)
        active_sorted = sorted(set(active))
        text_active = classifier.submatrix(active_sorted)
        fusion_text = text_active if flags.use_fusion else None

        total = None
        breakdown_sum = {
            "loss_cls": 0.0, "loss_l1": 0.0, "loss_giou": 0.0,
            "enc_cls": 0.0, "enc_l1": 0.0, "enc_giou": 0.0, "total": 0.0,
        }
        for image_id, anns in per_image:
            if image_id not in fmap_cache:
                fmap_cache[image_id] = model.backbone_features(dataset.images[image_id])
            encoded = model.encode(fmap_cache[image_id])
            qs = model.select_top_queries(encoded, text_active)
            qs = fuse_language(qs, fusion_text)
            out = model.decode(qs, encoded, text_active)
            gt_boxes = np.array([a.box for a in anns], dtype=np.float32).reshape(-1, 4)
            gt_labels = [a.category_id for a in anns]
            loss, breakdown = detection_loss(
                out, gt_boxes, gt_labels, active_sorted, weights=config.loss_weights
            )
            enc_loss, enc_breakdown = encoder_selection_loss(
                encoded, text_active, gt_boxes, gt_labels, active_sorted,
                weights=config.loss_weights,
                logit_scale=config.detector.logit_scale_init,
            )
            loss = loss + enc_loss
            total = loss if total is None else total + loss
            for k in ("loss_cls", "loss_l1", "loss_giou"):
                breakdown_sum[k] += breakdown[k]
            for short, long in (("enc_cls", "enc_cls"), ("enc_l1", "enc_l1"), ("enc_giou", "enc_giou")):
                breakdown_sum[short] += enc_breakdown[long]
            breakdown_sum["total"] += breakdown["total"] + enc_breakdown["enc_total"]
        total = total / len(per_image)

        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        n = len(per_image)
        rows.append(
            {
                "step": step,
                "total": breakdown_sum["total"] / n,
                "loss_cls": breakdown_sum["loss_cls"] / n,
                "loss_l1": breakdown_sum["loss_l1"] / n,
                "loss_giou": breakdown_sum["loss_giou"] / n,
                "enc_cls": breakdown_sum["enc_cls"] / n,
                "enc_l1": breakdown_sum["enc_l1"] / n,
                "enc_giou": breakdown_sum["enc_giou"] / n,
                "active_size": len(active_sorted),
            }
        )
        iteration_log.append(
            IterationRecord(
                step=step,
                gt_ids=tuple(sorted(gt_union)),
                excluded=tuple(sorted(cg)),
                active=tuple(active_sorted),
            )
        )
    return TrainResult(
        model=model,
        config=config,
        artifacts=artifacts,
        metrics_rows=rows,
        iteration_log=iteration_log,
    )


def inference_classifier_for(
    config: TrainConfig,
    artifacts: PipelineArtifacts,
    cache_root: str | Path,
) -> EmbeddingMatrix:
    """The classifier used for VLM scoring at inference, per profile."""
    flags = config.flags()
    training_classifier = artifacts.classifier_for(flags)
    if flags.inference_classifier == "training":
        return training_classifier
    dataset = artifacts.dataset
    pairs = confusing_pairs(training_classifier)
    template = default_contrastive_template()
    client = FixtureClient(dataset.contrastive_transcript(template, pairs))
    cache = DescriptionCache(Path(cache_root) / "contrastive")
    descs = generate_contrastive_descriptions(
        artifacts.dictionary, pairs, client, template, cache=cache
    )
    provider = TokenHashProvider(config.detector.dim, config.classifier_seed)
    return build_inference_classifier(descs, provider, vocabulary_ids=training_classifier.ids)


def calibration_config(config: TrainConfig, dataset: ToyDataset) -> CalibrationConfig:
    return CalibrationConfig(
        alpha=config.alpha,
        beta=config.beta,
        novel_factor=config.novel_factor,
        base_ids=frozenset(dataset.base_ids()),
        novel_ids=frozenset(dataset.novel_ids()),
        factor_stage=config.factor_stage,
    )


def run_inference(
    model: LamiDetector,
    dataset: ToyDataset,
    image_ids: Sequence[int],
    detection_classifier: EmbeddingMatrix,
    vlm_classifier: EmbeddingMatrix,
    cal_cfg: CalibrationConfig,
    *,
    use_fusion: bool,
    vlm_temperature: float,
    top_k: int = 100,
) -> list[ImageDetections]:
    if detection_classifier.ids != vlm_classifier.ids:
        raise ConfigError("detection and VLM classifiers cover different vocabularies")
    ids = detection_classifier.ids
    results = []
    fusion_text = detection_classifier if use_fusion else None
    with torch.no_grad():
        for image_id in image_ids:
            fmap = model.backbone_features(dataset.images[image_id], image_id=image_id)
            encoded = model.encode(fmap)
            qs = model.select_top_queries(encoded, detection_classifier)
            qs = fuse_language(qs, fusion_text)
            out = model.decode(qs, encoded, detection_classifier)
            boxes = out.boxes.numpy().astype(np.float64)
            logits = out.logits.numpy().astype(np.float64)
            if cal_cfg.factor_stage == "logit":
                logits = apply_novel_factor_to_logits(logits, cal_cfg, ids)
            s_det = 1.0 / (1.0 + np.exp(-logits))
            region = np.stack([pool_region_feature(fmap, b) for b in boxes])
            s_vlm = vlm_score(region, vlm_classifier, temperature=vlm_temperature)
            s_cal = calibrate_scores(s_vlm, s_det, cal_cfg, category_ids=ids)
            final = (
                apply_novel_factor(s_cal, cal_cfg, ids)
                if cal_cfg.factor_stage == "score"
                else s_cal
            )
            results.append(
                rank_detections(image_id, boxes, s_det, s_vlm, s_cal, final, ids, top_k=top_k)
            )
    return results


@dataclass
class EvaluationResult:
    detections: list[ImageDetections]
    metrics: dict[str, float]


def evaluate(
    result: TrainResult, cache_root: str | Path, image_ids: Sequence[int] | None = None
) -> EvaluationResult:
    config = result.config
    dataset = result.artifacts.dataset
    flags = config.flags()
    detection_classifier = result.artifacts.classifier_for(flags)
    vlm_classifier = inference_classifier_for(config, result.artifacts, cache_root)
    cal_cfg = calibration_config(config, dataset)
    image_ids = list(image_ids if image_ids is not None else dataset.eval_ids)
    detections = run_inference(
        result.model,
        dataset,
        image_ids,
        detection_classifier,
        vlm_classifier,
        cal_cfg,
        use_fusion=flags.use_fusion,
        vlm_temperature=config.vlm_temperature,
        top_k=config.top_k,
    )
    gt = {i: dataset.eval_annotations(i) for i in image_ids}
    metrics = evaluate_map(detections, gt, dataset.base_ids(), dataset.novel_ids())
    return EvaluationResult(detections=detections, metrics=metrics)


def train_and_evaluate(
    config: TrainConfig, cache_root: str | Path, dataset: ToyDataset | None = None
) -> tuple[TrainResult, EvaluationResult]:
    result = train(config, cache_root, dataset=dataset)
    return result, evaluate(result, cache_root)


def ablate(
    base_config: TrainConfig,
    profiles: Sequence[str],
    seeds: Sequence[int],
    cache_root: str | Path,
) -> dict[str, list[dict[str, float]]]:
    """Train and evaluate each profile over the seeds; returns per-run metric dicts."""
    table: dict[str, list[dict[str, float]]] = {}
    for profile in profiles:
        runs = []
        for seed in seeds:
            config = dataclasses.replace(base_config, profile=profile, seed=seed)
            _, evaluation = train_and_evaluate(config, cache_root)
            runs.append(evaluation.metrics)
            logger.info("profile=%s seed=%d metrics=%s", profile, seed, evaluation.metrics)
        table[profile] = runs
    return table


def save_run(result: TrainResult, evaluation: EvaluationResult | None, out_dir: str | Path) -> None:
    from lami.clustering import save_cluster_model
    from lami.concepts import save_dictionary
    from lami.embeddings import save_embeddings
    from lami.inference import write_detections_jsonl

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "checkpoint.lckp", extra={"profile": result.config.profile})
    write_metrics_csv(result.metrics_rows, out / "metrics.csv")
    save_dictionary(result.artifacts.dictionary, out / "dictionary.jsonl")
    save_embeddings(result.artifacts.semantic, out / "semantic.lemb", metadata={"provider": "tokenhash"})
    save_embeddings(
        result.artifacts.name_classifier, out / "classifier.lemb", metadata={"provider": "tokenhash"}
    )
    save_cluster_model(result.artifacts.cluster_model, out / "clusters.json")
    if evaluation is not None:
        write_detections_jsonl(evaluation.detections, out / "detections.jsonl")
        with open(out / "eval_metrics.json", "w", encoding="utf-8") as fh:
            json.dump(evaluation.metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")


# --- configuration file handling (JSON, sections per module) ---


def config_to_dict(config: TrainConfig) -> dict:
    return {
        "profile": config.profile,
        "train": {
            "seed": config.seed,
            "steps": config.steps,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "c_fed": config.c_fed,
            "repeat_factor_t": config.repeat_factor_t,
        },
        "clustering": {"k": config.cluster_k, "seed": config.cluster_seed},
        "embeddings": {
            "semantic_seed": config.semantic_seed,
            "classifier_seed": config.classifier_seed,
        },
        "inference": {
            "alpha": config.alpha,
            "beta": config.beta,
            "novel_factor": config.novel_factor,
            "factor_stage": config.factor_stage,
            "vlm_temperature": config.vlm_temperature,
            "top_k": config.top_k,
        },
        "loss": dataclasses.asdict(config.loss_weights),
        "model": dataclasses.asdict(config.detector),
        "dataset": {
            "image_size": config.dataset.image_size,
            "n_train": config.dataset.n_train,
            "n_eval": config.dataset.n_eval,
            "min_objects": config.dataset.min_objects,
            "max_objects": config.dataset.max_objects,
            "background": list(config.dataset.background),
            "noise": config.dataset.noise,
            "max_box_iou": config.dataset.max_box_iou,
            "categories": [dataclasses.asdict(c) for c in config.dataset.categories],
        },
    }


def config_from_dict(payload: Mapping) -> TrainConfig:
    from lami.toydata import CategorySpec

    try:
        dataset_section = payload.get("dataset")
        if dataset_section is None:
            dataset = default_toy_spec()
        else:
            categories = tuple(
                CategorySpec(
                    name=c["name"],
                    shape=c["shape"],
                    color_name=c["color_name"],
                    rgb=tuple(c["rgb"]),
                    split=c["split"],
                    size_range=tuple(c.get("size_range", (0.15, 0.30))),
                    texture=c.get("texture", "solid"),
                    weight=c.get("weight", 1.0),
                    tone=c.get("tone"),
                )
                for c in dataset_section["categories"]
            )
            dataset = DatasetSpec(
                categories=categories,
                image_size=dataset_section.get("image_size", 128),
                n_train=dataset_section.get("n_train", 120),
                n_eval=dataset_section.get("n_eval", 40),
                min_objects=dataset_section.get("min_objects", 1),
                max_objects=dataset_section.get("max_objects", 3),
                background=tuple(dataset_section.get("background", (28, 28, 32))),
                noise=dataset_section.get("noise", 8),
                max_box_iou=dataset_section.get("max_box_iou", 0.3),
            )
        train_s = payload.get("train", {})
        cluster_s = payload.get("clustering", {})
        emb_s = payload.get("embeddings", {})
        inf_s = payload.get("inference", {})
        loss_s = payload.get("loss", {})
        model_s = payload.get("model", {})
        return TrainConfig(
            profile=payload.get("profile", "baseline"),
            seed=train_s.get("seed", 0),
            steps=train_s.get("steps", 250),
            batch_size=train_s.get("batch_size", 4),
            learning_rate=train_s.get("learning_rate", 2e-3),
            c_fed=train_s.get("c_fed", 6),
            cluster_k=cluster_s.get("k", 6),
            cluster_seed=cluster_s.get("seed", 0),
            repeat_factor_t=train_s.get("repeat_factor_t", 0.001),
            semantic_seed=emb_s.get("semantic_seed", 101),
            classifier_seed=emb_s.get("classifier_seed", 202),
            alpha=inf_s.get("alpha", 0.0),
            beta=inf_s.get("beta", 0.0),
            novel_factor=inf_s.get("novel_factor", 1.0),
            factor_stage=inf_s.get("factor_stage", "score"),
            vlm_temperature=inf_s.get("vlm_temperature", 0.01),
            top_k=inf_s.get("top_k", 100),
            loss_weights=LossWeights(**loss_s),
            detector=DetectorConfig(**model_s),
            dataset=dataset,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file {path}; run with --config <file>")
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def save_config(config: TrainConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
