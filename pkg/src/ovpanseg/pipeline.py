"""End-to-end glue: dataset layout, per-image forward pass, parallel runs.

A dataset directory looks like::

    dataset/
      vocabulary.json
      bundles/<image>/manifest.json + *.f32
      gt/<image>.png + <image>.json
      weights/               (optional model-weights bundle)

Per-image work is pure, so images can run in separate processes; results
are always merged in sorted image order to keep reports reproducible.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .config import RunConfig
from .dataio import (GroundTruth, PanopticMap, SegmentInfo, Vocabulary,
                     overlap_mask, read_panoptic, write_panoptic)
from .decoder import MaskPredictions, decoder_forward, mask_probabilities
from .fixtures import (ArchConfig, FeatureBundle, ModelWeights, SynthSpec,
                       init_weights, load_bundle, load_weights, save_bundle,
                       save_weights, synth_bundle, synth_vocabulary)
from .inference import (ClassDistributions, FusionConfig, classify,
                        geometric_ensemble, mase, panoptic_fuse,
                        semantic_project)
from .ldp import embed_masks
from .pyramid import fpn_forward


@dataclass
class ImageResult:
    name: str
    panoptic: PanopticMap
    debug: dict


def dataset_image_names(dataset_dir: str | Path) -> list[str]:
    bundles = Path(dataset_dir) / "bundles"
    if not bundles.is_dir():
        raise FileNotFoundError(f"no bundles/ directory under {dataset_dir}")
    return sorted(p.name for p in bundles.iterdir() if p.is_dir())


def dataset_vocabulary(dataset_dir: str | Path) -> Vocabulary:
    return Vocabulary.load(Path(dataset_dir) / "vocabulary.json")


def arch_from_config(cfg: RunConfig, bundle: FeatureBundle) -> ArchConfig:
    return ArchConfig(
        d_sam=bundle.f_sam.shape[0],
        d_clip=bundle.f_clip.shape[0],
        d_emb=bundle.g_text.shape[1],
        d_pix=cfg.d_pix,
        n_queries=cfg.n_queries,
        layers=cfg.layers,
        heads=cfg.heads,
    )


def resolve_weights(cfg: RunConfig, arch: ArchConfig) -> ModelWeights:
    """Load the configured weights bundle, fall back to the dataset's
    weights/ directory, else to a seeded init."""
    path = cfg.weights
    if path is None and cfg.bundle_dir is not None:
        candidate = Path(cfg.bundle_dir) / "weights"
        if candidate.is_dir():
            path = str(candidate)
    if path is not None:
        weights = load_weights(path)
        if weights.arch != arch:
            raise ValueError(
                f"weights arch {weights.arch} does not match dataset/config arch {arch}"
            )
        return weights
    return init_weights(cfg.seed, arch, tau=cfg.tau)


def ensemble_scores(cfg: RunConfig, dist: ClassDistributions, p_iou: np.ndarray):
    if cfg.force_se_conf is not None:
        return geometric_ensemble(dist, p_iou, force_se_conf=cfg.force_se_conf)
    if cfg.geometric_baseline:
        return geometric_ensemble(dist, p_iou)
    return mase(dist, p_iou)


def fusion_config(cfg: RunConfig) -> FusionConfig:
    return FusionConfig(score_thresh=cfg.score_thresh, min_area=cfg.min_area,
                        overlap_thresh=cfg.overlap_thresh, upsample=cfg.upsample)


def run_image(bundle: FeatureBundle, weights: ModelWeights, cfg: RunConfig,
              name: str = "image") -> ImageResult:
    """Full forward pass for one image: pyramid, decoder, embeddings,
    classification, ensembling, panoptic fusion."""
    vocab = bundle.vocabulary
    f_ms = fpn_forward(bundle.f_sam, weights.fpn)
    preds = decoder_forward(f_ms, weights.decoder, layers=cfg.layers,
                            use_pos_encoding=cfg.use_pos_encoding)
    probs = mask_probabilities(preds)
    emb = embed_masks(
        f_ms.s4, bundle.f_clip, probs, weights.ldp,
        region_features=preds.f_masked if cfg.ldp_use_region_features else None,
        eps_area=cfg.eps_area, hard=cfg.hard_pooling,
    )
    p_ldp = classify(emb, bundle.g_text, weights.tau, stream="ldp")
    p_clip = classify(emb, bundle.g_text, cfg.effective_tau_clip, stream="clip")
    if vocab.seen_names is None:
        m = np.ones(vocab.size, dtype=bool)
    else:
        synonyms = None
        if cfg.synonyms_path:
            synonyms = json.loads(Path(cfg.synonyms_path).read_text())
        m = overlap_mask(vocab, vocab.seen_names, synonyms)
    dist = ClassDistributions(p_ldp_raw=p_ldp, p_clip_raw=p_clip, overlap_mask=m,
                              alpha=cfg.alpha, beta=cfg.beta)

    p_iou = preds.p_iou
    fused = ensemble_scores(cfg, dist, p_iou)
    p_class = fused.p_class
    if cfg.iou_floor is not None:
        p_class = np.where((p_iou >= cfg.iou_floor)[:, None], p_class, 0.0)

    fused_for_fuse = type(fused)(p_class=p_class, se_ldp=fused.se_ldp,
                                 se_clip=fused.se_clip, se_conf=fused.se_conf,
                                 alpha_hat=fused.alpha_hat, beta_hat=fused.beta_hat)
    pan = panoptic_fuse(probs, fused_for_fuse, vocab, fusion_config(cfg),
                        image_h=bundle.image_h, image_w=bundle.image_w)
    debug = {
        "p_iou": [float(v) for v in p_iou],
        "fused_argmax": [int(v) for v in fused.p_class.argmax(axis=1)],
        "alpha_hat": [float(v) for v in fused.alpha_hat],
        "beta_hat": [float(v) for v in fused.beta_hat],
        "se_conf": [float(v) for v in fused.se_conf],
    }
    return ImageResult(name=name, panoptic=pan, debug=debug)


def _infer_one(args: tuple) -> str:
    dataset_dir, name, cfg_dict, out_dir = args
    cfg = RunConfig(**cfg_dict)
    bundle = load_bundle(Path(dataset_dir) / "bundles" / name)
    arch = arch_from_config(cfg, bundle)
    weights = resolve_weights(cfg, arch)
    result = run_image(bundle, weights, cfg, name=name)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_panoptic(result.panoptic, out / f"{name}.png", out / f"{name}.json")
    (out / f"{name}_debug.json").write_text(
        json.dumps(result.debug, indent=2, sort_keys=True) + "\n")
    return name


def infer_dataset(cfg: RunConfig) -> list[str]:
    """Run inference over every image in the dataset; returns image names."""
    if cfg.bundle_dir is None:
        raise FileNotFoundError("bundle_dir is not set")
    names = dataset_image_names(cfg.bundle_dir)
    jobs = [(cfg.bundle_dir, name, asdict(cfg), cfg.out_dir) for name in names]
    if cfg.jobs <= 1:
        for job in jobs:
            _infer_one(job)
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            list(pool.map(_infer_one, jobs))
    return names


def _semantic_indices(pan: PanopticMap, vocab: Vocabulary) -> np.ndarray:
    """semantic_project remapped from category ids to vocabulary indices."""
    grid = semantic_project(pan)
    out = np.full(grid.shape, -1, dtype=np.int64)
    for idx, cat in enumerate(vocab.categories):
        out[grid == cat.id] = idx
    return out


def _evaluate_one(args: tuple) -> tuple[str, metrics.PqAccumulator, np.ndarray, np.ndarray]:
    dataset_dir, name, cfg_dict, pred_dir = args
    cfg = RunConfig(**cfg_dict)
    vocab = dataset_vocabulary(dataset_dir)
    seen = _seen_mask(cfg, vocab)
    gt_dir = Path(cfg.gt_dir) if cfg.gt_dir else Path(dataset_dir) / "gt"
    gt = read_panoptic(gt_dir / f"{name}.png", gt_dir / f"{name}.json")
    pred = read_panoptic(Path(pred_dir) / f"{name}.png", Path(pred_dir) / f"{name}.json")
    acc = metrics.pq_accumulate(metrics.make_accumulator(vocab, seen), pred, gt)
    miou_acc = metrics.MiouAccumulator.empty(vocab.size)
    miou_acc.add(_semantic_indices(pred, vocab), _semantic_indices(gt, vocab))
    return name, acc, miou_acc.intersection, miou_acc.union


def _seen_mask(cfg: RunConfig, vocab: Vocabulary) -> np.ndarray:
    if vocab.seen_names is None:
        return np.ones(vocab.size, dtype=bool)
    synonyms = None
    if cfg.synonyms_path:
        synonyms = json.loads(Path(cfg.synonyms_path).read_text())
    return overlap_mask(vocab, vocab.seen_names, synonyms)


def evaluate_dataset(cfg: RunConfig, pred_dir: str | Path | None = None) -> dict:
    """PQ family + mIoU of predictions in ``pred_dir`` (default: out_dir)
    against the dataset ground truth. Merging is in sorted image order, so
    the report does not depend on the worker count."""
    if cfg.bundle_dir is None:
        raise FileNotFoundError("bundle_dir is not set")
    pred_dir = Path(pred_dir) if pred_dir is not None else Path(cfg.out_dir)
    vocab = dataset_vocabulary(cfg.bundle_dir)
    seen = _seen_mask(cfg, vocab)
    names = dataset_image_names(cfg.bundle_dir)
    jobs = [(cfg.bundle_dir, name, asdict(cfg), str(pred_dir)) for name in names]
    if cfg.jobs <= 1:
        results = [_evaluate_one(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    results.sort(key=lambda r: r[0])

    acc = metrics.make_accumulator(vocab, seen)
    miou_acc = metrics.MiouAccumulator.empty(vocab.size)
    for _, img_acc, inter, union in results:
        acc = metrics.merge(acc, img_acc)
        miou_acc.intersection += inter
        miou_acc.union += union
    report = metrics.pq_report(acc)
    mean_iou, per_class = miou_acc.result()
    report["totals"]["mIoU"] = mean_iou
    report["miou_per_class"] = {
        vocab.categories[i].id: (None if np.isnan(per_class[i]) else float(per_class[i]))
        for i in range(vocab.size)
    }
    report["n_images"] = len(names)
    return report


def write_synth_dataset(cfg: RunConfig, out_dir: str | Path) -> list[str]:
    """Generate and persist a synthetic dataset plus a seeded weights bundle."""
    out = Path(out_dir)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(
        image_h=cfg.image_size, image_w=cfg.image_size,
        d_sam=cfg.d_sam, d_clip=cfg.d_clip, d_emb=cfg.d_emb,
        c_test=cfg.c_test, n_gt_segments=cfg.n_gt_segments,
        sam_noise=cfg.sam_noise, clip_noise=cfg.clip_noise,
    )
    vocab = synth_vocabulary(cfg.seed, cfg.c_test)
    text_rng = np.random.default_rng(cfg.seed)
    g_text = text_rng.standard_normal((cfg.c_test, cfg.d_emb))
    g_text /= np.linalg.norm(g_text, axis=1, keepdims=True)
    names = []
    for i in range(cfg.n_images):
        name = f"img_{i:04d}"
        bundle, gt = synth_bundle(cfg.seed + i, spec, vocabulary=vocab, g_text=g_text)
        save_bundle(bundle, out / "bundles" / name)
        pan = panoptic_from_gt(gt, vocab)
        write_panoptic(pan, out / "gt" / f"{name}.png", out / "gt" / f"{name}.json")
        names.append(name)
    vocab.save(out / "vocabulary.json")
    arch = ArchConfig(d_sam=cfg.d_sam, d_clip=cfg.d_clip, d_emb=cfg.d_emb,
                      d_pix=cfg.d_pix, n_queries=cfg.n_queries,
                      layers=cfg.layers, heads=cfg.heads)
    save_weights(init_weights(cfg.seed, arch, tau=cfg.tau), out / "weights")
    return names


def panoptic_from_gt(gt: GroundTruth, vocab: Vocabulary) -> PanopticMap:
    """Render a GroundTruth as a PanopticMap (ids 1..N in mask order)."""
    h, w = gt.y_mask.shape[1:]
    ids = np.zeros((h, w), dtype=np.int32)
    segments = []
    for i in range(gt.n_masks):
        seg_id = i + 1
        ids[gt.y_mask[i]] = seg_id
        segments.append(SegmentInfo(
            id=seg_id,
            category=vocab.id_of_index(int(gt.y_class[i])),
            is_thing=bool(gt.is_thing[i]),
            score=1.0,
        ))
    return PanopticMap(segment_ids=ids, segments=segments)
