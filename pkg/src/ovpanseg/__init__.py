"""Open-vocabulary panoptic segmentation on precomputed backbone features."""

from .dataio import GroundTruth, PanopticMap, SegmentInfo, Vocabulary
from .decoder import MaskPredictions, decoder_forward, mask_probabilities
from .fixtures import (ArchConfig, FeatureBundle, ModelWeights, SynthSpec,
                       init_weights, load_bundle, save_bundle, synth_bundle)
from .inference import (ClassDistributions, FusedClassScores, FusionConfig,
                        classify, geometric_ensemble, mase, panoptic_fuse,
                        selective_entropy, semantic_project)
from .ldp import MaskEmbeddings, clip_embed, embed_masks, ldp_forward, mask_pool
from .losses import LossReport, class_loss, iou_loss, mask_loss, total_loss
from .matching import Assignment, hungarian, match_cost
from .metrics import PqAccumulator, make_accumulator, miou, pq_accumulate, pq_report
from .pyramid import MultiScaleFeatures, fpn_forward

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "Assignment", "ClassDistributions", "FeatureBundle",
    "FusedClassScores", "FusionConfig", "GroundTruth", "LossReport",
    "MaskEmbeddings", "MaskPredictions", "ModelWeights", "MultiScaleFeatures",
    "PanopticMap", "PqAccumulator", "SegmentInfo", "SynthSpec", "Vocabulary",
    "class_loss", "classify", "clip_embed", "decoder_forward", "embed_masks",
    "fpn_forward", "geometric_ensemble", "hungarian", "init_weights",
    "iou_loss", "ldp_forward", "load_bundle", "make_accumulator", "mase",
    "mask_loss", "mask_pool", "mask_probabilities", "match_cost", "miou",
    "panoptic_fuse", "pq_accumulate", "pq_report", "save_bundle",
    "selective_entropy", "semantic_project", "synth_bundle", "total_loss",
]
