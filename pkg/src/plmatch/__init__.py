"""Overlap-weighted dense matching for momentum-contrast self-supervised learning."""

from .geometry import AugmentationSpec, MatchWeights, OverlapMatrix, PatchGrid, PhotometricParams, Rect, match_weights, overlap_matrix, patch_boxes, rect_intersection_area
from .losses import NegativeQueue, combined_loss, global_loss, info_nce, local_loss, queue_push
from .matching import FeatureGrid, MatchedTargets, feature_match, location_match, precise_match

__version__ = "0.1.0"
