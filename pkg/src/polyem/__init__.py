"""EM-based weakly supervised detection of arbitrary-shaped polygons on synthetic scenes."""

from .budget import Allocation, AnnotationPolicy, PolicyKind, estimate_cost, plan
from .detector import Candidate, DetectorConfig, DetectorState, LossConfig
from .em_engine import EmConfig, EmRoundReport, PseudoAnnotationSet, estep, mstep, run_em
from .evaluation import Metrics, evaluate, match_detections, prf
from .geometry import Box, Polygon, bbox_of_polygon, box_iou, extreme_points, polygon_iou
from .scene_synth import ImageRecord, SceneImage, SynthParams, split_dataset, synth_dataset
from .weak_labels import AnnotationCost, WeakKind, WeakLabel, make_weak_label

__all__ = [
    "Allocation", "AnnotationCost", "AnnotationPolicy", "Box", "Candidate", "DetectorConfig",
    "DetectorState", "EmConfig", "EmRoundReport", "ImageRecord", "LossConfig", "Metrics",
    "PolicyKind", "Polygon", "PseudoAnnotationSet", "SceneImage", "SynthParams", "WeakKind",
    "WeakLabel", "bbox_of_polygon", "box_iou", "estep", "estimate_cost", "evaluate",
    "extreme_points", "make_weak_label", "match_detections", "mstep", "plan", "polygon_iou",
    "prf", "run_em", "split_dataset", "synth_dataset",
]
