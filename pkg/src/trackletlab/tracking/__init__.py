"""Multi-object tracking and the HOTA/IDF1/CLEAR evaluation suite."""

from .kalman import KalmanFilter, tlwh_to_xyah, xyah_to_tlwh
from .metrics import (
    ClearResult,
    HotaResult,
    Idf1Result,
    MotMetrics,
    eval_clear,
    eval_hota,
    eval_idf1,
    evaluate_mot,
)
from .tracker import (
    Association,
    Tracker,
    TrackerConfig,
    TrackState,
    TrackStatus,
    associate_two_stage,
    hungarian_min_cost,
    iou,
    iou_matrix,
    run_tracker,
)

__all__ = [
    "Association",
    "ClearResult",
    "HotaResult",
    "Idf1Result",
    "KalmanFilter",
    "MotMetrics",
    "TrackState",
    "TrackStatus",
    "Tracker",
    "TrackerConfig",
    "associate_two_stage",
    "eval_clear",
    "eval_hota",
    "eval_idf1",
    "evaluate_mot",
    "hungarian_min_cost",
    "iou",
    "iou_matrix",
    "run_tracker",
    "tlwh_to_xyah",
    "xyah_to_tlwh",
]
