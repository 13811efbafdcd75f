"""
評価モジュール

指標、複数フレームの集約ベースライン、アブレーションとフレーム数スイープ
"""
from .ablation import (
    ABLATION_ROWS,
    EvalSet,
    ablation_suite,
    cross_reenactment,
    evaluate_inverter,
    frame_count_sweep,
    self_reenactment,
)
from .baselines import AGGREGATORS, aggregate, baseline_convfusion, baseline_feature_average, baseline_recurrent
from .metrics import (
    PSNR_CAP,
    MetricsReport,
    compute_metrics,
    embedding_statistics,
    frechet_distance,
    keypoint_distance,
    landmark_points,
    track_keypoints,
    psnr,
)

__all__ = [
    "ABLATION_ROWS",
    "EvalSet",
    "ablation_suite",
    "cross_reenactment",
    "evaluate_inverter",
    "frame_count_sweep",
    "self_reenactment",
    "AGGREGATORS",
    "aggregate",
    "baseline_convfusion",
    "baseline_feature_average",
    "baseline_recurrent",
    "PSNR_CAP",
    "MetricsReport",
    "compute_metrics",
    "embedding_statistics",
    "frechet_distance",
    "keypoint_distance",
    "landmark_points",
    "track_keypoints",
    "psnr",
]
