"""Traffic disruption segmentation, incident-to-station association and duration benchmarking."""

__version__ = "0.1.0"

from .data import (
    DisruptionInterval,
    IncidentRecord,
    MonthlyProfile,
    SpeedSeries,
    StationRecord,
    ValidationError,
    load_incidents_csv,
    load_speed_csv,
    load_stations_csv,
)
from .metrics import DifferenceSeries, get_metric, moving_window_difference
from .profiling import build_monthly_profile, profile_before, tile_profile
from .segmentation import (
    SegmentationConfig,
    estimate_duration,
    extract_disruption_shape,
    preprocess,
    segment,
    segment_series,
    select_disruption_for_incident,
)
from .association import associate_all, build_road_graph, snap_entities
from .streaming import StreamingDetector, pair_events, replay
from .prediction import Dataset, EvaluationReport, mape, rmse, run_comparison

__all__ = [
    "DisruptionInterval",
    "IncidentRecord",
    "MonthlyProfile",
    "SpeedSeries",
    "StationRecord",
    "ValidationError",
    "load_incidents_csv",
    "load_speed_csv",
    "load_stations_csv",
    "DifferenceSeries",
    "get_metric",
    "moving_window_difference",
    "build_monthly_profile",
    "profile_before",
    "tile_profile",
    "SegmentationConfig",
    "estimate_duration",
    "extract_disruption_shape",
    "preprocess",
    "segment",
    "segment_series",
    "select_disruption_for_incident",
    "associate_all",
    "build_road_graph",
    "snap_entities",
    "StreamingDetector",
    "pair_events",
    "replay",
    "Dataset",
    "EvaluationReport",
    "mape",
    "rmse",
    "run_comparison",
]
