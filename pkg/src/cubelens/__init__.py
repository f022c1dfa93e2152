"""Contextual outlier detection over timestamped interaction logs.

Core pipeline: ingest logs into sparse count cubes, model expected values
as ratio products of cube aggregates, score cells with ratio or Poisson
deviations, extract 3-sigma outliers, and group abnormal hours into
events with author/spreader/hashtag drill-downs.
"""
from .cube import (
    Cube, CubeError, Dimension, DimensionSchema, Partition, Selector,
    SCHEMA_TIME, SCHEMA_HASHTAG, build_base_cube, base_cube_from_columns,
    expand, aggregate, aggregate_partition, filter_cube, cell_value, grand_total,
)
from .estimator import (
    CoordinateProjection, EstimatorSpec, EstimatorTerm, EstimatorError,
    ConsistencyError, ExpectedField, expected_basic, expected_aggregative,
    expected_ratio_product, parse_estimator_text,
)
from .deviation import (
    CAP, ContextEvaluation, DeviationError, OutlierPolicy, OutlierSet,
    deviation_poisson, deviation_ratio, detect_outliers, evaluate_context,
    histogram, log_poisson_cdf, log_poisson_sf, poisson_cdf,
)
from .ingest import (
    IngestError, InteractionRecord, ParseReport, anonymize_keys, bin_time,
    load_communities, normalize_hashtag, parse_file, parse_interactions,
)
from .detect import (
    CauseClassification, CommunityAssignment, DetectError, Event,
    SpreaderRegime, Topic, abnormal_hashtags_for_event, abnormal_hashtags_global,
    classify_cause, classify_regime, detect_events, discover_topics,
    event_hashtag_context, explain_event_authors, explain_event_spreaders,
    find_events, hashtag_context, hour_calendar, hour_context,
    predict_user_topic, topics_from_sets,
)
from .synth import (
    ActivistGroup, HotHashtag, HourSpike, PRESETS, ScenarioSpec, SingleActivist,
    SynthError, generate, preset, write_scenario,
)

__version__ = "0.1.0"
