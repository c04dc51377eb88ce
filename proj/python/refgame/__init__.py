"""Emergent-communication referential games, compositionality metrics and
iterated-learning stability analytics."""

from ._core import (
    Benchmark,
    ConfigError,
    DimensionError,
    DivergenceError,
    ExperimentPreset,
    GameConfig,
    ParameterError,
    StateError,
    TestResult,
    TrainReport,
    UndefinedCorrelationError,
    UndefinedStabilityError,
    build_benchmark,
    edit_distance,
    expressivity_compositional,
    expressivity_holistic,
    ks_two_sample,
    make_preset,
    monte_carlo_expressivity,
    parse_config,
    read_results,
    relative_stability,
    run_preset,
    spearman,
    topographic_similarity,
    train,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
