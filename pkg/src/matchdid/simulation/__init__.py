"""Monte Carlo designs and the seeded replication runner."""

from matchdid.simulation.dgp import (
    InferenceDgpConfig,
    StaggeredDgpConfig,
    draw_inference,
    draw_staggered,
    inference_moments,
    population_estimand,
    staggered_population,
)
from matchdid.simulation.runner import (
    MIN_REPLICATIONS,
    EstimatorSummary,
    SimulationSummary,
    replication_rng,
    run_inference,
    run_staggered,
)

__all__ = [
    # Designs
    "InferenceDgpConfig",
    "StaggeredDgpConfig",
    "draw_inference",
    "draw_staggered",
    "inference_moments",
    "population_estimand",
    "staggered_population",
    # Runner
    "MIN_REPLICATIONS",
    "EstimatorSummary",
    "SimulationSummary",
    "replication_rng",
    "run_inference",
    "run_staggered",
]
