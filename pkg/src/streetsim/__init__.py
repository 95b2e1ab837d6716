"""streetsim: desk-scale street-graph courier navigation.

Street graphs with synthetic panoramic views, a goal-conditional courier
environment, recurrent actor-critic agents on a small from-scratch autodiff
core, curriculum training with decoupled actors and learner, and evaluation
and transfer protocols.
"""

from streetsim.citygraph import (
    EARTH_RADIUS_M,
    LatLong,
    RegionSpec,
    StreetGraph,
    bearing_deg,
    extract_region,
    generate_synthetic_city,
    haversine_m,
    load_graph,
    save_graph,
    shortest_path,
    shortest_path_m,
)

__version__ = "0.1.0"

__all__ = [
    "EARTH_RADIUS_M",
    "LatLong",
    "RegionSpec",
    "StreetGraph",
    "bearing_deg",
    "extract_region",
    "generate_synthetic_city",
    "haversine_m",
    "load_graph",
    "save_graph",
    "shortest_path",
    "shortest_path_m",
    "__version__",
]
