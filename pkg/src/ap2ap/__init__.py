"""Desk-scale anypose-to-anypose point-track manipulation policies."""

from ap2ap.geom import (
    PairedPoints,
    PointSet,
    Pose,
    compose,
    invert,
    kabsch,
    mean_visible_distance,
    sample_nearby_pose,
    transform_points,
)

__all__ = [
    "PairedPoints",
    "PointSet",
    "Pose",
    "compose",
    "invert",
    "kabsch",
    "mean_visible_distance",
    "sample_nearby_pose",
    "transform_points",
]

__version__ = "0.1.0"
