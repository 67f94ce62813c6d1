"""Grasp-planning helpers: point-cloud centroids and the grasp-style rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import ObjectExtent, Scene, SceneObject


@dataclass(frozen=True)
class GripperSpec:
    max_opening: float  # meters
    finger_length: float

    def __post_init__(self):
        if self.max_opening <= 0 or self.finger_length <= 0:
            raise ValueError("gripper dimensions must be positive")


@dataclass(frozen=True)
class PointCloud:
    points: tuple[tuple[float, float, float], ...]


def centroid(cloud: PointCloud) -> tuple[float, float, float]:
    """Arithmetic mean of the cloud, per coordinate."""
    if not cloud.points:
        raise ValueError("cannot take the centroid of an empty cloud")
    mean = np.asarray(cloud.points, dtype=np.float64).mean(axis=0)
    return (float(mean[0]), float(mean[1]), float(mean[2]))


def select_grasp(extent: ObjectExtent, gripper: GripperSpec) -> str:
    """Top-down when the object is too wide or too short for a forward grasp."""
    if extent.width > gripper.max_opening or extent.height < gripper.finger_length:
        return "top_down"
    return "forward"


def synthesize_cloud(scene: Scene, obj: SceneObject, points_per_axis: int = 5,
                     table_depth: float = 0.6) -> PointCloud:
    """Deterministic lattice cloud standing in for a segmented depth image.

    The object's pixel-box center maps to a pseudo camera frame (canvas
    offsets in meters at ``table_depth``); the lattice spans the metric
    extent around that position.
    """
    cx, cy = obj.bbox.center
    base = np.array([
        (cx / scene.width - 0.5),
        (cy / scene.height - 0.5),
        table_depth + obj.extent.depth / 2.0,
    ])
    axes = [np.linspace(-half, half, points_per_axis)
            for half in (obj.extent.width / 2, obj.extent.height / 2,
                         obj.extent.depth / 2)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = grid + base
    return PointCloud(points=tuple(map(tuple, pts.tolist())))
