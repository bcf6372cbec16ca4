"""
Hull baseline template
======================

Builds the "matching point from a hull containing all point clouds" baseline.
Every point index j gets a template point: the ray from the centroid of all
pooled points through the mean position of index j is followed until it
leaves the convex hull of the pooled points.

The X/I clouds are flat, so the 3-D hull is degenerate there. In that case
the template falls back to where the same ray leaves the axis-aligned
bounding box, and the result records the fallback.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Union

import numpy as np
from scipy.spatial import ConvexHull

from utils.errors import DomainError, ShapeError

try:
    from scipy.spatial import QhullError
except ImportError:  # scipy < 1.11 keeps it in the private module
    from scipy.spatial.qhull import QhullError

logger = logging.getLogger(__name__)

_DIRECTION_TOLERANCE = 1e-12


@dataclass(frozen=True, eq=False)
class HullTemplate:
    """Index-matched reference points on the dataset hull"""
    points: np.ndarray
    method: str
    centroid: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def _stack_clouds(clouds: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    if len(clouds) == 0:
        raise DomainError("hull template needs at least one point cloud")
    sizes = {np.shape(cloud) for cloud in clouds}
    if len(sizes) != 1:
        raise ShapeError(f"all clouds must share one shape (K, 3), got {sorted(sizes)}")
    stack = np.asarray(clouds, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[2] != 3 or stack.shape[1] == 0:
        raise ShapeError(f"expected clouds of shape (N, K, 3), got {stack.shape}")
    if not np.all(np.isfinite(stack)):
        raise DomainError("point clouds contain non-finite coordinates")
    return stack


def _nearest(candidates: np.ndarray, target: np.ndarray) -> np.ndarray:
    distances = np.linalg.norm(candidates - target, axis=1)
    return candidates[int(np.argmin(distances))]


def _hull_exit(hull: ConvexHull, centroid: np.ndarray, directions: np.ndarray) -> np.ndarray:
    normals = hull.equations[:, :3]
    offsets = hull.equations[:, 3]
    # centroid is inside, so n.c + d <= 0 on every facet
    distance = -(normals @ centroid + offsets)
    facing = directions @ normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        steps = np.where(facing > _DIRECTION_TOLERANCE, distance[None, :] / facing, np.inf)
    return steps.min(axis=1)


def _box_exit(lower: np.ndarray, upper: np.ndarray, centroid: np.ndarray,
              directions: np.ndarray) -> np.ndarray:
    bound = np.where(directions > 0, upper, lower)
    moving = np.abs(directions) > _DIRECTION_TOLERANCE
    with np.errstate(divide="ignore", invalid="ignore"):
        steps = np.where(moving, (bound - centroid) / np.where(moving, directions, 1.0), np.inf)
    return steps.min(axis=1)


def _nearest_box_surface(lower: np.ndarray, upper: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    best, best_distance = centroid.copy(), np.inf
    for axis in range(3):
        if upper[axis] - lower[axis] <= _DIRECTION_TOLERANCE:
            continue
        for bound in (lower[axis], upper[axis]):
            distance = abs(centroid[axis] - bound)
            if distance < best_distance:
                best_distance = distance
                best = centroid.copy()
                best[axis] = bound
    return best


def hull_template(clouds: Union[np.ndarray, Sequence[np.ndarray]]) -> HullTemplate:
    """
    Compute the hull baseline template for a dataset

    Args:
        clouds: N point clouds of K index-corresponding points each

    Returns:
        HullTemplate with K points. ``method`` is ``convex_hull``, or
        ``bounding_box`` when the pooled points are coplanar or collinear.
    """
    stack = _stack_clouds(clouds)
    pooled = stack.reshape(-1, 3)
    centroid = pooled.mean(axis=0)
    directions = stack.mean(axis=0) - centroid
    scale = max(1.0, float(np.max(np.abs(pooled - centroid))))
    at_centroid = np.linalg.norm(directions, axis=1) <= _DIRECTION_TOLERANCE * scale

    hull = None
    if np.linalg.matrix_rank(pooled - centroid) == 3:
        try:
            hull = ConvexHull(pooled)
        except QhullError as exc:
            logger.warning("Convex hull failed (%s); using bounding box", exc)

    diagnostics: Dict[str, Any] = {"n_clouds": int(stack.shape[0]),
                                   "indices_at_centroid": int(np.count_nonzero(at_centroid))}
    if hull is not None:
        template = np.tile(centroid, (directions.shape[0], 1))
        moving = ~at_centroid
        template[moving] += _hull_exit(hull, centroid, directions[moving])[:, None] * directions[moving]
        if np.any(at_centroid):
            vertices = pooled[np.sort(hull.vertices)]
            template[at_centroid] = _nearest(vertices, centroid)
        method = "convex_hull"
        diagnostics["facets"] = int(hull.equations.shape[0])
    else:
        lower, upper = pooled.min(axis=0), pooled.max(axis=0)
        steps = _box_exit(lower, upper, centroid, directions)
        template = centroid + np.where(np.isfinite(steps), steps, 0.0)[:, None] * directions
        if np.any(at_centroid):
            template[at_centroid] = _nearest_box_surface(lower, upper, centroid)
        method = "bounding_box"
        diagnostics["fallback"] = "degenerate hull (coplanar or collinear points)"
        logger.warning("Hull of %d pooled points is degenerate; projected onto the bounding box", pooled.shape[0])

    return HullTemplate(points=template, method=method, centroid=centroid, diagnostics=diagnostics)
