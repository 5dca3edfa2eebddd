"""Condense dense 2D-2D matches into a small set of 2D-3D proxies.

Matches are embedded in the joint 4D space of normalized query and render
coordinates, clustered with a few Lloyd iterations of seeded k-means++, and
the match nearest each centroid is kept. Surviving proxies are lifted to
world points through the rendered depth map, so the pose solver sees a
condensed 2D-3D problem a fraction of the size of the dense match set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientMatchesError
from .geometry import Camera, Pose, backproject_pixels
from .maps import DepthMap
from .matching import DenseMatches
from .validation import as_array


@dataclass(frozen=True)
class Point4D:
    """A dense match embedded as normalized (u_q, v_q, u_r, v_r) in [0, 1]^4."""

    coords: np.ndarray
    index: int

    def __post_init__(self):
        coords = as_array(self.coords, "coords", np.float64, (4,))
        if coords.min() < 0.0 or coords.max() > 1.0:
            raise ValueError(f"coords must lie in [0, 1], got {coords}")
        if self.index < 0:
            raise ValueError(f"index must be non-negative, got {self.index}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "index", int(self.index))


@dataclass(frozen=True)
class ClusterResult:
    """Centroids, per-point assignment, and the within-cluster SSD objective."""

    centroids: np.ndarray  # (K, d)
    assignment: np.ndarray  # (n,)
    objective: float
    objective_trace: np.ndarray  # per-iteration objective, non-increasing

    def __post_init__(self):
        centroids = as_array(self.centroids, "centroids", np.float64, (None, None))
        assignment = as_array(self.assignment, "assignment", np.int64, (None,))
        if assignment.size and (
            assignment.min() < 0 or assignment.max() >= centroids.shape[0]
        ):
            raise ValueError("assignment refers to a cluster out of range")
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "assignment", assignment)
        object.__setattr__(
            self, "objective_trace", np.asarray(self.objective_trace, dtype=np.float64)
        )


@dataclass(frozen=True)
class CondensedMatches:
    """Query pixels paired with lifted world points, with match provenance."""

    query_px: np.ndarray  # (M, 2) x, y
    world_points: np.ndarray  # (M, 3)
    confidence: np.ndarray  # (M,)
    source_indices: np.ndarray  # (M,) row into the dense match set

    def __post_init__(self):
        n = np.asarray(self.query_px).shape[0]
        query_px = as_array(self.query_px, "query_px", np.float64, (n, 2))
        world = as_array(self.world_points, "world_points", np.float64, (n, 3))
        conf = as_array(self.confidence, "confidence", np.float64, (n,))
        src = as_array(self.source_indices, "source_indices", np.int64, (n,))
        if src.size and (np.unique(src).size != n or src.min() < 0):
            raise ValueError("source_indices must be unique and non-negative")
        object.__setattr__(self, "query_px", query_px)
        object.__setattr__(self, "world_points", world)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "source_indices", src)

    def __len__(self) -> int:
        return int(self.query_px.shape[0])


def embed4d(
    matches: DenseMatches,
    query_dims: tuple[int, int],
    render_dims: tuple[int, int],
) -> list[Point4D]:
    """Normalize each match by its owning image's (width, height)."""
    wq, hq = query_dims
    wr, hr = render_dims
    if min(wq, hq, wr, hr) <= 0:
        raise ValueError("image dimensions must be positive")
    coords = np.concatenate(
        [
            matches.query_px / np.array([wq, hq], dtype=np.float64),
            matches.render_px / np.array([wr, hr], dtype=np.float64),
        ],
        axis=1,
    )
    return [Point4D(coords=coords[i], index=i) for i in range(len(matches))]


def _coords_and_indices(points) -> tuple[np.ndarray, np.ndarray]:
    """Accept a list of Point4D or a plain (n, d) array."""
    if isinstance(points, np.ndarray):
        pts = as_array(points, "points", np.float64, (None, None))
        return pts, np.arange(pts.shape[0], dtype=np.int64)
    pts = np.stack([p.coords for p in points])
    idx = np.array([p.index for p in points], dtype=np.int64)
    return pts, idx


def _plus_plus_init(pts: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(pts.shape[0]))]
    d2 = np.square(pts - centroids[0]).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            pick = int(rng.choice(pts.shape[0], p=d2 / total))
        else:
            pick = int(rng.integers(pts.shape[0]))
        centroids[j] = pts[pick]
        d2 = np.minimum(d2, np.square(pts - centroids[j]).sum(axis=1))
    return centroids


def _means_with_repair(
    pts: np.ndarray, assign: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster means; empty clusters steal the point farthest from its mean."""
    counts = np.bincount(assign, minlength=k)
    sums = np.stack(
        [np.bincount(assign, weights=pts[:, d], minlength=k) for d in range(pts.shape[1])],
        axis=1,
    )
    centroids = np.zeros((k, pts.shape[1]))
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
    empties = np.flatnonzero(~nonempty)
    if empties.size:
        assign = assign.copy()
        d2 = np.square(pts - centroids[assign]).sum(axis=1)
        for j in empties:
            # Only steal from clusters that keep at least one member.
            cand = np.where(counts[assign] >= 2, d2, -np.inf)
            far = int(np.argmax(cand))
            donor = assign[far]
            assign[far] = j
            counts[donor] -= 1
            counts[j] = 1
            centroids[j] = pts[far]
            d2[far] = 0.0
            members = assign == donor
            centroids[donor] = pts[members].mean(axis=0)
            d2[members] = np.square(pts[members] - centroids[donor]).sum(axis=1)
    return centroids, assign


def kmeans(
    points,
    k: int,
    max_iter: int = 5,
    seed: int = 0,
    init_centroids: np.ndarray | None = None,
) -> ClusterResult:
    """Seeded k-means++ plus at most `max_iter` Lloyd iterations.

    The returned centroids are the means of the returned assignment, so the
    pair is always self-consistent even when stopping at the iteration cap.
    """
    pts, _ = _coords_and_indices(points)
    n = pts.shape[0]
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    k = min(k, n)
    if init_centroids is not None:
        centroids = as_array(init_centroids, "init_centroids", np.float64, (k, pts.shape[1]))
    else:
        centroids = _plus_plus_init(pts, k, np.random.default_rng(seed))

    trace = []
    prev_assign = None
    for _ in range(max_iter):
        c2 = np.square(centroids).sum(axis=1)
        score = c2[None, :] - 2.0 * (pts @ centroids.T)  # argmin unaffected by +|x|^2
        assign = score.argmin(axis=1)
        centroids, assign = _means_with_repair(pts, assign, k)
        trace.append(float(np.square(pts - centroids[assign]).sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
    return ClusterResult(
        centroids=centroids,
        assignment=assign,
        objective=trace[-1],
        objective_trace=np.array(trace),
    )


def select_proxies(points, clusters: ClusterResult) -> np.ndarray:
    """Per non-empty cluster, the source index of the member nearest its centroid.

    Distance ties break to the lowest match index. Output is ordered by
    cluster id.
    """
    pts, idx = _coords_and_indices(points)
    assign = clusters.assignment
    if assign.shape[0] != pts.shape[0]:
        raise ValueError("clusters were not computed from these points")
    d2 = np.square(pts - clusters.centroids[assign]).sum(axis=1)
    order = np.lexsort((np.arange(pts.shape[0]), d2, assign))
    sorted_assign = assign[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_assign[1:] != sorted_assign[:-1]
    return idx[order[first]]


def lift_to_3d(
    matches: DenseMatches,
    proxy_indices: np.ndarray,
    depth: DepthMap,
    camera: Camera,
    render_pose: Pose,
) -> CondensedMatches:
    """Back-project proxy render pixels through the rendered depth.

    Depth is sampled at the nearest pixel; the ray is cast through the
    sub-pixel match coordinate. Proxies on invalid depth are dropped.
    """
    proxy_indices = as_array(proxy_indices, "proxy_indices", np.int64, (None,))
    if proxy_indices.size and (
        proxy_indices.min() < 0 or proxy_indices.max() >= len(matches)
    ):
        raise ValueError("proxy_indices out of range for the match set")
    r_px = matches.render_px[proxy_indices]
    cols = np.rint(r_px[:, 0]).astype(np.int64)
    rows = np.rint(r_px[:, 1]).astype(np.int64)
    inside = (cols >= 0) & (cols < depth.width) & (rows >= 0) & (rows < depth.height)
    valid = inside.copy()
    valid[inside] = depth.validity[rows[inside], cols[inside]]
    keep = np.flatnonzero(valid)
    if keep.size < 4:
        raise InsufficientMatchesError(
            f"only {keep.size} proxies on valid depth (need >= 4)", count=int(keep.size)
        )
    depths = depth.depth[rows[keep], cols[keep]].astype(np.float64)
    world = backproject_pixels(r_px[keep], depths, camera, render_pose)
    kept_src = proxy_indices[keep]
    return CondensedMatches(
        query_px=matches.query_px[kept_src].copy(),
        world_points=world,
        confidence=matches.confidence[kept_src].copy(),
        source_indices=kept_src,
    )


def condense(
    matches: DenseMatches,
    depth: DepthMap,
    camera: Camera,
    render_pose: Pose,
    k: int = 1024,
    max_iter: int = 5,
    seed: int = 0,
) -> tuple[CondensedMatches, float]:
    """Full condensation pass; returns (proxies, clustering seconds).

    When the match set is no larger than k, clustering is skipped and every
    match is lifted directly.
    """
    if len(matches) == 0:
        raise ValueError("matches must be non-empty")
    start = time.perf_counter()
    if len(matches) <= k:
        proxy_indices = np.arange(len(matches), dtype=np.int64)
    else:
        points = embed4d(
            matches, (camera.width, camera.height), (depth.width, depth.height)
        )
        clusters = kmeans(points, k, max_iter=max_iter, seed=seed)
        proxy_indices = select_proxies(points, clusters)
    clustering_seconds = time.perf_counter() - start
    return lift_to_3d(matches, proxy_indices, depth, camera, render_pose), clustering_seconds


def write_proxies_csv(condensed: CondensedMatches, path) -> None:
    with open(path, "w") as fh:
        fh.write("u_q,v_q,X,Y,Z,conf\n")
        for uv, xyz, c in zip(
            condensed.query_px, condensed.world_points, condensed.confidence
        ):
            fh.write(
                f"{uv[0]:.6f},{uv[1]:.6f},{xyz[0]:.6f},{xyz[1]:.6f},{xyz[2]:.6f},{c:.6f}\n"
            )
