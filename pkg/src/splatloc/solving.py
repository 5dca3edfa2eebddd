"""Robust 6-DoF pose estimation from 2D-3D correspondences.

A P3P minimal solver feeds seeded RANSAC; the best hypothesis's inliers are
then polished by iteratively reweighted, Levenberg-damped Gauss-Newton on an
se(3) increment composed onto the pose from the left.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import PoseEstimationError
from .geometry import EPS_Z, Camera, Pose, project_points, se3_exp
from .validation import as_array

KERNEL_KINDS = ("huber", "cauchy", "none")

# Pixel residual substituted for points behind the camera so robust costs
# stay finite and comparable across damping steps.
BEHIND_RESIDUAL = 1e8

_P3P_REPROJ_TOL = 1e-6


@dataclass(frozen=True)
class RobustKernel:
    """Robust loss rho applied to pixel residual norms."""

    kind: str = "huber"
    scale: float = 5.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"kind must be one of {KERNEL_KINDS}, got {self.kind!r}")
        if self.kind != "none" and not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    def cost(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "none":
            return r * r
        d = self.scale
        if self.kind == "huber":
            return np.where(r <= d, r * r, 2.0 * d * r - d * d)
        return d * d * np.log1p(np.square(r / d))

    def weight(self, r: np.ndarray) -> np.ndarray:
        """IRLS weight w(r) with w(r) * r**2 the Gauss-Newton surrogate."""
        r = np.asarray(r, dtype=np.float64)
        if self.kind == "none":
            return np.ones_like(r)
        d = self.scale
        if self.kind == "huber":
            return np.where(r <= d, 1.0, d / np.maximum(r, 1e-300))
        return 1.0 / (1.0 + np.square(r / d))


@dataclass(frozen=True)
class Correspondences:
    """2D pixels paired with 3D world points, optionally weighted."""

    pixels: np.ndarray  # (M, 2) x, y
    world_points: np.ndarray  # (M, 3)
    weights: np.ndarray | None = None

    def __post_init__(self):
        n = np.asarray(self.pixels).shape[0]
        pixels = as_array(self.pixels, "pixels", np.float64, (n, 2))
        world = as_array(self.world_points, "world_points", np.float64, (n, 3))
        if self.weights is None:
            weights = np.ones(n)
        else:
            weights = as_array(self.weights, "weights", np.float64, (n,))
            if weights.size and weights.min() < 0:
                raise ValueError("weights must be non-negative")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "world_points", world)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def subset(self, mask: np.ndarray) -> "Correspondences":
        return Correspondences(
            pixels=self.pixels[mask],
            world_points=self.world_points[mask],
            weights=self.weights[mask],
        )


@dataclass(frozen=True)
class RansacOptions:
    threshold_px: float = 5.0
    confidence: float = 0.9999
    max_iters: int = 10000
    seed: int = 0
    kernel: RobustKernel = field(default_factory=RobustKernel)
    refine_max_iters: int = 50
    refine_tol: float = 1e-10

    def __post_init__(self):
        if not self.threshold_px > 0:
            raise ValueError("threshold_px must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    inlier_mask: np.ndarray
    inlier_count: int
    cost: float
    iterations: int
    seconds: float
    conditioning_warning: bool = False


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    cost: float
    iterations: int
    converged: bool
    conditioning_warning: bool
    cost_trace: np.ndarray


def reproj_residuals(pose: Pose, corr: Correspondences, camera: Camera) -> np.ndarray:
    """Euclidean pixel residual per correspondence; +inf behind the camera."""
    uv, z = project_points(corr.world_points, camera, pose)
    with np.errstate(invalid="ignore"):
        norms = np.linalg.norm(uv - corr.pixels, axis=1)
    return np.where(z > EPS_Z, norms, np.inf)


def _bearings(pixels: np.ndarray, camera: Camera) -> np.ndarray:
    rays = np.stack(
        [
            (pixels[:, 0] - camera.cx) / camera.fx,
            (pixels[:, 1] - camera.cy) / camera.fy,
            np.ones(pixels.shape[0]),
        ],
        axis=1,
    )
    return rays / np.linalg.norm(rays, axis=1, keepdims=True)


def _kabsch3(world: np.ndarray, cam_pts: np.ndarray) -> Pose:
    """Rigid transform taking the world triple onto the camera-frame triple."""
    pbar = world.mean(axis=0)
    xbar = cam_pts.mean(axis=0)
    M = (cam_pts - xbar).T @ (world - pbar)
    U, _, Vt = np.linalg.svd(M)
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return Pose(R, xbar - R @ pbar)


def _quartic_coefficients(a2, b2, c2, ca, cb, cg):
    """Coefficients (degree 4 first) of the P3P distance-ratio quartic."""
    A4 = (
        a2 * a2 - 2 * a2 * b2 - 2 * a2 * c2 + b2 * b2
        - 4 * b2 * c2 * ca * ca + 2 * b2 * c2 + c2 * c2
    )
    A3 = (
        -4 * a2 * a2 * cb + 4 * a2 * b2 * ca * cg + 4 * a2 * b2 * cb
        + 8 * a2 * c2 * cb - 4 * b2 * b2 * ca * cg + 8 * b2 * c2 * ca * ca * cb
        + 4 * b2 * c2 * ca * cg - 4 * b2 * c2 * cb - 4 * c2 * c2 * cb
    )
    A2 = (
        4 * a2 * a2 * cb * cb + 2 * a2 * a2 - 8 * a2 * b2 * ca * cb * cg
        - 4 * a2 * b2 * cg * cg - 8 * a2 * c2 * cb * cb - 4 * a2 * c2
        + 4 * b2 * b2 * ca * ca + 4 * b2 * b2 * cg * cg - 2 * b2 * b2
        - 4 * b2 * c2 * ca * ca - 8 * b2 * c2 * ca * cb * cg
        + 4 * c2 * c2 * cb * cb + 2 * c2 * c2
    )
    A1 = (
        -4 * a2 * a2 * cb + 4 * a2 * b2 * ca * cg + 8 * a2 * b2 * cb * cg * cg
        - 4 * a2 * b2 * cb + 8 * a2 * c2 * cb - 4 * b2 * b2 * ca * cg
        + 4 * b2 * c2 * ca * cg + 4 * b2 * c2 * cb - 4 * c2 * c2 * cb
    )
    A0 = (
        a2 * a2 - 4 * a2 * b2 * cg * cg + 2 * a2 * b2 - 2 * a2 * c2
        + b2 * b2 - 2 * b2 * c2 + c2 * c2
    )
    return np.array([A4, A3, A2, A1, A0])


def _polish_distance_ratios(u, v, a2, b2, c2, ca, cb, cg):
    """Newton on the two distance-ratio equations in (u, v).

    Converges quadratically even where the eliminated quartic has clustered
    roots, which is where single-variable polishing stalls or root-hops.
    """
    ra = a2 / b2
    rc = c2 / b2
    for _ in range(20):
        rad = 1.0 + v * v - 2.0 * v * cb
        f1 = u * u + v * v - 2.0 * u * v * ca - ra * rad
        f2 = 1.0 + u * u - 2.0 * u * cg - rc * rad
        j11 = 2.0 * u - 2.0 * v * ca
        j12 = 2.0 * v - 2.0 * u * ca - ra * (2.0 * v - 2.0 * cb)
        j21 = 2.0 * u - 2.0 * cg
        j22 = -rc * (2.0 * v - 2.0 * cb)
        det = j11 * j22 - j12 * j21
        if abs(det) < 1e-300:
            break
        du = (f1 * j22 - f2 * j12) / det
        dv = (j11 * f2 - j21 * f1) / det
        u -= du
        v -= dv
        if abs(du) + abs(dv) < 1e-15 * (1.0 + abs(u) + abs(v)):
            break
    rad = 1.0 + v * v - 2.0 * v * cb
    f1 = u * u + v * v - 2.0 * u * v * ca - ra * rad
    f2 = 1.0 + u * u - 2.0 * u * cg - rc * rad
    ok = abs(f1) + abs(f2) < 1e-10
    return u, v, ok


def p3p(pixels: np.ndarray, world_points: np.ndarray, camera: Camera) -> list[Pose]:
    """Three-point resection; returns up to four candidate poses.

    Solves the Grunert distance-ratio quartic on bearing vectors, recovers
    the camera-frame triple, and aligns it to the world triple. Candidates
    reprojecting any of the three points worse than 1e-6 px are discarded,
    as are degenerate (collinear or duplicated) triples.
    """
    pixels = as_array(pixels, "pixels", np.float64, (3, 2))
    world = as_array(world_points, "world_points", np.float64, (3, 3))
    e12 = world[1] - world[0]
    e13 = world[2] - world[0]
    span = np.linalg.norm(e12) * np.linalg.norm(e13)
    if span <= 0 or np.linalg.norm(np.cross(e12, e13)) <= 1e-9 * span:
        return []

    v = _bearings(pixels, camera)
    a2 = float(np.square(world[1] - world[2]).sum())
    b2 = float(np.square(world[0] - world[2]).sum())
    c2 = float(np.square(world[0] - world[1]).sum())
    ca = float(v[1] @ v[2])
    cb = float(v[0] @ v[2])
    cg = float(v[0] @ v[1])

    coeffs = _quartic_coefficients(a2, b2, c2, ca, cb, cg)
    top = np.max(np.abs(coeffs))
    if top == 0:
        return []
    coeffs = coeffs / top
    lead = np.flatnonzero(np.abs(coeffs) > 1e-14)
    if lead.size == 0 or lead[0] == 4:
        return []
    coeffs = coeffs[lead[0] :]

    seeds = []
    for root in np.roots(coeffs):
        if abs(root.imag) > 1e-2 * (1.0 + abs(root.real)):
            continue
        x = float(root.real)
        if x <= 0:
            continue
        rad = 1.0 + x * x - 2.0 * x * cb
        if rad <= 0:
            continue
        denom = cg - x * ca
        if abs(denom) > 1e-6 * (1.0 + abs(x)):
            num = (
                a2 + a2 * x * x - 2.0 * a2 * x * cb
                + b2 - b2 * x * x - c2 - c2 * x * x + 2.0 * c2 * x * cb
            )
            seeds.append((num / (2.0 * b2 * denom), x))
        disc = cg * cg - 1.0 + (c2 / b2) * rad
        if disc >= 0:
            seeds.append((cg + np.sqrt(disc), x))
            seeds.append((cg - np.sqrt(disc), x))

    poses: list[Pose] = []
    for u0, x0 in seeds:
        if not np.isfinite(u0):
            continue
        u, x, ok = _polish_distance_ratios(u0, x0, a2, b2, c2, ca, cb, cg)
        if not ok or u <= 0 or x <= 0:
            continue
        rad = 1.0 + x * x - 2.0 * x * cb
        if rad <= 0:
            continue
        s1 = np.sqrt(b2 / rad)
        cam_pts = np.stack([s1 * v[0], u * s1 * v[1], x * s1 * v[2]])
        pose = _kabsch3(world, cam_pts)
        uv, z = project_points(world, camera, pose)
        if np.any(z <= EPS_Z):
            continue
        if np.max(np.linalg.norm(uv - pixels, axis=1)) > _P3P_REPROJ_TOL:
            continue
        duplicate = any(
            np.linalg.norm(p.t - pose.t) <= 1e-9 * (1.0 + np.linalg.norm(pose.t))
            and np.trace(p.R.T @ pose.R) >= 3.0 - 1e-12
            for p in poses
        )
        if not duplicate:
            poses.append(pose)
    return poses


def _residual_jacobian(
    pose: Pose, corr: Correspondences, camera: Camera
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residuals e_k = u_k - pi(p_c), their norms, and d e / d xi (N, 2, 6).

    xi is a left-composed twist (v, omega): p_c' = p_c + v + omega x p_c, so
    d p_c / d xi = [I | -skew(p_c)]. Rows for points behind the camera are
    zeroed and flagged by an infinite residual norm.
    """
    pc = pose.transform(corr.world_points)
    z = pc[:, 2]
    front = z > EPS_Z
    zs = np.where(front, z, 1.0)
    u_hat = camera.fx * pc[:, 0] / zs + camera.cx
    v_hat = camera.fy * pc[:, 1] / zs + camera.cy
    e = corr.pixels - np.stack([u_hat, v_hat], axis=1)
    e[~front] = 0.0
    norms = np.where(front, np.linalg.norm(e, axis=1), np.inf)

    n = len(corr)
    J_pi = np.zeros((n, 2, 3))
    J_pi[:, 0, 0] = camera.fx / zs
    J_pi[:, 0, 2] = -camera.fx * pc[:, 0] / (zs * zs)
    J_pi[:, 1, 1] = camera.fy / zs
    J_pi[:, 1, 2] = -camera.fy * pc[:, 1] / (zs * zs)

    J_pc = np.zeros((n, 3, 6))
    J_pc[:, 0, 0] = J_pc[:, 1, 1] = J_pc[:, 2, 2] = 1.0
    J_pc[:, 0, 4] = pc[:, 2]
    J_pc[:, 0, 5] = -pc[:, 1]
    J_pc[:, 1, 3] = -pc[:, 2]
    J_pc[:, 1, 5] = pc[:, 0]
    J_pc[:, 2, 3] = pc[:, 1]
    J_pc[:, 2, 4] = -pc[:, 0]

    J = -np.einsum("nij,njk->nik", J_pi, J_pc)
    J[~front] = 0.0
    return e, norms, J


def _robust_cost(
    norms: np.ndarray, weights: np.ndarray, kernel: RobustKernel
) -> float:
    r = np.where(np.isfinite(norms), norms, BEHIND_RESIDUAL)
    return float((weights * kernel.cost(r)).sum())


def refine_robust(
    initial: Pose,
    corr: Correspondences,
    camera: Camera,
    kernel: RobustKernel | None = None,
    max_iters: int = 50,
    tol: float = 1e-10,
) -> RefineResult:
    """Minimize the robust reprojection cost around an initial pose.

    Iteratively reweighted least squares with Levenberg damping: steps are
    accepted only when the true robust cost does not increase, so the cost
    trace is non-increasing. Terminates when an accepted step's twist norm
    drops below `tol`, no damped step improves the cost, or `max_iters`.
    """
    kernel = kernel or RobustKernel()
    norms = reproj_residuals(initial, corr, camera)
    if np.isfinite(norms).sum() < 4:
        raise PoseEstimationError(
            "initial pose sees fewer than 4 correspondences",
            n_correspondences=len(corr),
        )
    pose = initial
    cost = _robust_cost(norms, corr.weights, kernel)
    trace = [cost]
    lam = 1e-6
    converged = False
    warning = False
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        e, norms, J = _residual_jacobian(pose, corr, camera)
        w = corr.weights * np.where(np.isfinite(norms), kernel.weight(norms), 0.0)
        H = np.einsum("n,nij,nik->jk", w, J, J)
        g = np.einsum("n,nij,ni->j", w, J, e)
        if not np.all(np.isfinite(H)) or np.linalg.cond(H) > 1e14:
            warning = True
        accepted = False
        while lam <= 1e10:
            try:
                delta = np.linalg.solve(H + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                warning = True
                lam *= 10.0
                continue
            candidate = se3_exp(delta) @ pose
            cand_cost = _robust_cost(
                reproj_residuals(candidate, corr, camera), corr.weights, kernel
            )
            if cand_cost <= cost:
                pose = candidate
                cost = cand_cost
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 10.0
        trace.append(cost)
        if not accepted:
            # No damped step improves the cost: stationary for this weighting.
            converged = not warning
            break
        if float(np.linalg.norm(delta)) < tol:
            converged = True
            break
    return RefineResult(
        pose=pose,
        cost=cost,
        iterations=iterations,
        converged=converged,
        conditioning_warning=warning,
        cost_trace=np.array(trace),
    )


def ransac_pnp(
    corr: Correspondences, camera: Camera, opts: RansacOptions | None = None
) -> PnPResult:
    """Seeded P3P RANSAC with adaptive iteration bound and robust refit."""
    opts = opts or RansacOptions()
    n = len(corr)
    if n < 4:
        raise PoseEstimationError(
            "need at least 4 correspondences", n_correspondences=n
        )
    start = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    best_count = 0
    best_pose = None
    best_mask = None
    bound = opts.max_iters
    iterations = 0
    while iterations < bound:
        iterations += 1
        triple = rng.choice(n, size=3, replace=False)
        for pose in p3p(corr.pixels[triple], corr.world_points[triple], camera):
            res = reproj_residuals(pose, corr, camera)
            mask = res <= opts.threshold_px
            count = int(mask.sum())
            if count > best_count:
                best_count, best_pose, best_mask = count, pose, mask
                ratio = count / n
                if ratio >= 1.0:
                    bound = iterations
                else:
                    needed = np.log1p(-opts.confidence) / np.log1p(-(ratio**3))
                    bound = min(opts.max_iters, int(np.ceil(needed)))
    if best_pose is None or best_count < 4:
        raise PoseEstimationError(
            "no pose with at least 4 inliers",
            n_correspondences=n,
            best_inlier_count=best_count,
            iterations=iterations,
        )
    refined = refine_robust(
        best_pose,
        corr.subset(best_mask),
        camera,
        kernel=opts.kernel,
        max_iters=opts.refine_max_iters,
        tol=opts.refine_tol,
    )
    res = reproj_residuals(refined.pose, corr, camera)
    mask = res <= opts.threshold_px
    cost = _robust_cost(res[mask], corr.weights[mask], opts.kernel)
    return PnPResult(
        pose=refined.pose,
        inlier_mask=mask,
        inlier_count=int(mask.sum()),
        cost=cost,
        iterations=iterations,
        seconds=time.perf_counter() - start,
        conditioning_warning=refined.conditioning_warning,
    )


def write_cost_trace_csv(result: RefineResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,cost\n")
        for i, c in enumerate(result.cost_trace):
            fh.write(f"{i},{c:.10g}\n")
