"""CPU rasterizer for Gaussian feature fields.

Projects each 3D Gaussian to an elliptical 2D footprint (EWA splatting),
depth-sorts, and alpha-composites L2-normalized features front to back:

    F_hat(p) = norm( sum_i norm(f_i) * a_i(p) * T_i(p) ),
    a_i(p)   = min(opacity_i * exp(-0.5 d^T Sigma2d^{-1} d), 0.99),
    T_i(p)   = prod_{j<i} (1 - a_j(p)),

with accumulation stopping once transmittance falls below T_MIN. Depth is
the alpha-weighted mean z normalized by accumulated alpha. The tiled path
and the sequential per-pixel reference produce bit-identical output.

Gradients flow to features only; geometry is fixed by design.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .field import GaussianField, GaussianPrimitive
from .geometry import EPS_Z, Camera, Pose, quat_to_rotation
from .maps import DepthMap, FeatureMap

# Transmittance below this stops accumulation at a pixel.
T_MIN = 1e-4
# Per-splat alpha ceiling keeps (1 - alpha) bounded away from zero.
ALPHA_CLAMP = 0.99


@dataclass(frozen=True)
class RenderOptions:
    alpha_valid: float = 0.5  # accumulated alpha above which a pixel is valid
    tile_size: int = 16
    low_pass: float = 0.3  # isotropic variance (px^2) added to every footprint
    n_threads: int = 1

    def __post_init__(self):
        if not 0.0 < self.alpha_valid <= 1.0:
            raise ValueError("alpha_valid must be in (0, 1]")
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if self.low_pass < 0:
            raise ValueError("low_pass must be >= 0")


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray  # (2,) pixel coordinates
    cov2d: np.ndarray  # (2, 2) SPD, pixels^2
    depth: float
    primitive_index: int


@dataclass(frozen=True)
class RenderOutput:
    features: FeatureMap
    depth: DepthMap
    alpha: np.ndarray  # (H, W) float32 accumulated opacity


@dataclass(frozen=True)
class _ProjectedSplats:
    """Culled, depth-sorted splats as flat arrays (front to back)."""

    index: np.ndarray  # (S,) original primitive indices
    mean: np.ndarray  # (S, 2)
    cov: np.ndarray  # (S, 3) upper-triangle (a, b, c) of cov2d
    inv_cov: np.ndarray  # (S, 3) upper-triangle of cov2d^{-1}
    depth: np.ndarray  # (S,)
    opacity: np.ndarray  # (S,)
    bbox: np.ndarray  # (S, 4) inclusive pixel bounds x0, x1, y0, y1


def _quad_form(ia, ib, ic, dx, dy):
    """0.5 * d^T Sigma^{-1} d, elementwise; shared by all compositing paths."""
    return 0.5 * (ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy)


def project_field(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    opacities: np.ndarray,
    camera: Camera,
    pose: Pose,
    low_pass: float = 0.3,
) -> _ProjectedSplats:
    """EWA-project all primitives, cull, and depth-sort.

    Culls primitives behind the camera (z <= EPS_Z) and those whose
    3-sigma footprint misses the image.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n == 0:
        return _empty_splats()
    pc = pose.transform(positions)
    z = pc[:, 2]
    front = z > EPS_Z
    if not front.any():
        return _empty_splats()
    idx = np.nonzero(front)[0]
    pc = pc[front]
    z = z[front]

    u = camera.fx * pc[:, 0] / z + camera.cx
    v = camera.fy * pc[:, 1] / z + camera.cy

    # World covariance: R(q) diag(s^2) R(q)^T, via M = R(q) diag(s).
    Rq = quat_to_rotation(np.asarray(rotations, dtype=np.float64)[front])
    M = Rq * np.asarray(scales, dtype=np.float64)[front][:, None, :]
    cov_world = M @ np.transpose(M, (0, 2, 1))

    # Projection Jacobian rows at the mean, composed with the view rotation.
    zi = 1.0 / z
    zi2 = zi * zi
    J = np.zeros((pc.shape[0], 2, 3))
    J[:, 0, 0] = camera.fx * zi
    J[:, 0, 2] = -camera.fx * pc[:, 0] * zi2
    J[:, 1, 1] = camera.fy * zi
    J[:, 1, 2] = -camera.fy * pc[:, 1] * zi2
    A = J @ pose.R
    cov2d = A @ cov_world @ np.transpose(A, (0, 2, 1))
    a = cov2d[:, 0, 0] + low_pass
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + low_pass

    # 3-sigma radius from the largest eigenvalue of the 2x2 covariance.
    half_tr = 0.5 * (a + c)
    lam_max = half_tr + np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    x0 = np.maximum(np.ceil(u - radius), 0.0)
    x1 = np.minimum(np.floor(u + radius), camera.width - 1.0)
    y0 = np.maximum(np.ceil(v - radius), 0.0)
    y1 = np.minimum(np.floor(v + radius), camera.height - 1.0)
    on_screen = (x0 <= x1) & (y0 <= y1)
    if not on_screen.any():
        return _empty_splats()

    keep = np.nonzero(on_screen)[0]
    idx = idx[keep]
    det = a[keep] * c[keep] - b[keep] * b[keep]
    inv = np.stack([c[keep] / det, -b[keep] / det, a[keep] / det], axis=1)
    order = np.lexsort((idx, z[keep]))  # front to back, ties by primitive index
    return _ProjectedSplats(
        index=idx[order],
        mean=np.stack([u[keep], v[keep]], axis=1)[order],
        cov=np.stack([a[keep], b[keep], c[keep]], axis=1)[order],
        inv_cov=inv[order],
        depth=z[keep][order],
        opacity=np.asarray(opacities, dtype=np.float64)[front][keep][order],
        bbox=np.stack([x0, x1, y0, y1], axis=1)[keep][order].astype(np.int64),
    )


def _empty_splats() -> _ProjectedSplats:
    return _ProjectedSplats(
        index=np.zeros(0, dtype=np.int64),
        mean=np.zeros((0, 2)),
        cov=np.zeros((0, 3)),
        inv_cov=np.zeros((0, 3)),
        depth=np.zeros(0),
        opacity=np.zeros(0),
        bbox=np.zeros((0, 4), dtype=np.int64),
    )


def project_gaussian(
    primitive: GaussianPrimitive, camera: Camera, pose: Pose, low_pass: float = 0.3
) -> Splat2D | None:
    """Project a single primitive; None when culled."""
    ps = project_field(
        primitive.position[None, :].astype(np.float64),
        primitive.rotation[None, :].astype(np.float64),
        primitive.scale[None, :].astype(np.float64),
        np.array([primitive.opacity]),
        camera,
        pose,
        low_pass,
    )
    if len(ps.index) == 0:
        return None
    a, b, c = ps.cov[0]
    return Splat2D(
        mean2d=ps.mean[0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(ps.depth[0]),
        primitive_index=0,
    )


def _bin_tiles(
    ps: _ProjectedSplats, height: int, width: int, tile: int
) -> tuple[list[tuple[int, int, int, int]], list[list[int]]]:
    """Tile pixel ranges plus, per tile, overlapping splats in depth order."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    ranges = []
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            ranges.append(
                (ty * tile, min((ty + 1) * tile, height), tx * tile, min((tx + 1) * tile, width))
            )
    members: list[list[int]] = [[] for _ in ranges]
    bx0, bx1, by0, by1 = ps.bbox.T
    tx0 = bx0 // tile
    tx1 = bx1 // tile
    ty0 = by0 // tile
    ty1 = by1 // tile
    for s in range(len(ps.index)):
        for ty in range(ty0[s], ty1[s] + 1):
            base = ty * tiles_x
            for tx in range(tx0[s], tx1[s] + 1):
                members[base + tx].append(s)
    return ranges, members


def _composite(
    ps: _ProjectedSplats,
    height: int,
    width: int,
    opts: RenderOptions,
    nf: np.ndarray | None = None,
    grad_pixels: np.ndarray | None = None,
    n_primitives: int = 0,
):
    """Front-to-back compositing over tiles.

    With nf (S-aligned unit features) accumulates feature/depth/alpha maps.
    With grad_pixels (H x W x D upstream gradient w.r.t. the pre-norm blend)
    accumulates per-primitive gradients instead, replaying the identical
    transmittance evolution.
    """
    forward = nf is not None
    dim = nf.shape[1] if forward else grad_pixels.shape[2]
    feat = np.zeros((height, width, dim)) if forward else None
    dep = np.zeros((height, width)) if forward else None
    acc = np.zeros((height, width))
    trans = np.ones((height, width))
    grad_u = None if forward else np.zeros((n_primitives, dim))

    if len(ps.index) == 0:
        return (feat, dep, acc) if forward else grad_u

    ranges, members = _bin_tiles(ps, height, width, opts.tile_size)
    mean, inv_cov, depth, opac, bbox = ps.mean, ps.inv_cov, ps.depth, ps.opacity, ps.bbox

    def run_tile(ti: int) -> None:
        y0, y1, x0, x1 = ranges[ti]
        t_tile = trans[y0:y1, x0:x1]
        for s in members[ti]:
            if not (t_tile >= T_MIN).any():
                break
            xs0 = max(bbox[s, 0], x0)
            xs1 = min(bbox[s, 1], x1 - 1)
            ys0 = max(bbox[s, 2], y0)
            ys1 = min(bbox[s, 3], y1 - 1)
            if xs0 > xs1 or ys0 > ys1:
                continue
            du = np.arange(xs0, xs1 + 1, dtype=np.float64) - mean[s, 0]
            dv = np.arange(ys0, ys1 + 1, dtype=np.float64) - mean[s, 1]
            dx, dy = np.meshgrid(du, dv)
            q = _quad_form(inv_cov[s, 0], inv_cov[s, 1], inv_cov[s, 2], dx, dy)
            w = np.minimum(opac[s] * np.exp(-q), ALPHA_CLAMP)
            t_sub = trans[ys0 : ys1 + 1, xs0 : xs1 + 1]
            wa = np.where(t_sub >= T_MIN, w, 0.0)
            contrib = wa * t_sub
            if forward:
                feat[ys0 : ys1 + 1, xs0 : xs1 + 1] += contrib[:, :, None] * nf[s]
                dep[ys0 : ys1 + 1, xs0 : xs1 + 1] += contrib * depth[s]
            else:
                g_sub = grad_pixels[ys0 : ys1 + 1, xs0 : xs1 + 1]
                grad_u[ps.index[s]] += np.tensordot(contrib, g_sub, axes=([0, 1], [0, 1]))
            acc[ys0 : ys1 + 1, xs0 : xs1 + 1] += contrib
            trans[ys0 : ys1 + 1, xs0 : xs1 + 1] = t_sub * (1.0 - wa)

    if forward and opts.n_threads > 1:
        # Tiles write disjoint output regions, so the forward pass can fan
        # out freely. The gradient pass accumulates into shared per-primitive
        # rows and stays sequential.
        with ThreadPoolExecutor(max_workers=opts.n_threads) as pool:
            list(pool.map(run_tile, range(len(ranges))))
    else:
        for ti in range(len(ranges)):
            run_tile(ti)

    return (feat, dep, acc) if forward else grad_u


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-300)


def _assemble_output(
    feat: np.ndarray, dep: np.ndarray, acc: np.ndarray, alpha_valid: float
) -> RenderOutput:
    valid = acc >= alpha_valid
    norms = np.linalg.norm(feat, axis=-1, keepdims=True)
    data = np.where(valid[:, :, None], feat / np.maximum(norms, 1e-300), 0.0)
    depth = np.where(valid, dep / np.maximum(acc, 1e-300), 0.0)
    return RenderOutput(
        features=FeatureMap(data=data.astype(np.float32), validity=valid),
        depth=DepthMap(depth=depth.astype(np.float32), validity=valid),
        alpha=acc.astype(np.float32),
    )


def render_arrays(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    opacities: np.ndarray,
    features: np.ndarray,
    camera: Camera,
    pose: Pose,
    opts: RenderOptions = RenderOptions(),
) -> RenderOutput:
    """Render from raw arrays (any float dtype; promoted to float64)."""
    ps = project_field(positions, rotations, scales, opacities, camera, pose, opts.low_pass)
    nf = _normalize_rows(np.asarray(features, dtype=np.float64))[ps.index]
    feat, dep, acc = _composite(ps, camera.height, camera.width, opts, nf=nf)
    return _assemble_output(feat, dep, acc, opts.alpha_valid)


def render(
    field: GaussianField,
    camera: Camera,
    pose: Pose,
    opts: RenderOptions = RenderOptions(),
) -> RenderOutput:
    """Render feature, depth, and alpha maps from a field."""
    return render_arrays(
        field.positions,
        field.rotations,
        field.scales,
        field.opacities,
        field.features,
        camera,
        pose,
        opts,
    )


def render_reference(
    field: GaussianField,
    camera: Camera,
    pose: Pose,
    opts: RenderOptions = RenderOptions(),
) -> RenderOutput:
    """Sequential per-pixel compositing; bit-identical to render()."""
    ps = project_field(
        field.positions, field.rotations, field.scales, field.opacities, camera, pose, opts.low_pass
    )
    nf = _normalize_rows(field.features.astype(np.float64))[ps.index]
    height, width = camera.height, camera.width
    dim = field.features.shape[1]
    feat = np.zeros((height, width, dim))
    dep = np.zeros((height, width))
    acc = np.zeros((height, width))

    # Pixel -> covering splats, preserving global depth order.
    covering: list[list[list[int]]] = [[[] for _ in range(width)] for _ in range(height)]
    for s in range(len(ps.index)):
        x0, x1, y0, y1 = ps.bbox[s]
        for y in range(y0, y1 + 1):
            row = covering[y]
            for x in range(x0, x1 + 1):
                row[x].append(s)

    for y in range(height):
        for x in range(width):
            t = 1.0
            for s in covering[y][x]:
                if not t >= T_MIN:
                    break
                dx = float(x) - ps.mean[s, 0]
                dy = float(y) - ps.mean[s, 1]
                q = _quad_form(ps.inv_cov[s, 0], ps.inv_cov[s, 1], ps.inv_cov[s, 2], dx, dy)
                w = np.minimum(ps.opacity[s] * np.exp(-q), ALPHA_CLAMP)
                contrib = w * t
                feat[y, x] += contrib * nf[s]
                dep[y, x] += contrib * ps.depth[s]
                acc[y, x] += contrib
                t = t * (1.0 - w)
    return _assemble_output(feat, dep, acc, opts.alpha_valid)


def _forward_state(
    field_arrays: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    camera: Camera,
    pose: Pose,
    opts: RenderOptions,
):
    positions, rotations, scales, opacities, features = field_arrays
    ps = project_field(positions, rotations, scales, opacities, camera, pose, opts.low_pass)
    nf = _normalize_rows(np.asarray(features, dtype=np.float64))
    feat, dep, acc = _composite(ps, camera.height, camera.width, opts, nf=nf[ps.index])
    return ps, nf, feat, dep, acc


def feature_gradients_arrays(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    opacities: np.ndarray,
    features: np.ndarray,
    camera: Camera,
    pose: Pose,
    loss_grad: np.ndarray,
    opts: RenderOptions = RenderOptions(),
    _state=None,
) -> np.ndarray:
    """dLoss/dfeatures given the upstream gradient w.r.t. the rendered map.

    Composes three pieces per the chain rule: the outer normalization of the
    blended vector, the per-pixel blend weights, and the inner normalization
    of each stored feature. Invalid pixels contribute nothing (their output
    is defined as zero).
    """
    if _state is None:
        _state = _forward_state(
            (positions, rotations, scales, opacities, features), camera, pose, opts
        )
    ps, nf, feat, dep, acc = _state
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    if loss_grad.shape != feat.shape:
        raise ValueError(
            f"loss_grad shape {loss_grad.shape} does not match render {feat.shape}"
        )
    valid = acc >= opts.alpha_valid
    norms = np.linalg.norm(feat, axis=-1, keepdims=True)
    safe = np.maximum(norms, 1e-300)
    yhat = feat / safe
    inner = np.sum(yhat * loss_grad, axis=-1, keepdims=True)
    g_pixels = np.where(
        (valid & (norms[:, :, 0] > 0.0))[:, :, None],
        (loss_grad - yhat * inner) / safe,
        0.0,
    )
    n = np.asarray(features).shape[0]
    grad_u = _composite(
        ps, camera.height, camera.width, opts, grad_pixels=g_pixels, n_primitives=n
    )
    f64 = np.asarray(features, dtype=np.float64)
    fnorm = np.linalg.norm(f64, axis=1, keepdims=True)
    fhat = f64 / np.maximum(fnorm, 1e-300)
    proj = np.sum(fhat * grad_u, axis=1, keepdims=True)
    return (grad_u - fhat * proj) / np.maximum(fnorm, 1e-300)


def render_normalized_blend(
    positions: np.ndarray,
    rotations: np.ndarray,
    scales: np.ndarray,
    opacities: np.ndarray,
    features: np.ndarray,
    camera: Camera,
    pose: Pose,
    opts: RenderOptions = RenderOptions(),
) -> tuple[np.ndarray, np.ndarray]:
    """Float64 normalized feature blend plus validity mask.

    Same quantity as render().features but without the float32 cast; used
    by loss evaluation and gradient verification, which need full precision.
    """
    ps, nf, feat, dep, acc = _forward_state(
        (positions, rotations, scales, opacities, features), camera, pose, opts
    )
    valid = acc >= opts.alpha_valid
    norms = np.linalg.norm(feat, axis=-1, keepdims=True)
    yhat = np.where(valid[:, :, None], feat / np.maximum(norms, 1e-300), 0.0)
    return yhat, valid


def render_with_feature_gradients(
    field: GaussianField,
    camera: Camera,
    pose: Pose,
    loss_grad: np.ndarray,
    opts: RenderOptions = RenderOptions(),
) -> np.ndarray:
    """Per-primitive feature gradients (N, D) for an upstream H x W x D gradient."""
    return feature_gradients_arrays(
        field.positions,
        field.rotations,
        field.scales,
        field.opacities,
        field.features,
        camera,
        pose,
        loss_grad,
        opts,
    )
