"""Differentiable tile-structured splatting of 3D Gaussians.

Forward: project every Gaussian to a screen-space mean, 2x2 covariance
(first-order perspective Jacobian, lowpass floor), and view-dependent
color; sort globally by depth (ties broken by storage index, so the
order is canonical); composite front to back per pixel with
transmittance-based early termination.

A splat is composited only where its Gaussian power (half squared
Mahalanobis distance) is at most POWER_CUTOFF. The cutoff makes the
contributor set of every pixel independent of the tile grid: the
tile-aligned bounding rectangle used for binning is provably a
superset of the cutoff ellipse, so any tile size yields the same
image.

Backward: the forward saves, per drawn splat, its rectangle, alpha
values, inclusion mask, and entering transmittance; the backward
replays the records back to front, accumulating suffix color/alpha
sums per pixel exactly as the compositing derivative requires, then
chains through conic inversion, covariance projection, point
projection, spherical harmonics, and covariance construction. All of
this is finite-difference checked in the test suite.
"""

from dataclasses import dataclass

import numpy as np

from . import mathcore
from .errors import InvalidStateError

# Contributions with power above this are dropped; exp(-25) ~ 1.4e-11,
# far below the renderer's 1e-6 equivalence tolerance, and small enough
# that the hard support edge does not disturb finite-difference checks.
POWER_CUTOFF = 25.0
# Per-pixel compositing stops once transmittance falls below this.
T_MIN = 1e-4
# Per-splat alpha clamp.
ALPHA_MAX = 0.99
# Radius multiplier for the reported screen radius.
RADIUS_SIGMA = 3.0
# Isotropic variance floor added to screen covariances, in pixel^2.
LOWPASS = 0.3


@dataclass
class ProjectedSplats:
    """Screen-space splats plus the caches the backward pass needs."""

    mean2d: np.ndarray  # (N, 2) pixel coordinates
    depth: np.ndarray  # (N,) camera-frame z
    cov2: np.ndarray  # (N, 2, 2) with lowpass floor
    conic: np.ndarray  # (N, 3) packed inverse covariance (a, b, c)
    radius: np.ndarray  # (N,) int, ceil(3 sigma_max), 0 when culled
    bin_radius: np.ndarray  # (N,) int, binning extent for the power cutoff
    rgb: np.ndarray  # (N, 3) decoded colors
    opacity: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool, in front of the near plane
    # caches
    t: np.ndarray  # (N, 3) camera-frame means
    cov3_cam: np.ndarray  # (N, 3, 3)
    dirs: np.ndarray  # (N, 3) unit viewing directions
    dir_norm: np.ndarray  # (N,)
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    sh: np.ndarray
    sh_degree: int

    def __len__(self):
        return self.mean2d.shape[0]


@dataclass
class SplatRecord:
    """Saved compositing state of one drawn splat over its rectangle."""

    index: int
    y0: int
    y1: int
    x0: int
    x1: int
    dx: np.ndarray  # (w,) pixel-center offsets from the splat mean
    dy: np.ndarray  # (h,)
    include: np.ndarray  # (h, w) bool
    alpha: np.ndarray  # (h, w), zero outside the support
    t_enter: np.ndarray  # (h, w) transmittance entering this splat


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3), composited over black
    alpha: np.ndarray  # (H, W) accumulated opacity
    radii: np.ndarray  # (N,) int
    splats: ProjectedSplats
    records: list
    tile_size: int
    camera: object

    @property
    def transmittance(self):
        return 1.0 - self.alpha


@dataclass
class GradientBuffer:
    """Per-Gaussian gradients with respect to the rasterizer inputs.

    positions/rotations/scales/opacities/sh match the arrays handed to
    project_all (rotations raw, scales activated, opacities
    post-sigmoid). mean2d_norm is the screen-space positional gradient
    magnitude in half-image units, the statistic density control
    thresholds on; visible flags splats with nonzero radius.
    """

    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_scales: np.ndarray
    d_opacities: np.ndarray
    d_sh: np.ndarray
    mean2d_norm: np.ndarray
    visible: np.ndarray


def project_all(positions, rotations, scales, opacities, sh, sh_degree, cam):
    """Project Gaussians into screen space for one camera.

    positions (N, 3) world; rotations (N, 4) raw quaternions; scales
    (N, 3) positive; opacities (N,) in (0, 1); sh (N, 3, C). Gaussians
    behind the near plane get radius 0 and are skipped downstream.
    """
    positions = np.asarray(positions)
    n = positions.shape[0]
    dtype = positions.dtype
    R = cam.rotation.astype(dtype)
    t = positions @ R.T + cam.translation.astype(dtype)
    depth = t[:, 2].copy()

    cov3 = mathcore.build_covariance(rotations, scales) if n else np.zeros((0, 3, 3), dtype)
    cov3_cam = R @ cov3 @ R.T if n else cov3
    cov2, valid = mathcore.project_covariance(
        cov3_cam, t, cam.focal_x, cam.focal_y, cam.tan_fovx, cam.tan_fovy,
        near=cam.near, lowpass=LOWPASS,
    )

    cx, cy = cam.principal
    mean2d = np.zeros((n, 2), dtype=dtype)
    if np.any(valid):
        mean2d[valid] = mathcore.project_points(t[valid], cam.focal_x, cam.focal_y, cx, cy)

    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    conic = np.zeros((n, 3), dtype=dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        conic[valid, 0] = (c / det)[valid]
        conic[valid, 1] = (-b / det)[valid]
        conic[valid, 2] = (a / det)[valid]

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.zeros(n, dtype=np.int64)
    bin_radius = np.zeros(n, dtype=np.int64)
    radius[valid] = np.ceil(RADIUS_SIGMA * np.sqrt(lam_max[valid])).astype(np.int64)
    bin_radius[valid] = np.ceil(np.sqrt(2.0 * POWER_CUTOFF * lam_max[valid])).astype(np.int64)

    center = cam.center().astype(dtype)
    u = positions - center
    dir_norm = np.linalg.norm(u, axis=1)
    dirs = np.zeros_like(u)
    nz = dir_norm > 0
    dirs[nz] = u[nz] / dir_norm[nz, None]
    rgb = mathcore.eval_sh(sh, dirs, sh_degree) if n else np.zeros((0, 3), dtype)

    out = ProjectedSplats(
        mean2d=mean2d, depth=depth, cov2=cov2, conic=conic, radius=radius,
        bin_radius=bin_radius, rgb=rgb, opacity=np.asarray(opacities), valid=valid,
        t=t, cov3_cam=cov3_cam, dirs=dirs, dir_norm=dir_norm,
        positions=positions, rotations=np.asarray(rotations),
        scales=np.asarray(scales), sh=np.asarray(sh), sh_degree=sh_degree,
    )
    return out


def _tile_rect(mx, my, br, width, height, tile):
    """Pixel rectangle of all tiles overlapped by the splat's AABB."""
    x_lo = int(np.floor(mx - br))
    x_hi = int(np.floor(mx + br))
    y_lo = int(np.floor(my - br))
    y_hi = int(np.floor(my + br))
    if x_hi < 0 or y_hi < 0 or x_lo >= width or y_lo >= height:
        return None
    tx0 = max(0, x_lo // tile)
    tx1 = min((width - 1) // tile, x_hi // tile)
    ty0 = max(0, y_lo // tile)
    ty1 = min((height - 1) // tile, y_hi // tile)
    if tx0 > tx1 or ty0 > ty1:
        return None
    return ty0 * tile, min(height, (ty1 + 1) * tile), tx0 * tile, min(width, (tx1 + 1) * tile)


def rasterize_forward(splats, cam, tile_size=16):
    """Composite projected splats front to back over a black background.

    Returns a RenderOutput carrying the color image, alpha map,
    per-splat radii, and the saved per-pixel compositing state
    (rectangles, inclusion masks, alphas, entering transmittances in
    depth order) the backward pass replays.
    """
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    height, width = cam.height, cam.width
    n = len(splats)
    dtype = splats.mean2d.dtype
    color = np.zeros((height, width, 3), dtype=dtype)
    trans = np.ones((height, width), dtype=dtype)
    done = np.zeros((height, width), dtype=bool)

    radii = splats.radius.copy()
    rects = [None] * n
    drawn = []
    for i in range(n):
        if not splats.valid[i]:
            continue
        rect = _tile_rect(
            splats.mean2d[i, 0], splats.mean2d[i, 1], splats.bin_radius[i],
            width, height, tile_size,
        )
        if rect is None:
            radii[i] = 0  # no screen extent: culled
            continue
        rects[i] = rect
        drawn.append(i)

    records = []
    if drawn:
        drawn = np.asarray(drawn)
        order = drawn[np.argsort(splats.depth[drawn], kind="stable")]
        xs = np.arange(width, dtype=dtype)
        ys = np.arange(height, dtype=dtype)
        for i in order:
            y0, y1, x0, x1 = rects[i]
            dx = xs[x0:x1] - splats.mean2d[i, 0]
            dy = ys[y0:y1] - splats.mean2d[i, 1]
            ca, cb, cc = splats.conic[i]
            power = (cb * dy)[:, None] * dx
            power += (0.5 * ca) * (dx * dx)
            power += ((0.5 * cc) * (dy * dy))[:, None]
            active = power <= POWER_CUTOFF
            active &= ~done[y0:y1, x0:x1]
            if not active.any():
                continue
            np.negative(power, out=power)
            alpha = np.zeros_like(power)
            np.exp(power, out=alpha, where=active)
            alpha *= splats.opacity[i]
            np.minimum(alpha, ALPHA_MAX, out=alpha)
            t_enter = trans[y0:y1, x0:x1].copy()
            test_t = t_enter * (1.0 - alpha)
            terminate = active & (test_t < T_MIN)
            include = active & ~terminate
            done[y0:y1, x0:x1] |= terminate
            if include.any():
                w = np.where(include, alpha * t_enter, 0.0)
                color[y0:y1, x0:x1] += w[:, :, None] * splats.rgb[i]
                trans[y0:y1, x0:x1] = np.where(include, test_t, trans[y0:y1, x0:x1])
                records.append(
                    SplatRecord(int(i), y0, y1, x0, x1, dx, dy, include,
                                alpha, t_enter)
                )

    return RenderOutput(
        color=color, alpha=1.0 - trans, radii=radii, splats=splats,
        records=records, tile_size=tile_size, camera=cam,
    )


def rasterize_backward(out, d_color, d_alpha):
    """Gradients of a scalar loss through the saved forward state.

    d_color (H, W, 3) and d_alpha (H, W) are the upstream gradients on
    the black-composited color image and the alpha map.
    """
    splats = out.splats
    cam = out.camera
    height, width = cam.height, cam.width
    d_color = np.asarray(d_color)
    d_alpha = np.asarray(d_alpha)
    if d_color.shape != (height, width, 3) or d_alpha.shape != (height, width):
        raise InvalidStateError(
            f"upstream gradient shapes {d_color.shape}/{d_alpha.shape} do not "
            f"match the rendered {height}x{width} frame"
        )
    n = len(splats)
    dtype = splats.mean2d.dtype

    d_rgb = np.zeros((n, 3), dtype=dtype)
    d_opacity = np.zeros(n, dtype=dtype)
    d_conic = np.zeros((n, 3), dtype=dtype)
    d_mean2d = np.zeros((n, 2), dtype=dtype)

    # Suffix sums over later (deeper) included contributions per pixel.
    suffix_c = np.zeros((height, width, 3), dtype=dtype)
    suffix_a = np.zeros((height, width), dtype=dtype)

    for rec in reversed(out.records):
        i = rec.index
        y0, y1, x0, x1 = rec.y0, rec.y1, rec.x0, rec.x1
        alpha = rec.alpha
        t_ent = rec.t_enter
        inv = 1.0 / (1.0 - alpha)
        dc = d_color[y0:y1, x0:x1]
        da = d_alpha[y0:y1, x0:x1]
        rgb = splats.rgb[i]

        w = alpha * t_ent
        w[~rec.include] = 0.0
        wc = w[:, :, None] * rgb
        d_rgb[i] = np.einsum("hwk,hw->k", dc, w)

        d_al = np.einsum(
            "hwk,hwk->hw", dc,
            t_ent[:, :, None] * rgb - suffix_c[y0:y1, x0:x1] * inv[:, :, None],
        )
        d_al += da * (t_ent - suffix_a[y0:y1, x0:x1] * inv)
        live = rec.include & (alpha < ALPHA_MAX)
        d_al[~live] = 0.0

        s = d_al * alpha  # = -d_power; d_opacity folds the 1/o factor
        d_opacity[i] = s.sum() / splats.opacity[i]
        col = s.sum(axis=0)
        row = s.sum(axis=1)
        dx, dy = rec.dx, rec.dy
        sx = col @ dx
        sy = row @ dy
        d_conic[i, 0] = -0.5 * (col @ (dx * dx))
        d_conic[i, 1] = -(dy @ (s @ dx))
        d_conic[i, 2] = -0.5 * (row @ (dy * dy))
        ca, cb, cc = splats.conic[i]
        d_mean2d[i, 0] = ca * sx + cb * sy
        d_mean2d[i, 1] = cb * sx + cc * sy

        suffix_c[y0:y1, x0:x1] += wc
        suffix_a[y0:y1, x0:x1] += w

    # Conic -> screen covariance (conic is the inverse covariance).
    gq = np.empty((n, 2, 2), dtype=dtype)
    gq[:, 0, 0] = d_conic[:, 0]
    gq[:, 0, 1] = 0.5 * d_conic[:, 1]
    gq[:, 1, 0] = 0.5 * d_conic[:, 1]
    gq[:, 1, 1] = d_conic[:, 2]
    qf = np.empty((n, 2, 2), dtype=dtype)
    qf[:, 0, 0] = splats.conic[:, 0]
    qf[:, 0, 1] = splats.conic[:, 1]
    qf[:, 1, 0] = splats.conic[:, 1]
    qf[:, 1, 1] = splats.conic[:, 2]
    d_cov2 = -qf @ gq @ qf

    d_cov3_cam, d_t_cov = mathcore.project_covariance_backward(
        splats.cov3_cam, splats.t, cam.focal_x, cam.focal_y,
        cam.tan_fovx, cam.tan_fovy, d_cov2, near=cam.near,
    )
    d_t_mean = np.zeros_like(splats.t)
    mask = splats.valid
    if np.any(mask):
        d_t_mean[mask] = mathcore.project_points_backward(
            splats.t[mask], cam.focal_x, cam.focal_y, d_mean2d[mask]
        )

    d_sh, d_dir = mathcore.eval_sh_backward(splats.sh, splats.dirs, splats.sh_degree, d_rgb)
    radial = np.sum(splats.dirs * d_dir, axis=1, keepdims=True)
    d_pos_dir = np.zeros_like(d_dir)
    nz = splats.dir_norm > 0
    d_pos_dir[nz] = (d_dir[nz] - splats.dirs[nz] * radial[nz]) / splats.dir_norm[nz, None]

    R = cam.rotation.astype(dtype)
    d_positions = (d_t_cov + d_t_mean) @ R + d_pos_dir
    d_cov3 = R.T @ d_cov3_cam @ R
    d_rotations, d_scales = mathcore.build_covariance_backward(
        splats.rotations, splats.scales, d_cov3
    )

    mean2d_norm = np.hypot(d_mean2d[:, 0] * (width / 2.0), d_mean2d[:, 1] * (height / 2.0))
    return GradientBuffer(
        d_positions=d_positions, d_rotations=d_rotations, d_scales=d_scales,
        d_opacities=d_opacity, d_sh=d_sh, mean2d_norm=mean2d_norm,
        visible=radii_visible(out.radii),
    )


def radii_visible(radii):
    return radii > 0


def render(positions, rotations, scales, opacities, sh, sh_degree, cam, tile_size=16):
    """project_all + rasterize_forward in one call."""
    splats = project_all(positions, rotations, scales, opacities, sh, sh_degree, cam)
    return rasterize_forward(splats, cam, tile_size=tile_size)
