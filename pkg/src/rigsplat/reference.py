"""Naive per-pixel reference renderer used as a compositing oracle.

Implements the same screen-space contracts as the production
rasterizer (projection with clamped Jacobian, lowpass floor, power
cutoff, alpha clamp, transmittance early exit) with plain per-pixel
Python loops and a full per-pixel sort, no tiling and no shared
compositing code. The production tile renderer must agree with this
to 1e-6 per channel; in practice they agree to rounding.
"""

import numpy as np

from . import mathcore
from .rasterizer import ALPHA_MAX, LOWPASS, POWER_CUTOFF, RADIUS_SIGMA, T_MIN


def naive_render(positions, rotations, scales, opacities, sh, sh_degree, cam):
    """Render by looping over every pixel and every splat.

    Returns (color (H, W, 3), alpha (H, W), radii (N,)).
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    height, width = cam.height, cam.width
    color = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    radii = np.zeros(n, dtype=np.int64)
    if n == 0:
        return color, 1.0 - trans, radii

    R = cam.rotation
    tcam = cam.translation
    fx, fy = cam.focal_x, cam.focal_y
    cx, cy = cam.principal
    limx = 1.3 * cam.tan_fovx
    limy = 1.3 * cam.tan_fovy
    center = cam.center()

    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    alive = np.zeros(n, dtype=bool)

    for i in range(n):
        t = R @ positions[i] + tcam
        depth[i] = t[2]
        if t[2] <= cam.near:
            continue
        rot = mathcore.quat_to_rotmat(rotations[i : i + 1])[0]
        s = np.asarray(scales[i], dtype=np.float64)
        cov3 = rot @ np.diag(s * s) @ rot.T
        vcam = R @ cov3 @ R.T

        tz = t[2]
        txz = min(max(t[0] / tz, -limx), limx) * tz
        tyz = min(max(t[1] / tz, -limy), limy) * tz
        J = np.array(
            [
                [fx / tz, 0.0, -fx * txz / (tz * tz)],
                [0.0, fy / tz, -fy * tyz / (tz * tz)],
            ]
        )
        c2 = J @ vcam @ J.T
        c2[0, 0] += LOWPASS
        c2[1, 1] += LOWPASS
        det = c2[0, 0] * c2[1, 1] - c2[0, 1] * c2[0, 1]
        mid = 0.5 * (c2[0, 0] + c2[1, 1])
        lam = mid + np.sqrt(max(mid * mid - det, 0.0))
        br = int(np.ceil(np.sqrt(2.0 * POWER_CUTOFF * lam)))
        mean2d[i] = [fx * t[0] / tz + cx, fy * t[1] / tz + cy]
        if (
            int(np.floor(mean2d[i, 0] + br)) < 0
            or int(np.floor(mean2d[i, 1] + br)) < 0
            or int(np.floor(mean2d[i, 0] - br)) >= width
            or int(np.floor(mean2d[i, 1] - br)) >= height
        ):
            continue
        radii[i] = int(np.ceil(RADIUS_SIGMA * np.sqrt(lam)))
        conic[i] = [c2[1, 1] / det, -c2[0, 1] / det, c2[0, 0] / det]
        u = positions[i] - center
        d = u / np.linalg.norm(u)
        rgb[i] = mathcore.eval_sh(
            np.asarray(sh[i], dtype=np.float64)[None], d[None], sh_degree
        )[0]
        alive[i] = True

    order = sorted(np.flatnonzero(alive), key=lambda i: depth[i])
    for py in range(height):
        for px in range(width):
            t_cur = 1.0
            for i in order:
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                power = 0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) + conic[i, 1] * dx * dy
                if power > POWER_CUTOFF:
                    continue
                a = min(opacities[i] * np.exp(-power), ALPHA_MAX)
                test = t_cur * (1.0 - a)
                if test < T_MIN:
                    break
                color[py, px] += rgb[i] * (a * t_cur)
                t_cur = test
            trans[py, px] = t_cur

    return color, 1.0 - trans, radii
