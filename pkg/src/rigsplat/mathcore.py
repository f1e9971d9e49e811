"""Batched geometric primitives and their hand-derived Jacobians.

Every operation here is vectorized over a leading batch axis and comes
with a matching ``*_backward`` that maps upstream gradients to input
gradients. Covariance gradients are carried as full-matrix arrays
(``dL/dM[i, j]`` with symmetric M), never as packed triplets, to keep
the chain rule free of factor-of-two bookkeeping.

Conventions:
  * quaternions are (w, x, y, z), Hamilton product, column-vector
    rotation ``R @ v``;
  * camera frame is +x right, +y down, +z forward; depth is the
    camera-frame z coordinate;
  * spherical harmonics use the real basis of degree <= 3 with the
    constants conventional in splatting renderers, a +0.5 offset and a
    clamp at zero.
"""

import numpy as np

# Real SH basis constants, degree 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


def num_sh_coeffs(degree):
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# quaternions


def normalize_quat(q):
    """Unit quaternions and their norms; raises on a zero-norm row."""
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize zero-norm quaternion")
    return q / norm[..., None], norm


def normalize_quat_backward(q_unit, norm, d_unit):
    """Gradient through q_unit = q / |q|: project out the radial part."""
    radial = np.sum(q_unit * d_unit, axis=-1, keepdims=True)
    return (d_unit - q_unit * radial) / norm[..., None]


def quat_to_rotmat(q):
    """Rotation matrices (N, 3, 3) from raw quaternions (N, 4).

    Input quaternions are normalized internally; use
    quat_to_rotmat_backward to differentiate through both the matrix
    and the normalization.
    """
    qu, _ = normalize_quat(q)
    w, x, y, z = qu[..., 0], qu[..., 1], qu[..., 2], qu[..., 3]
    R = np.empty(qu.shape[:-1] + (3, 3), dtype=qu.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q, dR):
    """Map dL/dR (N, 3, 3) back to dL/dq for raw (unnormalized) q."""
    qu, norm = normalize_quat(q)
    w, x, y, z = qu[..., 0], qu[..., 1], qu[..., 2], qu[..., 3]
    zero = np.zeros_like(w)

    def stack3(a, b, c, d, e, f, g, h, i):
        rows = np.stack(
            [np.stack([a, b, c], -1), np.stack([d, e, f], -1), np.stack([g, h, i], -1)],
            -2,
        )
        return rows

    dRdw = 2 * stack3(zero, -z, y, z, zero, -x, -y, x, zero)
    dRdx = 2 * stack3(zero, y, z, y, -2 * x, -w, z, w, -2 * x)
    dRdy = 2 * stack3(-2 * y, x, w, x, zero, z, -w, z, -2 * y)
    dRdz = 2 * stack3(-2 * z, -w, x, w, -2 * z, y, x, y, zero)

    d_unit = np.stack(
        [
            np.sum(dR * dRdw, axis=(-2, -1)),
            np.sum(dR * dRdx, axis=(-2, -1)),
            np.sum(dR * dRdy, axis=(-2, -1)),
            np.sum(dR * dRdz, axis=(-2, -1)),
        ],
        -1,
    )
    return normalize_quat_backward(qu, norm, d_unit)


def quat_multiply(q1, q2):
    """Hamilton product, batched; satisfies R(q1 q2) = R(q1) R(q2)."""
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    w2, x2, y2, z2 = q2[..., 0], q2[..., 1], q2[..., 2], q2[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        -1,
    )


def quat_multiply_backward_right(q1, d_out):
    """Gradient of quat_multiply(q1, q2) w.r.t. q2 (q1 held fixed)."""
    w1, x1, y1, z1 = q1[..., 0], q1[..., 1], q1[..., 2], q1[..., 3]
    dw, dx, dy, dz = d_out[..., 0], d_out[..., 1], d_out[..., 2], d_out[..., 3]
    # Transpose of the left-multiplication matrix of q1.
    return np.stack(
        [
            w1 * dw + x1 * dx + y1 * dy + z1 * dz,
            -x1 * dw + w1 * dx + z1 * dy - y1 * dz,
            -y1 * dw - z1 * dx + w1 * dy + x1 * dz,
            -z1 * dw + y1 * dx - x1 * dy + w1 * dz,
        ],
        -1,
    )


def quat_from_rotmat(R):
    """Unit quaternions (w >= 0 canonical) from rotation matrices.

    Branches on the largest diagonal combination for numerical
    stability; inputs must be proper rotations.
    """
    R = np.asarray(R)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    n = Rf.shape[0]
    q = np.empty((n, 4), dtype=Rf.dtype)
    tr = Rf[:, 0, 0] + Rf[:, 1, 1] + Rf[:, 2, 2]
    for i in range(n):
        m = Rf[i]
        t = tr[i]
        if t > 0:
            s = np.sqrt(t + 1.0) * 2
            q[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        if q[i, 0] < 0:
            q[i] = -q[i]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(batch + (4,))


# ---------------------------------------------------------------------------
# 3D covariance


def build_covariance(q, s):
    """World covariance R diag(s^2) R^T from raw quaternion and scale.

    s must be strictly positive (post-activation values).
    """
    s = np.asarray(s)
    if np.any(s <= 0):
        raise ValueError("covariance scales must be strictly positive")
    R = quat_to_rotmat(q)
    B = R * s[..., None, :]
    return B @ np.swapaxes(B, -1, -2)


def build_covariance_backward(q, s, d_cov):
    """Full-matrix d_cov (N, 3, 3) -> (dq (N, 4), ds (N, 3))."""
    R = quat_to_rotmat(q)
    B = R * s[..., None, :]
    dB = (d_cov + np.swapaxes(d_cov, -1, -2)) @ B
    ds = np.sum(dB * R, axis=-2)
    dR = dB * s[..., None, :]
    dq = quat_to_rotmat_backward(q, dR)
    return dq, ds


# ---------------------------------------------------------------------------
# perspective projection of means and covariances


def project_points(t, fx, fy, cx, cy):
    """Pixel coordinates (N, 2) of camera-frame points (N, 3)."""
    z = t[..., 2]
    return np.stack([fx * t[..., 0] / z + cx, fy * t[..., 1] / z + cy], -1)


def project_points_backward(t, fx, fy, d_xy):
    z = t[..., 2]
    gx = d_xy[..., 0]
    gy = d_xy[..., 1]
    return np.stack(
        [
            gx * fx / z,
            gy * fy / z,
            -(gx * fx * t[..., 0] + gy * fy * t[..., 1]) / (z * z),
        ],
        -1,
    )


def project_covariance(cov3, t, fx, fy, tan_fovx, tan_fovy, near=0.01, lowpass=0.3):
    """Screen-space covariance of camera-frame Gaussians.

    cov3 is the 3D covariance already expressed in the camera frame;
    t the camera-frame mean. Returns (cov2 (N, 2, 2), valid (N,)).
    Rows behind the near plane are flagged invalid and left zero (a
    sentinel, not an exception). The first-order perspective Jacobian
    is evaluated with x/z and y/z clamped to 1.3x the frustum tangent,
    and a lowpass floor is added to both screen variances so every
    splat covers at least a fraction of a pixel.
    """
    cov3 = np.asarray(cov3)
    t = np.asarray(t)
    n = t.shape[0]
    cov2 = np.zeros((n, 2, 2), dtype=cov3.dtype)
    valid = t[:, 2] > near
    if not np.any(valid):
        return cov2, valid

    tv = t[valid]
    tz = tv[:, 2]
    limx = 1.3 * tan_fovx
    limy = 1.3 * tan_fovy
    rx = tv[:, 0] / tz
    ry = tv[:, 1] / tz
    cxc = np.clip(rx, -limx, limx)
    cyc = np.clip(ry, -limy, limy)
    txu = cxc * tz
    tyu = cyc * tz

    J = np.zeros((tv.shape[0], 2, 3), dtype=cov3.dtype)
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * txu / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * tyu / (tz * tz)

    c2 = J @ cov3[valid] @ np.swapaxes(J, -1, -2)
    c2[:, 0, 0] += lowpass
    c2[:, 1, 1] += lowpass
    cov2[valid] = c2
    return cov2, valid


def project_covariance_backward(cov3, t, fx, fy, tan_fovx, tan_fovy, d_cov2, near=0.01):
    """Full-matrix d_cov2 -> (d_cov3 (N, 3, 3), d_t (N, 3)).

    Invalid (behind-near) rows receive zero gradient.
    """
    cov3 = np.asarray(cov3)
    t = np.asarray(t)
    n = t.shape[0]
    d_cov3 = np.zeros_like(cov3)
    d_t = np.zeros_like(t)
    valid = t[:, 2] > near
    if not np.any(valid):
        return d_cov3, d_t

    tv = t[valid]
    tz = tv[:, 2]
    limx = 1.3 * tan_fovx
    limy = 1.3 * tan_fovy
    rx = tv[:, 0] / tz
    ry = tv[:, 1] / tz
    inx = np.abs(rx) <= limx
    iny = np.abs(ry) <= limy
    cxc = np.clip(rx, -limx, limx)
    cyc = np.clip(ry, -limy, limy)
    txu = cxc * tz
    tyu = cyc * tz

    J = np.zeros((tv.shape[0], 2, 3), dtype=cov3.dtype)
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * txu / (tz * tz)
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * tyu / (tz * tz)

    G = d_cov2[valid]
    V = cov3[valid]
    d_cov3[valid] = np.swapaxes(J, -1, -2) @ G @ J
    dJ = (G + np.swapaxes(G, -1, -2)) @ J @ V

    tz2 = tz * tz
    tz3 = tz2 * tz
    dtx = dJ[:, 0, 2] * (-fx / tz2) * inx
    dty = dJ[:, 1, 2] * (-fy / tz2) * iny
    # J02 = -fx * txu / tz^2; unclamped txu = tx, clamped txu = const * tz.
    dtz_02 = dJ[:, 0, 2] * np.where(inx, 2 * fx * txu / tz3, fx * txu / tz3)
    dtz_12 = dJ[:, 1, 2] * np.where(iny, 2 * fy * tyu / tz3, fy * tyu / tz3)
    dtz = dJ[:, 0, 0] * (-fx / tz2) + dJ[:, 1, 1] * (-fy / tz2) + dtz_02 + dtz_12
    d_t[valid] = np.stack([dtx, dty, dtz], -1)
    return d_cov3, d_t


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs, degree, with_grad=False):
    """Real SH basis rows (N, (degree+1)^2) for unit directions.

    With with_grad=True also returns d(basis)/d(direction) of shape
    (N, (degree+1)^2, 3), treating the direction components as free
    coordinates (the caller owns the normalization Jacobian).
    """
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in [0, 3]")
    dirs = np.asarray(dirs)
    n = dirs.shape[0]
    ncoef = num_sh_coeffs(degree)
    B = np.empty((n, ncoef), dtype=dirs.dtype)
    dB = np.zeros((n, ncoef, 3), dtype=dirs.dtype) if with_grad else None

    B[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
        if with_grad:
            dB[:, 1, 1] = -SH_C1
            dB[:, 2, 2] = SH_C1
            dB[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        B[:, 4] = SH_C2[0] * xy
        B[:, 5] = SH_C2[1] * yz
        B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * xz
        B[:, 8] = SH_C2[4] * (xx - yy)
        if with_grad:
            dB[:, 4, 0] = SH_C2[0] * y
            dB[:, 4, 1] = SH_C2[0] * x
            dB[:, 5, 1] = SH_C2[1] * z
            dB[:, 5, 2] = SH_C2[1] * y
            dB[:, 6, 0] = SH_C2[2] * (-2 * x)
            dB[:, 6, 1] = SH_C2[2] * (-2 * y)
            dB[:, 6, 2] = SH_C2[2] * (4 * z)
            dB[:, 7, 0] = SH_C2[3] * z
            dB[:, 7, 2] = SH_C2[3] * x
            dB[:, 8, 0] = SH_C2[4] * (2 * x)
            dB[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        B[:, 10] = SH_C3[1] * xy * z
        B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
        if with_grad:
            dB[:, 9, 0] = SH_C3[0] * 6 * xy
            dB[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
            dB[:, 10, 0] = SH_C3[1] * yz
            dB[:, 10, 1] = SH_C3[1] * xz
            dB[:, 10, 2] = SH_C3[1] * xy
            dB[:, 11, 0] = SH_C3[2] * (-2 * xy)
            dB[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
            dB[:, 11, 2] = SH_C3[2] * (8 * yz)
            dB[:, 12, 0] = SH_C3[3] * (-6 * xz)
            dB[:, 12, 1] = SH_C3[3] * (-6 * yz)
            dB[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
            dB[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
            dB[:, 13, 1] = SH_C3[4] * (-2 * xy)
            dB[:, 13, 2] = SH_C3[4] * (8 * xz)
            dB[:, 14, 0] = SH_C3[5] * (2 * xz)
            dB[:, 14, 1] = SH_C3[5] * (-2 * yz)
            dB[:, 14, 2] = SH_C3[5] * (xx - yy)
            dB[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
            dB[:, 15, 1] = SH_C3[6] * (-6 * xy)
    if with_grad:
        return B, dB
    return B


def eval_sh(coeffs, dirs, degree):
    """View-dependent colors from SH coefficients.

    coeffs: (N, 3, (degree+1)^2); dirs: unit directions (N, 3).
    Colors get a +0.5 offset then clamp at zero, so an all-zero
    coefficient block renders mid gray.
    """
    coeffs = np.asarray(coeffs)
    if coeffs.shape[-1] < num_sh_coeffs(degree):
        raise ValueError(
            "coefficient block too small for degree "
            f"{degree}: has {coeffs.shape[-1]}, needs {num_sh_coeffs(degree)}"
        )
    B = sh_basis(dirs, degree)
    pre = np.einsum("nkc,nc->nk", coeffs[..., : B.shape[1]], B) + 0.5
    return np.maximum(pre, 0.0)


def eval_sh_backward(coeffs, dirs, degree, d_color):
    """d_color (N, 3) -> (d_coeffs like coeffs, d_dirs (N, 3)).

    The clamp at zero kills gradients on channels that rendered black.
    d_dirs treats the direction as free coordinates; chain through the
    normalization where the direction came from a difference vector.
    """
    coeffs = np.asarray(coeffs)
    B, dB = sh_basis(dirs, degree, with_grad=True)
    ncoef = B.shape[1]
    pre = np.einsum("nkc,nc->nk", coeffs[..., :ncoef], B) + 0.5
    live = (pre > 0).astype(coeffs.dtype)
    g = d_color * live
    d_coeffs = np.zeros_like(coeffs)
    d_coeffs[..., :ncoef] = g[:, :, None] * B[:, None, :]
    d_dirs = np.einsum("nk,nkc,ncd->nd", g, coeffs[..., :ncoef], dB)
    return d_coeffs, d_dirs


# ---------------------------------------------------------------------------
# positional encoding


def positional_encoding(x, num_freqs):
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < num_freqs.

    x: (N, 3) -> (N, 3 + 6 * num_freqs). Frequencies are interleaved
    sin-then-cos per octave so the layout is stable for checkpoints.
    """
    x = np.asarray(x)
    n, d = x.shape
    out = np.empty((n, d + 2 * d * num_freqs), dtype=x.dtype)
    out[:, :d] = x
    for k in range(num_freqs):
        arg = (np.pi * (2.0**k)) * x
        out[:, d + 2 * k * d : d + (2 * k + 1) * d] = np.sin(arg)
        out[:, d + (2 * k + 1) * d : d + (2 * k + 2) * d] = np.cos(arg)
    return out


def positional_encoding_backward(x, num_freqs, d_enc):
    x = np.asarray(x)
    n, d = x.shape
    dx = d_enc[:, :d].copy()
    for k in range(num_freqs):
        w = np.pi * (2.0**k)
        arg = w * x
        ds = d_enc[:, d + 2 * k * d : d + (2 * k + 1) * d]
        dc = d_enc[:, d + (2 * k + 1) * d : d + (2 * k + 2) * d]
        dx += w * (np.cos(arg) * ds - np.sin(arg) * dc)
    return dx
