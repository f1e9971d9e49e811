"""Synthetic desk-scale data for closed-loop training tests.

A subdivided icosahedron stands in for the tracked head proxy. Eight
smooth vertex-offset fields play the role of expression blendshapes;
sinusoidal coefficients (zero at frame 0) and three rigid rotation
angles animate it, and together they form the per-frame condition
vector.

Ground truth comes from a hidden "teacher": a randomized Gaussian field
bound to the true animated mesh and rendered with the production
renderer. The manifest, however, stores a degraded mesh sequence in
which the last blendshape fields are damped, while conditions keep the
full coefficients. The rig alone therefore cannot reproduce the
teacher, but the deformation network sees everything it needs to close
the gap — which is exactly the lever the ablation comparisons need.

The teacher cloud itself is never written into the dataset tree.
"""

from dataclasses import dataclass

import numpy as np

from . import binding as bd
from . import mathcore as mc
from . import rasterizer as ras
from . import sceneio as sio
from .camera import look_at

NUM_BLENDSHAPES = 8
CONDITION_DIM = NUM_BLENDSHAPES + 3


def icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts, faces


def icosphere(subdivisions):
    """Unit sphere by midpoint subdivision: 12, 42, 162, ... vertices."""
    verts, faces = icosahedron()
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint = {}

        def midpoint_index(a, b):
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = 0.5 * (verts_list[a] + verts_list[b])
                m = m / np.linalg.norm(m)
                midpoint[key] = len(verts_list)
                verts_list.append(m)
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab = midpoint_index(a, b)
            bc = midpoint_index(b, c)
            ca = midpoint_index(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc],
                              [ab, bc, ca]])
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return verts, faces


@dataclass
class ProxySequence:
    """True animated proxy plus everything that generated it."""

    base: np.ndarray  # (V, 3) rest mesh
    faces: np.ndarray  # (F, 3)
    vertices: np.ndarray  # (T, V, 3) true posed frames
    conditions: np.ndarray  # (T, K + 3)
    fields: np.ndarray  # (K, V, 3) blendshape offset fields

    def __len__(self):
        return self.vertices.shape[0]


def _smooth_fields(rng, base, count, amplitude):
    """Low-frequency sinusoidal offset fields over the sphere surface."""
    v = base.shape[0]
    fields = np.zeros((count, v, 3))
    for k in range(count):
        freq = rng.uniform(0.8, 2.0, size=(3, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(3, 3))
        gain = rng.uniform(0.4, 1.0, size=(3, 3))
        for axis in range(3):
            wave = np.zeros(v)
            for j in range(3):
                wave += gain[axis, j] * np.sin(
                    freq[axis, j] * base[:, j] * np.pi + phase[axis, j]
                )
            fields[k, :, axis] = wave
        fields[k] *= amplitude / np.abs(fields[k]).max()
    return fields


def rotation_from_angles(angles):
    """yaw (y), pitch (x), roll (z) -> combined rotation, R = Ry Rx Rz."""
    yaw, pitch, roll = angles
    cy, sy = np.cos(yaw), np.sin(yaw)
    cx, sx = np.cos(pitch), np.sin(pitch)
    cz, sz = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return ry @ rx @ rz


def pose_proxy(base, fields, condition):
    """Blendshape mix then rigid rotation; linear in the coefficients."""
    coeffs = condition[:NUM_BLENDSHAPES]
    angles = condition[NUM_BLENDSHAPES:]
    deformed = base + np.einsum("k,kvj->vj", coeffs, fields)
    return deformed @ rotation_from_angles(angles).T


def make_proxy_sequence(seed, frames=60, vertices=42, amplitude=0.075,
                        coeff_scale=1.0, angle_scale=0.25):
    """Animated icosphere proxy with K = 8 blendshape coefficients.

    All coefficients and angles are sinusoids that vanish at frame 0,
    so the first frame is the undeformed, unrotated base mesh exactly.
    """
    if frames < 2:
        raise ValueError("need at least two frames")
    if vertices < 12:
        raise ValueError("need at least 12 vertices")
    subdiv = 0
    while 10 * 4 ** subdiv + 2 < vertices:
        subdiv += 1
    base, faces = icosphere(subdiv)
    rng = np.random.default_rng(seed)
    fields = _smooth_fields(rng, base, NUM_BLENDSHAPES, amplitude)
    cycles = rng.integers(1, 4, size=CONDITION_DIM)
    amp = np.concatenate([
        coeff_scale * rng.uniform(0.5, 1.0, size=NUM_BLENDSHAPES),
        angle_scale * rng.uniform(0.5, 1.0, size=3),
    ])
    phase_t = np.arange(frames) / frames
    conditions = amp[None, :] * np.sin(
        2.0 * np.pi * cycles[None, :] * phase_t[:, None]
    )
    seq = np.stack([
        pose_proxy(base, fields, conditions[t]) for t in range(frames)
    ])
    return ProxySequence(base=base, faces=faces, vertices=seq,
                         conditions=conditions, fields=fields)


def degrade_sequence(sequence, hidden=3, damp=0.0):
    """Mesh frames with the last `hidden` blendshape fields damped.

    This is what the dataset manifest ships: the proxy a real tracker
    would give the rig, missing part of the true motion. Conditions are
    untouched, so the deformation network can still recover it.
    """
    k = NUM_BLENDSHAPES
    weights = np.ones(k)
    if hidden > 0:
        weights[k - hidden:] = damp
    out = np.empty_like(sequence.vertices)
    for t in range(len(sequence)):
        cond = sequence.conditions[t].copy()
        cond[:k] *= weights
        out[t] = pose_proxy(sequence.base, sequence.fields, cond)
    return out


def default_camera(size=64, distance=3.2, fov=0.95):
    return look_at(
        np.array([0.0, 0.0, -distance]), np.zeros(3),
        np.array([0.0, 1.0, 0.0]), fov, fov, size, size,
    )


def make_teacher_cloud(sequence, seed, sh_degree=1):
    """Randomized Gaussian field bound to the proxy; the ground truth.

    The population is split into two cohorts so that each auxiliary
    supervision channel owns a piece of the scene.  The body cohort is
    crisp, opaque and darkly colored: its renders carry hard edges for
    the image-gradient supervision to sharpen.  The fringe cohort is
    near-white and hovers just off the surface, the way wispy hair
    stands off a real head: over the blank background it is invisible
    to color supervision, so only the alpha channel pins its geometry.
    A misplaced fringe then wrongly occludes the dark body at held-out
    poses, which is a genuine color cost.
    """
    rng = np.random.default_rng(seed)
    cloud = bd.init_plrf(sequence.base, sequence.faces, sh_degree=sh_degree)
    n = len(cloud)
    fringe = rng.uniform(size=n) < 0.25
    cloud.mu_loc = rng.uniform(-0.3, 0.3, size=(n, 3))
    cloud.mu_loc[fringe, 2] = rng.uniform(0.25, 0.9, size=int(fringe.sum()))
    cloud.q_loc = rng.normal(size=(n, 4))
    cloud.q_loc[:, 0] += 2.0
    cloud.s_loc = np.where(fringe[:, None],
                           rng.uniform(-1.75, -0.95, size=(n, 3)),
                           rng.uniform(-1.5, -0.6, size=(n, 3)))
    cloud.n_raw = rng.uniform(-1.2, 1.2, size=n)
    cloud.o_raw = mc.inv_sigmoid(rng.uniform(0.85, 0.99, size=n))
    palette = np.where(fringe[:, None],
                       rng.uniform(0.92, 0.99, size=(n, 3)),
                       rng.uniform(0.05, 0.75, size=(n, 3)))
    cloud.sh[:, :, 0] = (palette - 0.5) / mc.SH_C0
    if cloud.sh.shape[2] > 1:
        cloud.sh[:, :, 1:] = 0.08 * rng.normal(
            size=(n, 3, cloud.sh.shape[2] - 1))
    return cloud


def render_teacher_frames(cloud, sequence, cam, tile_size=16):
    """White-composited color frames and alpha maps for every pose."""
    images = []
    alphas = []
    for t in range(len(sequence)):
        state = bd.pose_rig(cloud, sequence.vertices[t])
        out = ras.render(state.mu, state.q, np.exp(state.s_raw),
                         cloud.opacities(), cloud.sh, cloud.sh_degree, cam,
                         tile_size=tile_size)
        images.append(out.color + (1.0 - out.alpha)[:, :, None])
        alphas.append(out.alpha)
    return np.stack(images), np.stack(alphas)


def make_teacher_dataset(sequence, cam, seed, root, hidden=3, damp=0.0,
                         sh_degree=1):
    """Dataset tree under root: degraded proxy + teacher renders.

    Returns (manifest_path, teacher_cloud); the teacher stays in memory
    for diagnostics and is not written to disk.
    """
    teacher = make_teacher_cloud(sequence, seed, sh_degree=sh_degree)
    images, alphas = render_teacher_frames(teacher, sequence, cam)
    degraded = degrade_sequence(sequence, hidden=hidden, damp=damp)
    path = sio.save_dataset(root, degraded, sequence.faces,
                            sequence.conditions, images, alphas, cam)
    return path, teacher


def make_desk_dataset(root, seed, frames=60, size=64, vertices=42,
                      hidden=3, damp=0.0, sh_degree=1):
    """One-call pipeline: sequence + camera + teacher dataset.

    Returns (manifest_path, sequence, teacher_cloud).
    """
    sequence = make_proxy_sequence(seed, frames=frames, vertices=vertices)
    cam = default_camera(size=size)
    path, teacher = make_teacher_dataset(sequence, cam, seed + 1, root,
                                         hidden=hidden, damp=damp,
                                         sh_degree=sh_degree)
    return path, sequence, teacher
