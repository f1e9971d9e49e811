"""Scene builders shared by the module tests and the acceptance suite."""

import numpy as np

from rigsplat import binding as bd
from rigsplat import deformer as df
from rigsplat import mathcore as mc
from rigsplat import sceneio as sio
from rigsplat import trainer as tr
from rigsplat.camera import look_at


def random_camera(rng, size=32, fov=0.9):
    eye = np.array(
        [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-4.5, -3.0)]
    )
    target = rng.uniform(-0.2, 0.2, size=3)
    return look_at(eye, target, np.array([0.0, 1.0, 0.0]), fov, fov, size, size)


def random_scene(rng, n=64, size=32, sh_degree=1, opacity_range=(0.05, 0.999)):
    """Arbitrary splat soup for renderer equivalence checks."""
    ncoef = mc.num_sh_coeffs(sh_degree)
    positions = rng.uniform(-0.8, 0.8, size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    scales = rng.uniform(0.02, 0.35, size=(n, 3))
    opacities = rng.uniform(*opacity_range, size=n)
    sh = rng.normal(size=(n, 3, ncoef)) * 0.5
    cam = random_camera(rng, size=size)
    return positions, rotations, scales, opacities, sh, sh_degree, cam


def micro_scene(rng, n=8, size=16, sh_degree=1):
    """Smooth micro-scene for finite-difference gradient checks.

    Opacities stay below 0.6 so with at most 8 splats the transmittance
    floor (1e-4) is never reached and compositing has no early-exit
    kinks; colors stay clear of the clamp at zero.
    """
    ncoef = mc.num_sh_coeffs(sh_degree)
    positions = rng.uniform(-0.5, 0.5, size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    scales = rng.uniform(0.05, 0.3, size=(n, 3))
    opacities = rng.uniform(0.15, 0.6, size=n)
    sh = rng.normal(size=(n, 3, ncoef)) * 0.2
    sh[:, :, 0] += 0.8
    cam = random_camera(rng, size=size)
    return positions, rotations, scales, opacities, sh, sh_degree, cam


def image_functional(rng, cam):
    """Fixed random linear functional over (color, alpha) outputs."""
    w_color = rng.normal(size=(cam.height, cam.width, 3))
    w_alpha = rng.normal(size=(cam.height, cam.width))
    return w_color, w_alpha


def micro_rig_scene(rng, size=16, cond_dim=4):
    """One-triangle rigged micro-setup safe for finite differences.

    Four bound Gaussians with sub-0.6 opacities (no transmittance early
    exit, no alpha clamp), local scales clear of the 0.15 regularizer
    floor, a small live deformation network, and targets built strictly
    below the prediction so the L1 sign never flips under perturbation.
    Returns (cloud, mlp, frame, camera).
    """
    vertices = np.array([
        [-0.5, -0.4, 0.0], [0.6, -0.3, 0.1], [-0.1, 0.6, -0.1],
    ]) + rng.uniform(-0.05, 0.05, size=(3, 3))
    faces = np.array([[0, 1, 2]])
    cloud = bd.init_plrf(vertices, faces, sh_degree=1)
    n = len(cloud)
    cloud.mu_loc = rng.uniform(-0.3, 0.3, size=(n, 3))
    cloud.q_loc = rng.normal(size=(n, 4)) + np.array([2.0, 0, 0, 0])
    cloud.s_loc = rng.uniform(-0.5, 0.5, size=(n, 3))
    cloud.n_raw = rng.uniform(-1.0, 1.0, size=n)
    cloud.o_raw = mc.inv_sigmoid(rng.uniform(0.15, 0.6, size=n))
    cloud.sh = rng.normal(size=cloud.sh.shape) * 0.2
    cloud.sh[:, :, 0] += 0.8

    mlp = df.init_deformer(rng, cond_dim=cond_dim, num_freqs=2, hidden=8,
                           depth=2)
    mlp.weights[-1] = 0.05 * rng.normal(size=mlp.weights[-1].shape)
    mlp.biases[-1] = 0.05 * rng.normal(size=mlp.biases[-1].shape)
    condition = rng.normal(size=cond_dim)

    cam = look_at(np.array([0.0, 0.0, -3.5]), np.zeros(3),
                  np.array([0.0, 1.0, 0.0]), 0.9, 0.9, size, size)
    bundle = tr.render_frame(cloud, mlp, vertices, condition, cam)
    target = bundle.pred - rng.uniform(0.05, 0.25, size=bundle.pred.shape)
    alpha_target = np.clip(
        bundle.out.alpha - rng.uniform(0.05, 0.2, size=bundle.out.alpha.shape),
        0.0, 1.0,
    )
    frame = sio.FrameRecord(vertices=vertices, condition=condition,
                            image=target, alpha=alpha_target)
    return cloud, mlp, frame, cam


def tiny_dataset(rng, frames=6, size=20, cond_dim=5):
    """In-memory dataset over a wobbling tetrahedron, random targets."""
    base = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
    ]) - 0.25
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    cam = look_at(np.array([0.0, 0.0, -4.0]), np.zeros(3),
                  np.array([0.0, 1.0, 0.0]), 0.9, 0.9, size, size)
    recs = []
    for i in range(frames):
        recs.append(sio.FrameRecord(
            vertices=base + 0.03 * rng.normal(size=base.shape),
            condition=rng.normal(size=cond_dim),
            image=rng.uniform(0, 1, size=(size, size, 3)),
            alpha=rng.uniform(0, 1, size=(size, size)),
        ))
    return sio.Dataset(vertices0=base, faces=faces, frames=recs, camera=cam)
