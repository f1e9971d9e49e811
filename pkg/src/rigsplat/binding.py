"""Gaussian point fields bound to the triangles of a proxy mesh.

Every triangle owns four Gaussians: one anchored at the centroid and
one on each segment from the centroid toward a vertex, parameterized
by a learnable line coordinate n in [0, 1] (stored pre-sigmoid, so
n = 0.5 exactly at init). Local attributes live in the face frame and
are carried into world space by the per-frame face rotation R and the
face size k, the mean of one edge length and the opposing
perpendicular:

    mu_g = k/2 * R mu_loc + anchor
    q_g  = q(R) * q_loc
    s_g  = k/2 * n * exp(s_loc)        (handled in log space here)

Because anchors are affine in the posed vertices, the field follows
any rigid motion of the mesh exactly, and scales track face size.

A cloud can also run in "free" mode (no mesh binding): positions,
rotations and scales are then optimized directly in world space. That
mode exists for the ablation that drops the rigged field.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import mathcore
from .errors import MeshError

INIT_OPACITY = 0.1
DEGENERATE_AREA = 1e-12

ORIGIN_INIT = 0
ORIGIN_CLONE = 1
ORIGIN_SPLIT = 2

# Scale divisor for split children: one parent becomes two children at
# scale / 1.6, positions sampled inside the parent footprint.
SPLIT_SCALE_DIV = 1.6
SPLIT_CHILDREN = 2


def validate_mesh(vertices, faces):
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise MeshError(f"vertex array must be (V, 3), got {vertices.shape}")
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise MeshError(f"face array must be (F, 3) triangles, got {faces.shape}")
    if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
        raise MeshError("face index out of range")
    return vertices, faces


def face_areas(vertices, faces):
    v = vertices[faces]
    return 0.5 * np.linalg.norm(
        np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1
    )


def face_frames(vertices, faces):
    """Per-face orthonormal frame R (F, 3, 3) and size k (F,).

    Column 0 of R is the unit v1->v2 edge, column 2 the face normal,
    column 1 their cross product. k is the mean of the edge length and
    the perpendicular distance of v3 from that edge (2 * area / edge).
    """
    v = vertices[faces]
    e1 = v[:, 1] - v[:, 0]
    base = np.linalg.norm(e1, axis=1)
    normal = np.cross(e1, v[:, 2] - v[:, 0])
    nn = np.linalg.norm(normal, axis=1)
    if np.any(base == 0.0) or np.any(nn < 2.0 * DEGENERATE_AREA):
        raise MeshError(
            f"degenerate face (zero area) at index {int(np.argmin(nn))}"
        )
    e1 = e1 / base[:, None]
    normal = normal / nn[:, None]
    R = np.stack([e1, np.cross(normal, e1), normal], axis=2)
    height = nn / base  # 2 * area / base
    k = 0.5 * (base + height)
    return R, k


@dataclass
class BoundCloud:
    """Struct-of-arrays Gaussian field with its mesh binding."""

    faces: np.ndarray  # (F, 3) topology the field was built on
    face_index: np.ndarray  # (N,)
    slot: np.ndarray  # (N,) 0..2 segment toward vertex, 3 centroid
    n_raw: np.ndarray  # (N,) pre-sigmoid line coordinate
    n_train: np.ndarray  # (N,) bool, densification-born have it frozen
    mu_loc: np.ndarray  # (N, 3)
    q_loc: np.ndarray  # (N, 4) raw quaternion
    s_loc: np.ndarray  # (N, 3) log scale
    o_raw: np.ndarray  # (N,) opacity logit
    sh: np.ndarray  # (N, 3, C)
    canonical: np.ndarray  # (N, 3) frozen creation-time world position
    origin: np.ndarray  # (N,) uint8 creation kind
    sh_degree: int
    mode: str = "rigged"  # or "free"

    def __len__(self):
        return self.face_index.shape[0]

    @property
    def num_faces(self):
        return self.faces.shape[0]

    def n_values(self):
        """Effective line coordinates (centroid slot pinned at 0.5)."""
        return np.where(self.slot < 3, mathcore.sigmoid(self.n_raw), 0.5)

    def opacities(self):
        return mathcore.sigmoid(self.o_raw)

    def param_arrays(self):
        """Name -> array map of everything the optimizer updates."""
        return {
            "mu_loc": self.mu_loc,
            "q_loc": self.q_loc,
            "s_loc": self.s_loc,
            "o_raw": self.o_raw,
            "n_raw": self.n_raw,
            "sh": self.sh,
        }


def scene_extent(vertices):
    """Radius of the vertex bounding sphere about the vertex centroid."""
    vertices = np.asarray(vertices, dtype=np.float64)
    center = vertices.mean(axis=0)
    return float(np.linalg.norm(vertices - center, axis=1).max())


def sample_anchors(vertices, faces, face_index, slot, n_eff):
    """Anchor points on the centroid-to-vertex segments.

    anchor = centroid + n * (vertex - centroid), so anchors are affine
    in n, stay inside the face plane, and slot 3 gives the centroid.
    """
    v = vertices[faces[face_index]]
    centroid = v.mean(axis=1)
    dvec = np.where(
        (slot < 3)[:, None],
        v[np.arange(len(face_index)), np.minimum(slot, 2)] - centroid,
        0.0,
    )
    return centroid + n_eff[:, None] * dvec, dvec


def init_plrf(vertices0, faces, sh_degree=3, init_opacity=INIT_OPACITY):
    """Four Gaussians per face on the frame-0 mesh.

    Slots run v1, v2, v3, centroid within each face. Local positions
    start at the anchors (mu_loc = 0), n at 0.5 exactly, scales at
    exp(0) = 1 in face units (so world scale is set by the face size
    k), colors at mid gray, opacity at init_opacity.
    """
    vertices0, faces = validate_mesh(vertices0, faces)
    face_frames(vertices0, faces)  # raises on degenerate faces
    nf = faces.shape[0]
    n = 4 * nf
    cloud = BoundCloud(
        faces=faces,
        face_index=np.repeat(np.arange(nf, dtype=np.int64), 4),
        slot=np.tile(np.arange(4, dtype=np.int8), nf),
        n_raw=np.zeros(n),
        n_train=np.tile(np.array([True, True, True, False]), nf),
        mu_loc=np.zeros((n, 3)),
        q_loc=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        s_loc=np.zeros((n, 3)),
        o_raw=np.full(n, float(mathcore.inv_sigmoid(init_opacity))),
        sh=np.zeros((n, 3, mathcore.num_sh_coeffs(sh_degree))),
        canonical=np.zeros((n, 3)),
        origin=np.full(n, ORIGIN_INIT, dtype=np.uint8),
        sh_degree=sh_degree,
    )
    cloud.canonical = pose_rig(cloud, vertices0).mu.copy()
    return cloud


def init_free_cloud(vertices0, faces, count, rng, sh_degree=3,
                    init_opacity=INIT_OPACITY, box_scale=1.2):
    """Unbound field: positions drawn uniformly in the scaled mesh box."""
    vertices0, faces = validate_mesh(vertices0, faces)
    lo = vertices0.min(axis=0)
    hi = vertices0.max(axis=0)
    mid = 0.5 * (lo + hi)
    half = 0.5 * box_scale * (hi - lo)
    positions = mid + rng.uniform(-1.0, 1.0, size=(count, 3)) * half
    mean_edge = np.mean(np.linalg.norm(
        vertices0[faces[:, 1]] - vertices0[faces[:, 0]], axis=1))
    cloud = BoundCloud(
        faces=faces,
        face_index=np.zeros(count, dtype=np.int64),
        slot=np.full(count, 3, dtype=np.int8),
        n_raw=np.zeros(count),
        n_train=np.zeros(count, dtype=bool),
        mu_loc=positions,
        q_loc=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (count, 1)),
        s_loc=np.full((count, 3), np.log(0.25 * mean_edge)),
        o_raw=np.full(count, float(mathcore.inv_sigmoid(init_opacity))),
        sh=np.zeros((count, 3, mathcore.num_sh_coeffs(sh_degree))),
        canonical=positions.copy(),
        origin=np.full(count, ORIGIN_INIT, dtype=np.uint8),
        sh_degree=sh_degree,
        mode="free",
    )
    return cloud


@dataclass
class RigState:
    """Posed world-space attributes plus caches for the backward pass."""

    mu: np.ndarray  # (N, 3)
    q: np.ndarray  # (N, 4), unit in rigged mode
    s_raw: np.ndarray  # (N, 3) world log scale
    # caches (rigged mode)
    R: np.ndarray = None  # (N, 3, 3) gathered face rotations
    k: np.ndarray = None  # (N,)
    n_eff: np.ndarray = None  # (N,)
    dvec: np.ndarray = None  # (N, 3) vertex - centroid for slot gaussians
    q_face: np.ndarray = None  # (N, 4)
    q_loc_unit: np.ndarray = None
    q_loc_norm: np.ndarray = None


def pose_rig(cloud, vertices):
    """World-space Gaussian attributes for one posed mesh."""
    if cloud.mode == "free":
        return RigState(mu=cloud.mu_loc, q=cloud.q_loc, s_raw=cloud.s_loc)
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.shape[0] <= cloud.faces.max():
        raise MeshError(
            f"posed mesh has {vertices.shape[0]} vertices, binding needs "
            f"{int(cloud.faces.max()) + 1}"
        )
    Rf, kf = face_frames(vertices, cloud.faces)
    R = Rf[cloud.face_index]
    k = kf[cloud.face_index]
    n_eff = cloud.n_values()
    anchors, dvec = sample_anchors(
        vertices, cloud.faces, cloud.face_index, cloud.slot, n_eff
    )
    mu = 0.5 * k[:, None] * np.einsum("nij,nj->ni", R, cloud.mu_loc) + anchors
    qf_faces = mathcore.quat_from_rotmat(Rf)
    q_face = qf_faces[cloud.face_index]
    q_loc_unit, q_loc_norm = mathcore.normalize_quat(cloud.q_loc)
    q = mathcore.quat_multiply(q_face, q_loc_unit)
    s_raw = np.log(0.5 * k * n_eff)[:, None] + cloud.s_loc
    return RigState(
        mu=mu, q=q, s_raw=s_raw, R=R, k=k, n_eff=n_eff, dvec=dvec,
        q_face=q_face, q_loc_unit=q_loc_unit, q_loc_norm=q_loc_norm,
    )


def rig_backward(cloud, state, d_mu, d_q, d_s_raw):
    """World gradients -> local parameter gradients.

    Returns a dict of gradients keyed like cloud.param_arrays() minus
    the opacity/sh entries, which bypass the rig. Mesh vertices are
    inputs, not parameters, so nothing flows to them. Densification-born
    Gaussians and centroid slots get no n gradient.
    """
    if cloud.mode == "free":
        return {"mu_loc": d_mu, "q_loc": d_q, "s_loc": d_s_raw,
                "n_raw": np.zeros_like(cloud.n_raw)}
    d_mu_loc = 0.5 * state.k[:, None] * np.einsum("nji,nj->ni", state.R, d_mu)
    d_s_loc = d_s_raw.copy()
    # n enters through the anchor (mu path) and through log(k n / 2).
    d_n = np.sum(state.dvec * d_mu, axis=1)
    d_n += np.sum(d_s_raw, axis=1) / state.n_eff
    live = (cloud.slot < 3) & cloud.n_train
    d_n_raw = np.where(live, d_n * state.n_eff * (1.0 - state.n_eff), 0.0)
    d_q_unit = mathcore.quat_multiply_backward_right(state.q_face, d_q)
    d_q_loc = mathcore.normalize_quat_backward(
        state.q_loc_unit, state.q_loc_norm, d_q_unit
    )
    return {"mu_loc": d_mu_loc, "q_loc": d_q_loc, "s_loc": d_s_loc,
            "n_raw": d_n_raw}


# ---------------------------------------------------------------------------
# density control


@dataclass
class DensifyStats:
    """Screen-gradient accumulator between density-control events."""

    accum: np.ndarray  # (N,) summed screen-gradient magnitudes
    count: np.ndarray  # (N,) number of renders the splat was visible in

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64))

    def add(self, mean2d_norm, visible):
        self.accum[visible] += mean2d_norm[visible]
        self.count[visible] += 1


def world_sizes(cloud, vertices0):
    """Largest world-space scale component per Gaussian."""
    if cloud.mode == "free":
        return np.exp(cloud.s_loc).max(axis=1)
    _, kf = face_frames(vertices0, cloud.faces)
    k = kf[cloud.face_index]
    return 0.5 * k * cloud.n_values() * np.exp(cloud.s_loc).max(axis=1)


def densify_and_prune(cloud, stats, vertices0, rng, extent,
                      grad_threshold=2e-4, opacity_threshold=0.005,
                      percent_dense=0.01):
    """Clone small / split large high-gradient Gaussians, prune faint ones.

    Children keep the parent's face binding, slot and n (with the n
    gradient frozen), and adopt their creation-time frame-0 position as
    the canonical coordinate for the deformer encoding. A split removes
    the parent and adds two children at scale / 1.6 with positions
    sampled inside the parent footprint, so each split is net +1.

    Returns (new_cloud, keep_indices, info) where keep_indices maps the
    surviving leading rows of the new cloud back to rows of the old one
    (appended rows are new; the optimizer zeroes their moments).
    """
    n = len(cloud)
    mean_grad = np.zeros(n)
    seen = stats.count > 0
    mean_grad[seen] = stats.accum[seen] / stats.count[seen]

    sizes = world_sizes(cloud, vertices0)
    hot = mean_grad > grad_threshold
    big = sizes > percent_dense * extent
    prune = cloud.opacities() < opacity_threshold
    split = hot & big & ~prune
    clone = hot & ~big & ~prune
    keep = ~(prune | split)
    keep_indices = np.flatnonzero(keep)

    params = cloud.param_arrays()
    meta = {
        "face_index": cloud.face_index, "slot": cloud.slot,
        "n_train": cloud.n_train, "canonical": cloud.canonical,
        "origin": cloud.origin,
    }

    def take(name, idx):
        src = params[name] if name in params else meta[name]
        return src[idx].copy()

    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)
    split_rep = np.repeat(split_idx, SPLIT_CHILDREN)

    pieces = {}
    for name in list(params) + list(meta):
        pieces[name] = [take(name, keep_indices), take(name, clone_idx),
                        take(name, split_rep)]

    # Split children: shrink and scatter inside the parent footprint.
    if len(split_rep):
        child_s = pieces["s_loc"][2]
        parent_sig = np.exp(child_s)
        if cloud.mode == "rigged":
            parent_sig = parent_sig * cloud.n_values()[split_rep, None]
        eps = rng.standard_normal(size=(len(split_rep), 3))
        rot = mathcore.quat_to_rotmat(pieces["q_loc"][2])
        offset = np.einsum("nij,nj->ni", rot, eps * parent_sig)
        pieces["mu_loc"][2] = pieces["mu_loc"][2] + offset
        pieces["s_loc"][2] = child_s - np.log(SPLIT_SCALE_DIV)

    new_rows = len(clone_idx) + len(split_rep)
    merged = {name: np.concatenate(parts) for name, parts in pieces.items()}
    merged["n_train"] = np.concatenate([
        pieces["n_train"][0],
        np.zeros(new_rows, dtype=bool),
    ])
    merged["origin"] = np.concatenate([
        pieces["origin"][0],
        np.full(len(clone_idx), ORIGIN_CLONE, dtype=np.uint8),
        np.full(len(split_rep), ORIGIN_SPLIT, dtype=np.uint8),
    ])

    new_cloud = replace(
        cloud,
        face_index=merged["face_index"], slot=merged["slot"],
        n_raw=merged["n_raw"], n_train=merged["n_train"],
        mu_loc=merged["mu_loc"], q_loc=merged["q_loc"],
        s_loc=merged["s_loc"], o_raw=merged["o_raw"], sh=merged["sh"],
        canonical=merged["canonical"], origin=merged["origin"],
    )
    if new_rows:
        fresh = slice(len(keep_indices), len(new_cloud))
        sub = replace(
            new_cloud,
            face_index=new_cloud.face_index[fresh], slot=new_cloud.slot[fresh],
            n_raw=new_cloud.n_raw[fresh], n_train=new_cloud.n_train[fresh],
            mu_loc=new_cloud.mu_loc[fresh], q_loc=new_cloud.q_loc[fresh],
            s_loc=new_cloud.s_loc[fresh], o_raw=new_cloud.o_raw[fresh],
            sh=new_cloud.sh[fresh], canonical=new_cloud.canonical[fresh],
            origin=new_cloud.origin[fresh],
        )
        new_cloud.canonical[fresh] = pose_rig(sub, vertices0).mu

    info = {
        "cloned": int(len(clone_idx)),
        "split": int(len(split_idx)),
        "pruned": int(np.count_nonzero(prune)),
    }
    return new_cloud, keep_indices, info


def reset_opacity(cloud, floor=0.01):
    """Clamp every opacity to at most `floor` (post-sigmoid); idempotent."""
    cloud.o_raw = np.minimum(cloud.o_raw, float(mathcore.inv_sigmoid(floor)))
    return cloud
