"""File formats and serialization.

Covers everything that crosses a process boundary: OBJ meshes, PNG
frames (8-bit RGB color, 16-bit single-channel alpha), the JSON dataset
manifest with its little-endian float32 vertex blob, versioned binary
checkpoints with a sha256 trailer, condition-vector streams, and the
CSV training log. Every loader validates before returning; a failed
load raises a DataError subclass carrying a short machine-readable
`code` and never leaks partial state.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .binding import BoundCloud, validate_mesh
from .camera import Camera
from .deformer import MlpParams
from .errors import (CheckpointError, ImageIOError, ManifestError, MeshError)

MANIFEST_KIND = "rigsplat-dataset"
MANIFEST_VERSION = 1
CHECKPOINT_MAGIC = b"RGSPLAT1"
CHECKPOINT_VERSION = 1

LOG_FIELDS = ("iteration", "total", "color", "l1", "dssim", "st", "alpha",
              "invis", "scale", "gaussians", "event")


# ---------------------------------------------------------------------------
# OBJ meshes


def load_mesh(path):
    """Triangle mesh from a Wavefront OBJ (v/f records, rest ignored)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}",
                        code="unreadable")
    vertices = []
    faces = []
    face_lines = []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshError(f"bad vertex at line {lineno}",
                                code="bad_vertex")
            try:
                vertices.append([float(p) for p in parts[1:4]])
            except ValueError:
                raise MeshError(f"bad vertex at line {lineno}",
                                code="bad_vertex")
        elif tag == "f":
            if len(parts) != 4:
                raise MeshError(f"non-triangular face at line {lineno}",
                                code="non_triangular")
            tri = []
            for p in parts[1:]:
                try:
                    idx = int(p.split("/")[0])
                except ValueError:
                    raise MeshError(f"bad face at line {lineno}",
                                    code="bad_face")
                if idx == 0:
                    raise MeshError(f"face index 0 at line {lineno}",
                                    code="bad_index")
                tri.append(idx - 1 if idx > 0 else len(vertices) + idx)
            faces.append(tri)
            face_lines.append(lineno)
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    for tri, lineno in zip(faces, face_lines):
        for idx in tri:
            if idx < 0 or idx >= len(vertices):
                raise MeshError(
                    f"face index out of range at line {lineno}",
                    code="bad_index",
                )
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return validate_mesh(vertices, faces)


def save_mesh(path, vertices, faces):
    vertices, faces = validate_mesh(vertices, faces)
    with open(path, "w", encoding="utf-8") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# images


def write_image(path, image):
    """Color image in [0, 1] -> 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageIOError(f"expected (H, W, 3) color image, got {arr.shape}",
                           code="bad_shape")
    Image.fromarray(arr, mode="RGB").save(path)


def write_alpha_map(path, alpha):
    """Coverage map in [0, 1] -> 16-bit single-channel PNG (lossless)."""
    arr = np.asarray(alpha)
    if arr.ndim != 2:
        raise ImageIOError(f"expected (H, W) alpha map, got {arr.shape}",
                           code="bad_shape")
    arr = np.clip(np.rint(arr * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)  # uint16 grayscale -> 16-bit PNG


def read_image(path):
    """PNG -> float64 in [0, 1]; (H, W, 3) for color, (H, W) for gray."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            arr = np.asarray(img)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}",
                           code="unreadable")
    if mode in ("I;16", "I"):
        return arr.astype(np.float64) / 65535.0
    if mode == "L":
        return arr.astype(np.float64) / 255.0
    if mode != "RGB":
        raise ImageIOError(f"unsupported image mode {mode} in {path}",
                           code="bad_mode")
    return arr.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# dataset manifest


@dataclass
class FrameRecord:
    vertices: np.ndarray  # (V, 3) posed proxy mesh
    condition: np.ndarray  # (D,) expression coefficients + pose angles
    image: np.ndarray  # (H, W, 3) target composited over white
    alpha: np.ndarray  # (H, W) target coverage


@dataclass
class Dataset:
    vertices0: np.ndarray  # topology/rest mesh
    faces: np.ndarray
    frames: list
    camera: Camera

    def __len__(self):
        return len(self.frames)

    @property
    def cond_dim(self):
        return self.frames[0].condition.shape[0]


def camera_to_dict(cam):
    return {
        "world_to_camera": cam.world_to_camera.tolist(),
        "fov_x": cam.fov_x, "fov_y": cam.fov_y,
        "width": cam.width, "height": cam.height,
        "near": cam.near, "far": cam.far,
    }


def camera_from_dict(d):
    try:
        return Camera(
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            fov_x=float(d["fov_x"]), fov_y=float(d["fov_y"]),
            width=int(d["width"]), height=int(d["height"]),
            near=float(d.get("near", 0.01)), far=float(d.get("far", 100.0)),
        )
    except KeyError as exc:
        raise ManifestError(f"camera description missing {exc}",
                            code="missing_key")


def save_dataset(root, vertices_frames, faces, conditions, images, alphas,
                 camera):
    """Write a complete dataset tree; returns the manifest path.

    vertices_frames (T, V, 3) are stored as one little-endian float32
    blob; frame 0 doubles as the rest mesh written to proxy.obj.
    """
    vertices_frames = np.asarray(vertices_frames, dtype=np.float64)
    t = vertices_frames.shape[0]
    os.makedirs(os.path.join(root, "frames"), exist_ok=True)
    save_mesh(os.path.join(root, "proxy.obj"), vertices_frames[0], faces)
    blob = vertices_frames.astype("<f4")
    blob.tofile(os.path.join(root, "vertices.f32"))
    frames = []
    for i in range(t):
        rel_img = os.path.join("frames", f"frame_{i:04d}.png")
        rel_alpha = os.path.join("frames", f"alpha_{i:04d}.png")
        write_image(os.path.join(root, rel_img), images[i])
        write_alpha_map(os.path.join(root, rel_alpha), alphas[i])
        frames.append({"image": rel_img, "alpha": rel_alpha})
    manifest = {
        "kind": MANIFEST_KIND,
        "version": MANIFEST_VERSION,
        "mesh": "proxy.obj",
        "vertex_blob": "vertices.f32",
        "num_frames": t,
        "num_vertices": int(vertices_frames.shape[1]),
        "conditions": np.asarray(conditions, dtype=np.float64).tolist(),
        "frames": frames,
        "camera": camera_to_dict(camera),
    }
    path = os.path.join(root, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def load_manifest(path):
    """Parse, validate and fully load a dataset manifest."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}",
                            code="unreadable")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}",
                            code="parse")
    if doc.get("kind") != MANIFEST_KIND:
        raise ManifestError(f"{path} is not a dataset manifest",
                            code="kind")
    root = os.path.dirname(os.path.abspath(path))
    for key in ("mesh", "vertex_blob", "num_frames", "num_vertices",
                "conditions", "frames", "camera"):
        if key not in doc:
            raise ManifestError(f"manifest missing key '{key}'",
                                code="missing_key")
    t = int(doc["num_frames"])
    nv = int(doc["num_vertices"])
    for name in ("conditions", "frames"):
        if len(doc[name]) != t:
            raise ManifestError(
                f"manifest list '{name}' has {len(doc[name])} entries, "
                f"expected {t}",
                code="length_mismatch",
            )
    vertices0, faces = load_mesh(os.path.join(root, doc["mesh"]))
    if vertices0.shape[0] != nv:
        raise ManifestError(
            f"mesh has {vertices0.shape[0]} vertices, manifest says {nv}",
            code="length_mismatch",
        )
    blob_path = os.path.join(root, doc["vertex_blob"])
    try:
        blob = np.fromfile(blob_path, dtype="<f4")
    except OSError as exc:
        raise ManifestError(f"cannot read vertex blob: {exc}",
                            code="missing_file")
    if blob.size != t * nv * 3:
        raise ManifestError(
            f"vertex blob holds {blob.size} floats, expected {t * nv * 3}",
            code="length_mismatch",
        )
    vertex_frames = blob.astype(np.float64).reshape(t, nv, 3)
    conditions = np.asarray(doc["conditions"], dtype=np.float64)
    if conditions.ndim != 2:
        raise ManifestError("conditions must be a uniform 2-D list",
                            code="bad_conditions")
    camera = camera_from_dict(doc["camera"])
    frames = []
    for i, rec in enumerate(doc["frames"]):
        img_path = os.path.join(root, rec["image"])
        alpha_path = os.path.join(root, rec["alpha"])
        for p in (img_path, alpha_path):
            if not os.path.exists(p):
                raise ManifestError(f"frame {i} references missing file {p}",
                                    code="missing_file")
        image = read_image(img_path)
        alpha = read_image(alpha_path)
        if image.shape != (camera.height, camera.width, 3):
            raise ManifestError(
                f"frame {i} image shape {image.shape} does not match camera "
                f"{camera.height}x{camera.width}",
                code="shape_mismatch",
            )
        if alpha.shape != (camera.height, camera.width):
            raise ManifestError(
                f"frame {i} alpha shape {alpha.shape} does not match camera",
                code="shape_mismatch",
            )
        frames.append(FrameRecord(
            vertices=vertex_frames[i], condition=conditions[i],
            image=image, alpha=alpha,
        ))
    return Dataset(vertices0=vertices0, faces=faces, frames=frames,
                   camera=camera)


def read_condition_stream(path):
    """Condition vectors (T, D) from a JSON file {"conditions": [[...]]}."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ManifestError(f"cannot read condition stream: {exc}",
                            code="unreadable")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"condition stream is not valid JSON: {exc}",
                            code="parse")
    try:
        arr = np.asarray(doc["conditions"], dtype=np.float64)
    except (KeyError, TypeError, ValueError):
        raise ManifestError(
            "condition stream needs a rectangular 'conditions' list",
            code="bad_conditions",
        )
    if arr.ndim != 2:
        raise ManifestError("conditions must be a 2-D list",
                            code="bad_conditions")
    return arr


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    cloud: BoundCloud
    mlp: MlpParams
    adam: dict  # group name -> {"m": array, "v": array, "t": int}
    config: dict
    iteration: int
    rng_state: dict


CLOUD_ARRAYS = ("faces", "face_index", "slot", "n_raw", "n_train", "mu_loc",
                "q_loc", "s_loc", "o_raw", "sh", "canonical", "origin")


def _le(arr):
    a = np.ascontiguousarray(arr)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, cloud, mlp, adam, config, iteration, rng_state):
    """Versioned binary dump; atomic write, sha256 trailer, bit-exact."""
    arrays = {}
    for name in CLOUD_ARRAYS:
        arrays[f"cloud/{name}"] = getattr(cloud, name)
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        arrays[f"mlp/w{i}"] = w
        arrays[f"mlp/b{i}"] = b
    steps = {}
    for name, group in adam.items():
        arrays[f"adam/m/{name}"] = group["m"]
        arrays[f"adam/v/{name}"] = group["v"]
        steps[name] = int(group["t"])
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = _le(arrays[name])
        raw = a.tobytes()
        index.append({"name": name, "dtype": a.dtype.str,
                      "shape": list(a.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "cloud": {"sh_degree": int(cloud.sh_degree), "mode": cloud.mode},
        "mlp": {"num_freqs": int(mlp.num_freqs),
                "layers": len(mlp.weights)},
        "adam_steps": steps,
        "config": config,
        "iteration": int(iteration),
        "rng": rng_state,
        "arrays": index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = (CHECKPOINT_MAGIC
            + np.array(CHECKPOINT_VERSION, dtype="<u4").tobytes()
            + np.array(len(header_bytes), dtype="<u8").tobytes()
            + header_bytes + b"".join(chunks))
    digest = hashlib.sha256(body).digest()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + digest)
    os.replace(tmp, path)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}",
                              code="unreadable")
    fixed = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(data) < fixed + 32:
        raise CheckpointError(f"checkpoint {path} is truncated",
                              code="truncated")
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)",
                              code="magic")
    version = int(np.frombuffer(data, dtype="<u4", count=1,
                                offset=len(CHECKPOINT_MAGIC))[0])
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version} is newer than supported "
            f"{CHECKPOINT_VERSION}",
            code="version",
        )
    header_len = int(np.frombuffer(data, dtype="<u8", count=1,
                                   offset=len(CHECKPOINT_MAGIC) + 4)[0])
    data_start = fixed + header_len
    if len(data) < data_start + 32:
        raise CheckpointError(f"checkpoint {path} is truncated",
                              code="truncated")
    body, digest = data[:-32], data[-32:]
    try:
        header = json.loads(data[fixed:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"checkpoint {path} header is corrupt",
                              code="header")
    end = data_start
    for spec in header["arrays"]:
        end = max(end, data_start + spec["offset"] + spec["nbytes"])
    if end > len(data) - 32:
        raise CheckpointError(f"checkpoint {path} is truncated",
                              code="truncated")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} failed its checksum",
                              code="checksum")
    arrays = {}
    for spec in header["arrays"]:
        arr = np.frombuffer(
            data, dtype=np.dtype(spec["dtype"]),
            count=int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"]
            else 1,
            offset=data_start + spec["offset"],
        ).reshape(spec["shape"]).copy()
        arrays[spec["name"]] = arr
    cloud_kwargs = {name: arrays[f"cloud/{name}"] for name in CLOUD_ARRAYS}
    cloud = BoundCloud(sh_degree=header["cloud"]["sh_degree"],
                       mode=header["cloud"]["mode"], **cloud_kwargs)
    layers = header["mlp"]["layers"]
    mlp = MlpParams(
        weights=[arrays[f"mlp/w{i}"] for i in range(layers)],
        biases=[arrays[f"mlp/b{i}"] for i in range(layers)],
        num_freqs=header["mlp"]["num_freqs"],
    )
    adam = {}
    for name, t in header["adam_steps"].items():
        adam[name] = {"m": arrays[f"adam/m/{name}"],
                      "v": arrays[f"adam/v/{name}"], "t": int(t)}
    return Checkpoint(cloud=cloud, mlp=mlp, adam=adam,
                      config=header["config"],
                      iteration=int(header["iteration"]),
                      rng_state=header["rng"])


# ---------------------------------------------------------------------------
# training log


def write_log(path, rows):
    """Training log rows (dicts keyed by LOG_FIELDS) -> CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_log(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            row = dict(rec)
            row["iteration"] = int(rec["iteration"])
            row["gaussians"] = int(rec["gaussians"])
            for key in LOG_FIELDS[1:-2]:
                row[key] = float(rec[key])
            rows.append(row)
        return rows
