import json
import os

import numpy as np
import pytest

import rigsplat.binding as bd
import rigsplat.deformer as df
import rigsplat.sceneio as sio
from rigsplat.camera import look_at
from rigsplat.errors import (CheckpointError, ImageIOError, ManifestError,
                             MeshError)

from test_binding import tetra


# ---------------------------------------------------------------------------
# OBJ


def test_load_quad_as_two_triangles(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text(
        "# a unit quad\n"
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
        "f 1 2 3\nf 1 3 4\n"
    )
    vertices, faces = sio.load_mesh(str(p))
    assert vertices.shape == (4, 3)
    assert faces.shape == (2, 3)
    assert np.array_equal(faces, [[0, 1, 2], [0, 2, 3]])


def test_load_mesh_ignores_other_records(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text(
        "mtllib scene.mtl\nvt 0.5 0.5\nvn 0 0 1\n"
        "v 0 0 0\nv 1 0 0\nv 0 1 0\n"
        "s off\nf 1/1/1 2/1/1 3/1/1\n"
    )
    vertices, faces = sio.load_mesh(str(p))
    assert vertices.shape == (3, 3)
    assert np.array_equal(faces, [[0, 1, 2]])


def test_load_mesh_negative_indices(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
    _, faces = sio.load_mesh(str(p))
    assert np.array_equal(faces, [[0, 1, 2]])


def test_load_mesh_rejects_quad_face(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(MeshError) as err:
        sio.load_mesh(str(p))
    assert "non-triangular face at line 5" in str(err.value)
    assert err.value.code == "non_triangular"


def test_load_mesh_rejects_out_of_range_index(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(MeshError) as err:
        sio.load_mesh(str(p))
    assert "line 4" in str(err.value)
    assert err.value.code == "bad_index"


def test_load_mesh_rejects_bad_vertex(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 zero 0\n")
    with pytest.raises(MeshError) as err:
        sio.load_mesh(str(p))
    assert err.value.code == "bad_vertex"


def test_load_mesh_unreadable():
    with pytest.raises(MeshError) as err:
        sio.load_mesh("/nonexistent/mesh.obj")
    assert err.value.code == "unreadable"


def test_mesh_round_trip(tmp_path, rng):
    vertices, faces = tetra()
    vertices = vertices + rng.normal(scale=0.3, size=vertices.shape)
    p = str(tmp_path / "m.obj")
    sio.save_mesh(p, vertices, faces)
    v2, f2 = sio.load_mesh(p)
    assert np.allclose(v2, vertices, atol=1e-6)
    assert np.array_equal(f2, faces)


# ---------------------------------------------------------------------------
# images


def test_color_image_round_trip_quantization(tmp_path, rng):
    img = rng.uniform(0, 1, size=(9, 7, 3))
    p = str(tmp_path / "c.png")
    sio.write_image(p, img)
    back = sio.read_image(p)
    assert back.shape == (9, 7, 3)
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_alpha_map_round_trip_exact(tmp_path, rng):
    grid = rng.integers(0, 65536, size=(11, 5)).astype(np.float64) / 65535.0
    p = str(tmp_path / "a.png")
    sio.write_alpha_map(p, grid)
    back = sio.read_image(p)
    assert back.shape == (11, 5)
    assert np.array_equal(back, grid)


def test_image_shape_validation(tmp_path):
    with pytest.raises(ImageIOError):
        sio.write_image(str(tmp_path / "x.png"), np.zeros((4, 4)))
    with pytest.raises(ImageIOError):
        sio.write_alpha_map(str(tmp_path / "y.png"), np.zeros((4, 4, 3)))


def test_read_image_unreadable(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(ImageIOError) as err:
        sio.read_image(str(bad))
    assert err.value.code == "unreadable"
    with pytest.raises(ImageIOError):
        sio.read_image(str(tmp_path / "missing.png"))


# ---------------------------------------------------------------------------
# manifest


def small_dataset(tmp_path, rng, frames=3):
    vertices, faces = tetra()
    seq = np.stack([
        vertices + 0.05 * i * rng.normal(size=vertices.shape)
        for i in range(frames)
    ])
    conditions = rng.normal(size=(frames, 5))
    cam = look_at(np.array([0.0, 0.0, -4.0]), np.zeros(3),
                  np.array([0.0, 1.0, 0.0]), fov_x=0.9, fov_y=0.9,
                  width=18, height=12)
    images = rng.uniform(0, 1, size=(frames, 12, 18, 3))
    alphas = rng.uniform(0, 1, size=(frames, 12, 18))
    path = sio.save_dataset(str(tmp_path / "data"), seq, faces, conditions,
                            images, alphas, cam)
    return path, seq, conditions, images, alphas, cam


def test_dataset_round_trip(tmp_path, rng):
    path, seq, conditions, images, alphas, cam = small_dataset(tmp_path, rng)
    ds = sio.load_manifest(path)
    assert len(ds) == 3
    assert ds.cond_dim == 5
    assert np.array_equal(ds.faces, tetra()[1])
    # vertex positions survive the float32 blob to single precision
    for i, frame in enumerate(ds.frames):
        assert np.allclose(frame.vertices, seq[i], atol=1e-6)
        assert np.array_equal(frame.condition, conditions[i])
        assert np.max(np.abs(frame.image - images[i])) <= 0.5 / 255 + 1e-12
        assert np.max(np.abs(frame.alpha - alphas[i])) <= 0.5 / 65535 + 1e-12
    assert ds.camera.width == 18 and ds.camera.height == 12
    assert np.array_equal(ds.camera.world_to_camera, cam.world_to_camera)


def test_manifest_rejects_length_mismatch(tmp_path, rng):
    path, *_ = small_dataset(tmp_path, rng)
    doc = json.loads(open(path).read())
    doc["conditions"] = doc["conditions"][:-1]
    open(path, "w").write(json.dumps(doc))
    with pytest.raises(ManifestError) as err:
        sio.load_manifest(path)
    assert "conditions" in str(err.value)
    assert err.value.code == "length_mismatch"


def test_manifest_rejects_missing_frame_file(tmp_path, rng):
    path, *_ = small_dataset(tmp_path, rng)
    os.remove(os.path.join(os.path.dirname(path), "frames",
                           "frame_0001.png"))
    with pytest.raises(ManifestError) as err:
        sio.load_manifest(path)
    assert err.value.code == "missing_file"


def test_manifest_rejects_wrong_kind(tmp_path):
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"kind": "something-else"}))
    with pytest.raises(ManifestError) as err:
        sio.load_manifest(str(p))
    assert err.value.code == "kind"


def test_manifest_rejects_short_vertex_blob(tmp_path, rng):
    path, *_ = small_dataset(tmp_path, rng)
    blob = os.path.join(os.path.dirname(path), "vertices.f32")
    raw = open(blob, "rb").read()
    open(blob, "wb").write(raw[:-8])
    with pytest.raises(ManifestError) as err:
        sio.load_manifest(path)
    assert err.value.code == "length_mismatch"


def test_condition_stream(tmp_path, rng):
    arr = rng.normal(size=(4, 7))
    p = tmp_path / "conds.json"
    p.write_text(json.dumps({"conditions": arr.tolist()}))
    back = sio.read_condition_stream(str(p))
    assert np.array_equal(back, arr)
    p.write_text("{broken")
    with pytest.raises(ManifestError):
        sio.read_condition_stream(str(p))
    p.write_text(json.dumps({"conditions": [[1, 2], [3]]}))
    with pytest.raises(ManifestError) as err:
        sio.read_condition_stream(str(p))
    assert err.value.code == "bad_conditions"


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_fixture(rng):
    vertices, faces = tetra()
    cloud = bd.init_plrf(vertices, faces, sh_degree=1)
    cloud.mu_loc = rng.normal(size=cloud.mu_loc.shape)
    cloud.sh = rng.normal(size=cloud.sh.shape)
    cloud.n_train[3:5] = False
    mlp = df.init_deformer(rng, cond_dim=5, num_freqs=2, hidden=8, depth=2)
    adam = {
        "mu_loc": {"m": rng.normal(size=cloud.mu_loc.shape),
                   "v": rng.uniform(size=cloud.mu_loc.shape), "t": 17},
        "w0": {"m": rng.normal(size=mlp.weights[0].shape),
               "v": rng.uniform(size=mlp.weights[0].shape), "t": 17},
    }
    config = {"total_iterations": 100, "seed": 3,
              "weights": {"ssim": 0.4, "alpha": 0.5}}
    rng_state = np.random.default_rng(123).bit_generator.state
    return cloud, mlp, adam, config, rng_state


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    cloud, mlp, adam, config, rng_state = checkpoint_fixture(rng)
    p = str(tmp_path / "ck.bin")
    sio.save_checkpoint(p, cloud, mlp, adam, config, 42, rng_state)
    ck = sio.load_checkpoint(p)
    assert ck.iteration == 42
    assert ck.config == config
    assert ck.rng_state == rng_state
    assert ck.cloud.sh_degree == cloud.sh_degree
    assert ck.cloud.mode == cloud.mode
    for name in sio.CLOUD_ARRAYS:
        a, b = getattr(cloud, name), getattr(ck.cloud, name)
        assert a.dtype == b.dtype, name
        assert np.array_equal(a, b), name
    for w1, w2 in zip(mlp.weights, ck.mlp.weights):
        assert np.array_equal(w1, w2)
    for b1, b2 in zip(mlp.biases, ck.mlp.biases):
        assert np.array_equal(b1, b2)
    assert ck.mlp.num_freqs == 2
    for name, group in adam.items():
        assert np.array_equal(ck.adam[name]["m"], group["m"])
        assert np.array_equal(ck.adam[name]["v"], group["v"])
        assert ck.adam[name]["t"] == group["t"]


def test_checkpoint_restores_rng_stream(tmp_path, rng):
    cloud, mlp, adam, config, _ = checkpoint_fixture(rng)
    g = np.random.default_rng(99)
    g.normal(size=10)  # advance
    p = str(tmp_path / "ck.bin")
    sio.save_checkpoint(p, cloud, mlp, adam, config, 0,
                        g.bit_generator.state)
    expected = g.normal(size=6)
    g2 = np.random.default_rng()
    g2.bit_generator.state = sio.load_checkpoint(p).rng_state
    assert np.array_equal(g2.normal(size=6), expected)


def test_checkpoint_error_codes(tmp_path, rng):
    cloud, mlp, adam, config, rng_state = checkpoint_fixture(rng)
    p = str(tmp_path / "ck.bin")
    sio.save_checkpoint(p, cloud, mlp, adam, config, 7, rng_state)
    raw = open(p, "rb").read()

    bad = tmp_path / "bad.bin"

    bad.write_bytes(b"WRONGMAG" + raw[8:])
    with pytest.raises(CheckpointError) as err:
        sio.load_checkpoint(str(bad))
    assert err.value.code == "magic"

    future = bytearray(raw)
    future[8:12] = np.array(99, dtype="<u4").tobytes()
    bad.write_bytes(bytes(future))
    with pytest.raises(CheckpointError) as err:
        sio.load_checkpoint(str(bad))
    assert err.value.code == "version"

    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError) as err:
        sio.load_checkpoint(str(bad))
    assert err.value.code == "truncated"

    flipped = bytearray(raw)
    flipped[-40] ^= 0xFF  # a data byte, not the digest
    bad.write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError) as err:
        sio.load_checkpoint(str(bad))
    assert err.value.code == "checksum"

    with pytest.raises(CheckpointError) as err:
        sio.load_checkpoint(str(tmp_path / "missing.bin"))
    assert err.value.code == "unreadable"


# ---------------------------------------------------------------------------
# csv log


def test_log_round_trip(tmp_path):
    rows = [
        {"iteration": 1, "total": 0.5, "color": 0.3, "l1": 0.2,
         "dssim": 0.1, "st": 0.01, "alpha": 0.05, "invis": 0.0,
         "scale": 0.15, "gaussians": 16, "event": ""},
        {"iteration": 2, "total": 0.4, "color": 0.25, "l1": 0.18,
         "dssim": 0.09, "st": 0.01, "alpha": 0.04, "invis": 0.0,
         "scale": 0.15, "gaussians": 18, "event": "densify"},
    ]
    p = str(tmp_path / "log.csv")
    sio.write_log(p, rows)
    back = sio.read_log(p)
    assert len(back) == 2
    assert back[0]["iteration"] == 1
    assert back[1]["gaussians"] == 18
    assert back[1]["event"] == "densify"
    assert back[0]["total"] == pytest.approx(0.5)
