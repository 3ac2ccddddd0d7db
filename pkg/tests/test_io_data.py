import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from psvit import checkpoint as ckpt
from psvit import io
from psvit.arch import preset
from psvit.data import (
    DatasetError,
    SyntheticSpec,
    generate,
    is_val_index,
    load_dataset,
    load_image_folder,
    save_dataset,
)
from psvit.layers import ViT
from psvit.nas import TrainConfig, Trainer

from helpers import reduced_supernet

# ---------------------------------------------------------------------------
# framed container
# ---------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    hnp.arrays(np.int64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=5)),
    st.dictionaries(st.text(max_size=5), st.integers(-5, 5), max_size=3),
)
def test_container_roundtrip(a, b, blob):
    buf = io.encode(b"TEST", 3, [blob], {"a": a, "b": b})
    blobs, tensors = io.decode(buf, b"TEST", 3)
    assert blobs == [blob]
    assert tensors["a"].tobytes() == np.ascontiguousarray(a).tobytes() and tensors["a"].shape == a.shape
    assert np.array_equal(tensors["b"], b)
    assert io.encode(b"TEST", 3, blobs, tensors) == buf


def test_container_layout_is_little_endian():
    buf = io.encode(b"ABCD", 1, [], {"x": np.array([1.5])})
    assert buf[:4] == b"ABCD"
    assert struct.unpack_from("<III", buf, 4) == (1, 0, 1)
    assert buf[-8:] == struct.pack("<d", 1.5)


@pytest.mark.parametrize(
    "mutate,code",
    [
        (lambda b: b"XXXX" + b[4:], "BAD_MAGIC"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "VERSION_MISMATCH"),
        (lambda b: b[:-3], "TRUNCATED"),
        (lambda b: b + b"\0", "TRAILING_BYTES"),
    ],
)
def test_container_errors(mutate, code):
    buf = io.encode(b"TEST", 1, [{"k": 1}], {"x": np.arange(4.0)})
    with pytest.raises(io.FormatError) as info:
        io.decode(mutate(buf), b"TEST", 1)
    assert info.value.code == code


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def test_dataset_balanced_and_deterministic():
    ds = generate(SyntheticSpec(seed=7, num_samples=200))
    assert np.bincount(ds.labels).tolist() == [20] * 10
    again = generate(SyntheticSpec(seed=7, num_samples=200))
    assert ds.images.tobytes() == again.images.tobytes()
    assert np.array_equal(ds.val_mask, again.val_mask)
    other = generate(SyntheticSpec(seed=8, num_samples=200))
    assert not np.array_equal(ds.images, other.images)


def test_split_is_index_hash():
    ds = generate(SyntheticSpec(seed=3, num_samples=100))
    assert [bool(m) for m in ds.val_mask] == [is_val_index(3, i, 20) for i in range(100)]
    assert 5 < ds.val_mask.sum() < 40


def test_spec_validation():
    with pytest.raises(DatasetError):
        SyntheticSpec(num_samples=15, num_classes=10)
    with pytest.raises(DatasetError):
        SyntheticSpec(val_percent=100)


def test_dataset_files_byte_identical(tmp_path):
    spec = SyntheticSpec(seed=7, num_samples=200)
    save_dataset(tmp_path / "a", generate(spec))
    save_dataset(tmp_path / "b", generate(spec))
    for name in ("manifest.json", "data.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert ds.images.tobytes() == generate(spec).images.tobytes()


def test_dataset_load_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing")


def test_linear_baseline_gap():
    """Raw-pixel linear model lands well above chance but below the toy ViT's 90%."""
    sklearn = pytest.importorskip("sklearn.linear_model")
    ds = generate(SyntheticSpec(seed=7))
    (xt, yt), (xv, yv) = ds.train, ds.val
    clf = sklearn.LogisticRegression(max_iter=2000, C=0.1).fit(xt.reshape(len(xt), -1), yt)
    val = clf.score(xv.reshape(len(xv), -1), yv)
    assert 0.6 <= val < 0.9


def test_image_folder(tmp_path):
    Image = pytest.importorskip("PIL.Image")
    rng = np.random.default_rng(0)
    for cls in ("cat", "dog"):
        (tmp_path / cls).mkdir()
        for i in range(3):
            Image.fromarray(rng.integers(0, 256, size=(10, 12, 3), dtype=np.uint8)).save(tmp_path / cls / f"{i}.png")
    ds = load_image_folder(tmp_path, 8)
    assert ds.images.shape == (6, 8, 8, 3)
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.images.min() >= -1 and ds.images.max() <= 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy_data():
    return generate(SyntheticSpec(seed=7, num_samples=100))


def _vit_trainer(seed=0, iterations=20):
    model = ViT(preset("toy"), np.random.default_rng(seed))
    return Trainer(model, TrainConfig(iterations=iterations, batch_size=8, warmup=2), np.random.default_rng(seed + 1))


def test_checkpoint_roundtrip_byte_identical(tmp_path, toy_data):
    xt, yt = toy_data.train
    tr = _vit_trainer()
    tr.run(xt, yt, until=3)
    first = ckpt.save(tmp_path / "a.psvl", tr, {"note": "x"})
    back, meta = ckpt.load_trainer(tmp_path / "a.psvl")
    assert meta["iteration"] == 3
    second = ckpt.save(tmp_path / "b.psvl", back, meta["run_config"])
    assert first == second
    assert first[:4] == b"PSVL"


def test_supernet_checkpoint_roundtrip(tmp_path, toy_data):
    xt, yt = toy_data.train
    sn = reduced_supernet()
    tr = Trainer(sn, TrainConfig(iterations=10, batch_size=8), np.random.default_rng(0))
    tr.run(xt, yt, until=2)
    data = ckpt.save(tmp_path / "s.psvl", tr)
    back, meta = ckpt.load_trainer(tmp_path / "s.psvl")
    assert meta["kind"] == "supernet"
    assert ckpt.encode_trainer(back) == data


def test_resume_reproduces_trajectory(tmp_path, toy_data):
    xt, yt = toy_data.train
    full = _vit_trainer()
    losses = [r["loss"] for r in full.run(xt, yt)]
    part = _vit_trainer()
    part.run(xt, yt, until=8)
    ckpt.save(tmp_path / "mid.psvl", part)
    resumed, _ = ckpt.load_trainer(tmp_path / "mid.psvl")
    tail = [r["loss"] for r in resumed.run(xt, yt)]
    assert losses[8:] == tail
    # restoring into an existing trainer works the same way
    other = _vit_trainer(seed=5)
    ckpt.load_into(other, tmp_path / "mid.psvl")
    assert [r["loss"] for r in other.run(xt, yt)] == tail


def test_checkpoint_rejects_mismatches(tmp_path, toy_data):
    tr = _vit_trainer()
    path = tmp_path / "c.psvl"
    data = ckpt.save(path, tr)
    bad = bytearray(data)
    bad[4:8] = struct.pack("<I", 2)
    (tmp_path / "v.psvl").write_bytes(bytes(bad))
    with pytest.raises(ckpt.CheckpointError) as info:
        ckpt.load_model(tmp_path / "v.psvl")
    assert info.value.code == "VERSION_MISMATCH"

    genotype, meta, params, optim = ckpt.read(path)
    params["head.fc.weight"] = np.zeros((3, 3))
    tensors = {f"param/{k}": v for k, v in params.items()}
    (tmp_path / "s.psvl").write_bytes(io.encode(ckpt.MAGIC, ckpt.VERSION, [genotype.to_dict(), meta], tensors))
    with pytest.raises(ckpt.CheckpointError) as info:
        ckpt.load_model(tmp_path / "s.psvl")
    assert info.value.code == "SHAPE_MISMATCH"

    other = Trainer(ViT(preset("toy-sharing2"), np.random.default_rng(0)), TrainConfig(), np.random.default_rng(0))
    with pytest.raises(ckpt.CheckpointError) as info:
        ckpt.load_into(other, path)
    assert info.value.code == "GENOTYPE_MISMATCH"
