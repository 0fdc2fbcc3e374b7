import numpy as np
import pytest

from fine.bench import surrogate_distance
from fine.data import (
    DATASETS,
    batch_stream,
    index_stream,
    load_image_dir,
    make_dataset,
    read_imgr,
    write_imgr,
)
from fine.errors import ConfigurationError, ContractError, FormatError


@pytest.mark.parametrize("name", DATASETS)
def test_dataset_contract(name):
    a = make_dataset(name, 300, 8, seed=3)
    b = make_dataset(name, 300, 8, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (300, 1, 8, 8)
    assert a.images.min() >= -1.0 and a.images.max() <= 1.0
    assert set(np.unique(a.labels)) <= {0, 1}
    assert abs(a.labels.sum() - 150) <= 0.05 * 150


def test_seed_changes_content():
    a = make_dataset("shapes-A", 256, 8, seed=0)
    b = make_dataset("shapes-A", 256, 8, seed=1)
    assert not np.array_equal(a.images, b.images)


def test_side_16_and_rejections():
    assert make_dataset("shapes-B", 256, 16).images.shape == (256, 1, 16, 16)
    with pytest.raises(ConfigurationError):
        make_dataset("shapes-A", 256, 12)
    with pytest.raises(ConfigurationError):
        make_dataset("shapes-A", 100, 8)
    with pytest.raises(ConfigurationError):
        make_dataset("mnist", 256, 8)


def test_gauss_mix_mostly_dark():
    m = make_dataset("gauss-mix", 512, 8).images.mean()
    assert -1.0 < m < 0.0


def test_shapes_are_antialiased():
    img = make_dataset("shapes-A", 256, 8).images
    edge = (img > -0.99) & (img < img.max(axis=(2, 3), keepdims=True) - 0.01)
    assert edge.any()


def test_first_epoch_covers_every_index():
    it = index_stream(300, 20, seed=5)
    seen = np.concatenate([next(it) for _ in range(15)])
    assert sorted(seen.tolist()) == list(range(300))


def test_streams_replay_and_differ_by_seed(shapes_a):
    a, b = batch_stream(shapes_a, 16, 7), batch_stream(shapes_a, 16, 7)
    for _ in range(40):
        (xa, ya), (xb, yb) = next(a), next(b)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    p0 = np.concatenate([next(index_stream(256, 256, s)) for s in (0,)])
    p1 = next(index_stream(256, 256, 1))
    assert not np.array_equal(p0, p1)


def test_stream_spans_epoch_boundaries():
    it = index_stream(10, 4, 0)
    batches = [next(it) for _ in range(5)]
    assert all(len(b) == 4 for b in batches)
    flat = np.concatenate(batches)
    assert sorted(flat[:10].tolist()) == list(range(10))


def test_stream_rejects_oversized_batch():
    with pytest.raises(ContractError):
        next(index_stream(10, 11, 0))


def test_task_gap():
    a = make_dataset("shapes-A", 2048, 8, seed=0)
    b = make_dataset("shapes-B", 2048, 8, seed=0)
    head, tail = a.split(1024)
    within = surrogate_distance(head.images, tail.images)
    across = surrogate_distance(a.images[:1024], b.images[:1024])
    assert across > 10 * within


def test_imgr_round_trip(tmp_path, rs):
    imgs = np.clip(rs.normal(size=(5, 1, 8, 8)), -1, 1)
    write_imgr(tmp_path / "a.imgr", imgs)
    back = read_imgr(tmp_path / "a.imgr")
    assert back.shape == imgs.shape and np.max(np.abs(back - imgs)) <= 1 / 127.5 + 1e-12
    raw = (tmp_path / "a.imgr").read_bytes()
    assert raw[:4] == b"IMGR" and len(raw) == 16 + 5 * 64
    (tmp_path / "bad.imgr").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        read_imgr(tmp_path / "bad.imgr")
    (tmp_path / "short.imgr").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_imgr(tmp_path / "short.imgr")


def test_load_image_dir(tmp_path, rs):
    write_imgr(tmp_path / "0_dark.imgr", np.full((3, 1, 8, 8), -1.0))
    write_imgr(tmp_path / "1_light.imgr", np.full((2, 1, 8, 8), 1.0))
    ds = load_image_dir(tmp_path)
    assert ds.n_samples == 5 and ds.num_classes == 2
    assert np.all(ds.images[ds.labels == 1] == 1.0)
    with pytest.raises(FormatError):
        load_image_dir(tmp_path / "empty")
