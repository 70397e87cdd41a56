import numpy as np
import pytest

from ownverify.data import (LabeledDataset, builtin_synthetic_dataset, decode_pgm, encode_pgm,
                            load_dataset, split_dataset, write_dataset)
from ownverify.errors import FormatError


def test_synthetic_dataset_shape_and_determinism():
    a = builtin_synthetic_dataset(k=4, per_class=3, side=8, seed=2)
    b = builtin_synthetic_dataset(k=4, per_class=3, side=8, seed=2)
    assert len(a) == 12 and a.images[0].shape == (1, 8, 8)
    assert a.labels[:4] == [0, 1, 2, 3]
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    xs, _ = a.arrays()
    assert xs.min() >= 0 and xs.max() <= 1


def test_empty_synthetic_dataset_is_refused():
    with pytest.raises(ValueError):
        builtin_synthetic_dataset(per_class=0)


def test_split_is_disjoint_and_complete():
    data = builtin_synthetic_dataset(k=3, per_class=10, side=8)
    tr, te = split_dataset(data, 0.2, seed=1)
    assert len(tr) == 24 and len(te) == 6


def test_label_out_of_range():
    with pytest.raises(ValueError):
        LabeledDataset([np.zeros((1, 2, 2))], [3], 3)


def test_pgm_endpoints_and_quantization():
    img = np.linspace(0, 1, 64).reshape(1, 8, 8)
    back = decode_pgm(encode_pgm(img))
    assert back[0, 0, 0] == 0.0 and back[0, -1, -1] == 1.0
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_pgm_rejects_garbage():
    with pytest.raises(FormatError):
        decode_pgm(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(FormatError):
        decode_pgm(b"P5\n4 4\n255\n" + bytes(3))


def test_pgm_header_comments():
    buf = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
    np.testing.assert_array_equal(decode_pgm(buf), [[[0.0, 1.0]]])


@pytest.mark.parametrize("fmt", ["pgm", "tnsr"])
def test_manifest_round_trip(tmp_path, fmt):
    data = builtin_synthetic_dataset(k=3, per_class=2, side=8, seed=4)
    manifest = write_dataset(data, tmp_path, fmt)
    back = load_dataset(manifest)
    assert back.labels == data.labels and back.num_classes == 3
    tol = 0 if fmt == "tnsr" else 1 / 255
    for x, y in zip(data.images, back.images):
        assert np.abs(x - y).max() <= tol


def test_manifest_bad_line(tmp_path):
    (tmp_path / "m.txt").write_text("just-a-path\n")
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "m.txt")
