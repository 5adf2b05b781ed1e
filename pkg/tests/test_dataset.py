import numpy as np
import pytest
from scipy.ndimage import label

from pixedge.dataset import (
    Ellipse,
    Polygon,
    image_ids,
    load_gt,
    outline,
    shift,
    substream,
    synth_image,
    write_synthetic,
)
from pixedge.errors import ContractError

EIGHT = np.ones((3, 3), int)
FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_byte_identical_per_seed(tmp_path):
    write_synthetic(tmp_path / "a", 3, 2, size=32, seed=4)
    write_synthetic(tmp_path / "b", 3, 2, size=32, seed=4)
    write_synthetic(tmp_path / "c", 3, 2, size=32, seed=5)
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_layout_round_trip(tmp_path):
    written = write_synthetic(tmp_path, 2, 1, size=32, seed=0, n_val=1)
    assert written == {"train": ["0000", "0001"], "val": ["0000"], "test": ["0000"]}
    assert image_ids(tmp_path, "train") == ["0000", "0001"]
    _, maps, _ = synth_image(substream(0, 1, 0, 1), 32)
    back = load_gt(tmp_path / "train" / "gt", "0001")
    assert len(back) == len(maps)
    for a, b in zip(back, maps):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("n_annotators", [1, 2, 3])
def test_single_circle_gives_closed_contours(n_annotators):
    circle = Ellipse(32.3, 31.7, 14.2, 14.2)
    _, maps, _ = synth_image(np.random.default_rng(0), 64, [circle], n_annotators)
    assert len(maps) == n_annotators
    for m in maps:
        assert label(m, EIGHT)[1] == 1
        # closed: the background splits into inside and outside
        assert label(~m, FOUR)[1] == 2


def test_outline_is_one_pixel_wide():
    m = outline([Ellipse(32.0, 32.0, 20.0, 11.0, 0.4)], 64)
    # no 2x2 block is fully on
    blocks = m[:-1, :-1] & m[1:, :-1] & m[:-1, 1:] & m[1:, 1:]
    assert not blocks.any()


@pytest.mark.parametrize("shape", [
    Ellipse(32.0, 32.0, 18.0, 18.0),
    Ellipse(30.0, 34.0, 20.0, 9.0, 0.7),
    Polygon(((10.0, 12.0), (14.0, 50.0), (52.0, 40.0), (44.0, 8.0))),
])
def test_outline_length_close_to_perimeter(shape):
    n = outline([shape], 64).sum()
    # a digital 8-connected curve has between L/sqrt(2) and L pixels
    assert shape.perimeter() / np.sqrt(2) * 0.9 <= n <= shape.perimeter() * 1.1


def test_jittered_annotators_are_one_pixel_shifts():
    _, maps, _ = synth_image(np.random.default_rng(3), 48, None, 3)
    for m in maps[1:]:
        assert any(np.array_equal(m, shift(maps[0], dy, dx))
                   for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0))


def test_image_values_in_range():
    img, _, shapes = synth_image(np.random.default_rng(1), 32)
    assert img.shape == (32, 32, 3)
    assert 0.0 <= img.min() and img.max() <= 1.0
    assert 1 <= len(shapes) <= 4


def test_polygon_contains_square():
    sq = Polygon(((0.0, 0.0), (0.0, 4.0), (4.0, 4.0), (4.0, 0.0)))
    y, x = np.array([2.0, 5.0, 1.0]), np.array([2.0, 2.0, 3.9])
    np.testing.assert_array_equal(sq.contains(y, x), [True, False, True])
    assert sq.perimeter() == 16.0


def test_shift_fills_with_false():
    m = np.ones((3, 3), bool)
    s = shift(m, 1, -1)
    np.testing.assert_array_equal(s, [[0, 0, 0], [1, 1, 0], [1, 1, 0]])


def test_bad_counts_rejected(tmp_path):
    with pytest.raises(ContractError):
        write_synthetic(tmp_path, 0, 1)
    with pytest.raises(ContractError):
        synth_image(np.random.default_rng(0), 8)


def test_substreams_are_independent():
    a = substream(0, 1, 0).random(4)
    b = substream(0, 2, 0).random(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, substream(0, 1, 0).random(4))
