import pytest

from hcpose.types import (DatasetManifest, ImageRecord, InputError, PartRealization,
                          check_disjoint_split, to_centered_coords, to_pixel_coords)


@pytest.mark.parametrize("col,row,expected", [
    (2, 1, (0.0, 0.5)),
    (0, 0, (-2.0, 1.5)),
    (3, 3, (1.0, -1.5)),
])
def test_centered_coords_examples(col, row, expected):
    assert to_centered_coords(col, row, 4, 4) == expected


def test_pixel_coords_inverse():
    for col in range(5):
        for row in range(3):
            x, y = to_centered_coords(col, row, 5, 3)
            assert to_pixel_coords(x, y, 5, 3) == (col, row)


def test_out_of_bounds_pixel():
    with pytest.raises(InputError):
        to_centered_coords(4, 0, 4, 4)


def _record(image_id="a-p0", object_id="a", category=1, pose=0.0, parts=()):
    return ImageRecord(image_id=image_id, object_id=object_id, category=category, pose=pose,
                       parts=tuple(parts), image_width=32, image_height=32)


def test_record_validation():
    with pytest.raises(InputError):
        _record(category=0)
    with pytest.raises(InputError):
        _record(pose=360.0)
    with pytest.raises(InputError):
        PartRealization("x", layer=0, part_id=0, x=0.0, y=0.0)
    with pytest.raises(InputError):
        _record(parts=[PartRealization("other", 1, 0, 0.0, 0.0)])


def test_record_layers():
    parts = [PartRealization("a-p0", 1, 0, 1.0, 2.0), PartRealization("a-p0", 3, 0, 0.5, 0.5)]
    r = _record(parts=parts)
    assert r.n_layers == 3
    assert r.layer_parts(2) == []
    assert r.positions(1).tolist() == [[1.0, 2.0]]
    assert r.positions(2).shape == (0, 2)


def test_manifest_layer_bound_and_splits():
    parts = [PartRealization("a-p0", 2, 0, 1.0, 1.0)]
    with pytest.raises(InputError):
        DatasetManifest(n_layers=1, records=(_record(parts=parts),))
    with pytest.raises(InputError):
        DatasetManifest(n_layers=2, records=(), splits={"s": {"train": ("a",), "test": ("a",)}})
    m = DatasetManifest(n_layers=2, records=(
        _record(), _record("b-p0", "b", 2), _record("a-p5", "a", 1, 5.0)))
    assert m.object_ids == ["a", "b"]
    assert m.objects_by_category() == {1: ["a"], 2: ["b"]}
    assert [r.image_id for r in m.subset(["a"])] == ["a-p0", "a-p5"]


def test_disjoint_split():
    check_disjoint_split(["a"], ["b"])
    with pytest.raises(InputError):
        check_disjoint_split(["a", "b"], ["b"])
