import json

import numpy as np
import pytest

from clipce.data import (
    Annotation,
    DatasetManifest,
    ManifestEntry,
    clip_box,
    crop_objects,
    ingest_coco,
    load_depth,
    load_image,
    save_depth,
    save_image,
)
from clipce.embeddings import CropPolicy
from clipce.exceptions import InputError, ParseError


def _coco(tmp_path, n_images=1, anns=None, cats=None):
    rng = np.random.default_rng(0)
    images = []
    for i in range(n_images):
        save_image(tmp_path / "img" / f"{i}.png", rng.random((20, 30, 3)))
        images.append({"id": i + 1, "file_name": f"{i}.png", "width": 30, "height": 20})
    anns = anns if anns is not None else [{"id": 5, "image_id": 1, "category_id": 3, "bbox": [2, 3, 10, 8]}]
    cats = cats if cats is not None else [{"id": 3, "name": "car"}, {"id": 1, "name": "person"}]
    path = tmp_path / "ann.json"
    path.write_text(json.dumps({"images": images, "annotations": anns, "categories": cats}))
    return path


def test_ingest_minimal(tmp_path):
    m, report = ingest_coco(_coco(tmp_path), tmp_path / "img")
    assert len(m.entries) == 1 and m.class_names == ["person", "car"]
    (e,) = m.entries
    assert e.annotations == [Annotation(5, 1, (2.0, 3.0, 10.0, 8.0))]
    assert report == {"dropped_boxes": 0, "missing_images": []}


def test_ingest_unknown_category(tmp_path):
    path = _coco(tmp_path, anns=[{"id": 9, "image_id": 1, "category_id": 42, "bbox": [0, 0, 2, 2]}])
    with pytest.raises(InputError, match="42"):
        ingest_coco(path, tmp_path / "img")


def test_ingest_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"images": [}')
    with pytest.raises(ParseError, match=":1:"):
        ingest_coco(p, tmp_path)


def test_ingest_deterministic_bytes(tmp_path):
    path = _coco(tmp_path, n_images=3, anns=[
        {"id": 2, "image_id": 2, "category_id": 1, "bbox": [1, 1, 5, 5]},
        {"id": 1, "image_id": 1, "category_id": 3, "bbox": [25, 15, 10, 10]},  # clipped
        {"id": 3, "image_id": 3, "category_id": 1, "bbox": [40, 40, 5, 5]},  # outside -> dropped
    ])
    a, rep = ingest_coco(path, tmp_path / "img")
    b, _ = ingest_coco(path, tmp_path / "img")
    assert a.dumps() == b.dumps()
    assert rep["dropped_boxes"] == 1
    assert a.entries[0].annotations[0].bbox == (25.0, 15.0, 5.0, 5.0)


def test_ingest_missing_images_threshold(tmp_path):
    path = _coco(tmp_path, n_images=2)
    (tmp_path / "img" / "1.png").unlink()
    with pytest.raises(InputError, match="missing"):
        ingest_coco(path, tmp_path / "img")


def test_clip_box():
    assert clip_box((-2, -2, 5, 5), 10, 10) == (0.0, 0.0, 3.0, 3.0)
    assert clip_box((12, 0, 5, 5), 10, 10) is None


def test_manifest_roundtrip_and_validation(tmp_path):
    m = DatasetManifest([ManifestEntry(1, "a.png", [Annotation(1, 0, (0, 0, 2, 2), 0.3)], None, 4, 4)], ["c"])
    m.save(tmp_path / "m.json")
    back = DatasetManifest.load(tmp_path / "m.json")
    assert back.dumps() == m.dumps() and back.hash() == m.hash()
    assert back.root == tmp_path
    with pytest.raises(InputError):
        DatasetManifest([ManifestEntry(1, "a.png"), ManifestEntry(1, "b.png")], ["c"])
    with pytest.raises(InputError):
        DatasetManifest([ManifestEntry(1, "a.png", [Annotation(1, 3, (0, 0, 2, 2))])], ["c"])


@pytest.mark.parametrize("suffix, atol", [(".depth", 1e-4), (".png", 1e-3)])
def test_depth_io(tmp_path, suffix, atol):
    d = np.random.default_rng(2).uniform(0.5, 80.0, (9, 11))
    save_depth(tmp_path / f"d{suffix}", d)
    back = load_depth(tmp_path / f"d{suffix}")
    assert back.shape == d.shape
    assert np.allclose(back, d, rtol=0, atol=atol * d.max())


def test_depth_bad_header(tmp_path):
    (tmp_path / "x.depth").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ParseError):
        load_depth(tmp_path / "x.depth")


def test_image_roundtrip(tmp_path):
    img = np.random.default_rng(3).random((5, 6, 3))
    save_image(tmp_path / "i.png", img)
    assert np.abs(load_image(tmp_path / "i.png") - img).max() <= 0.5 / 255 + 1e-12


def test_crop_objects(tmp_path):
    img = np.random.default_rng(4).random((16, 16, 3))
    save_image(tmp_path / "i.png", img)
    anns = [Annotation(1, 0, (0, 0, 16, 16)), Annotation(2, 0, (12, 12, 10, 10)), Annotation(3, 0, (2, 2, 3, 5))]
    m = DatasetManifest([ManifestEntry(7, "i.png", anns)], ["c"], root=tmp_path)
    crops = crop_objects(m, 7, CropPolicy(target_size=16))
    assert len(crops) == 3
    assert np.array_equal(crops[0], load_image(tmp_path / "i.png"))
    assert all(c.shape == (16, 16, 3) for c in crops)
    (tmp_path / "i.png").unlink()
    with pytest.raises(InputError, match="7"):
        crop_objects(m, 7)
