import json

import numpy as np
import pytest
import torch

from panoptic_fcn.errors import InputError
from panoptic_fcn.panoptic import PanopticSegmentation, Segment
from panoptic_fcn.synth import (
    Scene, SceneSpec, generate_scene, generate_scenes, read_dataset, to_tensor_image, write_dataset,
)


def test_same_index_is_bit_identical():
    a, b = generate_scene(SceneSpec(), 7), generate_scene(SceneSpec(), 7)
    assert np.array_equal(a.image, b.image) and a.panoptic == b.panoptic
    c = generate_scene(SceneSpec(seed=1), 7)
    assert not np.array_equal(a.image, c.image)


def test_stuff_only_scene():
    s = generate_scene(SceneSpec(min_objects=0, max_objects=0), 0)
    assert {seg.kind for seg in s.panoptic.segments} == {"stuff"}


def test_partition_and_no_overlap_sweep():
    spec = SceneSpec()
    for sc in generate_scenes(spec, 300):
        pan = sc.panoptic
        pan.validate()
        assert (pan.id_map > 0).all()
        assert sc.image.shape == (128, 128, 3) and sc.image.dtype == np.uint8
        things = [s for s in pan.segments if s.kind == "thing"]
        assert len(things) <= spec.max_objects
        assert sum(s.area for s in pan.segments) == pan.id_map.size


def test_round_trip(tmp_path):
    scenes = generate_scenes(SceneSpec(), 10)
    write_dataset(scenes, tmp_path)
    back = read_dataset(tmp_path)
    assert len(back) == 10
    for a, b in zip(scenes, back.scenes):
        assert np.array_equal(a.image, b.image)
        assert a.panoptic == b.panoptic
        assert a.name == b.name
    doc = json.loads((tmp_path / "annotations.json").read_text())
    assert set(doc) == {"images", "categories"}
    assert all("0" not in rec["segments"] for rec in doc["images"])
    assert (tmp_path / "000000.png").exists() and (tmp_path / "000000_pan.png").exists()


def test_sixteen_bit_ids(tmp_path):
    idm = np.full((6, 6), 300, np.int32)
    idm[:2] = 1000
    pan = PanopticSegmentation(idm, [Segment(300, 4, "stuff"), Segment(1000, 1, "thing")]).with_areas()
    write_dataset([Scene(np.zeros((6, 6, 3), np.uint8), pan, "big")], tmp_path)
    back = read_dataset(tmp_path).scenes[0].panoptic
    assert set(np.unique(back.id_map).tolist()) == {300, 1000}


def test_malformed_inputs(tmp_path):
    with pytest.raises(InputError, match="not found"):
        read_dataset(tmp_path)
    (tmp_path / "annotations.json").write_text("{bad")
    with pytest.raises(InputError, match="invalid JSON"):
        read_dataset(tmp_path)
    (tmp_path / "annotations.json").write_text(json.dumps({"images": []}))
    with pytest.raises(InputError, match="categories"):
        read_dataset(tmp_path)
    write_dataset(generate_scenes(SceneSpec(), 1), tmp_path)
    doc = json.loads((tmp_path / "annotations.json").read_text())
    del doc["images"][0]["segments"]["1"]["category"]
    (tmp_path / "annotations.json").write_text(json.dumps(doc))
    with pytest.raises(InputError, match=r"images\[0\]"):
        read_dataset(tmp_path)


def test_tensor_conversion():
    imgs = [generate_scene(SceneSpec(image_size=64), i).image for i in range(2)]
    t = to_tensor_image(imgs)
    assert t.shape == (2, 3, 64, 64) and t.dtype == torch.float32
    assert abs(float(t[0, 0, 0, 0]) - (imgs[0][0, 0, 0] / 255 - 0.5) / 0.25) <= 1e-6
