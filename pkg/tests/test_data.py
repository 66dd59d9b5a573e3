import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dinoy.data import (
    COLORS,
    KEYPOINT_COUNTS,
    SHAPES,
    VOCAB,
    CategorySpec,
    DataConfig,
    counting_split,
    default_categories,
    generate_scene,
    inverse_similarity,
    keypoint_template,
    load_split,
    make_splits,
    mask_to_box,
    sample_categories,
    save_split,
    zipf_pmf,
)


def scene_bytes(s):
    parts = [s.image.tobytes()]
    for o in s.objects:
        parts += [o.category.name.encode(), o.box.tobytes(), o.mask.tobytes(), o.keypoints.tobytes(), o.visibility.tobytes(), bytes(o.caption_tokens)]
    return b"".join(parts)


def test_same_seed_is_bit_identical():
    cfg = DataConfig()
    assert scene_bytes(generate_scene(7, cfg)) == scene_bytes(generate_scene(7, cfg))
    assert scene_bytes(generate_scene(7, cfg)) != scene_bytes(generate_scene(8, cfg))


def test_single_red_circle_is_a_disc_with_tight_box():
    cat = CategorySpec("red circle", "circle", "red", 1, "held_in")
    cfg = DataConfig(categories=(cat,), min_objects=1, max_objects=1)
    s = generate_scene(3, cfg)
    assert len(s.objects) == 1
    o = s.objects[0]
    ys, xs = np.nonzero(o.mask)
    cx, cy = xs.mean() + 0.5, ys.mean() + 0.5
    r2 = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2
    # a disc: every pixel inside the max radius is set (no holes)
    yy, xx = np.mgrid[: cfg.image_size, : cfg.image_size]
    inner = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= (np.sqrt(r2.max()) - 1.5) ** 2
    assert o.mask[inner].all()
    box_px = o.box * cfg.image_size
    assert abs((box_px[0] - box_px[2] / 2) - xs.min()) <= 1
    assert abs((box_px[0] + box_px[2] / 2) - (xs.max() + 1)) <= 1


def test_zipf_rank_ratio_by_sampling():
    cats = default_categories()
    rng = np.random.default_rng(0)
    draws = sample_categories(rng, cats, 10_000, 1.0)
    counts = {}
    for c in draws:
        counts[c.frequency_rank] = counts.get(c.frequency_rank, 0) + 1
    ratio = counts[1] / counts[2]
    assert abs(ratio - 2.0) / 2.0 < 0.10
    p = zipf_pmf([1, 2, 3], 1.0)
    np.testing.assert_allclose(p, np.array([1, 0.5, 1 / 3]) / (11 / 6))


def test_config_rejections():
    with pytest.raises(ValueError, match="image_size"):
        generate_scene(0, DataConfig(image_size=32))
    with pytest.raises(ValueError, match="object count"):
        generate_scene(0, DataConfig(min_objects=0))
    dup = default_categories()
    with pytest.raises(ValueError, match="unique"):
        DataConfig(categories=dup + dup[:1]).validate()


def test_split_sizes_and_holdout_is_compositional():
    cfg = DataConfig()
    assert len(cfg.held_in) == 15 and len(cfg.held_out) == 5
    held_in_shapes = {c.shape_kind for c in cfg.held_in}
    held_in_colors = {c.color for c in cfg.held_in}
    for c in cfg.held_out:
        assert c.shape_kind in held_in_shapes and c.color in held_in_colors
    with pytest.raises(ValueError):
        default_categories(n=6, holdout_fraction=0.1)


def test_make_splits_rejects_one_sided_holdout():
    cats = tuple(CategorySpec(f"{c} square", "square", c, i + 1, "held_in") for i, c in enumerate(list(COLORS)[:4]))
    with pytest.raises(ValueError, match="held-out"):
        make_splits(DataConfig(categories=cats))


def test_train_split_has_no_held_out_objects_and_val_has_some():
    cfg = DataConfig(n_train=150, n_val=60)
    splits = make_splits(cfg)
    held_out = {c.name for c in cfg.held_out}
    for s in splits["train"]:
        assert not ({o.category.name for o in s.objects} & held_out)
    counts = []
    for s in splits["val_held_out"]:
        assert {o.category.name for o in s.objects} & held_out
        counts.append(len(s.objects))
    assert cfg.min_objects <= np.mean(counts) <= cfg.max_objects


def test_counting_split_is_single_category_held_in():
    cfg = DataConfig(n_val=20)
    held_in = {c.name for c in cfg.held_in}
    for s in counting_split(cfg):
        names = {o.category.name for o in s.objects}
        assert len(names) == 1 and names <= held_in


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_scene_invariants(seed):
    cfg = DataConfig()
    s = generate_scene(seed, cfg)
    size = cfg.image_size
    assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
    assert cfg.min_objects <= len(s.objects) <= cfg.max_objects
    for o in s.objects:
        assert o.category.name in s.phrases
        assert 0 < o.box[2] <= 1 and 0 < o.box[3] <= 1
        # box equals tight mask box within a pixel and contains the mask
        np.testing.assert_allclose(mask_to_box(o.mask) * size, o.box * size, atol=1.0)
        assert o.mask.sum() > 0 and o.box[2] * size >= 6 and o.box[3] * size >= 6
        x0, y0 = (o.box[:2] - o.box[2:] / 2) * size
        x1, y1 = (o.box[:2] + o.box[2:] / 2) * size
        ys, xs = np.nonzero(o.mask)
        assert xs.min() >= x0 - 1e-9 and xs.max() + 1 <= x1 + 1e-9 and ys.min() >= y0 - 1e-9 and ys.max() + 1 <= y1 + 1e-9
        # visible keypoints inside the box
        kp = o.keypoints[o.visibility]
        assert np.all(kp[:, 0] >= o.box[0] - o.box[2] / 2) and np.all(kp[:, 0] <= o.box[0] + o.box[2] / 2)
        assert len(o.keypoints) == KEYPOINT_COUNTS[o.category.shape_kind]
        # caption decodes to "<color> <size> <shape>"
        words = VOCAB.decode(o.caption_tokens).split()
        assert words[0] == o.category.color and words[2] == o.category.shape_kind and words[1] in ("small", "medium", "large")
        # keypoints are the template under the object's similarity transform
        cx, cy, scale, angle = o.pose
        canon = inverse_similarity(o.keypoints * size, cx, cy, scale, angle)
        np.testing.assert_allclose(canon, keypoint_template(o.category.shape_kind), atol=1e-5)


def test_visible_area_at_least_thirty_percent():
    from dinoy.data import rasterize

    cfg = DataConfig()
    for seed in range(40):
        s = generate_scene(seed, cfg)
        for o in s.objects:
            cx, cy, scale, angle = o.pose
            full = rasterize(o.category.shape_kind, cx, cy, scale, angle, cfg.image_size)
            assert o.mask.sum() >= 0.3 * full.sum()


def test_save_load_split_round_trip(tmp_path):
    cfg = DataConfig(n_train=6, n_val=4)
    split = make_splits(cfg)["train"]
    save_split(tmp_path / "train", split)
    loaded, samples = load_split(tmp_path / "train")
    assert loaded.seeds == split.seeds
    for a, b in zip(split, samples):
        np.testing.assert_array_equal(a.image, b.image)
        assert len(a.objects) == len(b.objects)
        for oa, ob in zip(a.objects, b.objects):
            assert oa.category == ob.category
            np.testing.assert_array_equal(oa.mask, ob.mask)
            np.testing.assert_array_equal(oa.box, ob.box)
            np.testing.assert_array_equal(oa.keypoints, ob.keypoints)
            np.testing.assert_array_equal(oa.visibility, ob.visibility)
            assert oa.caption_tokens == ob.caption_tokens
    side = json.loads((tmp_path / "train" / "split.json").read_text())
    assert side["config_hash"] == cfg.digest()


def test_serialized_train_split_never_names_held_out(tmp_path):
    cfg = DataConfig(n_train=30, n_val=4)
    save_split(tmp_path / "train", make_splits(cfg)["train"])
    # the sidecar lists the category table itself; the per-object payload must not reference held-out ids
    from dinoy.container import load

    arrays, _ = load(tmp_path / "train" / "samples.bin")
    held_out_ids = {i for i, c in enumerate(cfg.categories) if c.held_out}
    assert not set(arrays["object_category"].tolist()) & held_out_ids
    assert all(c in SHAPES for c in (x.shape_kind for x in cfg.categories))
