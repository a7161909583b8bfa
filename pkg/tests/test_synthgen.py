import numpy as np
import pytest

from sonatr import benchmark as bm, metrics, svm, synthgen as sg


def test_block_template_is_pixel_exact():
    chip, label = sg.generate_chip(sg.ChipSpec("block"))
    assert label == "block"
    # footprint centred on the chip centre 31.5; highlight centre sits 8 px uprange
    expected = np.full((64, 64), 0.3)
    for y in range(64):
        for x in range(64):
            du, dv = x - 23.5, y - 31.5
            if abs(dv) <= 9:
                if abs(du) <= 6:
                    expected[y, x] = 0.9
                elif 6 < du <= 22:
                    expected[y, x] = 0.05
    np.testing.assert_array_equal(chip, expected.astype(np.float32).astype(np.float64))


def test_template_class_shapes():
    def extent(mask):
        ys, xs = np.nonzero(mask)
        return xs.max() - xs.min() + 1, ys.max() - ys.min() + 1

    hl, sh = sg.target_masks("cylinder", (64, 64), 31.5, 31.5)
    w, h = extent(hl)
    assert max(w, h) >= 3 * min(w, h)
    hl, sh = sg.target_masks("sphere", (64, 64), 31.5, 31.5)
    w, h = extent(hl)
    assert abs(w - h) <= 1  # a disc, up to pixel sampling
    assert extent(sh)[0] > 0
    hl, _ = sg.target_masks("cone", (64, 64), 31.5, 31.5)
    widths = hl.sum(axis=1)[hl.any(axis=1)]
    assert widths[0] < widths[-1]  # narrow apex, wide base
    for cls in sg.CLASS_NAMES:
        hl, sh = sg.target_masks(cls, (64, 64), 31.5, 31.5)
        assert not np.any(hl & sh)
        assert sh.any() and hl.any()
        # the shadow lies downrange (+x) of the highlight
        assert np.nonzero(sh)[1].mean() > np.nonzero(hl)[1].mean()


def test_chip_determinism():
    spec = sg.ChipSpec("cone", orientation_deg=7.0, offset=(2.0, -1.0), speckle_sigma=0.6,
                       clutter_density=1.0, seed=12)
    a, _ = sg.generate_chip(spec)
    b, _ = sg.generate_chip(spec)
    assert a.tobytes() == b.tobytes()
    c, _ = sg.generate_chip(sg.ChipSpec("cone", orientation_deg=7.0, offset=(2.0, -1.0), speckle_sigma=0.6,
                                        clutter_density=1.0, seed=13))
    assert a.tobytes() != c.tobytes()


def test_chip_errors():
    with pytest.raises(ValueError):
        sg.ChipSpec("torus")
    with pytest.raises(ValueError):
        sg.ChipSpec("block", scale=3.0)
    with pytest.raises(ValueError, match="does not fit"):
        sg.generate_chip(sg.ChipSpec("block", offset=(30.0, 0.0)))


def test_block_highlight_contrast():
    rng = np.random.default_rng(0)
    cfg = sg.DatasetConfig()
    for _ in range(100):
        spec = sg.random_chip_spec("block", rng, cfg)
        chip, _ = sg.generate_chip(spec)
        c = (spec.chip_size - 1) / 2
        hl, sh = sg.target_masks("block", chip.shape, c + spec.offset[0], c + spec.offset[1],
                                 spec.orientation_deg, spec.scale)
        background = ~(hl | sh)
        assert chip[hl].mean() - chip[background].mean() >= 0.3


def test_dataset_balance_and_determinism():
    ds = sg.generate_dataset(60, 5)
    assert len(ds) == 240
    assert np.bincount(ds.labels).tolist() == [60, 60, 60, 60]
    again = sg.generate_dataset(60, 5)
    assert ds.images.tobytes() == again.images.tobytes()
    other = sg.generate_dataset(60, 6)
    assert ds.images.tobytes() != other.images.tobytes()
    assert ds.images.shape == (240, 64, 64)
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    with pytest.raises(ValueError):
        sg.generate_dataset(0, 1)


def test_split_is_disjoint_and_balanced():
    ds = sg.generate_dataset(30, 1)
    for seed in range(5):
        train, test = ds.split(20, 10, seed)
        assert not set(train) & set(test)
        assert np.bincount(ds.labels[train]).tolist() == [20] * 4
        assert np.bincount(ds.labels[test]).tolist() == [10] * 4
    a = ds.split(20, 10, 3)
    b = ds.split(20, 10, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ValueError):
        ds.split(25, 10, 0)


def test_empty_scene_is_background():
    scene, truths = sg.generate_scene(sg.SceneSpec(128, 96, (), seed=3))
    assert truths == [] and scene.shape == (96, 128)
    assert abs(scene.mean() - 0.3) < 0.05


def test_standard_scene_ground_truth():
    scene, truths = sg.generate_scene(sg.standard_scene_spec())
    assert [t.cls for t in truths] == ["block", "sphere"]
    for t in truths:
        x0, y0, x1, y1 = t.box
        assert 0 <= x0 < x1 <= scene.shape[1] and 0 <= y0 < y1 <= scene.shape[0]
    assert not sg.boxes_intersect(truths[0].box, truths[1].box)
    again, _ = sg.generate_scene(sg.standard_scene_spec())
    assert scene.tobytes() == again.tobytes()


def test_scene_placement_errors():
    with pytest.raises(ValueError, match="overlaps"):
        sg.generate_scene(sg.SceneSpec(200, 100, (sg.PlacedTarget("block", 60, 50),
                                                  sg.PlacedTarget("sphere", 70, 50))))
    with pytest.raises(ValueError, match="outside"):
        sg.generate_scene(sg.SceneSpec(200, 100, (sg.PlacedTarget("block", 5, 50),)))


def test_targets_brighter_than_background_in_random_scenes():
    rng = np.random.default_rng(7)
    for i in range(50):
        classes = rng.choice(sg.CLASS_NAMES, size=2, replace=False)
        targets = (sg.PlacedTarget(str(classes[0]), float(rng.uniform(40, 110)), float(rng.uniform(40, 110)),
                                   float(rng.uniform(-15, 15))),
                   sg.PlacedTarget(str(classes[1]), float(rng.uniform(170, 240)), float(rng.uniform(40, 110)),
                                   float(rng.uniform(-15, 15))))
        scene, truths = sg.generate_scene(sg.SceneSpec(280, 150, targets, seed=i))
        outside = np.ones(scene.shape, dtype=bool)
        for t in targets:
            hl, sh = sg.target_masks(t.cls, scene.shape, t.x, t.y, t.orientation_deg, t.scale)
            outside &= ~(hl | sh)
        for t in targets:
            hl, _ = sg.target_masks(t.cls, scene.shape, t.x, t.y, t.orientation_deg, t.scale)
            assert scene[hl].mean() > scene[outside].mean()


def test_distractor_chips():
    d = sg.generate_distractor_chips(10, 3)
    assert d.shape == (10, 64, 64)
    assert d.tobytes() == sg.generate_distractor_chips(10, 3).tobytes()
    wide = sg.generate_distractor_chips(6, 3, displacement=(20.0, 48.0))
    assert wide.shape == (6, 64, 64)


def test_raw_pixel_svm_recall_floor():
    ds = sg.standard_dataset()
    x = ds.images.reshape(len(ds), -1)
    recalls = []
    for trial in range(4):
        train, test = ds.split(20, 10, bm.trial_seed(0, trial))
        model = svm.train(svm.FeatureSet(x[train], ds.labels[train], ds.class_names))
        pred = svm.classify_batch(model, x[test])
        cm = metrics.accumulate(((ds.class_names[a], ds.class_names[b]) for a, b in zip(ds.labels[test], pred)),
                                ds.class_names)
        recalls.append(metrics.precision_recall(cm).mean_recall)
    assert np.mean(recalls) >= 0.6
    assert np.mean(recalls) < 0.9  # learnable but not trivial
