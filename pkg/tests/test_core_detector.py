"""Tests for sonar_kd.core.detector."""

import json
from itertools import combinations

import numpy as np
import pytest

from sonar_kd.core.autodiff import Tensor, no_grad
from sonar_kd.core.boxes import DetBox, iou_xywh
from sonar_kd.core.detector import (
    MANIFEST_NAME,
    FpnLogits,
    Model,
    ModelSpec,
    decode,
    forward,
    load_checkpoint,
    nms,
    predict,
    preset,
    read_checkpoint_spec,
    save_checkpoint,
    to_input,
)
from sonar_kd.errors import ConfigError, FormatError, MissingFileError, ShapeError
from tests.conftest import random_logits, tiny_spec

HIGH, LOW = 20.0, -20.0


def _sparse_logits(grids, cells):
    """Logits that fire only at ``cells``: a list of (scale, y, x, reg)."""
    arrays = []
    for h, w in grids:
        arrays.append([np.full((1, 1, h, w), LOW), np.zeros((1, 4, h, w)), np.full((1, 1, h, w), LOW)])
    for scale, y, x, reg in cells:
        cls, regs, obj = arrays[scale]
        cls[0, 0, y, x] = HIGH
        obj[0, 0, y, x] = HIGH
        regs[0, :, y, x] = reg
    return FpnLogits.from_arrays(arrays)


def _loss(logits):
    total = None
    for s in logits.scales:
        for t in (s.cls, s.reg, s.obj):
            term = (t * t).sum()
            total = term if total is None else total + term
    return total


class TestModelSpec:
    """Test spec validation and presets."""

    def test_presets(self):
        """Test the nano and l multipliers."""
        nano = preset("nano")
        assert (nano.width_mult, nano.depth_mult) == (0.25, 0.33)
        assert (preset("l").width_mult, preset("l").depth_mult) == (1.0, 1.0)
        assert preset("nano", num_classes=3).num_classes == 3

    def test_unknown_preset(self):
        """Test an unknown preset raises ConfigError."""
        with pytest.raises(ConfigError):
            preset("xl")

    @pytest.mark.parametrize(
        "overrides",
        [
            {"strides": (8, 16, 48)},
            {"strides": (6, 12, 24)},
            {"input_size": (60, 64)},
            {"num_classes": 0},
            {"dtype": "float16"},
            {"width_mult": 0.0},
        ],
    )
    def test_invalid_specs(self, overrides):
        """Test specs that cannot build a detector raise ConfigError."""
        with pytest.raises(ConfigError):
            Model(tiny_spec(**overrides))

    def test_dict_round_trip(self):
        """Test to_dict and from_dict agree, including the ViT config."""
        spec = tiny_spec(vit=True, seed=7)
        assert ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_from_dict_unknown_key(self):
        """Test an unexpected key raises FormatError."""
        data = tiny_spec().to_dict()
        data["colour"] = "red"
        with pytest.raises(FormatError):
            ModelSpec.from_dict(data)


class TestForward:
    """Test the shape contract and determinism."""

    def test_grids_for_64(self, tiny_model):
        """Test a 64x64 input yields 8x8, 4x4 and 2x2 grids."""
        with no_grad():
            logits = forward(tiny_model, Tensor(np.zeros((2, 3, 64, 64))))
        assert [s.cls.shape for s in logits.scales] == [(2, 1, 8, 8), (2, 1, 4, 4), (2, 1, 2, 2)]
        assert [s.reg.shape[1] for s in logits.scales] == [4, 4, 4]
        assert [s.obj.shape[1] for s in logits.scales] == [1, 1, 1]

    def test_vit_model_grids(self, tiny_vit_model):
        """Test the ViT variant keeps the same output contract."""
        assert tiny_vit_model.vit is not None
        assert tiny_vit_model.vit.pos_embed.shape[0] == (64 // 32) ** 2
        with no_grad():
            logits = forward(tiny_vit_model, Tensor(np.zeros((1, 3, 64, 64))))
        assert [s.cls.shape[2:] for s in logits.scales] == [(8, 8), (4, 4), (2, 2)]

    def test_grids_for_640(self):
        """Test a 640x640 input yields 80x80, 40x40 and 20x20 grids with 400 ViT tokens."""
        model = Model(tiny_spec(vit=True, input_size=(640, 640), num_classes=2))
        assert model.vit.pos_embed.shape[0] == 400
        with no_grad():
            logits = forward(model, Tensor(np.zeros((1, 3, 640, 640))))
        assert [s.cls.shape for s in logits.scales] == [(1, 2, 80, 80), (1, 2, 40, 40), (1, 2, 20, 20)]

    def test_bad_inputs(self, tiny_model):
        """Test wrong channel counts or sizes raise ShapeError."""
        with pytest.raises(ShapeError):
            forward(tiny_model, Tensor(np.zeros((1, 1, 64, 64))))
        with pytest.raises(ShapeError):
            forward(tiny_model, Tensor(np.zeros((1, 3, 48, 64))))

    def test_same_seed_same_weights(self):
        """Test construction is a pure function of the spec."""
        a, b = Model(tiny_spec()), Model(tiny_spec())
        c = Model(tiny_spec(seed=1))
        state_a, state_b, state_c = a.state_dict(), b.state_dict(), c.state_dict()
        assert all(np.array_equal(state_a[k], state_b[k]) for k in state_a)
        assert not all(np.array_equal(state_a[k], state_c[k]) for k in state_a)

    def test_inventory_counts(self, tiny_model):
        """Test the inventory covers every parameter."""
        inventory = tiny_model.inventory()
        assert sum(item["count"] for item in inventory) == tiny_model.num_parameters()
        assert inventory[0]["name"] == "backbone.stem.weight"

    def test_parameter_gradient_spot_check(self, rng):
        """Test backprop against central differences for a few parameters."""
        model = Model(tiny_spec())
        images = Tensor(rng.uniform(size=(1, 3, 32, 32)))
        model.zero_grad()
        _loss(forward(model, images)).backward()
        eps = 1e-5
        params = model.parameters()
        for index in rng.choice(len(params), size=5, replace=False):
            p = params[index]
            flat = int(rng.integers(p.size))
            analytic = p.grad.reshape(-1)[flat]
            original = p.data.reshape(-1)[flat]
            values = []
            for delta in (eps, -eps):
                p.data.reshape(-1)[flat] = original + delta
                with no_grad():
                    values.append(_loss(forward(model, images)).item())
            p.data.reshape(-1)[flat] = original
            numeric = (values[0] - values[1]) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-4 * max(1.0, abs(analytic), abs(numeric))

    def test_to_input_replicates_gray(self):
        """Test gray images become three equal channels in [0, 1]."""
        gray = np.array([[0, 255], [51, 102]], dtype=np.uint8)
        batch = to_input([gray])
        assert batch.shape == (1, 3, 2, 2)
        np.testing.assert_allclose(batch.data[0, 2], [[0.0, 1.0], [0.2, 0.4]])
        with pytest.raises(ShapeError):
            to_input([np.zeros((2, 2, 4))])


class TestFpnLogits:
    """Test the logits container."""

    def test_image_and_stack(self, rng):
        """Test splitting per image and stacking back restores the batch."""
        logits = random_logits(rng, batch=3)
        parts = [logits.image(i) for i in range(3)]
        assert parts[1].batch_size == 1
        restacked = FpnLogits.stack(parts)
        for a, b in zip(logits.arrays(), restacked.arrays()):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)


class TestDecode:
    """Test box decoding."""

    def test_origin_cell(self):
        """Test zero offsets at cell (0, 0) of stride 8 give a centered 8x8 box at the origin."""
        logits = _sparse_logits([(8, 8), (4, 4), (2, 2)], [(0, 0, 0, (0.0, 0.0, 0.0, 0.0))])
        (boxes,) = decode(logits, tiny_spec())
        assert len(boxes) == 1
        box = boxes[0]
        assert (box.cx, box.cy, box.w, box.h) == (0.0, 0.0, 8.0, 8.0)
        assert box.score == pytest.approx(1.0, abs=1e-8)

    def test_offset_cell(self):
        """Test offsets (0.5, 0.5) at column 3, row 2 of stride 16 decode to (56, 40)."""
        logits = _sparse_logits([(8, 8), (4, 4), (2, 2)], [(1, 2, 3, (0.5, 0.5, np.log(2.0), 0.0))])
        (boxes,) = decode(logits, tiny_spec())
        box = boxes[0]
        assert (box.cx, box.cy) == pytest.approx((56.0, 40.0))
        assert (box.w, box.h) == pytest.approx((32.0, 16.0))

    def test_threshold_filters(self):
        """Test cells below the score threshold are dropped."""
        logits = _sparse_logits([(8, 8), (4, 4), (2, 2)], [(2, 1, 1, (0.0, 0.0, 0.0, 0.0))])
        assert len(decode(logits, tiny_spec(), score_thresh=0.5)[0]) == 1
        assert len(decode(logits, tiny_spec(), score_thresh=0.0)[0]) == 64 + 16 + 4

    def test_best_class_is_reported(self, rng):
        """Test the class id is the arg-max class and the score uses it."""
        logits = random_logits(rng, batch=1, num_classes=3)
        boxes = decode(logits, tiny_spec(num_classes=3), score_thresh=0.0)[0]
        cls, _, obj = logits.arrays()[0]
        first = boxes[0]
        probs = 1.0 / (1.0 + np.exp(-cls[0, :, 0, 0]))
        assert first.class_id == int(np.argmax(probs))
        assert first.score == pytest.approx(probs.max() / (1.0 + np.exp(-obj[0, 0, 0, 0])))


def _box(score, cx, cy, w=10.0, h=10.0, class_id=0):
    return DetBox(class_id=class_id, score=score, cx=cx, cy=cy, w=w, h=h)


class TestNms:
    """Test greedy suppression."""

    def test_overlapping_same_class(self):
        """Test the lower-scored of two heavy overlaps is dropped."""
        kept = nms([_box(0.6, 10, 10), _box(0.9, 11, 10), _box(0.5, 50, 50)], 0.45)
        assert [b.score for b in kept] == [0.9, 0.5]

    def test_other_class_survives(self):
        """Test overlaps across classes are kept."""
        kept = nms([_box(0.9, 10, 10), _box(0.8, 10, 10, class_id=1)], 0.45)
        assert len(kept) == 2

    def test_order_independent_for_cross_class_ties(self):
        """Test equal-score coincident boxes of different classes come out in the same order either way."""
        a, b = _box(0.7, 20, 20, class_id=1), _box(0.7, 20, 20, class_id=0)
        forward_order = nms([a, b], 0.45)
        reverse_order = nms([b, a], 0.45)
        assert [k.class_id for k in forward_order] == [0, 1]
        assert [k.class_id for k in reverse_order] == [0, 1]

    def test_threshold_is_exclusive(self):
        """Test a pair whose IoU equals the threshold is suppressed."""
        a, b = _box(0.9, 5, 5), _box(0.8, 10, 5)
        iou = iou_xywh(a.to_xywh(), b.to_xywh())
        assert len(nms([a, b], iou)) == 1
        assert len(nms([a, b], min(0.99, iou + 1e-6))) == 2

    @pytest.mark.parametrize("iou", [0.0, 1.0, -0.1])
    def test_invalid_threshold(self, iou):
        """Test thresholds outside (0, 1) raise ConfigError."""
        with pytest.raises(ConfigError):
            nms([], iou)

    def test_properties_on_random_sets(self, rng):
        """Test survivors are pairwise separated and every dropped box has a stronger overlapping survivor."""
        for _ in range(200):
            n = int(rng.integers(1, 12))
            boxes = [
                _box(
                    float(rng.uniform()),
                    float(rng.uniform(0, 40)),
                    float(rng.uniform(0, 40)),
                    float(rng.uniform(4, 20)),
                    float(rng.uniform(4, 20)),
                    int(rng.integers(2)),
                )
                for _ in range(n)
            ]
            kept = nms(boxes, 0.5)
            for a, b in combinations(kept, 2):
                if a.class_id == b.class_id:
                    assert iou_xywh(a.to_xywh(), b.to_xywh()) < 0.5
            for box in boxes:
                if box in kept:
                    continue
                assert any(
                    k.class_id == box.class_id and k.score >= box.score and iou_xywh(k.to_xywh(), box.to_xywh()) >= 0.5
                    for k in kept
                )
            shuffled = [boxes[i] for i in rng.permutation(n)]
            assert nms(shuffled, 0.5) == kept


class TestPredictAndCheckpoint:
    """Test inference and checkpoint persistence."""

    def test_predict_returns_per_image_lists(self, tiny_model, rng):
        """Test one list per image with scores over the threshold."""
        images = [rng.integers(0, 256, size=(64, 64), dtype=np.uint8) for _ in range(2)]
        results = predict(tiny_model, images, score_thresh=0.0, nms_iou=0.45)
        assert len(results) == 2
        for boxes in results:
            assert 0 < len(boxes) <= 64 + 16 + 4
            assert all(0.0 <= b.score <= 1.0 for b in boxes)

    def test_save_and_load(self, tmp_path, rng):
        """Test a reloaded checkpoint reproduces the logits at float32 precision."""
        model = Model(tiny_spec(vit=True, dtype="float32"))
        save_checkpoint(model, tmp_path / "ckpt")
        manifest = json.loads((tmp_path / "ckpt" / MANIFEST_NAME).read_text())
        assert manifest["format_version"] == 1
        assert read_checkpoint_spec(tmp_path / "ckpt") == model.spec
        loaded = load_checkpoint(tmp_path / "ckpt")
        images = Tensor(rng.uniform(size=(1, 3, 64, 64)).astype(np.float32))
        with no_grad():
            before, after = forward(model, images).arrays(), forward(loaded, images).arrays()
        for a, b in zip(before, after):
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x, y)

    def test_missing_manifest(self, tmp_path):
        """Test a directory without a manifest raises MissingFileError."""
        with pytest.raises(MissingFileError):
            load_checkpoint(tmp_path)

    def test_bad_version(self, tmp_path):
        """Test an unknown format version raises FormatError."""
        save_checkpoint(Model(tiny_spec()), tmp_path)
        path = tmp_path / MANIFEST_NAME
        manifest = json.loads(path.read_text())
        manifest["format_version"] = 99
        path.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            read_checkpoint_spec(tmp_path)
