import numpy as np
import pytest
from PIL import Image

from floodkd import evaluation
from floodkd.errors import DegenerateInputError, SchemaError
from floodkd.evaluation import (COLORS, ConfusionCounts, confusion, ece, infer_10m, pooled_ece,
                                pooled_iou, probs_to_mask, render_png, report_row, write_report)
from floodkd.model import SegNetConfig, init
from floodkd.raster import CLOUD, DRY, INVALID, WATER, ClassMask, Raster

from oracles import confusion_bruteforce, ece_bruteforce


def random_pair(g, shape=(12, 12)):
    pred = g.choice([DRY, WATER], shape).astype(np.uint8)
    truth = g.choice([DRY, WATER, CLOUD, INVALID], shape, p=[0.4, 0.4, 0.1, 0.1]).astype(np.uint8)
    return pred, truth


def test_confusion_matches_oracle():
    g = np.random.default_rng(11)
    for _ in range(60):
        pred, truth = random_pair(g, tuple(g.integers(1, 20, 2)))
        c = confusion(pred, ClassMask(truth))
        assert (c.tp, c.fp, c.fn, c.tn) == confusion_bruteforce(pred, truth)


def test_pooled_iou_matches_oracle():
    g = np.random.default_rng(12)
    for _ in range(60):
        pairs = [random_pair(g) for _ in range(g.integers(1, 5))]
        tp = fp = fn = 0
        for p, t in pairs:
            a, b, c, _ = confusion_bruteforce(p, t)
            tp, fp, fn = tp + a, fp + b, fn + c
        got = pooled_iou([confusion(p, t) for p, t in pairs])
        assert got == tp / (tp + fp + fn)


def test_pooled_iou_examples():
    assert pooled_iou([ConfusionCounts(3, 1, 2, 0)]) == 0.5
    assert pooled_iou([ConfusionCounts(1, 0, 0, 0), ConfusionCounts(0, 0, 1, 0)]) == 0.5
    assert pooled_iou([ConfusionCounts(1, 1, 0, 0), ConfusionCounts(0, 0, 2, 0)]) == 0.25
    # pooling is a micro average, not a mean of per-image IoU
    assert pooled_iou([ConfusionCounts(1, 0, 0, 5), ConfusionCounts(0, 3, 0, 0)]) == 0.25
    truth = np.array([[WATER, WATER, DRY, CLOUD]], np.uint8)
    assert pooled_iou([confusion(truth.clip(0, 1), truth)]) == 1.0
    with pytest.raises(DegenerateInputError):
        pooled_iou([ConfusionCounts(0, 0, 0, 9)])


def test_confusion_symmetry():
    g = np.random.default_rng(13)
    a = g.choice([DRY, WATER], (10, 10)).astype(np.uint8)
    b = g.choice([DRY, WATER], (10, 10)).astype(np.uint8)
    ab, ba = confusion(a, b), confusion(b, a)
    assert (ab.tp, ab.fp, ab.fn, ab.tn) == (ba.tp, ba.fn, ba.fp, ba.tn)
    assert pooled_iou([ab]) == pooled_iou([ba])


def test_confusion_shape_mismatch():
    with pytest.raises(SchemaError):
        confusion(np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8))
    c = confusion(np.ones((3, 3), np.uint8), np.full((3, 3), CLOUD, np.uint8))
    assert c.total == 0


def test_ece_matches_oracle():
    g = np.random.default_rng(14)
    for _ in range(60):
        _, truth = random_pair(g)
        if not (truth < CLOUD).any():
            continue
        p = g.random(truth.shape)
        p[g.random(truth.shape) < 0.1] = g.choice([0.0, 0.5, 1.0, 0.95])
        assert ece(p, truth) == pytest.approx(ece_bruteforce(p, truth), abs=1e-12)


def test_ece_examples():
    truth = np.array([[WATER, DRY]], np.uint8)
    assert ece(np.array([[1.0, 0.0]]), truth) == 0.0
    assert ece(np.array([[0.0, 1.0]]), truth) == 1.0
    assert ece(np.array([[0.75, 0.75]]), truth) == pytest.approx(0.25)
    # always fully confident, right half the time
    assert ece(np.array([[1.0, 1.0]]), truth) == 0.5
    with pytest.raises(DegenerateInputError):
        ece(np.zeros((1, 1)), np.array([[CLOUD]], np.uint8))


def test_pooled_ece_equals_concatenation():
    g = np.random.default_rng(15)
    probs = [g.random((4, 4)) for _ in range(3)]
    truths = [ClassMask(random_pair(g, (4, 4))[1]) for _ in range(3)]
    joined = ece(np.concatenate(probs), np.concatenate([t.codes for t in truths]))
    assert pooled_ece(probs, truths) == pytest.approx(joined, abs=1e-14)


def test_threshold_is_strict():
    assert probs_to_mask(np.array([0.5, 0.5000001, 0.2])).tolist() == [DRY, WATER, DRY]


def test_infer_10m_protocol(monkeypatch, rng):
    net = init(SegNetConfig(2, 4))
    seen = []
    real = evaluation.forward

    def spy(n, x, *a, **k):
        seen.append(x.shape)
        return real(n, x, *a, **k)

    monkeypatch.setattr(evaluation, "forward", spy)
    r = Raster(("VV", "VH"), rng.random((2, 512, 512)).astype(np.float32), 10.0)
    out = infer_10m(net, r)
    assert seen == [(320, 320, 2)]
    assert out.shape == (512, 512, 2)
    np.testing.assert_allclose(out.sum(-1), 1.0, rtol=0, atol=1e-12)
    assert out.min() >= 0


def test_infer_10m_constant_field(rng):
    net = init(SegNetConfig(2, 4))
    for p in net.params.values():
        p[...] = 0
    r = Raster(("VV", "VH"), rng.random((2, 256, 256)).astype(np.float32), 10.0)
    assert np.all(infer_10m(net, r) == 0.5)


def test_infer_10m_rejects_bad_grid(rng):
    net = init(SegNetConfig(2, 4))
    with pytest.raises(SchemaError):
        infer_10m(net, Raster(("VV", "VH"), rng.random((2, 100, 100)).astype(np.float32), 10.0))


def test_render_mask_colours(tmp_path):
    codes = np.array([[DRY, WATER], [CLOUD, INVALID]], np.uint8)
    render_png(ClassMask(codes), tmp_path / "m.png")
    img = np.asarray(Image.open(tmp_path / "m.png"))
    assert img.shape == (2, 2, 3)
    for (i, j), c in np.ndenumerate(codes):
        assert tuple(img[i, j]) == COLORS[c]


def test_render_probs(tmp_path):
    render_png(np.array([[0.0, 1.0], [0.5, 0.25]]), tmp_path / "p.png")
    img = np.asarray(Image.open(tmp_path / "p.png"))
    assert img[..., 2].tolist() == [[0, 255], [128, 64]]
    assert not img[..., :2].any()


def test_report_file(tmp_path):
    rows = [report_row("test", [ConfusionCounts(1, 1, 2, 5)], 0.125)]
    write_report(tmp_path / "r.csv", rows)
    text = (tmp_path / "r.csv").read_text()
    assert text == "split,n_images,tp,fp,fn,tn,iou,ece\ntest,1,1,1,2,5,0.250000,0.125000\n"
