import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from landcover_cgan.data import one_hot
from landcover_cgan.metrics import (MetricsReport, composite, confusion, decode, f1_from_confusion,
                                    f1_scores, format_table, inverse_render, render, report_emit,
                                    report_parse, save_png)
from oracles import f1_loop

label_maps = arrays(np.uint8, (6, 7), elements=st.integers(0, 5))


def test_decode_one_hot_identity(rng):
    L = rng.integers(0, 6, (9, 9))
    np.testing.assert_array_equal(decode(one_hot(L)), L)


def test_decode_uniform_tie_goes_to_class_zero():
    assert decode(np.full((6, 2, 2), 1 / 6)).tolist() == [[0, 0], [0, 0]]
    soft = np.zeros((6, 1, 1))
    soft[[2, 4]] = 0.5
    assert decode(soft)[0, 0] == 2


def test_decode_batched_tensor(rng):
    import torch
    L = rng.integers(0, 6, (2, 4, 4))
    np.testing.assert_array_equal(decode(torch.tensor(one_hot(L))), L)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3, 3), elements=st.floats(0, 1)))
def test_decode_idempotent_through_one_hot(soft):
    d = decode(soft)
    np.testing.assert_array_equal(decode(one_hot(d)), d)


def test_perfect_prediction_scores_100():
    true = np.array([[0, 1, 2], [3, 4, 5]])
    rep = f1_scores([true], [true])
    assert rep.f1 == [100.0] * 6
    assert rep.undefined == []
    assert (np.array(rep.confusion) == np.diag(np.ones(6, int))).all()


def test_disjoint_class_scores_zero():
    true = np.array([[0, 0, 1, 1]])
    pred = np.array([[1, 1, 0, 0]])
    rep = f1_scores([pred], [true])
    assert rep.f1[0] == 0 and rep.f1[1] == 0


def test_hand_counted_f1():
    # class 0: TP=2, FP=1, FN=1
    true = np.array([[0, 0, 0, 1, 2]])
    pred = np.array([[0, 0, 1, 0, 2]])
    cm = confusion(pred, true)
    assert cm[0, 0] == 2 and cm[1:, 0].sum() == 1 and cm[0, 1:].sum() == 1
    rep = f1_scores([pred], [true])
    assert rep.f1[0] == pytest.approx(200 / 3, abs=1e-9)
    assert round(rep.f1[0], 3) == 66.667


def test_undefined_classes_flagged():
    rep = f1_scores([np.zeros((2, 2), int)], [np.zeros((2, 2), int)])
    assert rep.f1[1:] == [0.0] * 5
    assert rep.undefined == ["Developed", "Forest", "Grass", "Pasture", "Cultivated"]


def test_confusion_properties(rng):
    true = rng.integers(0, 6, (5, 8, 8))
    pred = rng.integers(0, 6, (5, 8, 8))
    cm = confusion(pred, true)
    assert cm.sum() == true.size
    np.testing.assert_array_equal(cm.sum(1), np.bincount(true.ravel(), minlength=6))
    np.testing.assert_array_equal(confusion(true, true), np.diag(np.bincount(true.ravel(), minlength=6)))
    with pytest.raises(ValueError):
        confusion(pred[:, :4], true)


@settings(max_examples=40, deadline=None)
@given(label_maps, label_maps)
def test_f1_matches_loop_oracle_and_confusion(pred, true):
    rep = f1_scores([pred], [true])
    for c in range(6):
        assert abs(rep.f1[c] - f1_loop(pred.ravel().tolist(), true.ravel().tolist(), c)) <= 1e-9
    f1_cm = f1_from_confusion(np.array(rep.confusion))[0]
    np.testing.assert_allclose(f1_cm, rep.f1, atol=1e-9, rtol=0)
    assert all(0 <= v <= 100 for v in rep.f1)


@settings(max_examples=25, deadline=None)
@given(label_maps, label_maps, st.integers(0, 2**32 - 1))
def test_f1_permutation_invariant(pred, true, seed):
    perm = np.random.default_rng(seed).permutation(pred.size)
    a = f1_scores([pred], [true]).f1
    b = f1_scores([pred.ravel()[perm].reshape(pred.shape)], [true.ravel()[perm].reshape(true.shape)]).f1
    assert a == b


def test_pooling_over_tiles_is_micro(rng):
    preds = [rng.integers(0, 6, (4, 4)) for _ in range(3)]
    trues = [rng.integers(0, 6, (4, 4)) for _ in range(3)]
    pooled = f1_scores(preds, trues)
    joined = f1_scores([np.concatenate(preds)], [np.concatenate(trues)])
    assert pooled.f1 == joined.f1
    assert pooled.tiles == 3
    assert pooled.per_tile_macro_f1 is not None


def test_empty_prediction_set_is_error():
    with pytest.raises(ValueError):
        f1_scores([], [])


def test_report_round_trip_and_table(rng):
    rep = f1_scores([rng.integers(0, 6, (8, 8))], [rng.integers(0, 6, (8, 8))], split="test", model="cgan")
    text = report_emit(rep)
    assert report_parse(text) == rep
    cnn = report_parse(text.replace('"cgan"', '"cnn"'))
    table = format_table([rep, cnn])
    header = [line for line in table.splitlines() if "Architecture" in line][0]
    cols = ["Open Water", "Developed", "Forest", "Grass", "Pasture", "Cultivated"]
    positions = [header.index(c) for c in cols]
    assert positions == sorted(positions)
    assert "CGAN" in table and "CNN" in table
    assert f"{rep.f1[0]:.3f}" in table


def test_emit_refuses_empty_report():
    rep = MetricsReport(f1=[0.0] * 6, precision=[0.0] * 6, recall=[0.0] * 6,
                        confusion=[[0] * 6 for _ in range(6)], support=[0] * 6)
    with pytest.raises(ValueError):
        report_emit(rep)


def test_render_water_is_dark_blue(taxonomy):
    img = render(np.zeros((3, 3), int), taxonomy.colormap)
    assert img.shape == (3, 3, 3) and (img == [0, 0, 139]).all()


def test_render_inverse_round_trip(taxonomy, rng):
    L = rng.integers(0, 6, (16, 16))
    np.testing.assert_array_equal(inverse_render(render(L, taxonomy.colormap), taxonomy.colormap), L)


def test_render_missing_entry(taxonomy):
    cmap = dict(taxonomy.colormap)
    del cmap[5]
    with pytest.raises(KeyError):
        render(np.zeros((2, 2), int), cmap)


def test_inverse_render_unknown_colour(taxonomy):
    with pytest.raises(ValueError):
        inverse_render(np.full((1, 1, 3), 7, np.uint8), taxonomy.colormap)


def test_composite_five_panels(taxonomy, rng, tmp_path):
    image = rng.uniform(-1, 1, (4, 32, 32))
    truth = rng.integers(0, 6, (32, 32))
    sheet = composite(image, truth, [truth, truth], taxonomy.colormap, gap=4)
    assert sheet.shape == (32, 5 * 32 + 4 * 4, 3)
    np.testing.assert_array_equal(sheet[:, 2 * 36:2 * 36 + 32], render(truth, taxonomy.colormap))
    save_png(sheet, tmp_path / "s.png")
    from PIL import Image
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "s.png")), sheet)
