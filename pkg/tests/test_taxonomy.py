import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landcover_cgan.errors import DegenerateWeightsError, LegendError
from landcover_cgan.taxonomy import (CLASS_NAMES, DROPPED, ClassTaxonomy, ClassWeights,
                                     compute_class_weights, load_taxonomy)

WATER, DEVELOPED, FOREST, GRASS, PASTURE, CULTIVATED = range(6)


def test_default_has_six_classes_in_reporting_order(taxonomy):
    assert taxonomy.class_names == list(CLASS_NAMES)
    assert CLASS_NAMES == ("Open Water", "Developed", "Forest", "Grass", "Pasture", "Cultivated")


@pytest.mark.parametrize("code,expected", [
    (41, FOREST), (42, FOREST), (43, FOREST), (52, FOREST),
    (21, DEVELOPED), (22, DEVELOPED), (23, DEVELOPED), (24, DEVELOPED),
    (11, WATER), (71, GRASS), (81, PASTURE), (82, CULTIVATED),
    (31, DROPPED), (90, DROPPED), (95, DROPPED),
])
def test_remap_label(taxonomy, code, expected):
    assert taxonomy.remap_label(code) == expected


def test_unknown_code_is_rejected(taxonomy):
    with pytest.raises(LegendError, match="77"):
        taxonomy.remap_label(77)
    with pytest.raises(LegendError, match="77"):
        taxonomy.remap_array(np.array([[11, 77]]))


def test_remap_is_total_over_legend(taxonomy):
    assert set(taxonomy.remap) == set(taxonomy.source_legend)
    assert len(taxonomy.source_legend) == 16


def test_remap_array_matches_scalar(taxonomy):
    codes = np.array(sorted(taxonomy.remap)).reshape(4, 4)
    out = taxonomy.remap_array(codes)
    assert out.tolist() == [[taxonomy.remap_label(c) for c in row] for row in codes]


def test_identity_extension_is_noop(taxonomy):
    doc = taxonomy.to_dict()
    ident = dict(doc, remap={i: n for i, n in enumerate(CLASS_NAMES)}, dropped=[], source_legend={})
    ident_tax = ClassTaxonomy.from_dict(ident)
    for c in range(6):
        assert ident_tax.remap_label(ident_tax.remap_label(c)) == c


def test_round_trip_through_file(taxonomy, tmp_path):
    import yaml
    path = tmp_path / "tax.yaml"
    path.write_text(yaml.safe_dump(taxonomy.to_dict()))
    assert load_taxonomy(path) == taxonomy


def test_equal_counts_give_uniform_weights():
    labels = [np.arange(6).repeat(4).reshape(4, 6)]
    w = compute_class_weights(labels)
    np.testing.assert_allclose(w.w, [1 / 6] * 6)


def test_missing_classes_are_degenerate():
    tiles = [np.array([[2, 2], [2, 2]]), np.array([[2, 2], [0, 0]])]
    with pytest.raises(DegenerateWeightsError):
        compute_class_weights(tiles)


def test_hand_counted_weights():
    # counts (2, 1, 1, 1, 1, 2) over 8 pixels
    labels = [np.array([[0, 0, 1, 2], [3, 4, 5, 5]])]
    w = compute_class_weights(labels)
    np.testing.assert_allclose(w.w, [0.25, 0.125, 0.125, 0.125, 0.125, 0.25], rtol=0, atol=1e-15)


def test_weights_validation():
    with pytest.raises(DegenerateWeightsError):
        ClassWeights((0.5, 0.5, 0.0, 0.0, 0.0, 0.0))
    with pytest.raises(DegenerateWeightsError):
        ClassWeights((0.5, 0.6, 0.1, 0.1, 0.1, 0.1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weights_permutation_equivariant_and_finite(seed):
    rng = np.random.default_rng(seed)
    lab = np.concatenate([np.arange(6), rng.integers(0, 6, size=58)]).reshape(8, 8)
    w1 = compute_class_weights([lab])
    w2 = compute_class_weights([rng.permutation(lab.ravel()).reshape(8, 8)])
    assert w1 == w2
    assert abs(sum(w1.w) - 1) <= 1e-9
    assert np.isfinite(w1.inverse.max())


def test_colors(taxonomy):
    r, g, b = taxonomy.class_color(DEVELOPED)
    assert r > 200 and g < 50 and b < 50  # red
    r, g, b = taxonomy.class_color(CULTIVATED)
    assert r > g > b  # brown
    assert taxonomy.class_color(WATER) == (0, 0, 139)
    assert len({taxonomy.class_color(i) for i in range(6)}) == 6
    with pytest.raises(ValueError):
        taxonomy.class_color(6)
