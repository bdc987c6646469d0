import numpy as np
import pytest

from tripletree import explain as ex
from tripletree import tree as tr
from tripletree.errors import ParameterError
from tripletree.tree import Box

from .conftest import build_tree, random_tree

UNIT = [[0.0, 1.0]]
UNIT2 = [[0.0, 1.0], [0.0, 1.0]]


def two_leaf_1d():
    return build_tree(
        ("split", 0, 0.5,
         ("leaf", {"action": "a", "value": 1.0}),
         ("leaf", {"action": "b", "value": 0.0})), UNIT)


def test_factual_root_only_tree():
    tree = build_tree(("leaf", {"action": "a"}), UNIT)
    expl = ex.factual(tree, [0.3])
    assert expl.bounds == []
    assert ex.render_text(tree, expl) == "Action = a always"


def test_factual_single_split():
    tree = two_leaf_1d()
    expl = ex.factual(tree, [0.2])
    assert expl.bounds == [(0, "<", 0.5)]
    assert ex.render_text(tree, expl) == "Action = a because f0 < 0.5"
    # and the bounds hold for the query state
    for f, rel, tau in expl.bounds:
        assert (0.2 < tau) if rel == "<" else (0.2 >= tau)


def test_factual_interval_rendering():
    tree = build_tree(
        ("split", 0, 0.25,
         ("leaf", {"action": "a"}),
         ("split", 0, 0.75,
          ("leaf", {"action": "b"}),
          ("leaf", {"action": "a"}))), UNIT)
    expl = ex.factual(tree, [0.5])
    assert ex.render_text(tree, expl) == "Action = b because f0 in [0.25, 0.75]"


def test_project_onto_box():
    box = Box(np.array([0.5, -1.0]), np.array([1.0, 1.0]))
    inside = np.array([0.7, 0.0])
    assert np.array_equal(ex.project_onto_box(inside, box), inside)
    assert np.array_equal(ex.project_onto_box([0.2, 0.0], box), [0.5, 0.0])
    rng = np.random.default_rng(0)
    for _ in range(100):
        lo = rng.uniform(-2, 0, size=3)
        hi = lo + rng.uniform(0.1, 2, size=3)
        s = rng.uniform(-3, 3, size=3)
        proj = ex.project_onto_box(s, Box(lo, hi))
        for f in range(3):
            # coordinate-wise closest point of the closed interval
            grid = np.linspace(lo[f], hi[f], 101)
            assert abs(proj[f] - s[f]) <= np.min(np.abs(grid - s[f])) + 1e-12


def test_counterfactual_action_simple():
    tree = two_leaf_1d()
    expl = ex.counterfactual_action(tree, [0.2], "b")
    assert expl.bounds == [(0, ">=", 0.5)]
    assert expl.changed_features == [0]
    assert np.allclose(expl.foil_point, [0.5])
    assert tr.leaf_of(tree, expl.foil_point) == expl.target_leaf
    assert ex.render_text(tree, expl) == "Action would = b if f0 >= 0.5"


def test_counterfactual_prefers_fewer_changed_features():
    # foil reachable either by one big change or two tiny ones
    tree = build_tree(
        ("split", 0, 0.9,
         ("split", 0, 0.41,
          ("leaf", {"action": "a"}),
          ("split", 1, 0.41,
           ("leaf", {"action": "a"}),
           ("leaf", {"action": "b"}))),
         ("leaf", {"action": "b"})), UNIT2)
    expl = ex.counterfactual_action(tree, [0.4, 0.4], "b")
    assert expl.changed_features == [0]
    assert expl.bounds == [(0, ">=", 0.9)]


def test_counterfactual_action_requires_different_prediction():
    tree = two_leaf_1d()
    with pytest.raises(ParameterError):
        ex.counterfactual_action(tree, [0.2], "a")


def test_counterfactual_unreachable_foil():
    tree = two_leaf_1d()
    expl = ex.counterfactual_action(tree, [0.2], "z")
    assert expl.foil_unreachable
    assert "never predicted" in ex.render_text(tree, expl)


def test_counterfactual_value_already_satisfied():
    tree = two_leaf_1d()
    # at 0.2 the predicted value is 1.0; ask for >= 0.5, already true
    expl = ex.counterfactual_value(tree, [0.2], (">=", 0.5))
    assert expl.changed_features == []
    assert expl.target_leaf == tr.leaf_of(tree, [0.2])
    assert "no change" in ex.render_text(tree, expl)


def test_counterfactual_value_two_leaf():
    tree = two_leaf_1d()
    expl = ex.counterfactual_value(tree, [0.2], ("<=", 0.3))
    assert expl.bounds == [(0, ">=", 0.5)]
    assert ex.render_text(tree, expl) == "Value would <= 0.3 if f0 >= 0.5"


def test_counterfactual_matches_exhaustive_scan():
    rng = np.random.default_rng(42)
    for trial in range(15):
        d = int(rng.integers(1, 5))
        tree = random_tree(rng, d, int(rng.integers(2, 40)),
                           actions=["a", "b", "c"],
                           feature_range=[[0.0, 1.0]] * d)
        for _ in range(20):
            s = rng.uniform(-0.2, 1.2, size=d)
            pred = tr.predict(tree, s).action
            foil = {"a": "b", "b": "c", "c": "a"}[pred]
            got = ex.counterfactual_action(tree, s, foil)
            eligible = [lid for lid, leaf in tree.leaves.items()
                        if leaf.action_pred == foil]
            if not eligible:
                assert got.foil_unreachable
                continue
            best = None
            widths = tree.feature_range[:, 1] - tree.feature_range[:, 0]
            for lid in sorted(eligible):
                point = ex._project_into_leaf(s, tree.leaves[lid].box,
                                              tree.feature_range)
                changed = np.nonzero(point != s)[0]
                l2 = float(np.sum(((point - s) / np.where(widths > 0, widths,
                                                          1.0)) ** 2))
                key = (changed.size, l2, lid)
                if best is None or key < best:
                    best = key
            assert (len(got.changed_features),
                    pytest.approx(_norm_l2(tree, s, got.foil_point)),
                    got.target_leaf) == (best[0], best[1], best[2])
            assert tr.leaf_of(tree, got.foil_point) == got.target_leaf


def _norm_l2(tree, s, point):
    widths = tree.feature_range[:, 1] - tree.feature_range[:, 0]
    w = np.where(widths > 0, widths, 1.0)
    return float(np.sum(((point - s) / w) ** 2))


def test_counterfactual_invariant_under_feature_rescale():
    rng = np.random.default_rng(5)
    scale = 40.0
    spec = ("split", 0, 0.5,
            ("split", 1, 0.3,
             ("leaf", {"action": "a"}),
             ("leaf", {"action": "b"})),
            ("leaf", {"action": "b"}))
    spec_scaled = ("split", 0, 0.5 * scale,
                   ("split", 1, 0.3,
                    ("leaf", {"action": "a"}),
                    ("leaf", {"action": "b"})),
                   ("leaf", {"action": "b"}))
    tree = build_tree(spec, UNIT2)
    tree_scaled = build_tree(spec_scaled, [[0.0, scale], [0.0, 1.0]])
    for _ in range(50):
        s = rng.uniform(0, 1, size=2)
        s_scaled = s * np.array([scale, 1.0])
        a = ex.counterfactual_action(tree, s, "b") \
            if tr.predict(tree, s).action == "a" else None
        b = ex.counterfactual_action(tree_scaled, s_scaled, "b") \
            if tr.predict(tree_scaled, s_scaled).action == "a" else None
        if a is None:
            assert b is None
            continue
        assert a.target_leaf == b.target_leaf
        assert a.changed_features == b.changed_features
        assert np.allclose(b.foil_point / np.array([scale, 1.0]),
                           a.foil_point, rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# Temporal explanations
# ---------------------------------------------------------------------------

def test_temporal_simple_two_leaf():
    tree = two_leaf_1d()
    expl = ex.temporal(tree, [0.2], [0.7])
    assert expl.bounds == [(0, ">=", 0.5)]
    assert np.allclose(expl.foil_point, [0.5])
    assert not expl.unconstrained_fallback
    assert ex.render_text(tree, expl) == \
        "Action changed a -> b because f0 >= 0.5"


def test_temporal_moves_past_interposed_leaf():
    # b-region, then an interposed a-region, then the successor's b-region
    tree = build_tree(
        ("split", 0, 0.5,
         ("leaf", {"action": "a"}),
         ("split", 0, 1.0,
          ("leaf", {"action": "b"}),
          ("split", 0, 1.5,
           ("leaf", {"action": "a"}),
           ("leaf", {"action": "b"})))), [[0.0, 2.0]])
    s_t, s_next = [0.2], [1.8]
    expl = ex.temporal(tree, s_t, s_next)
    # the nearer b-leaf at [0.5, 1.0) fails the purity constraint because the
    # box spanned with s_next crosses the interposed a-leaf
    assert np.allclose(expl.foil_point, [1.5])
    assert expl.bounds == [(0, ">=", 1.5)]
    assert not expl.unconstrained_fallback


def test_temporal_three_leaf_minimal_foil():
    tree = build_tree(
        ("split", 0, 0.5,
         ("leaf", {"action": "a"}),
         ("split", 0, 1.5,
          ("leaf", {"action": "a"}),
          ("leaf", {"action": "b"}))), [[0.0, 2.0]])
    expl = ex.temporal(tree, [0.2], [1.9])
    assert np.allclose(expl.foil_point, [1.5])
    assert expl.changed_features == [0]


def test_temporal_requires_action_change():
    tree = two_leaf_1d()
    with pytest.raises(ParameterError):
        ex.temporal(tree, [0.1], [0.2])


def test_temporal_purity_reverified_independently():
    rng = np.random.default_rng(77)
    checked = 0
    for trial in range(20):
        d = int(rng.integers(1, 4))
        tree = random_tree(rng, d, int(rng.integers(3, 30)),
                           actions=["a", "b"],
                           feature_range=[[0.0, 1.0]] * d)
        s_t = rng.uniform(0, 1, size=d)
        s_next = rng.uniform(0, 1, size=d)
        a_t = tr.predict(tree, s_t).action
        a_n = tr.predict(tree, s_next).action
        if a_t == a_n:
            continue
        expl = ex.temporal(tree, s_t, s_next)
        if expl.unconstrained_fallback or expl.foil_unreachable:
            continue
        lo = np.minimum(expl.foil_point, s_next)
        hi = np.maximum(expl.foil_point, s_next)
        for leaf in tree.leaves.values():
            overlaps = all(lo[f] < leaf.box.upper[f] and hi[f] >= leaf.box.lower[f]
                           for f in range(d))
            if overlaps:
                assert leaf.action_pred == a_n
        checked += 1
    assert checked >= 5


def test_render_json_is_plain_data():
    import json
    tree = two_leaf_1d()
    expl = ex.counterfactual_action(tree, [0.2], "b")
    doc = ex.render_json(expl)
    json.dumps(doc)
    assert doc["kind"] == "counterfactual_action"
    assert doc["bounds"] == [[0, ">=", 0.5]]
    assert doc["changed_features"] == [0]


def test_counterfactual_value_unreachable():
    tree = two_leaf_1d()
    expl = ex.counterfactual_value(tree, [0.2], ("<=", -999.0))
    assert expl.foil_unreachable
    assert "never predicted" in ex.render_text(tree, expl)
    with pytest.raises(ParameterError):
        ex.counterfactual_value(tree, [0.2], ("==", 0.5))
