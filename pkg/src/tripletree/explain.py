"""Rule-based explanations: factual bounds, minimal counterfactuals for
actions and value conditions, and temporal explanations of action changes.

Counterfactual targets are chosen by a two-stage comparison over candidate
points projected onto eligible leaf regions: fewest changed features first,
then smallest range-normalised Euclidean change, then lowest leaf id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tree import Box, TripleTree, leaf_of, predict


@dataclass
class Explanation:
    kind: str  # factual | counterfactual_action | counterfactual_value | temporal
    bounds: list = field(default_factory=list)  # (feature, '<' or '>=', threshold)
    foil: object = None          # action label, or ('<='|'>=', threshold) for value
    target_leaf: int | None = None
    foil_point: np.ndarray | None = None
    changed_features: list = field(default_factory=list)
    query_action: object = None  # prediction at the query state
    foil_unreachable: bool = False
    unconstrained_fallback: bool = False


def factual(tree: TripleTree, state) -> Explanation:
    """Bounds of the leaf containing the state, omitting unconstrained sides."""
    lid = leaf_of(tree, state)
    leaf = tree.leaves[lid]
    return Explanation(kind="factual", bounds=_box_bounds(leaf.box),
                       target_leaf=lid, query_action=leaf.action_pred)


def _box_bounds(box: Box) -> list:
    bounds = []
    for f in range(box.lower.size):
        if np.isfinite(box.lower[f]):
            bounds.append((f, ">=", float(box.lower[f])))
        if np.isfinite(box.upper[f]):
            bounds.append((f, "<", float(box.upper[f])))
    return bounds


def project_onto_box(state, box: Box) -> np.ndarray:
    """Closest point of the closed box under any elementwise-monotone norm."""
    s = np.asarray(state, dtype=float)
    return np.clip(s, box.lower, box.upper)


def _project_into_leaf(state, box: Box, feature_range) -> np.ndarray:
    """Projection that lands strictly inside the half-open leaf region.

    The upper side of a box is open, so a clamp onto it is nudged inward by
    a sliver proportional to the feature's data range.
    """
    s = np.asarray(state, dtype=float).copy()
    widths = feature_range[:, 1] - feature_range[:, 0]
    for f in range(s.size):
        if s[f] < box.lower[f]:
            s[f] = box.lower[f]
        elif s[f] >= box.upper[f] and np.isfinite(box.upper[f]):
            eps = 1e-9 * (widths[f] if widths[f] > 0 else 1.0)
            cand = box.upper[f] - eps
            if cand >= box.upper[f]:
                cand = np.nextafter(box.upper[f], -np.inf)
            s[f] = max(cand, box.lower[f])
    return s


def _change_metrics(state, point, feature_range):
    state = np.asarray(state, dtype=float)
    changed = np.nonzero(point != state)[0]
    widths = feature_range[:, 1] - feature_range[:, 0]
    w = np.where(widths > 0, widths, 1.0)
    delta = (point - state) / w
    return changed, int(changed.size), float(np.sum(delta * delta))


def _changed_bounds(state, box: Box, changed) -> list:
    """For each changed feature, the violated side of the target region."""
    bounds = []
    for f in changed:
        if state[f] < box.lower[f]:
            bounds.append((int(f), ">=", float(box.lower[f])))
        else:
            bounds.append((int(f), "<", float(box.upper[f])))
    return bounds


def _actions_equal(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a, dtype=float),
                              np.asarray(b, dtype=float))
    return a == b


def _select_minimal(tree, state, eligible_ids):
    """Lexicographic (changed count, normalised L2, leaf id) minimisation."""
    state = np.asarray(state, dtype=float)
    best = None
    for lid in sorted(eligible_ids):
        box = tree.leaves[lid].box
        point = _project_into_leaf(state, box, tree.feature_range)
        changed, l0, l2 = _change_metrics(state, point, tree.feature_range)
        key = (l0, l2, lid)
        if best is None or key < best[0]:
            best = (key, lid, point, changed)
    return best


def counterfactual_action(tree: TripleTree, state, foil) -> Explanation:
    """Minimal state change after which the model predicts the foil action."""
    state = np.asarray(state, dtype=float)
    pred = predict(tree, state).action
    if _actions_equal(pred, foil):
        raise ParameterError("foil equals the predicted action at this state")
    eligible = [lid for lid, leaf in tree.leaves.items()
                if _actions_equal(leaf.action_pred, foil)]
    if not eligible:
        return Explanation(kind="counterfactual_action", foil=foil,
                           query_action=pred, foil_unreachable=True)
    _, lid, point, changed = _select_minimal(tree, state, eligible)
    return Explanation(
        kind="counterfactual_action",
        bounds=_changed_bounds(state, tree.leaves[lid].box, changed),
        foil=foil, target_leaf=lid, foil_point=point,
        changed_features=[int(f) for f in changed], query_action=pred)


def counterfactual_value(tree: TripleTree, state, condition) -> Explanation:
    """Minimal state change under which the value prediction satisfies a
    threshold condition ``('<=', v)`` or ``('>=', v)``."""
    op, threshold = condition
    if op not in ("<=", ">="):
        raise ParameterError("value condition operator must be '<=' or '>='")
    threshold = float(threshold)
    state = np.asarray(state, dtype=float)
    pred = predict(tree, state).action
    if op == "<=":
        eligible = [lid for lid, leaf in tree.leaves.items()
                    if leaf.value_pred <= threshold]
    else:
        eligible = [lid for lid, leaf in tree.leaves.items()
                    if leaf.value_pred >= threshold]
    if not eligible:
        return Explanation(kind="counterfactual_value", foil=(op, threshold),
                           query_action=pred, foil_unreachable=True)
    _, lid, point, changed = _select_minimal(tree, state, eligible)
    return Explanation(
        kind="counterfactual_value",
        bounds=_changed_bounds(state, tree.leaves[lid].box, changed),
        foil=(op, threshold), target_leaf=lid, foil_point=point,
        changed_features=[int(f) for f in changed], query_action=pred)


def mbb_intersects(lo, hi, box: Box) -> bool:
    """Whether the closed box [lo, hi] meets a half-open leaf region."""
    return bool(np.all(lo < box.upper) and np.all(hi >= box.lower))


def temporal(tree: TripleTree, s_t, s_next) -> Explanation:
    """Explain an action change between consecutive states.

    Finds the minimal perturbation of ``s_t`` whose bounding box with
    ``s_next`` touches only leaves predicting the successor's action, so
    the reported rule covers the whole transition.  Falls back to the plain
    counterfactual, marked non-minimal, when no candidate satisfies that
    constraint.
    """
    s_t = np.asarray(s_t, dtype=float)
    s_next = np.asarray(s_next, dtype=float)
    a_t = predict(tree, s_t).action
    a_n = predict(tree, s_next).action
    if _actions_equal(a_t, a_n):
        raise ParameterError("actions at s_t and s_next do not differ")

    foil_ids = [lid for lid, leaf in tree.leaves.items()
                if _actions_equal(leaf.action_pred, a_n)]
    best = None
    for lid in sorted(foil_ids):
        box = tree.leaves[lid].box
        point = _project_into_leaf(s_t, box, tree.feature_range)
        lo = np.minimum(point, s_next)
        hi = np.maximum(point, s_next)
        pure = all(_actions_equal(leaf.action_pred, a_n)
                   for leaf in tree.leaves.values()
                   if mbb_intersects(lo, hi, leaf.box))
        if not pure:
            continue
        changed, l0, l2 = _change_metrics(s_t, point, tree.feature_range)
        key = (l0, l2, lid)
        if best is None or key < best[0]:
            best = (key, lid, point, changed)

    if best is None:
        fallback = counterfactual_action(tree, s_t, a_n)
        fallback.kind = "temporal"
        fallback.query_action = a_t
        fallback.unconstrained_fallback = True
        return fallback
    _, lid, point, changed = best
    return Explanation(
        kind="temporal",
        bounds=_changed_bounds(s_t, tree.leaves[lid].box, changed),
        foil=a_n, target_leaf=lid, foil_point=point,
        changed_features=[int(f) for f in changed], query_action=a_t)


# ---------------------------------------------------------------------------
# Renderers
# ---------------------------------------------------------------------------

def _fmt_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, np.ndarray):
        return "(" + ", ".join(f"{float(x):g}" for x in v) + ")"
    return f"{float(v):g}"


def _fmt_bounds(bounds, feature_names) -> str:
    per_feature: dict = {}
    for f, rel, tau in bounds:
        per_feature.setdefault(f, {})[rel] = tau
    parts = []
    for f in sorted(per_feature):
        name = feature_names[f]
        sides = per_feature[f]
        if ">=" in sides and "<" in sides:
            parts.append(f"{name} in [{sides['>=']:g}, {sides['<']:g}]")
        elif ">=" in sides:
            parts.append(f"{name} >= {sides['>=']:g}")
        else:
            parts.append(f"{name} < {sides['<']:g}")
    return " and ".join(parts)


def render_text(tree: TripleTree, expl: Explanation) -> str:
    names = tree.feature_names
    conds = _fmt_bounds(expl.bounds, names)
    if expl.kind == "factual":
        if not conds:
            return f"Action = {_fmt_value(expl.query_action)} always"
        return f"Action = {_fmt_value(expl.query_action)} because {conds}"
    if expl.kind == "counterfactual_action":
        if expl.foil_unreachable:
            return (f"Action = {_fmt_value(expl.foil)} is never predicted "
                    f"by the model (foil unreachable)")
        if not conds:
            return f"Action would = {_fmt_value(expl.foil)} with no change in state"
        return f"Action would = {_fmt_value(expl.foil)} if {conds}"
    if expl.kind == "counterfactual_value":
        op, v = expl.foil
        if expl.foil_unreachable:
            return f"Value {op} {v:g} is never predicted by the model (foil unreachable)"
        if not conds:
            return f"Value would {op} {v:g} with no change in state"
        return f"Value would {op} {v:g} if {conds}"
    if expl.kind == "temporal":
        suffix = " (non-minimal)" if expl.unconstrained_fallback else ""
        if expl.foil_unreachable:
            return (f"Action changed {_fmt_value(expl.query_action)} -> "
                    f"{_fmt_value(expl.foil)} (no explaining region found)")
        return (f"Action changed {_fmt_value(expl.query_action)} -> "
                f"{_fmt_value(expl.foil)} because {conds}{suffix}")
    raise ParameterError(f"unknown explanation kind {expl.kind!r}")


def render_json(expl: Explanation) -> dict:
    def plain(v):
        if isinstance(v, np.ndarray):
            return [float(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        if isinstance(v, tuple):
            return list(v)
        return v

    return {
        "kind": expl.kind,
        "bounds": [[int(f), rel, float(tau)] for f, rel, tau in expl.bounds],
        "foil": plain(expl.foil),
        "target_leaf": expl.target_leaf,
        "foil_point": plain(expl.foil_point),
        "changed_features": [int(f) for f in expl.changed_features],
        "query_action": plain(expl.query_action),
        "foil_unreachable": expl.foil_unreachable,
        "unconstrained_fallback": expl.unconstrained_fallback,
    }
