"""The partition tree: best-first growth, prediction, transition statistics,
loss evaluation, and JSON serialisation.

Growth repeatedly picks the leaf with the highest population-weighted,
root-normalised, theta-weighted impurity and applies the best axis-aligned
split found for it, stopping at the leaf budget or when no leaf admits a
split with positive hybrid quality.  After growth the tree is immutable and
every query is read-only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .dataset import (CONTINUOUS_SCALAR, CONTINUOUS_VECTOR, DISCRETE,
                      AugmentedDataset)
from .errors import ParameterError
from .impurity import (ImpurityTriple, best_split, node_impurity,
                       validate_theta)

SERIAL_VERSION = 1


@dataclass
class Box:
    """Axis-aligned hyperrectangle, half-open: lower <= x < upper."""

    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def unbounded(cls, d: int) -> "Box":
        return cls(np.full(d, -np.inf), np.full(d, np.inf))

    def contains(self, state) -> bool:
        s = np.asarray(state, dtype=float)
        return bool(np.all(s >= self.lower) and np.all(s < self.upper))

    def split(self, feature: int, threshold: float) -> tuple["Box", "Box"]:
        left = Box(self.lower.copy(), self.upper.copy())
        right = Box(self.lower.copy(), self.upper.copy())
        left.upper[feature] = threshold
        right.lower[feature] = threshold
        return left, right

    def clipped(self, feature_range: np.ndarray) -> "Box":
        """Bounds clipped into the dataset feature ranges (finite sides)."""
        return Box(np.maximum(self.lower, feature_range[:, 0]),
                   np.minimum(self.upper, feature_range[:, 1]))

    def center(self, feature_range: np.ndarray) -> np.ndarray:
        c = self.clipped(feature_range)
        return (c.lower + c.upper) / 2.0


@dataclass
class Leaf:
    id: int
    box: Box
    n: int
    impurity: ImpurityTriple
    action_pred: object
    value_pred: float
    deriv_pred: np.ndarray
    deriv_low_confidence: bool
    n_deriv: int
    density: float
    members: np.ndarray | None = None
    transitions: dict | None = None  # dest leaf id (None = episode end) -> (P, T)


class Prediction(NamedTuple):
    action: object
    value: float
    derivative: np.ndarray
    deriv_low_confidence: bool


@dataclass
class Node:
    feature: int | None = None
    threshold: float | None = None
    left: int | None = None
    right: int | None = None
    leaf_id: int | None = None


@dataclass
class TripleTree:
    nodes: list
    leaves: dict
    theta: np.ndarray
    gamma: float
    sigma: np.ndarray
    feature_range: np.ndarray
    medians: np.ndarray
    feature_names: list
    action_kind: str
    root_impurity: ImpurityTriple
    n_samples: int
    action_labels: list | None = None
    action_sigma: np.ndarray | None = None
    split_log: list = field(default_factory=list)
    _leaf_node: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.feature_range.shape[0]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def leaf(self, leaf_id: int) -> Leaf:
        return self.leaves[leaf_id]

    def ordered_leaves(self) -> list:
        return [self.leaves[k] for k in sorted(self.leaves)]


def leaf_priority(leaf: Leaf, theta, root_impurity: ImpurityTriple) -> float:
    """Population-weighted, root-normalised, theta-weighted leaf impurity."""
    roots = root_impurity.as_array()
    imps = leaf.impurity.as_array()
    theta = np.asarray(theta, dtype=float)
    total = 0.0
    for c in range(3):
        if roots[c] > 0:
            total += theta[c] * imps[c] / roots[c]
    return leaf.n * total


def select_best_leaf(leaves: dict, theta, root_impurity: ImpurityTriple,
                     splittable=None) -> int | None:
    """Leaf id maximising the growth priority, earliest-created on ties.

    ``splittable`` optionally restricts the choice; returns None when no
    leaf is eligible, which signals growth termination.
    """
    best_id, best_p = None, -np.inf
    for lid in sorted(leaves):
        if splittable is not None and lid not in splittable:
            continue
        p = leaf_priority(leaves[lid], theta, root_impurity)
        if p > best_p:
            best_id, best_p = lid, p
    return best_id


def grow(data: AugmentedDataset, theta, max_leaves: int, min_leaf: int = 1,
         snapshot_cb: Callable | None = None) -> TripleTree:
    """Fit a tree to an augmented dataset under a leaf budget.

    ``snapshot_cb(tree, n_leaves, losses)`` is invoked once for the root and
    after every split with the training losses at that leaf count, computed
    incrementally from leaf statistics.
    """
    theta = validate_theta(theta)
    if max_leaves < 1:
        raise ParameterError("max_leaves must be >= 1")
    if min_leaf < 1:
        raise ParameterError("min_leaf must be >= 1")
    if data.n == 0:
        raise ParameterError("cannot grow a tree on an empty dataset")

    all_idx = np.arange(data.n)
    root_imp = node_impurity(data, all_idx)
    tree = TripleTree(
        nodes=[], leaves={}, theta=theta, gamma=data.gamma,
        sigma=data.sigma.copy(), feature_range=data.feature_range.copy(),
        medians=data.medians.copy(), feature_names=list(data.feature_names),
        action_kind=data.action_kind, root_impurity=root_imp,
        n_samples=data.n,
        action_labels=(list(data.action_labels) if data.action_labels is not None
                       else None),
        action_sigma=(data.action_sigma.copy() if data.action_sigma is not None
                      else None))

    acc = _LossAccumulator(data, tree)
    root_leaf = _make_leaf(data, tree, 0, Box.unbounded(data.d), all_idx,
                           parent_deriv=np.zeros(data.d))
    tree.nodes.append(Node(leaf_id=0))
    tree.leaves[0] = root_leaf
    tree._leaf_node[0] = 0
    acc.add(root_leaf)
    if snapshot_cb is not None:
        snapshot_cb(tree, 1, acc.losses())

    next_id = 1
    unsplittable: set = set()
    while len(tree.leaves) < max_leaves:
        lid = select_best_leaf(tree.leaves, theta, root_imp,
                               splittable=set(tree.leaves) - unsplittable)
        if lid is None:
            break
        leaf = tree.leaves[lid]
        if leaf_priority(leaf, theta, root_imp) <= 0:
            break  # no remaining leaf can yield a positive-quality split
        cand = best_split(data, leaf.members, root_imp, theta, min_leaf=min_leaf)
        if cand is None:
            unsplittable.add(lid)
            continue

        lbox, rbox = leaf.box.split(cand.feature, cand.threshold)
        parent_deriv = leaf.deriv_pred
        left = _make_leaf(data, tree, next_id, lbox, cand.left_idx, parent_deriv)
        right = _make_leaf(data, tree, next_id + 1, rbox, cand.right_idx,
                           parent_deriv)
        node_i = tree._leaf_node.pop(lid)
        li, ri = len(tree.nodes), len(tree.nodes) + 1
        tree.nodes.append(Node(leaf_id=left.id))
        tree.nodes.append(Node(leaf_id=right.id))
        tree.nodes[node_i] = Node(feature=cand.feature,
                                  threshold=cand.threshold, left=li, right=ri)
        del tree.leaves[lid]
        tree.leaves[left.id] = left
        tree.leaves[right.id] = right
        tree._leaf_node[left.id] = li
        tree._leaf_node[right.id] = ri
        tree.split_log.append((lid, cand.feature, cand.threshold))
        next_id += 2

        acc.remove(leaf)
        acc.add(left)
        acc.add(right)
        if snapshot_cb is not None:
            snapshot_cb(tree, len(tree.leaves), acc.losses())
    return tree


def _make_leaf(data, tree, leaf_id, box, members, parent_deriv) -> Leaf:
    imp = node_impurity(data, members)
    if data.action_kind == DISCRETE:
        counts = np.bincount(data.action_codes[members],
                             minlength=data.action_labels.size)
        action = data.action_labels[int(np.argmax(counts))]
        action = action.item() if hasattr(action, "item") else action
    elif data.action_kind == CONTINUOUS_SCALAR:
        action = float(data.actions[members].mean())
    else:
        action = data.actions[members].mean(axis=0)
    value = float(data.V[members].mean())
    mask = data.has_deriv[members]
    n_deriv = int(mask.sum())
    if n_deriv > 0:
        deriv = data.D[members][mask].mean(axis=0)
        low_conf = False
    else:
        deriv = np.asarray(parent_deriv, dtype=float).copy()
        low_conf = True
    return Leaf(id=leaf_id, box=box, n=members.size, impurity=imp,
                action_pred=action, value_pred=value, deriv_pred=deriv,
                deriv_low_confidence=low_conf, n_deriv=n_deriv,
                density=_leaf_density(box, members.size, tree.feature_range),
                members=members)


def _leaf_density(box, n, feature_range) -> float:
    clipped = box.clipped(feature_range)
    widths = feature_range[:, 1] - feature_range[:, 0]
    lengths = clipped.upper - clipped.lower
    norm = np.where(widths > 0, lengths / np.where(widths > 0, widths, 1.0), 1.0)
    volume = float(np.prod(norm))
    return n / max(volume, 1e-300)


class _LossAccumulator:
    """Running training-loss totals maintained across growth steps."""

    def __init__(self, data, tree):
        self.data = data
        self.tree = tree
        self.n = data.n
        self.m_total = int(data.has_deriv.sum())
        self.action_err = 0.0
        self.action_sq = None
        if data.action_kind == CONTINUOUS_VECTOR:
            self.action_sq = np.zeros(data.actions.shape[1])
        self.value_sq = 0.0
        self.deriv_sq = np.zeros(data.d)

    def _leaf_terms(self, leaf):
        data = self.data
        members = leaf.members
        if data.action_kind == DISCRETE:
            counts = np.bincount(data.action_codes[members],
                                 minlength=data.action_labels.size)
            a_err = float(members.size - counts.max())
            a_sq = None
        elif data.action_kind == CONTINUOUS_SCALAR:
            a = data.actions[members]
            a_err = float(np.sum((a - a.mean()) ** 2))
            a_sq = None
        else:
            a = data.actions[members]
            a_err = 0.0
            a_sq = np.sum((a - a.mean(axis=0)) ** 2, axis=0)
        v = data.V[members]
        v_sq = float(np.sum((v - v.mean()) ** 2))
        mask = data.has_deriv[members]
        if mask.any():
            dd = data.D[members][mask]
            d_sq = np.sum((dd - dd.mean(axis=0)) ** 2, axis=0)
        else:
            d_sq = np.zeros(data.d)
        return a_err, a_sq, v_sq, d_sq

    def add(self, leaf, sign=1.0):
        a_err, a_sq, v_sq, d_sq = self._leaf_terms(leaf)
        self.action_err += sign * a_err
        if a_sq is not None:
            self.action_sq += sign * a_sq
        self.value_sq += sign * v_sq
        self.deriv_sq += sign * d_sq

    def remove(self, leaf):
        self.add(leaf, sign=-1.0)

    def losses(self):
        data = self.data
        if data.action_kind == DISCRETE:
            a_loss = self.action_err / self.n
        elif data.action_kind == CONTINUOUS_SCALAR:
            a_loss = float(np.sqrt(max(self.action_err, 0.0) / self.n))
        else:
            rms = np.sqrt(np.maximum(self.action_sq, 0.0) / self.n)
            keep = data.action_sigma > 0
            a_loss = float(np.sum(rms[keep] / data.action_sigma[keep]))
        v_loss = float(np.sqrt(max(self.value_sq, 0.0) / self.n))
        if self.m_total > 0:
            rms = np.sqrt(np.maximum(self.deriv_sq, 0.0) / self.m_total)
            keep = self.tree.sigma > 0
            d_loss = float(np.sum(rms[keep] / self.tree.sigma[keep]))
        else:
            d_loss = 0.0
        return (float(a_loss), v_loss, d_loss)


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def leaf_of(tree: TripleTree, state) -> int:
    """Leaf id reached by propagating a state from the root.

    States exactly on a threshold go right (the >= side).
    """
    s = np.asarray(state, dtype=float)
    i = 0
    node = tree.nodes[i]
    while node.leaf_id is None:
        i = node.left if s[node.feature] < node.threshold else node.right
        node = tree.nodes[i]
    return node.leaf_id


def assign_leaves(tree: TripleTree, states) -> np.ndarray:
    """Vectorised ``leaf_of`` for a (n, d) state matrix."""
    states = np.asarray(states, dtype=float)
    out = np.empty(states.shape[0], dtype=np.int64)
    stack = [(0, np.arange(states.shape[0]))]
    while stack:
        node_i, rows = stack.pop()
        if rows.size == 0:
            continue
        node = tree.nodes[node_i]
        if node.leaf_id is not None:
            out[rows] = node.leaf_id
        else:
            go_left = states[rows, node.feature] < node.threshold
            stack.append((node.left, rows[go_left]))
            stack.append((node.right, rows[~go_left]))
    return out


def predict(tree: TripleTree, state) -> Prediction:
    leaf = tree.leaves[leaf_of(tree, state)]
    return Prediction(leaf.action_pred, leaf.value_pred,
                      leaf.deriv_pred.copy(), leaf.deriv_low_confidence)


# ---------------------------------------------------------------------------
# Transition statistics
# ---------------------------------------------------------------------------

def compute_transitions(tree: TripleTree, data: AugmentedDataset) -> TripleTree:
    """Estimate sequence-level leaf transition probabilities and durations.

    Sequences are runs of consecutive samples in one leaf, never spanning
    episode boundaries.  A run ending with episode termination records a
    transition to the end marker (None); a run cut off by truncation records
    nothing.
    """
    assign = assign_leaves(tree, data.states)
    counts: dict = {lid: {} for lid in tree.leaves}
    lens: dict = {lid: {} for lid in tree.leaves}
    for start, stop, terminal in data.episode_slices:
        seq = assign[start:stop]
        i = 0
        while i < seq.size:
            j = i + 1
            while j < seq.size and seq[j] == seq[i]:
                j += 1
            src = int(seq[i])
            if j < seq.size:
                dest = int(seq[j])
            elif terminal:
                dest = None
            else:
                i = j
                continue  # truncated run: no transition observed
            counts[src][dest] = counts[src].get(dest, 0) + 1
            lens[src][dest] = lens[src].get(dest, 0) + (j - i)
            i = j

    for lid, leaf in tree.leaves.items():
        total = sum(counts[lid].values())
        if total == 0:
            leaf.transitions = {}
            continue
        leaf.transitions = {
            dest: (c / total, lens[lid][dest] / c)
            for dest, c in counts[lid].items()}
    return tree


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def evaluate_losses(tree: TripleTree, data: AugmentedDataset):
    """(action, value, derivative) prediction losses on a dataset.

    Action loss is the misclassification rate for discrete actions and the
    RMS error for continuous ones (per-dimension RMS scaled by the model's
    action spreads, summed, for vector actions).  Value loss is the RMS
    error on returns.  Derivative loss sums per-feature RMS error scaled by
    1/sigma over samples that have a derivative.
    """
    assign = assign_leaves(tree, data.states)
    ids = sorted(tree.leaves)
    pos = {lid: k for k, lid in enumerate(ids)}
    rows = np.array([pos[int(a)] for a in assign])

    if tree.action_kind == DISCRETE:
        preds = np.asarray([tree.leaves[lid].action_pred for lid in ids],
                           dtype=object)
        actual = np.asarray([a for a in data.actions], dtype=object)
        a_loss = float(np.mean(preds[rows] != actual))
    elif tree.action_kind == CONTINUOUS_SCALAR:
        preds = np.array([tree.leaves[lid].action_pred for lid in ids])
        a_loss = float(np.sqrt(np.mean((preds[rows] - data.actions) ** 2)))
    else:
        preds = np.stack([tree.leaves[lid].action_pred for lid in ids])
        err = preds[rows] - data.actions
        rms = np.sqrt(np.mean(err * err, axis=0))
        keep = tree.action_sigma > 0
        a_loss = float(np.sum(rms[keep] / tree.action_sigma[keep]))

    v_preds = np.array([tree.leaves[lid].value_pred for lid in ids])
    v_loss = float(np.sqrt(np.mean((v_preds[rows] - data.V) ** 2)))

    mask = data.has_deriv
    if mask.any():
        d_preds = np.stack([tree.leaves[lid].deriv_pred for lid in ids])
        err = d_preds[rows[mask]] - data.D[mask]
        rms = np.sqrt(np.mean(err * err, axis=0))
        keep = tree.sigma > 0
        d_loss = float(np.sum(rms[keep] / tree.sigma[keep]))
    else:
        d_loss = 0.0
    return (a_loss, v_loss, d_loss)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def _num(x):
    return None if x is None else float(x)


def _side(v):
    return None if np.isinf(v) else float(v)


def serialize(tree: TripleTree) -> bytes:
    """Lossless JSON encoding of the tree (sample memberships excluded)."""
    meta = {
        "d": tree.d,
        "feature_names": list(tree.feature_names),
        "theta": [float(v) for v in tree.theta],
        "gamma": float(tree.gamma),
        "sigma": [float(v) for v in tree.sigma],
        "ranges": [[float(a), float(b)] for a, b in tree.feature_range],
        "medians": [float(v) for v in tree.medians],
        "action_kind": tree.action_kind,
        "root_impurity": [float(v) for v in tree.root_impurity.as_array()],
        "n_samples": tree.n_samples,
    }
    if tree.action_labels is not None:
        meta["action_labels"] = [a if isinstance(a, str) else float(a)
                                 for a in tree.action_labels]
    if tree.action_sigma is not None:
        meta["action_sigma"] = [float(v) for v in tree.action_sigma]

    nodes = []
    for node in tree.nodes:
        if node.leaf_id is None:
            nodes.append({"f": node.feature, "tau": float(node.threshold),
                          "left": node.left, "right": node.right})
        else:
            leaf = tree.leaves[node.leaf_id]
            if leaf.transitions is None:
                trans = None
            else:
                trans = sorted(
                    ([dest, float(p), float(t)]
                     for dest, (p, t) in leaf.transitions.items()),
                    key=lambda e: (e[0] is None, e[0]))
            action = leaf.action_pred
            if isinstance(action, np.ndarray):
                action = [float(v) for v in action]
            elif not isinstance(action, str):
                action = float(action)
            nodes.append({"leaf": {
                "id": leaf.id,
                "box": [[_side(a), _side(b)]
                        for a, b in zip(leaf.box.lower, leaf.box.upper)],
                "n": int(leaf.n),
                "n_deriv": int(leaf.n_deriv),
                "preds": {
                    "action": action,
                    "value": float(leaf.value_pred),
                    "deriv": [float(v) for v in leaf.deriv_pred],
                    "deriv_low_confidence": bool(leaf.deriv_low_confidence),
                },
                "impurity": [float(v) for v in leaf.impurity.as_array()],
                "transitions": trans,
                "density": float(leaf.density),
            }})
    doc = {"version": SERIAL_VERSION, "meta": meta, "nodes": nodes}
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def deserialize(payload: bytes) -> TripleTree:
    try:
        doc = json.loads(payload.decode("utf-8") if isinstance(payload, bytes)
                         else payload)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParameterError(f"corrupt tree payload: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != SERIAL_VERSION:
        raise ParameterError(
            f"unsupported tree payload version {doc.get('version')!r}"
            if isinstance(doc, dict) else "corrupt tree payload")
    meta = doc["meta"]
    d = int(meta["d"])
    tree = TripleTree(
        nodes=[], leaves={},
        theta=np.asarray(meta["theta"], dtype=float),
        gamma=float(meta["gamma"]),
        sigma=np.asarray(meta["sigma"], dtype=float),
        feature_range=np.asarray(meta["ranges"], dtype=float),
        medians=np.asarray(meta["medians"], dtype=float),
        feature_names=list(meta["feature_names"]),
        action_kind=meta["action_kind"],
        root_impurity=ImpurityTriple(*meta["root_impurity"]),
        n_samples=int(meta["n_samples"]),
        action_labels=meta.get("action_labels"),
        action_sigma=(np.asarray(meta["action_sigma"], dtype=float)
                      if "action_sigma" in meta else None))
    for i, entry in enumerate(doc["nodes"]):
        if "leaf" in entry:
            rec = entry["leaf"]
            lower = np.array([(-np.inf if a is None else a)
                              for a, _ in rec["box"]])
            upper = np.array([(np.inf if b is None else b)
                              for _, b in rec["box"]])
            preds = rec["preds"]
            action = preds["action"]
            if tree.action_kind == CONTINUOUS_VECTOR:
                action = np.asarray(action, dtype=float)
            trans = rec["transitions"]
            if trans is not None:
                trans = {(None if dest is None else int(dest)): (float(p), float(t))
                         for dest, p, t in trans}
            leaf = Leaf(
                id=int(rec["id"]), box=Box(lower, upper), n=int(rec["n"]),
                impurity=ImpurityTriple(*rec["impurity"]),
                action_pred=action, value_pred=float(preds["value"]),
                deriv_pred=np.asarray(preds["deriv"], dtype=float),
                deriv_low_confidence=bool(preds["deriv_low_confidence"]),
                n_deriv=int(rec["n_deriv"]), density=float(rec["density"]),
                transitions=trans)
            tree.nodes.append(Node(leaf_id=leaf.id))
            tree.leaves[leaf.id] = leaf
            tree._leaf_node[leaf.id] = i
        else:
            tree.nodes.append(Node(feature=int(entry["f"]),
                                   threshold=float(entry["tau"]),
                                   left=int(entry["left"]),
                                   right=int(entry["right"])))
    if d != tree.d:
        raise ParameterError("tree payload dimension mismatch")
    return tree


def fit(data: AugmentedDataset, theta, max_leaves: int, min_leaf: int = 1,
        snapshot_cb=None) -> TripleTree:
    """Grow a tree and attach transition statistics from the fitting data."""
    tree = grow(data, theta, max_leaves, min_leaf=min_leaf,
                snapshot_cb=snapshot_cb)
    return compute_transitions(tree, data)
