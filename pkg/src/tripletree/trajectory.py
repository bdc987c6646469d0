"""Leaf transition graphs, maximum-probability leaf paths, and alignment of
piecewise-linear trajectories to per-leaf motion estimates.

Edge costs are negative log probabilities, so an additive shortest path is
the maximum-probability sequence.  Alignment runs projected gradient descent
on interior polyline nodes, each constrained to the boundary face it was
initialised on.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tree import Box, TripleTree

END = None  # episode-termination sink


@dataclass
class LeafGraph:
    """Directed graph over leaf ids (plus the termination sink)."""

    edges: dict = field(default_factory=dict)  # src -> [(dest, p, t, cost), ...]
    boxes: dict = field(default_factory=dict)  # leaf id -> Box
    node_ids: list = field(default_factory=list)

    def out_edges(self, src):
        return self.edges.get(src, [])


@dataclass
class TrajectoryPath:
    leaves: list
    probability: float
    expected_duration: float
    nodes: np.ndarray | None = None   # (len(leaves) + 1, d) once aligned
    objective: float | None = None
    objective_history: list | None = None  # accepted objective per iteration
    face_constraints: list | None = None   # per interior node: dict of face data

    def to_json(self) -> dict:
        return {
            "leaves": [(-1 if l is END else int(l)) for l in self.leaves],
            "probability": float(self.probability),
            "expected_duration": float(self.expected_duration),
            "nodes": (None if self.nodes is None
                      else [[float(v) for v in row] for row in self.nodes]),
            "objective": (None if self.objective is None
                          else float(self.objective)),
        }


def build_leaf_graph(tree: TripleTree) -> LeafGraph:
    """One edge per recorded positive-probability transition; sink included."""
    graph = LeafGraph()
    graph.node_ids = sorted(tree.leaves)
    for lid in graph.node_ids:
        leaf = tree.leaves[lid]
        graph.boxes[lid] = leaf.box
        trans = leaf.transitions or {}
        out = []
        for dest in sorted(trans, key=lambda k: (k is END, k)):
            p, t = trans[dest]
            if p > 0:
                out.append((dest, float(p), float(t), float(-np.log(p))))
        if out:
            graph.edges[lid] = out
    return graph


def most_probable_path(graph: LeafGraph, start, end) -> TrajectoryPath | None:
    """Highest-probability leaf sequence from start to end, or None.

    A None result means the end is unreachable from the start under the
    recorded transitions, which is itself informative.
    """
    if start == end:
        return TrajectoryPath(leaves=[start], probability=1.0,
                              expected_duration=0.0)
    dist = {start: 0.0}
    prev: dict = {}
    heap = [(0.0, 0, start)]
    counter = 1
    settled = set()
    while heap:
        cost, _, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == end:
            seq = [node]
            while seq[-1] != start:
                seq.append(prev[seq[-1]])
            seq.reverse()
            prob, dur = 1.0, 0.0
            for a, b in zip(seq, seq[1:]):
                for dest, p, t, _ in graph.out_edges(a):
                    if dest == b:
                        prob *= p
                        dur += t
                        break
            return TrajectoryPath(leaves=seq, probability=prob,
                                  expected_duration=dur)
        for dest, _, _, ecost in graph.out_edges(node):
            if dest in settled:
                continue
            nd = cost + ecost
            if nd < dist.get(dest, np.inf):
                dist[dest] = nd
                prev[dest] = node
                heapq.heappush(heap, (nd, counter, dest))
                counter += 1
    return None


def zone_paths(graph: LeafGraph, start_zone: Box, end_zone: Box,
               min_probability: float = 0.0) -> list:
    """Most probable path for every (start, end) leaf pair intersecting the
    two zones, filtered by probability; sorted most probable first."""
    if np.any(start_zone.lower > start_zone.upper) or \
            np.any(end_zone.lower > end_zone.upper):
        return []  # a degenerate zone box contains nothing
    starts = [lid for lid in graph.node_ids
              if _zone_intersects(start_zone, graph.boxes[lid])]
    ends = [lid for lid in graph.node_ids
            if _zone_intersects(end_zone, graph.boxes[lid])]
    paths = []
    for ls in starts:
        for le in ends:
            path = most_probable_path(graph, ls, le)
            if path is not None and path.probability >= min_probability:
                paths.append(path)
    paths.sort(key=lambda p: (-p.probability, p.leaves[0], p.leaves[-1]))
    return paths


def _zone_intersects(zone: Box, leaf_box: Box) -> bool:
    return bool(np.all(zone.lower < leaf_box.upper)
                and np.all(zone.upper >= leaf_box.lower))


# ---------------------------------------------------------------------------
# Path alignment
# ---------------------------------------------------------------------------

@dataclass
class _Face:
    feature: int
    value: float
    lower: np.ndarray  # rectangle bounds; lower[feature] == upper[feature]
    upper: np.ndarray
    init: np.ndarray
    visible_sign: float = 0.0

    def project(self, p: np.ndarray) -> np.ndarray:
        q = np.clip(p, self.lower, self.upper)
        q[self.feature] = self.value
        return q


def _shared_face(a: Box, b: Box) -> _Face | None:
    d = a.lower.size
    for f in range(d):
        for val in ((a.upper[f],) if a.upper[f] == b.lower[f] else ()) + \
                   ((a.lower[f],) if b.upper[f] == a.lower[f] else ()):
            lo = np.maximum(a.lower, b.lower)
            hi = np.minimum(a.upper, b.upper)
            lo[f] = hi[f] = val
            if np.all(lo <= hi):
                init = (lo + hi) / 2.0
                return _Face(feature=f, value=float(val), lower=lo, upper=hi,
                             init=init)
    return None


def _exit_face(a: Box, target: np.ndarray) -> _Face:
    """Face of box ``a`` first crossed by the ray from its centre toward a
    target point; used when a recorded transition joins non-adjacent boxes."""
    c = (a.lower + a.upper) / 2.0
    direction = target - c
    best_t, best_f, best_val = np.inf, 0, a.upper[0]
    for f in range(c.size):
        if direction[f] > 0:
            t = (a.upper[f] - c[f]) / direction[f]
            val = a.upper[f]
        elif direction[f] < 0:
            t = (a.lower[f] - c[f]) / direction[f]
            val = a.lower[f]
        else:
            continue
        if t < best_t:
            best_t, best_f, best_val = t, f, val
    if not np.isfinite(best_t):
        best_t = 0.0
    point = np.clip(c + min(best_t, 1.0) * direction, a.lower, a.upper)
    lo, hi = a.lower.copy(), a.upper.copy()
    lo[best_f] = hi[best_f] = best_val
    point[best_f] = best_val
    return _Face(feature=best_f, value=float(best_val), lower=lo, upper=hi,
                 init=point)


def align_path(tree: TripleTree, leaf_sequence, max_iters: int = 1000,
               step_size: float = 0.05, tol: float = 1e-8,
               endpoints=None) -> TrajectoryPath:
    """Fit a polyline through a leaf sequence whose segments point along the
    leaves' predicted derivatives.

    Interior nodes start on the boundary between consecutive leaves and are
    kept on that face throughout.  Gradient steps minimise the summed
    squared angle between each segment and its leaf's derivative, both
    rescaled by 1/sigma; a step that raises the objective is retried at half
    size, so the accepted objective sequence never increases.
    """
    seq = list(leaf_sequence)
    if any(l is END for l in seq):
        raise ParameterError("cannot align a path through the termination sink")
    if not seq:
        raise ParameterError("empty leaf sequence")
    prob, dur = 1.0, 0.0
    for a, b in zip(seq, seq[1:]):
        trans = tree.leaves[a].transitions or {}
        if b not in trans or trans[b][0] <= 0:
            raise ParameterError(f"no recorded transition {a} -> {b}")
        prob *= trans[b][0]
        dur += trans[b][1]

    boxes = [tree.leaves[l].box.clipped(tree.feature_range) for l in seq]
    k = len(seq)
    p_start = (np.asarray(endpoints[0], dtype=float) if endpoints is not None
               else (boxes[0].lower + boxes[0].upper) / 2.0)
    if k == 1:
        return TrajectoryPath(leaves=seq, probability=prob,
                              expected_duration=dur,
                              nodes=p_start[None, :].copy(), objective=0.0,
                              objective_history=[0.0], face_constraints=[])
    p_end = (np.asarray(endpoints[1], dtype=float) if endpoints is not None
             else (boxes[-1].lower + boxes[-1].upper) / 2.0)

    faces = []
    for j in range(1, k):
        face = _shared_face(boxes[j - 1], boxes[j])
        if face is None:
            face = _exit_face(boxes[j - 1], (boxes[j].lower + boxes[j].upper) / 2.0)
        faces.append(face)

    nodes = np.empty((k + 1, tree.d))
    nodes[0] = p_start
    nodes[k] = p_end
    for j, face in enumerate(faces, start=1):
        nodes[j] = face.init
    for j, face in enumerate(faces, start=1):
        face.visible_sign = float(np.sign(nodes[j][face.feature]
                                          - nodes[j - 1][face.feature]))

    w = np.where(tree.sigma > 0, 1.0 / np.where(tree.sigma > 0, tree.sigma, 1.0),
                 0.0)
    derivs = [tree.leaves[l].deriv_pred * w for l in seq]
    sigma_back = np.where(tree.sigma > 0, tree.sigma, 0.0)

    def angle_terms(ns):
        total = 0.0
        for j in range(1, k + 1):
            u = (ns[j] - ns[j - 1]) * w
            v = derivs[j - 1]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            if nu == 0 or nv == 0:
                continue
            c = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
            total += float(np.arccos(c)) ** 2
        return total

    def gradients(ns):
        g = np.zeros_like(ns)
        for j in range(1, k + 1):
            u = (ns[j] - ns[j - 1]) * w
            v = derivs[j - 1]
            nu, nv = np.linalg.norm(u), np.linalg.norm(v)
            if nu == 0 or nv == 0:
                continue
            c = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
            phi = float(np.arccos(c))
            s = max(np.sqrt(max(1.0 - c * c, 0.0)), 1e-12)
            du = -(2.0 * phi / s) * (v / (nu * nv) - c * u / (nu * nu))
            g[j] += du
            g[j - 1] -= du
        return g

    obj = angle_terms(nodes)
    history = [obj]
    step = float(step_size)
    it = 0
    while it < max_iters:
        it += 1
        grad = gradients(nodes)
        accepted = False
        trial_step = step
        for _ in range(40):
            trial = nodes.copy()
            for j, face in enumerate(faces, start=1):
                cand = nodes[j] - trial_step * grad[j] * sigma_back
                cand = face.project(cand)
                if face.visible_sign != 0:
                    incoming = cand[face.feature] - trial[j - 1][face.feature]
                    if incoming * face.visible_sign < 0:
                        cand = nodes[j]  # reject: node would cross its face
                trial[j] = cand
            new_obj = angle_terms(trial)
            if new_obj <= obj:
                accepted = True
                break
            trial_step /= 2.0
        if not accepted:
            break
        delta = obj - new_obj
        nodes, obj = trial, new_obj
        history.append(obj)
        step = min(trial_step * 1.2, float(step_size))
        if delta < tol:
            break

    return TrajectoryPath(
        leaves=seq, probability=prob, expected_duration=dur, nodes=nodes,
        objective=obj, objective_history=history,
        face_constraints=[{"feature": f.feature, "value": f.value,
                           "lower": f.lower.copy(), "upper": f.upper.copy()}
                          for f in faces])
