"""Visualisation exports: leaf maps, projection/slice views, quiver fields,
and a small deterministic SVG renderer.

All operations return plain JSON-serialisable dicts; rendering is a separate
step so the data can also feed external plotting tools.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .tree import TripleTree

SCALAR_ATTRIBUTES = ("action", "value", "action_impurity", "value_impurity",
                     "derivative_impurity", "density")


@dataclass
class PlaneSpec:
    """A two-feature viewing plane, with optional fixed values for slices."""

    f_x: int
    f_y: int
    n_x: int = 200
    n_y: int = 200
    fixed: dict = field(default_factory=dict)  # feature index -> value

    def validate(self, tree: TripleTree):
        if self.f_x == self.f_y:
            raise ParameterError("plane features must differ")
        for f in (self.f_x, self.f_y):
            if not 0 <= f < tree.d:
                raise ParameterError(f"plane feature {f} out of range")
        for f, v in self.fixed.items():
            lo, hi = tree.feature_range[f]
            if not lo <= v <= hi:
                raise ParameterError(
                    f"fixed value {v:g} for feature {f} outside data range")


def leaf_attribute(tree: TripleTree, leaf, attribute: str):
    """Scalar colouring attribute of a leaf; supports 'action.cmp' and
    'derivative.cmp' component access for vector quantities."""
    if attribute == "action":
        a = leaf.action_pred
        if isinstance(a, np.ndarray):
            raise ParameterError(
                "vector actions need a component, e.g. 'action.0'")
        return a
    if attribute == "value":
        return leaf.value_pred
    if attribute == "action_impurity":
        return leaf.impurity.action
    if attribute == "value_impurity":
        return leaf.impurity.value
    if attribute == "derivative_impurity":
        return leaf.impurity.derivative
    if attribute == "density":
        return leaf.density
    if attribute.startswith("action."):
        return float(np.asarray(leaf.action_pred).ravel()[int(attribute[7:])])
    if attribute.startswith("derivative."):
        return float(leaf.deriv_pred[int(attribute[11:])])
    if attribute == "derivative":
        raise ParameterError("derivative renders as a quiver; use quiver()")
    raise ParameterError(f"unknown colouring attribute {attribute!r}")


def direct_map(tree: TripleTree, attribute: str) -> dict:
    """One range-clipped rectangle per leaf, coloured by the attribute.

    Only valid when the state space has at most two features; higher
    dimensional trees must use projection or slicing.
    """
    if tree.d > 2:
        raise ParameterError(
            "direct maps need d <= 2; use pdp_projection or ice_slice")
    rects = []
    for lid in sorted(tree.leaves):
        leaf = tree.leaves[lid]
        box = leaf.box.clipped(tree.feature_range)
        val = leaf_attribute(tree, leaf, attribute)
        if tree.d == 2:
            rect = {"x0": float(box.lower[0]), "x1": float(box.upper[0]),
                    "y0": float(box.lower[1]), "y1": float(box.upper[1])}
        else:
            rect = {"x0": float(box.lower[0]), "x1": float(box.upper[0]),
                    "y0": 0.0, "y1": 1.0}
        rect["value"] = val
        rect["leaf"] = lid
        rects.append(rect)
    plane = [0, 1] if tree.d == 2 else [0]
    return {"plane": plane, "rects": rects,
            "x_range": [float(v) for v in tree.feature_range[0]],
            "y_range": ([float(v) for v in tree.feature_range[1]]
                        if tree.d == 2 else [0.0, 1.0])}


def _edges(tree, f, n):
    lo, hi = tree.feature_range[f]
    return np.linspace(lo, hi, n + 1)


def pdp_projection(tree: TripleTree, plane: PlaneSpec, attribute: str) -> dict:
    """Marginal view of a scalar attribute on a two-feature plane.

    Each grid cell averages the attribute over every leaf whose projection
    covers the cell centre, weighted by leaf sample count.
    """
    plane.validate(tree)
    x_edges = _edges(tree, plane.f_x, plane.n_x)
    y_edges = _edges(tree, plane.f_y, plane.n_y)
    cx = (x_edges[:-1] + x_edges[1:]) / 2.0
    cy = (y_edges[:-1] + y_edges[1:]) / 2.0
    acc = np.zeros((plane.n_y, plane.n_x))
    wsum = np.zeros((plane.n_y, plane.n_x))
    for lid in sorted(tree.leaves):
        leaf = tree.leaves[lid]
        val = leaf_attribute(tree, leaf, attribute)
        if isinstance(val, str):
            raise ParameterError("projections need numeric attributes")
        mx = (cx >= leaf.box.lower[plane.f_x]) & (cx < leaf.box.upper[plane.f_x])
        my = (cy >= leaf.box.lower[plane.f_y]) & (cy < leaf.box.upper[plane.f_y])
        if not (mx.any() and my.any()):
            continue
        w = float(leaf.n)
        cover = np.outer(my, mx)
        acc += cover * (w * float(val))
        wsum += cover * w
    values = np.divide(acc, wsum, out=np.zeros_like(acc), where=wsum > 0)
    return {"plane": [plane.f_x, plane.f_y],
            "x_edges": [float(v) for v in x_edges],
            "y_edges": [float(v) for v in y_edges],
            "values": [[float(v) for v in row] for row in values]}


def resolve_fixed(tree: TripleTree, plane: PlaneSpec) -> dict:
    """Fixed values for all off-plane features; dataset medians by default."""
    fixed = {}
    for f in range(tree.d):
        if f in (plane.f_x, plane.f_y):
            continue
        fixed[f] = float(plane.fixed.get(f, tree.medians[f]))
    return fixed


def ice_slice(tree: TripleTree, plane: PlaneSpec, attribute: str) -> dict:
    """Rectangles of every leaf cut by an axis-aligned planar cross-section.

    Off-plane features are pinned to the plane's fixed values (medians when
    unspecified), giving an individual conditional expectation view.
    """
    plane.validate(tree)
    fixed = resolve_fixed(tree, plane)
    rects = []
    for lid in sorted(tree.leaves):
        leaf = tree.leaves[lid]
        if not all(leaf.box.lower[f] <= v < leaf.box.upper[f]
                   for f, v in fixed.items()):
            continue
        box = leaf.box.clipped(tree.feature_range)
        rects.append({
            "x0": float(box.lower[plane.f_x]), "x1": float(box.upper[plane.f_x]),
            "y0": float(box.lower[plane.f_y]), "y1": float(box.upper[plane.f_y]),
            "value": leaf_attribute(tree, leaf, attribute), "leaf": lid})
    return {"plane": [plane.f_x, plane.f_y], "rects": rects,
            "fixed": {str(f): v for f, v in sorted(fixed.items())},
            "x_range": [float(v) for v in tree.feature_range[plane.f_x]],
            "y_range": [float(v) for v in tree.feature_range[plane.f_y]]}


def quiver(tree: TripleTree, plane: PlaneSpec | None = None,
           mode: str = "direct") -> dict:
    """Arrow field of predicted state change, one arrow per leaf centre.

    Leaves without their own derivative estimate are omitted.  ``direct``
    mode shows every leaf (d <= 2); ``slice`` mode only leaves cut by the
    plane's fixed values.
    """
    if mode not in ("direct", "slice"):
        raise ParameterError("quiver mode must be 'direct' or 'slice'")
    if mode == "direct":
        if tree.d > 2:
            raise ParameterError("direct quiver needs d <= 2; use slice mode")
        fx, fy = (0, 1) if tree.d == 2 else (0, 0)
        ids = sorted(tree.leaves)
        fixed = {}
    else:
        if plane is None:
            raise ParameterError("slice quiver needs a plane")
        plane.validate(tree)
        fx, fy = plane.f_x, plane.f_y
        fixed = resolve_fixed(tree, plane)
        ids = [lid for lid in sorted(tree.leaves)
               if all(tree.leaves[lid].box.lower[f] <= v
                      < tree.leaves[lid].box.upper[f]
                      for f, v in fixed.items())]
    arrows = []
    for lid in ids:
        leaf = tree.leaves[lid]
        if leaf.deriv_low_confidence:
            continue
        c = leaf.box.center(tree.feature_range)
        arrows.append({"x": float(c[fx]), "y": float(c[fy]),
                       "dx": float(leaf.deriv_pred[fx]),
                       "dy": float(leaf.deriv_pred[fy]), "leaf": lid})
    return {"plane": [fx, fy], "arrows": arrows,
            "fixed": {str(f): v for f, v in sorted(fixed.items())},
            "x_range": [float(v) for v in tree.feature_range[fx]],
            "y_range": [float(v) for v in tree.feature_range[fy]]}


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------

_VIRIDIS = [
    (68, 1, 84), (72, 40, 120), (62, 74, 137), (49, 104, 142),
    (38, 130, 142), (31, 158, 137), (53, 183, 121), (109, 205, 89),
    (253, 231, 37)]

_CATEGORICAL = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _heat(v: float) -> str:
    v = min(max(v, 0.0), 1.0)
    x = v * (len(_VIRIDIS) - 1)
    i = min(int(x), len(_VIRIDIS) - 2)
    f = x - i
    rgb = [round(a + (b - a) * f)
           for a, b in zip(_VIRIDIS[i], _VIRIDIS[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Canvas:
    """Maps data coordinates onto a fixed pixel frame (y up)."""

    def __init__(self, x_range, y_range, width, height, margin):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        self.ml, self.mr = margin, margin + 70  # room for the colour bar
        self.mt, self.mb = margin, margin
        self.w = width
        self.h = height
        self.pw = width - self.ml - self.mr
        self.ph = height - self.mt - self.mb

    def x(self, v):
        span = (self.x1 - self.x0) or 1.0
        return self.ml + (v - self.x0) / span * self.pw

    def y(self, v):
        span = (self.y1 - self.y0) or 1.0
        return self.mt + (self.y1 - v) / span * self.ph


def render_svg(payload: dict, style: dict | None = None,
               overlays: list | None = None) -> str:
    """Deterministic SVG for a rectangle map, value grid, or arrow field.

    Overlays are drawn on top: ``{"type": "path", "nodes": [[x, y], ...],
    "probability": p}`` polylines (opacity proportional to probability),
    ``{"type": "point", "xy": [x, y]}`` markers, and ``{"type": "segment",
    "from": [..], "to": [..]}`` arrows.
    """
    style = {**{"width": 640, "height": 480, "margin": 45, "title": ""},
             **(style or {})}
    if "rects" in payload:
        body, legend = _render_rects(payload, style)
    elif "values" in payload:
        body, legend = _render_grid(payload, style)
    elif "arrows" in payload:
        body, legend = _render_arrows(payload, style)
    else:
        raise ParameterError("payload is not a rects/grid/arrows document")
    canvas = _canvas_for(payload, style)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{canvas.w}" '
        f'height="{canvas.h}" viewBox="0 0 {canvas.w} {canvas.h}">',
        f'<rect x="0" y="0" width="{canvas.w}" height="{canvas.h}" fill="#ffffff"/>',
    ]
    parts.extend(body)
    parts.extend(_render_overlays(canvas, overlays or []))
    parts.append(
        f'<rect x="{_f(canvas.ml)}" y="{_f(canvas.mt)}" width="{_f(canvas.pw)}" '
        f'height="{_f(canvas.ph)}" fill="none" stroke="#000000"/>')
    parts.extend(_axis_labels(canvas, style))
    parts.extend(legend)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _canvas_for(payload, style):
    if "values" in payload:
        xr = [payload["x_edges"][0], payload["x_edges"][-1]]
        yr = [payload["y_edges"][0], payload["y_edges"][-1]]
    else:
        xr, yr = payload["x_range"], payload["y_range"]
    return _Canvas(xr, yr, style["width"], style["height"], style["margin"])


def _numeric_values(vals):
    return all(not isinstance(v, str) for v in vals)


def _render_rects(payload, style):
    canvas = _canvas_for(payload, style)
    vals = [r["value"] for r in payload["rects"]]
    out = []
    if _numeric_values(vals):
        vmin = min(vals) if vals else 0.0
        vmax = max(vals) if vals else 1.0
        span = (vmax - vmin) or 1.0
        color = lambda v: _heat((v - vmin) / span)
        legend = _colorbar(canvas, vmin, vmax)
    else:
        labels = sorted({str(v) for v in vals})
        cmap = {l: _CATEGORICAL[i % len(_CATEGORICAL)]
                for i, l in enumerate(labels)}
        color = lambda v: cmap[str(v)]
        legend = _swatches(canvas, labels, cmap)
    for r in payload["rects"]:
        x, y = canvas.x(r["x0"]), canvas.y(r["y1"])
        w = canvas.x(r["x1"]) - canvas.x(r["x0"])
        h = canvas.y(r["y0"]) - canvas.y(r["y1"])
        out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" '
                   f'height="{_f(h)}" fill="{color(r["value"])}" '
                   f'stroke="#ffffff" stroke-width="0.3"/>')
    return out, legend


def _render_grid(payload, style):
    canvas = _canvas_for(payload, style)
    values = payload["values"]
    flat = [v for row in values for v in row]
    vmin, vmax = (min(flat), max(flat)) if flat else (0.0, 1.0)
    span = (vmax - vmin) or 1.0
    xe, ye = payload["x_edges"], payload["y_edges"]
    out = []
    for iy, row in enumerate(values):
        for ix, v in enumerate(row):
            x, y = canvas.x(xe[ix]), canvas.y(ye[iy + 1])
            w = canvas.x(xe[ix + 1]) - x
            h = canvas.y(ye[iy]) - y
            out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" '
                       f'height="{_f(h)}" fill="{_heat((v - vmin) / span)}"/>')
    return out, _colorbar(canvas, vmin, vmax)


def _render_arrows(payload, style):
    canvas = _canvas_for(payload, style)
    arrows = payload["arrows"]
    mags = [np.hypot(a["dx"], a["dy"]) for a in arrows]
    top = max(mags) if mags else 1.0
    scale = 0.08 * min(canvas.pw, canvas.ph) / (top or 1.0)
    out = []
    for a in arrows:
        x, y = canvas.x(a["x"]), canvas.y(a["y"])
        dx, dy = a["dx"] * scale, -a["dy"] * scale
        tip_x, tip_y = x + dx, y + dy
        out.append(f'<line x1="{_f(x)}" y1="{_f(y)}" x2="{_f(tip_x)}" '
                   f'y2="{_f(tip_y)}" stroke="#202020" stroke-width="1"/>')
        norm = np.hypot(dx, dy)
        if norm > 1e-9:
            ux, uy = dx / norm, dy / norm
            left = (tip_x - 4 * ux + 2 * uy, tip_y - 4 * uy - 2 * ux)
            right = (tip_x - 4 * ux - 2 * uy, tip_y - 4 * uy + 2 * ux)
            out.append(
                f'<polygon points="{_f(tip_x)},{_f(tip_y)} {_f(left[0])},'
                f'{_f(left[1])} {_f(right[0])},{_f(right[1])}" fill="#202020"/>')
        else:
            out.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="1.5" '
                       f'fill="#202020"/>')
    return out, []


def _render_overlays(canvas, overlays):
    out = []
    for item in overlays:
        if item.get("type") == "path":
            nodes = item["nodes"]
            pts = " ".join(f"{_f(canvas.x(p[0]))},{_f(canvas.y(p[1]))}"
                           for p in nodes)
            opacity = min(max(float(item.get("probability", 1.0)), 0.0), 1.0)
            out.append(f'<polyline points="{pts}" fill="none" stroke="#ff2a2a" '
                       f'stroke-width="2" stroke-opacity="{opacity:.4f}"/>')
        elif item.get("type") == "point":
            x, y = item["xy"]
            out.append(f'<circle cx="{_f(canvas.x(x))}" cy="{_f(canvas.y(y))}" '
                       f'r="4" fill="#ff2a2a" stroke="#000000"/>')
        elif item.get("type") == "segment":
            (x0, y0), (x1, y1) = item["from"], item["to"]
            out.append(f'<line x1="{_f(canvas.x(x0))}" y1="{_f(canvas.y(y0))}" '
                       f'x2="{_f(canvas.x(x1))}" y2="{_f(canvas.y(y1))}" '
                       f'stroke="#ff2a2a" stroke-width="1.5" '
                       f'stroke-dasharray="4,3"/>')
    return out


def _axis_labels(canvas, style):
    out = []
    if style.get("title"):
        out.append(f'<text x="{_f(canvas.ml)}" y="{_f(canvas.mt - 10)}" '
                   f'font-family="monospace" font-size="13">{style["title"]}</text>')
    out.append(f'<text x="{_f(canvas.ml)}" y="{_f(canvas.mt + canvas.ph + 16)}" '
               f'font-family="monospace" font-size="10">{canvas.x0:.4g}</text>')
    out.append(f'<text x="{_f(canvas.ml + canvas.pw - 30)}" '
               f'y="{_f(canvas.mt + canvas.ph + 16)}" '
               f'font-family="monospace" font-size="10">{canvas.x1:.4g}</text>')
    out.append(f'<text x="{_f(canvas.ml - 40)}" y="{_f(canvas.mt + canvas.ph)}" '
               f'font-family="monospace" font-size="10">{canvas.y0:.4g}</text>')
    out.append(f'<text x="{_f(canvas.ml - 40)}" y="{_f(canvas.mt + 10)}" '
               f'font-family="monospace" font-size="10">{canvas.y1:.4g}</text>')
    xl = style.get("xlabel")
    yl = style.get("ylabel")
    if xl:
        out.append(f'<text x="{_f(canvas.ml + canvas.pw / 2)}" '
                   f'y="{_f(canvas.mt + canvas.ph + 30)}" '
                   f'font-family="monospace" font-size="11">{xl}</text>')
    if yl:
        out.append(f'<text x="12" y="{_f(canvas.mt + canvas.ph / 2)}" '
                   f'font-family="monospace" font-size="11">{yl}</text>')
    return out


def _colorbar(canvas, vmin, vmax):
    x = canvas.ml + canvas.pw + 18
    out = []
    n = 48
    for i in range(n):
        frac = i / (n - 1)
        y = canvas.mt + canvas.ph * (1 - (i + 1) / n)
        out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="14" '
                   f'height="{_f(canvas.ph / n + 0.5)}" fill="{_heat(frac)}"/>')
    out.append(f'<text x="{_f(x + 18)}" y="{_f(canvas.mt + canvas.ph)}" '
               f'font-family="monospace" font-size="10">{vmin:.4g}</text>')
    out.append(f'<text x="{_f(x + 18)}" y="{_f(canvas.mt + 10)}" '
               f'font-family="monospace" font-size="10">{vmax:.4g}</text>')
    return out


def _swatches(canvas, labels, cmap):
    x = canvas.ml + canvas.pw + 14
    out = []
    for i, label in enumerate(labels):
        y = canvas.mt + 18 * i
        out.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="12" height="12" '
                   f'fill="{cmap[label]}"/>')
        out.append(f'<text x="{_f(x + 16)}" y="{_f(y + 10)}" '
                   f'font-family="monospace" font-size="10">{label}</text>')
    return out
