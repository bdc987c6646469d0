"""Trace datasets: loading, validation, and value/derivative augmentation.

A trace is an ordered collection of episodes, each episode an ordered run of
(state, action, reward) samples recorded from an agent acting in its
environment.  Augmentation attaches to every sample a discounted return
computed inside its own episode and the one-step change in state, plus the
global statistics (derivative spread, feature ranges, medians) the rest of
the package normalises by.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, TraceFormatError

DISCRETE = "discrete"
CONTINUOUS_SCALAR = "continuous-scalar"
CONTINUOUS_VECTOR = "continuous-vector"

ACTION_KINDS = (DISCRETE, CONTINUOUS_SCALAR, CONTINUOUS_VECTOR)


@dataclass
class Episode:
    """One episode: temporally ordered samples plus a termination flag.

    ``terminal`` is True when the final sample ended the episode by reaching
    a terminal condition, False when recording was merely cut off.
    """

    states: np.ndarray   # (T, d) float64
    actions: np.ndarray  # (T,) labels/floats, or (T, m) float64 for vector actions
    rewards: np.ndarray  # (T,) float64
    terminal: bool

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass
class TraceDataset:
    """Validated ordered trace data.

    ``action_kind`` is one of ``discrete``, ``continuous-scalar``,
    ``continuous-vector``.  Discrete action labels may be strings or numbers;
    they are treated as categorical either way.
    """

    episodes: list[Episode]
    action_kind: str
    feature_names: list[str]

    def __post_init__(self):
        validate_trace(self)

    @property
    def d(self) -> int:
        return self.episodes[0].states.shape[1]

    @property
    def n_samples(self) -> int:
        return sum(len(ep) for ep in self.episodes)


def validate_trace(data: TraceDataset) -> None:
    if data.action_kind not in ACTION_KINDS:
        raise TraceFormatError(f"unknown action kind {data.action_kind!r}")
    if not data.episodes:
        raise TraceFormatError("dataset has no episodes")
    d = data.episodes[0].states.shape[1] if data.episodes[0].states.ndim == 2 else -1
    if len(data.feature_names) != d:
        raise TraceFormatError(
            f"{len(data.feature_names)} feature names for {d} state features")
    for i, ep in enumerate(data.episodes):
        if len(ep) == 0:
            raise TraceFormatError(f"episode {i} is empty")
        if ep.states.ndim != 2 or ep.states.shape[1] != d:
            raise TraceFormatError(
                f"episode {i}: state vectors do not all have {d} entries")
        if not np.all(np.isfinite(ep.states)):
            t = int(np.argwhere(~np.isfinite(ep.states))[0][0])
            raise TraceFormatError(f"episode {i} step {t}: non-finite state value")
        if not np.all(np.isfinite(ep.rewards)):
            raise TraceFormatError(f"episode {i}: non-finite reward")
        if data.action_kind == CONTINUOUS_VECTOR:
            if ep.actions.ndim != 2:
                raise TraceFormatError(f"episode {i}: vector actions must be 2-D")
            if not np.all(np.isfinite(ep.actions)):
                raise TraceFormatError(f"episode {i}: non-finite action")
        elif data.action_kind == CONTINUOUS_SCALAR:
            if not np.all(np.isfinite(ep.actions.astype(float))):
                raise TraceFormatError(f"episode {i}: non-finite action")


@dataclass
class AugmentedDataset:
    """A trace flattened to sample-major arrays with derived attributes.

    ``V`` holds the per-sample discounted return accumulated within the
    sample's episode; ``D`` the one-step state change, defined wherever a
    successor sample exists in the same episode (``has_deriv`` masks the
    rest; masked rows of ``D`` are zero and must not be read).  ``sigma`` is
    the population standard deviation of each derivative feature over the
    defined rows.  Immutable after construction; safe to share between
    threads.
    """

    base: TraceDataset
    gamma: float
    states: np.ndarray        # (n, d)
    actions: np.ndarray       # (n,) or (n, m)
    rewards: np.ndarray       # (n,)
    V: np.ndarray             # (n,)
    D: np.ndarray             # (n, d), rows with has_deriv False are zeroed
    has_deriv: np.ndarray     # (n,) bool
    sigma: np.ndarray         # (d,)
    feature_range: np.ndarray  # (d, 2) [min, max]
    medians: np.ndarray       # (d,)
    episode_slices: list[tuple[int, int, bool]]  # (start, stop, terminal)
    action_labels: np.ndarray | None = None  # discrete: sorted unique labels
    action_codes: np.ndarray | None = None   # discrete: (n,) int codes
    action_sigma: np.ndarray | None = None   # vector actions: (m,) per-dim std
    feature_names: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def action_kind(self) -> str:
        return self.base.action_kind


def augment(data: TraceDataset, gamma: float) -> AugmentedDataset:
    """Compute per-sample returns, state derivatives, and global statistics.

    ``gamma`` must lie in [0, 1].  Returns are computed over the recorded
    remainder of each episode only.  The final sample of every episode has
    no derivative and is excluded from ``sigma``.
    """
    if not (isinstance(gamma, (int, float)) and 0.0 <= gamma <= 1.0):
        raise ParameterError(f"gamma must lie in [0, 1], got {gamma!r}")
    gamma = float(gamma)

    states = np.concatenate([ep.states for ep in data.episodes], axis=0)
    rewards = np.concatenate([ep.rewards for ep in data.episodes], axis=0)
    if data.action_kind == CONTINUOUS_VECTOR:
        actions = np.concatenate([ep.actions for ep in data.episodes], axis=0)
    else:
        actions = np.concatenate(
            [np.asarray(ep.actions) for ep in data.episodes], axis=0)

    n, d = states.shape
    V = np.zeros(n)
    D = np.zeros((n, d))
    has_deriv = np.zeros(n, dtype=bool)
    slices = []
    start = 0
    for ep in data.episodes:
        stop = start + len(ep)
        slices.append((start, stop, ep.terminal))
        # backwards recurrence V_t = R_t + gamma * V_{t+1}
        acc = 0.0
        for t in range(stop - 1, start - 1, -1):
            acc = rewards[t] + gamma * acc
            V[t] = acc
        if stop - start > 1:
            D[start:stop - 1] = states[start + 1:stop] - states[start:stop - 1]
            has_deriv[start:stop - 1] = True
        start = stop

    defined = D[has_deriv]
    if defined.shape[0] > 0:
        sigma = defined.std(axis=0)  # population (ddof=0)
    else:
        sigma = np.zeros(d)

    feature_range = np.stack([states.min(axis=0), states.max(axis=0)], axis=1)
    medians = np.median(states, axis=0)

    action_labels = action_codes = action_sigma = None
    if data.action_kind == DISCRETE:
        action_labels, action_codes = np.unique(actions, return_inverse=True)
        action_codes = action_codes.astype(np.int64)
    elif data.action_kind == CONTINUOUS_VECTOR:
        action_sigma = actions.std(axis=0)
    else:
        actions = actions.astype(float)

    return AugmentedDataset(
        base=data, gamma=gamma, states=states, actions=actions,
        rewards=rewards, V=V, D=D, has_deriv=has_deriv, sigma=sigma,
        feature_range=feature_range, medians=medians, episode_slices=slices,
        action_labels=action_labels, action_codes=action_codes,
        action_sigma=action_sigma, feature_names=list(data.feature_names))


# ---------------------------------------------------------------------------
# External trace formats
#
# CSV: header `episode,t,terminal,<f1..fd>,<a or a1..am>,r`, rows sorted by
# (episode, t), `terminal` 0/1 on the last row of each episode.
# JSON: array of episodes `{terminal: bool, steps: [{s: [..], a: .., r: ..}]}`.
# ---------------------------------------------------------------------------

def load_trace(source, format: str, action_kind: str | None = None) -> TraceDataset:
    """Parse a byte stream (or bytes/str) in the named trace format.

    ``action_kind`` forces the interpretation of action values; by default a
    single all-numeric action column is treated as discrete numeric labels,
    multiple action columns as a continuous vector, and non-numeric labels
    as discrete.
    """
    raw = source.read() if hasattr(source, "read") else source
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    if format == "csv":
        return _load_csv(raw, action_kind)
    if format == "json":
        return _load_json(raw, action_kind)
    raise ParameterError(f"unknown trace format {format!r}")


def load_trace_path(path, action_kind: str | None = None) -> TraceDataset:
    fmt = "json" if str(path).endswith(".json") else "csv"
    with open(path, "rb") as fh:
        return load_trace(fh, fmt, action_kind=action_kind)


def _load_csv(text: str, action_kind: str | None) -> TraceDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise TraceFormatError("empty CSV trace")
    header = rows[0]
    if header[:3] != ["episode", "t", "terminal"] or not header or header[-1] != "r":
        raise TraceFormatError(
            "CSV header must be episode,t,terminal,<features>,<a or a1..am>,r")
    middle = header[3:-1]
    if "a" in middle:
        a_start = middle.index("a")
        action_cols = ["a"]
    else:
        a_start = next((i for i, name in enumerate(middle) if name == "a1"), len(middle))
        action_cols = middle[a_start:]
        if action_cols != [f"a{k}" for k in range(1, len(action_cols) + 1)]:
            raise TraceFormatError("action columns must be named a, or a1..am")
    feature_names = middle[:a_start]
    if not feature_names:
        raise TraceFormatError("CSV trace has no state feature columns")
    d = len(feature_names)
    m = len(action_cols)
    width = 3 + d + m + 1

    episodes: list[Episode] = []
    cur_ep = None
    cur = None  # [states, actions, rewards, terminal]
    prev_t = None
    raw_actions: list = []
    for idx, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise TraceFormatError(
                f"row {idx}: expected {width} fields, got {len(row)}")
        try:
            ep_id = int(row[0])
            t = int(row[1])
            term = row[2].strip()
            s = [float(v) for v in row[3:3 + d]]
            r = float(row[-1])
        except ValueError as exc:
            raise TraceFormatError(f"row {idx}: {exc}") from None
        if term not in ("0", "1"):
            raise TraceFormatError(f"row {idx}: terminal flag must be 0 or 1")
        a_raw = row[3 + d:3 + d + m]
        if cur_ep is None or ep_id != cur_ep:
            if cur_ep is not None and ep_id < cur_ep:
                raise TraceFormatError(f"row {idx}: episodes out of order")
            if cur is not None:
                episodes.append(_finish_episode(cur))
            cur_ep, cur, prev_t = ep_id, [[], [], [], False], None
            if t != 0:
                raise TraceFormatError(f"row {idx}: episode {ep_id} must start at t=0")
        elif prev_t is None or t != prev_t + 1:
            raise TraceFormatError(f"row {idx}: non-consecutive t within episode {ep_id}")
        prev_t = t
        cur[0].append(s)
        cur[1].append(a_raw[0] if m == 1 else a_raw)
        cur[2].append(r)
        cur[3] = term == "1"
        raw_actions.append((idx, a_raw))
    if cur is not None:
        episodes.append(_finish_episode(cur))
    if not episodes:
        raise TraceFormatError("CSV trace has no data rows")

    kind, episodes = _resolve_actions(episodes, m, action_kind, raw_actions)
    return TraceDataset(episodes=episodes, action_kind=kind,
                        feature_names=feature_names)


def _finish_episode(cur) -> Episode:
    states, actions, rewards, terminal = cur
    return Episode(states=np.asarray(states, dtype=float),
                   actions=np.asarray(actions, dtype=object),
                   rewards=np.asarray(rewards, dtype=float),
                   terminal=terminal)


def _resolve_actions(episodes, m, action_kind, raw_actions):
    """Decide the action kind and coerce per-episode action arrays."""
    if m > 1:
        if action_kind not in (None, CONTINUOUS_VECTOR):
            raise TraceFormatError(
                f"multiple action columns are incompatible with {action_kind!r}")
        out = []
        for ep in episodes:
            try:
                acts = np.asarray([[float(v) for v in row] for row in ep.actions])
            except (TypeError, ValueError):
                bad = _first_bad_action(raw_actions)
                raise TraceFormatError(
                    f"row {bad}: vector action entries must be numeric") from None
            out.append(Episode(ep.states, acts, ep.rewards, ep.terminal))
        return CONTINUOUS_VECTOR, out

    numeric = []
    for ep in episodes:
        flags = []
        for a in ep.actions:
            try:
                float(a)
                flags.append(True)
            except (TypeError, ValueError):
                flags.append(False)
        numeric.append(flags)
    all_numeric = all(all(f) for f in numeric)
    any_numeric = any(any(f) for f in numeric)
    if not all_numeric and any_numeric:
        bad = _first_mixed_row(raw_actions)
        raise TraceFormatError(
            f"row {bad}: non-numeric action label mixed with numeric actions")

    kind = action_kind or DISCRETE
    if kind in (CONTINUOUS_SCALAR, CONTINUOUS_VECTOR) and not all_numeric:
        bad = _first_mixed_row(raw_actions)
        raise TraceFormatError(f"row {bad}: continuous actions must be numeric")
    out = []
    for ep in episodes:
        if all_numeric:
            acts = np.asarray([float(a) for a in ep.actions])
            if kind == CONTINUOUS_VECTOR:
                acts = acts.reshape(-1, 1)
        else:
            acts = np.asarray([str(a) for a in ep.actions], dtype=object)
        out.append(Episode(ep.states, acts, ep.rewards, ep.terminal))
    return kind, out


def _first_bad_action(raw_actions):
    for idx, vals in raw_actions:
        for v in vals:
            try:
                float(v)
            except (TypeError, ValueError):
                return idx
    return "?"


def _first_mixed_row(raw_actions):
    return _first_bad_action(raw_actions)


def _load_json(text: str, action_kind: str | None) -> TraceDataset:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid JSON trace: {exc}") from None
    if not isinstance(payload, list) or not payload:
        raise TraceFormatError("JSON trace must be a non-empty array of episodes")
    episodes = []
    raw_actions = []
    d = None
    vector = None
    row = 0
    for i, ep in enumerate(payload):
        if not isinstance(ep, dict) or "steps" not in ep:
            raise TraceFormatError(f"episode {i}: expected object with 'steps'")
        steps = ep["steps"]
        if not steps:
            raise TraceFormatError(f"episode {i} is empty")
        states, actions, rewards = [], [], []
        for j, step in enumerate(steps):
            row += 1
            try:
                s = [float(v) for v in step["s"]]
                r = float(step["r"])
                a = step["a"]
            except (KeyError, TypeError, ValueError):
                raise TraceFormatError(
                    f"episode {i} step {j}: malformed step record") from None
            if d is None:
                d = len(s)
            elif len(s) != d:
                raise TraceFormatError(
                    f"episode {i} step {j}: state has {len(s)} features, expected {d}")
            is_vec = isinstance(a, (list, tuple))
            if vector is None:
                vector = is_vec
            elif vector != is_vec:
                raise TraceFormatError(
                    f"episode {i} step {j}: mixed scalar and vector actions")
            states.append(s)
            actions.append(list(a) if is_vec else a)
            rewards.append(r)
            raw_actions.append((row, list(a) if is_vec else [a]))
        episodes.append(Episode(np.asarray(states, dtype=float),
                                np.asarray(actions, dtype=object),
                                np.asarray(rewards, dtype=float),
                                bool(ep.get("terminal", False))))
    m = len(raw_actions[0][1]) if vector else 1
    if vector:
        for idx, vals in raw_actions:
            if len(vals) != m:
                raise TraceFormatError(
                    f"record {idx}: action vector length {len(vals)}, expected {m}")
    kind, episodes = _resolve_actions(episodes, m, action_kind, raw_actions)
    names = [f"f{k}" for k in range(d)]
    return TraceDataset(episodes=episodes, action_kind=kind, feature_names=names)


def trace_to_csv_bytes(data: TraceDataset) -> bytes:
    """Serialise a trace in the CSV format accepted by ``load_trace``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if data.action_kind == CONTINUOUS_VECTOR:
        m = data.episodes[0].actions.shape[1]
        a_cols = [f"a{k}" for k in range(1, m + 1)]
    else:
        a_cols = ["a"]
    writer.writerow(["episode", "t", "terminal"] + list(data.feature_names)
                    + a_cols + ["r"])
    for ei, ep in enumerate(data.episodes):
        last = len(ep) - 1
        for t in range(len(ep)):
            term = "1" if (t == last and ep.terminal) else "0"
            s = [repr(float(v)) for v in ep.states[t]]
            if data.action_kind == CONTINUOUS_VECTOR:
                a = [repr(float(v)) for v in ep.actions[t]]
            else:
                av = ep.actions[t]
                a = [str(av) if isinstance(av, str) else repr(float(av))]
            writer.writerow([ei, t, term] + s + a + [repr(float(ep.rewards[t]))])
    return buf.getvalue().encode("utf-8")


def trace_to_json_bytes(data: TraceDataset) -> bytes:
    eps = []
    for ep in data.episodes:
        steps = []
        for t in range(len(ep)):
            if data.action_kind == CONTINUOUS_VECTOR:
                a = [float(v) for v in ep.actions[t]]
            else:
                av = ep.actions[t]
                a = av if isinstance(av, str) else float(av)
            steps.append({"s": [float(v) for v in ep.states[t]],
                          "a": a, "r": float(ep.rewards[t])})
        eps.append({"terminal": bool(ep.terminal), "steps": steps})
    return (json.dumps(eps, sort_keys=True, separators=(",", ":")) + "\n").encode()
