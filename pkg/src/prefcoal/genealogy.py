"""
Heterochronous genealogies: Newick I/O, interval decomposition and the
grid-cell sufficient statistics shared by every likelihood in the package.

Time runs backwards from the most recent tip (time 0) towards the root.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NewickParseError",
    "TopologyError",
    "GenealogyError",
    "Genealogy",
    "IntervalDecomposition",
    "Grid",
    "GridStats",
    "parse_newick",
    "serialize_newick",
    "read_newick",
    "decompose_intervals",
    "build_grid",
    "summarize_grid",
    "grid_stats",
]


class NewickParseError(ValueError):
    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class TopologyError(ValueError):
    pass


class GenealogyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Genealogy:
    """
    Rooted binary tree with tip sampling times and coalescent times.

    Nodes ``0..n-1`` are tips, ``n..2n-2`` internal nodes ordered by
    increasing time, so node ``n + j`` sits at ``coalescent_times[j]`` and the
    root is node ``2n - 2``.
    """

    labels: tuple
    sampling_times: np.ndarray
    coalescent_times: np.ndarray
    parent: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        s = np.asarray(self.sampling_times, dtype=float)
        t = np.asarray(self.coalescent_times, dtype=float)
        object.__setattr__(self, "sampling_times", s)
        object.__setattr__(self, "coalescent_times", t)
        object.__setattr__(self, "parent", np.asarray(self.parent, dtype=int))
        if n < 2:
            raise GenealogyError("a genealogy needs at least two tips")
        if s.shape != (n,) or t.shape != (n - 1,):
            raise GenealogyError("need n sampling times and n-1 coalescent times")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
            raise GenealogyError("times must be finite")
        if s.min() != 0.0:
            raise GenealogyError("the most recent tip must be at time 0")
        if np.any(t <= 0) or np.any(np.diff(t) < 0):
            raise GenealogyError("coalescent times must be positive and sorted")
        if t[-1] <= s.max():
            raise GenealogyError("root must be older than every sampling time")
        # event sweep: extant lineages never drop below one
        decompose_intervals(self)

    @property
    def n(self):
        return len(self.labels)

    @property
    def root_time(self):
        return float(self.coalescent_times[-1])

    @property
    def node_times(self):
        return np.concatenate([self.sampling_times, self.coalescent_times])

    def sampling_events(self):
        """Distinct sampling times and their multiplicities."""
        return np.unique(self.sampling_times, return_counts=True)

    def children(self):
        kids = [[] for _ in range(2 * self.n - 1)]
        for node, par in enumerate(self.parent):
            if par >= 0:
                kids[par].append(node)
        return kids

    @classmethod
    def from_times(cls, sampling_times, coalescent_times, rng=None, labels=None):
        """
        Attach a topology to given times by merging uniformly random pairs of
        extant lineages at each coalescent time (the coalescent jump chain).
        """
        rng = np.random.default_rng(rng)
        s = np.asarray(sampling_times, dtype=float)
        t = np.sort(np.asarray(coalescent_times, dtype=float))
        n = len(s)
        if len(t) != n - 1:
            raise GenealogyError("need n-1 coalescent times")
        if labels is None:
            labels = tuple(f"t{i}" for i in range(n))
        tip_order = np.argsort(s, kind="stable")
        parent = np.full(2 * n - 1, -1, dtype=int)
        active = []
        i = 0
        for j, tc in enumerate(t):
            while i < n and s[tip_order[i]] <= tc:
                active.append(int(tip_order[i]))
                i += 1
            if len(active) < 2:
                raise GenealogyError(f"fewer than two lineages at coalescent time {tc}")
            a, b = rng.choice(len(active), size=2, replace=False)
            node = n + j
            parent[active[a]] = node
            parent[active[b]] = node
            for k in sorted((a, b), reverse=True):
                active.pop(k)
            active.append(node)
        if i < n:
            raise GenealogyError("root must be older than every sampling time")
        return cls(tuple(labels), s, t, parent)


# ---------------------------------------------------------------------------
# Newick
# ---------------------------------------------------------------------------

_DELIMS = set("(),:;[")


def _tokenize(text):
    """Yield (kind, value, position) with kinds punct / label / length."""
    i = 0
    n = len(text)
    expect_length = False
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c == "[":
            end = text.find("]", i)
            if end < 0:
                raise NewickParseError("unterminated comment", i)
            i = end + 1
            continue
        if c in "(),;":
            yield c, c, i
            i += 1
            expect_length = False
            continue
        if c == ":":
            yield ":", ":", i
            i += 1
            expect_length = True
            continue
        if c == "'":
            end = i + 1
            buf = []
            while True:
                if end >= n:
                    raise NewickParseError("unterminated quoted label", i)
                if text[end] == "'":
                    if end + 1 < n and text[end + 1] == "'":
                        buf.append("'")
                        end += 2
                        continue
                    break
                buf.append(text[end])
                end += 1
            yield "label", "".join(buf), i
            i = end + 1
            continue
        start = i
        while i < n and text[i] not in _DELIMS and not text[i].isspace():
            i += 1
        word = text[start:i]
        if expect_length:
            try:
                value = float(word)
            except ValueError:
                raise NewickParseError(f"invalid branch length {word!r}", start) from None
            yield "length", value, start
            expect_length = False
        else:
            yield "label", word, start


def parse_newick(text):
    """
    Parse a binary Newick tree with branch lengths into a `Genealogy`.

    Tip sampling times are the tip depths measured back from the deepest
    (most recent) tip; internal-node times use the same axis.
    """
    tokens = list(_tokenize(text))
    if not tokens:
        raise NewickParseError("empty input", 0)
    pos = 0

    # nodes: list of dict(label, length, children)
    nodes = []

    def peek():
        return tokens[pos] if pos < len(tokens) else ("eof", None, len(text))

    def take(kind):
        nonlocal pos
        tok = peek()
        if tok[0] != kind:
            raise NewickParseError(f"expected {kind!r}, found {tok[1]!r}", tok[2])
        pos += 1
        return tok

    def parse_suffix(node_id):
        nonlocal pos
        tok = peek()
        if tok[0] == "label":
            nodes[node_id]["label"] = tok[1]
            pos += 1
            tok = peek()
        if tok[0] == ":":
            pos += 1
            length_tok = take("length")
            if length_tok[1] < 0:
                raise GenealogyError(
                    f"negative branch length {length_tok[1]} at position {length_tok[2]}"
                )
            nodes[node_id]["length"] = length_tok[1]

    # iterative descent: stack of open internal nodes
    root = None
    stack = []
    expecting_child = True
    while True:
        tok = peek()
        if expecting_child:
            node_id = len(nodes)
            nodes.append({"label": "", "length": None, "children": [], "pos": tok[2]})
            if stack:
                nodes[stack[-1]]["children"].append(node_id)
            else:
                if root is not None:
                    raise NewickParseError("unexpected token after tree", tok[2])
                root = node_id
            if tok[0] == "(":
                pos += 1
                stack.append(node_id)
                continue
            if tok[0] not in ("label", ":"):
                raise NewickParseError(f"unexpected {tok[1]!r}", tok[2])
            parse_suffix(node_id)
            expecting_child = False
            if not stack:
                break
            continue
        if tok[0] == ",":
            if not stack:
                raise NewickParseError("',' outside parentheses", tok[2])
            pos += 1
            expecting_child = True
            continue
        if tok[0] == ")":
            if not stack:
                raise NewickParseError("unbalanced ')'", tok[2])
            pos += 1
            closed = stack.pop()
            parse_suffix(closed)
            if not stack:
                break
            continue
        raise NewickParseError(f"unexpected {tok[1]!r}", tok[2])
    tok = peek()
    if tok[0] == ";":
        pos += 1
    if pos != len(tokens):
        raise NewickParseError("trailing characters after tree", peek()[2])

    for idx, nd in enumerate(nodes):
        k = len(nd["children"])
        if k not in (0, 2):
            raise TopologyError(f"node at position {nd['pos']} has {k} children; tree must be binary")
        if idx != root and nd["length"] is None:
            raise NewickParseError("missing branch length", nd["pos"])

    # depths from the root
    depth = np.zeros(len(nodes))
    order = [root]
    for idx in order:
        for ch in nodes[idx]["children"]:
            depth[ch] = depth[idx] + nodes[ch]["length"]
            order.append(ch)
    tips = [i for i in range(len(nodes)) if not nodes[i]["children"]]
    internals = [i for i in range(len(nodes)) if nodes[i]["children"]]
    horizon = depth[tips].max()
    times = horizon - depth
    times[tips] = np.maximum(times[tips], 0.0)

    n = len(tips)
    # stable order by time keeps ties deterministic
    internals.sort(key=lambda i: (times[i], i))
    new_id = {old: k for k, old in enumerate(tips)}
    new_id.update({old: n + k for k, old in enumerate(internals)})
    parent = np.full(2 * n - 1, -1, dtype=int)
    for old, nd in enumerate(nodes):
        for ch in nd["children"]:
            parent[new_id[ch]] = new_id[old]
    labels = tuple(nodes[i]["label"] for i in tips)
    coal = np.array([times[i] for i in internals])
    return Genealogy(labels, times[tips], coal, parent)


def read_newick(path):
    with open(path) as fh:
        return parse_newick(fh.read())


def _format_label(label):
    if label == "" or any(c in label for c in "(),:;[]' \t\n"):
        return "'" + label.replace("'", "''") + "'"
    return label


def serialize_newick(g, digits=9, comment=None):
    """
    Newick text for ``g``; branch lengths carry ``digits`` significant digits.

    Rounding error is carried down the tree: each emitted length targets the
    node's true depth from the already-rounded depth of its parent, so
    parsed node times stay within one rounding step of the originals.
    """
    times = g.node_times
    kids = g.children()
    fmt = f"{{:.{digits}g}}"
    root = 2 * g.n - 2
    depth = times[root] - times
    emitted = np.zeros(len(times))
    text_len = [""] * len(times)
    # parents carry larger indices than their children
    for node in range(root - 1, -1, -1):
        par = g.parent[node]
        s = fmt.format(depth[node] - emitted[par])
        text_len[node] = s
        emitted[node] = emitted[par] + float(s)
    out = []
    # iterative post-order emission
    stack = [(root, 0)]
    while stack:
        node, state = stack.pop()
        if node < g.n:
            out.append(_format_label(g.labels[node]))
            out.append(":" + text_len[node])
            continue
        if state == 0:
            out.append("(")
            stack.append((node, 1))
            stack.append((kids[node][0], 0))
        elif state == 1:
            out.append(",")
            stack.append((node, 2))
            stack.append((kids[node][1], 0))
        else:
            out.append(")")
            if node != root:
                out.append(":" + text_len[node])
    text = "".join(out) + ";"
    if comment:
        text = f"[{comment}]\n" + text
    return text


# ---------------------------------------------------------------------------
# intervals, grid, sufficient statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntervalDecomposition:
    """
    Intervals between consecutive sampling/coalescent events on ``[0, t_2]``.

    ``lineages[j]`` is the extant-lineage count on ``[start[j], end[j])``.
    Zero-length intervals appear when events coincide.
    """

    start: np.ndarray
    end: np.ndarray
    lineages: np.ndarray
    ends_in_coalescence: np.ndarray

    @property
    def coalescent_factor(self):
        k = self.lineages
        return k * (k - 1) / 2.0

    @property
    def lengths(self):
        return self.end - self.start

    def __len__(self):
        return len(self.start)


def decompose_intervals(g):
    times, mult = g.sampling_events()
    coal = g.coalescent_times
    ev_time = np.concatenate([times, coal])
    ev_kind = np.concatenate([np.zeros(len(times), int), np.ones(len(coal), int)])
    ev_delta = np.concatenate([mult, -np.ones(len(coal), int)])
    # sampling sorts before coalescence at equal times
    order = np.lexsort((ev_kind, ev_time))
    ev_time, ev_kind, ev_delta = ev_time[order], ev_kind[order], ev_delta[order]
    lineages = np.cumsum(ev_delta)
    if np.any(lineages[:-1] < 1) or lineages[-1] != 1:
        raise GenealogyError("inconsistent genealogy: lineage count reaches zero before the root")
    before = np.concatenate([[0], lineages[:-1]])
    if np.any(before[ev_kind == 1] < 2):
        raise GenealogyError("inconsistent genealogy: coalescence with fewer than two lineages")
    return IntervalDecomposition(
        start=ev_time[:-1].copy(),
        end=ev_time[1:].copy(),
        lineages=lineages[:-1].copy(),
        ends_in_coalescence=ev_kind[1:] == 1,
    )


@dataclass(frozen=True)
class Grid:
    """Cell boundaries ``k_1=0 < ... < k_{M+1}``; cell i is ``(k_i, k_{i+1}]``."""

    boundaries: np.ndarray
    M_prime: int

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=float)
        object.__setattr__(self, "boundaries", b)
        if b.ndim != 1 or len(b) < 2 or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ValueError("boundaries must start at 0 and increase strictly")
        if not 1 <= self.M_prime <= len(b) - 1:
            raise ValueError("M_prime must lie in 1..M")

    @property
    def M(self):
        return len(self.boundaries) - 1

    @property
    def widths(self):
        return np.diff(self.boundaries)

    @property
    def midpoints(self):
        return 0.5 * (self.boundaries[1:] + self.boundaries[:-1])

    def cell_index(self, t):
        """0-based cell containing ``t`` under the ``(k_i, k_{i+1}]`` rule, cell 0 closed at 0."""
        idx = np.searchsorted(self.boundaries, t, side="left") - 1
        return np.clip(idx, 0, self.M - 1)

    @classmethod
    def from_boundaries(cls, boundaries, last_sample):
        b = np.asarray(boundaries, dtype=float)
        return cls(b, min(_first_cell_past(b, last_sample), len(b) - 1))


def _first_cell_past(boundaries, s):
    # 1-based smallest i with k_{i+1} > s
    return int(np.searchsorted(boundaries[1:], s, side="right")) + 1


def build_grid(g, M=100):
    """
    Uniform grid of ``M`` cells on ``[0, t_2]``.

    The sampling field covers cells ``1..M'`` with ``M'`` the first cell whose
    upper boundary exceeds the oldest sample, clamped to ``M - 1``.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    b = np.linspace(0.0, g.root_time, M + 1)
    m_prime = min(_first_cell_past(b, g.sampling_times.max()), M - 1)
    return Grid(b, m_prime)


@dataclass(frozen=True, eq=False)
class GridStats:
    """
    Per-cell sufficient statistics.

    ``samp_count`` covers all M cells (it sums to n); the sampling likelihood
    reads only the first ``M_prime`` of them. ``event_exposure[k, i]`` is the
    part of ``coal_exposure[i]`` accrued while waiting for coalescence ``k``.
    """

    widths: np.ndarray
    M_prime: int
    coal_exposure: np.ndarray
    coal_events: np.ndarray
    samp_count: np.ndarray
    event_cell: np.ndarray
    event_log_factor: np.ndarray
    event_exposure: np.ndarray = field(repr=False)

    @property
    def M(self):
        return len(self.widths)

    @property
    def n(self):
        return int(self.samp_count.sum())

    @property
    def log_factor_total(self):
        return float(self.event_log_factor.sum())


def _cumulative_rate(d):
    """Knots of the piecewise-linear F(u) = integral of C over [0, u]."""
    knots = np.concatenate([d.start[:1], d.end])
    vals = np.concatenate([[0.0], np.cumsum(d.coalescent_factor * d.lengths)])
    return knots, vals


def summarize_grid(d, grid, samples):
    samples = np.asarray(samples, dtype=float)
    kb = grid.boundaries
    last = kb[-1]
    if d.end[-1] > last or samples.max() > last:
        raise ValueError("event beyond the last grid boundary")
    knots, vals = _cumulative_rate(d)
    F_at = np.interp(kb, knots, vals)
    exposure = np.diff(F_at)

    coal_t = d.end[d.ends_in_coalescence]
    event_cell = grid.cell_index(coal_t)
    coal_events = np.bincount(event_cell, minlength=grid.M)
    samp_count = np.bincount(grid.cell_index(samples), minlength=grid.M)
    lineages = d.lineages[d.ends_in_coalescence]
    log_factor = np.log(lineages * (lineages - 1) / 2.0)

    # per-event split of the exposure: waiting period of event k is (t_{k+1}, t_k]
    lo = np.concatenate([[0.0], coal_t[:-1]])
    clipped = np.clip(kb[None, :], lo[:, None], coal_t[:, None])
    event_exposure = np.diff(np.interp(clipped, knots, vals), axis=1)
    return GridStats(
        widths=grid.widths,
        M_prime=grid.M_prime,
        coal_exposure=np.maximum(exposure, 0.0),
        coal_events=coal_events,
        samp_count=samp_count,
        event_cell=event_cell,
        event_log_factor=log_factor,
        event_exposure=np.maximum(event_exposure, 0.0),
    )


def grid_stats(g, grid):
    """Shorthand for ``summarize_grid(decompose_intervals(g), grid, g.sampling_times)``."""
    return summarize_grid(decompose_intervals(g), grid, g.sampling_times)
