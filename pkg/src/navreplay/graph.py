"""Pose graphs built from a single recorded traversal.

A pose graph holds one node per sensory snapshot (placed every ``spacing``
meters of travel) and forward-motion edges keyed by ``(node, heading)``.
The agent state space is the product of nodes and discrete headings.

Headings are compass bearings in degrees: 0 points along +y, 90 along +x,
and turning right adds ``rotation_step``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

CLOSURE_SLACK = 1.5
_ROUND = 9


class GraphError(ValueError):
    pass


class AlignmentError(ValueError):
    """Raised when some training nodes have no validation sample in range."""

    def __init__(self, nodes: list[int], residuals: list[float], tolerance: float):
        self.nodes = nodes
        self.residuals = residuals
        listing = ", ".join(f"{n} ({r:.3f} m)" for n, r in zip(nodes, residuals))
        super().__init__(
            f"{len(nodes)} node(s) unmatched within {tolerance} m: {listing}"
        )


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class Sample:
    t: float
    x: float
    y: float
    heading: float
    feature_ref: str


@dataclass
class TraversalRecord:
    samples: list[Sample]
    closures: list[tuple[int, int]] = field(default_factory=list)
    duplicates: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        if not self.samples:
            raise GraphError("traversal record is empty")
        ts = [s.t for s in self.samples]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise GraphError("traversal samples are not ordered by timestamp")
        n = len(self.samples)
        for kind, pairs in (("closure", self.closures), ("dup", self.duplicates)):
            for i, j in pairs:
                if not (0 <= i < n and 0 <= j < n):
                    raise GraphError(f"{kind} {i} {j} references a sample out of range")
        for i, j in self.duplicates:
            if j < i:
                raise GraphError(f"dup {i} {j} is an empty interval")

    def positions(self) -> np.ndarray:
        return np.array([(s.x, s.y) for s in self.samples], dtype=float)


def wrap_heading(heading: float) -> float:
    return float(heading % 360.0)


def snap_heading(heading: float, rotation_step: float) -> float:
    return wrap_heading(round(heading / rotation_step) * rotation_step)


def bearing(dx: float, dy: float) -> float:
    return wrap_heading(math.degrees(math.atan2(dx, dy)))


def heading_vector(heading: float) -> tuple[float, float]:
    rad = math.radians(heading)
    return math.sin(rad), math.cos(rad)


class PoseGraph:
    """Discretized world model.

    ``edges`` maps ``(node, heading)`` to the node reached by moving forward
    with that heading. Instances are treated as immutable once built.
    """

    def __init__(
        self,
        poses: list[Pose],
        edges: dict[tuple[int, float], int],
        spacing: float,
        rotation_step: float = 90.0,
        feature_refs: list[str] | None = None,
    ):
        if spacing <= 0:
            raise GraphError("spacing must be positive")
        if rotation_step <= 0 or (360.0 / rotation_step) % 1 != 0:
            raise GraphError("rotation_step must divide 360")
        self.poses = list(poses)
        self.spacing = float(spacing)
        self.rotation_step = float(rotation_step)
        self.feature_refs = (
            list(feature_refs) if feature_refs is not None else [f"n{i}" for i in range(len(poses))]
        )
        if len(self.feature_refs) != len(self.poses):
            raise GraphError("one feature_ref per node is required")
        self.edges: dict[tuple[int, float], int] = {}
        for (a, h), b in edges.items():
            if not (0 <= a < len(poses) and 0 <= b < len(poses)):
                raise GraphError(f"edge {a} {h} {b} references a missing node")
            self.edges[(a, wrap_heading(h))] = b

    @property
    def n_nodes(self) -> int:
        return len(self.poses)

    @property
    def n_headings(self) -> int:
        return int(round(360.0 / self.rotation_step))

    @property
    def headings(self) -> list[float]:
        return [i * self.rotation_step for i in range(self.n_headings)]

    def heading_index(self, heading: float) -> int:
        h = wrap_heading(heading)
        idx = h / self.rotation_step
        if abs(idx - round(idx)) > 1e-9:
            raise GraphError(f"heading {heading} is not a multiple of {self.rotation_step}")
        return int(round(idx)) % self.n_headings

    @cached_property
    def transitions(self) -> np.ndarray:
        """``(n_nodes, n_headings)`` table of forward neighbors, -1 where absent."""
        table = np.full((self.n_nodes, self.n_headings), -1, dtype=np.int64)
        for (a, h), b in self.edges.items():
            table[a, self.heading_index(h)] = b
        table.setflags(write=False)
        return table

    def neighbor(self, node: int, heading: float) -> int | None:
        if not 0 <= node < self.n_nodes:
            raise GraphError(f"node {node} not in graph")
        b = self.transitions[node, self.heading_index(heading)]
        return None if b < 0 else int(b)

    def adjacency(self) -> list[set[int]]:
        adj: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for (a, _), b in self.edges.items():
            adj[a].add(b)
            adj[b].add(a)
        return adj

    def is_connected(self) -> bool:
        if self.n_nodes == 0:
            return False
        adj = self.adjacency()
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n_nodes

    def positions(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.poses], dtype=float).reshape(-1, 2)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoseGraph):
            return NotImplemented
        return (
            self.poses == other.poses
            and self.edges == other.edges
            and self.spacing == other.spacing
            and self.rotation_step == other.rotation_step
            and self.feature_refs == other.feature_refs
        )

    def __repr__(self) -> str:
        return (
            f"PoseGraph(nodes={self.n_nodes}, edges={len(self.edges)}, "
            f"spacing={self.spacing}, rotation_step={self.rotation_step})"
        )


def neighbor(graph: PoseGraph, node: int, heading: float) -> int | None:
    return graph.neighbor(node, heading)


# --------------------------------------------------------------------------
# Construction
# --------------------------------------------------------------------------


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, keep: int, drop: int) -> None:
        a, b = self.find(keep), self.find(drop)
        if a != b:
            lo, hi = min(a, b), max(a, b)
            self.parent[hi] = lo


def _add_edge(edges: dict, a: int, b: int, heading: float, rotation_step: float) -> None:
    h = snap_heading(heading, rotation_step)
    back = wrap_heading(h + 180.0)
    for src, dst, hh in ((a, b, h), (b, a, back)):
        prev = edges.get((src, hh))
        if prev is not None and prev != dst:
            raise GraphError(
                f"conflicting edges from node {src} at heading {hh:g}: {prev} and {dst}"
            )
        edges[(src, hh)] = dst


def build_pose_graph(
    record: TraversalRecord,
    spacing: float,
    rotation_step: float = 90.0,
    closure_slack: float = CLOSURE_SLACK,
) -> PoseGraph:
    """Discretize a traversal into a pose graph.

    Nodes are placed every ``spacing`` meters of arc length (linear
    interpolation between samples) and take the feature reference of the
    nearest recorded sample. Consecutive nodes are joined in both travel
    directions. Resampled points that fall inside a declared ``dup`` range
    are merged into the nearest existing node. A declared closure joins the
    two nodes nearest the referenced samples; endpoints closer than
    ``spacing / 2`` are merged instead, which is how a revisited corner
    closes a loop.
    """
    record.validate()
    if spacing <= 0:
        raise GraphError("spacing must be positive")
    if rotation_step <= 0 or (360.0 / rotation_step) % 1 != 0:
        raise GraphError("rotation_step must divide 360")

    pos = record.positions()
    seg = np.hypot(*np.diff(pos, axis=0).T) if len(pos) > 1 else np.zeros(0)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(arc[-1])
    n_points = int(math.floor(total / spacing + 1e-6)) + 1
    targets = np.minimum(np.arange(n_points) * spacing, total)

    # fractional sample index and interpolated position of each resampled point
    frac_idx = np.empty(n_points)
    points = np.empty((n_points, 2))
    for k, s in enumerate(targets):
        i = int(np.searchsorted(arc, s, side="right") - 1)
        i = min(max(i, 0), len(arc) - 1)
        if i == len(arc) - 1 or seg[i] == 0:
            f = 0.0
        else:
            f = (s - arc[i]) / seg[i]
            if f > 1 - 1e-9:
                i, f = i + 1, 0.0
        frac_idx[k] = i + f
        nxt = min(i + 1, len(pos) - 1)
        points[k] = pos[i] + f * (pos[nxt] - pos[i])
    points = np.round(points, _ROUND) + 0.0

    def nearest_sample(s: float) -> int:
        i = int(np.searchsorted(arc, s))
        cands = [c for c in (i - 1, i) if 0 <= c < len(arc)]
        return min(cands, key=lambda c: (abs(arc[c] - s), c))

    def in_dup(u: float) -> bool:
        return any(i - 1e-9 <= u <= j + 1e-9 for i, j in record.duplicates)

    poses: list[Pose] = []
    refs: list[str] = []
    point_node = np.empty(n_points, dtype=np.int64)
    for k in range(n_points):
        if in_dup(frac_idx[k]) and poses:
            existing = np.array([(p.x, p.y) for p in poses])
            d = np.hypot(*(existing - points[k]).T)
            j = int(np.argmin(d))
            if d[j] > spacing / 2 + 1e-9:
                raise GraphError(
                    f"duplicate range point at ({points[k][0]:g}, {points[k][1]:g}) "
                    "does not coincide with any earlier node"
                )
            point_node[k] = j
            continue
        smp = record.samples[nearest_sample(targets[k])]
        poses.append(
            Pose(float(points[k][0]), float(points[k][1]), snap_heading(smp.heading, rotation_step))
        )
        refs.append(smp.feature_ref)
        point_node[k] = len(poses) - 1

    uf = _UnionFind(len(poses))
    closure_edges = []
    for i, j in record.closures:
        a = int(point_node[int(np.argmin(np.abs(targets - arc[i])))])
        b = int(point_node[int(np.argmin(np.abs(targets - arc[j])))])
        pa, pb = poses[a], poses[b]
        d = math.hypot(pb.x - pa.x, pb.y - pa.y)
        if d > spacing * closure_slack + 1e-9:
            raise GraphError(
                f"closure {i} {j} joins nodes {a} and {b} that are {d:.3f} m apart "
                f"(limit {spacing * closure_slack:.3f} m)"
            )
        if d <= spacing / 2 + 1e-9:
            uf.union(min(a, b), max(a, b))
        else:
            closure_edges.append((a, b))

    roots = sorted({uf.find(i) for i in range(len(poses))})
    relabel = {r: n for n, r in enumerate(roots)}
    new_id = [relabel[uf.find(i)] for i in range(len(poses))]
    final_poses = [poses[r] for r in roots]
    final_refs = [refs[r] for r in roots]

    edges: dict[tuple[int, float], int] = {}
    pairs = [(new_id[point_node[k]], new_id[point_node[k + 1]]) for k in range(n_points - 1)]
    pairs += [(new_id[a], new_id[b]) for a, b in closure_edges]
    for a, b in pairs:
        if a == b:
            continue
        pa, pb = final_poses[a], final_poses[b]
        _add_edge(edges, a, b, bearing(pb.x - pa.x, pb.y - pa.y), rotation_step)

    graph = PoseGraph(final_poses, edges, spacing, rotation_step, final_refs)
    if not graph.is_connected():
        raise GraphError("pose graph is disconnected")
    xy = graph.positions()
    if len(xy) > 1:
        d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
        np.fill_diagonal(d, np.inf)
        if d.min() < spacing / 2 - 1e-9:
            a, b = np.unravel_index(int(np.argmin(d)), d.shape)
            raise GraphError(
                f"nodes {min(a, b)} and {max(a, b)} overlap; declare the revisit as a dup range"
            )
    return graph


# --------------------------------------------------------------------------
# Analysis
# --------------------------------------------------------------------------


def state_transition_table(graph: PoseGraph) -> np.ndarray:
    """Next-state table of shape ``(n_states, 3)`` for turn_left, turn_right, move_forward.

    State index is ``node * n_headings + heading_index``.
    """
    H = graph.n_headings
    n = graph.n_nodes
    node = np.repeat(np.arange(n), H)
    hidx = np.tile(np.arange(H), n)
    left = node * H + (hidx - 1) % H
    right = node * H + (hidx + 1) % H
    nb = graph.transitions[node, hidx]
    fwd = np.where(nb >= 0, nb * H + hidx, node * H + hidx)
    return np.stack([left, right, fwd], axis=1)


def _state_graph(graph: PoseGraph) -> csr_matrix:
    nxt = state_transition_table(graph)
    S = nxt.shape[0]
    rows = np.repeat(np.arange(S), 3)
    cols = nxt.ravel()
    keep = rows != cols
    return csr_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(S, S))


def state_to_node_distances(graph: PoseGraph) -> np.ndarray:
    """Fewest actions from every ``(node, heading)`` state to every node.

    Shape ``(n_states, n_nodes)``; rotations and forward moves cost one step.
    """
    dist = shortest_path(_state_graph(graph), method="D", directed=True, unweighted=True)
    H = graph.n_headings
    return dist.reshape(dist.shape[0], graph.n_nodes, H).min(axis=2)


def graph_diameter_steps(graph: PoseGraph) -> int:
    if graph.n_nodes == 1:
        return 0
    if not graph.is_connected():
        raise GraphError("diameter is undefined on a disconnected graph")
    d = state_to_node_distances(graph)
    if not np.isfinite(d).all():
        raise GraphError("some states cannot reach every node")
    return int(d.max())


def intersection_nodes(graph: PoseGraph) -> list[int]:
    """Nodes where an optimal route may need to rotate.

    These are branching or corner nodes (forward edges along two
    non-collinear headings) and dead ends (at most one forward edge).
    """
    out = []
    for node in range(graph.n_nodes):
        hs = [graph.headings[i] for i in np.flatnonzero(graph.transitions[node] >= 0)]
        if len(hs) <= 1:
            out.append(node)
            continue
        axes = {round(h % 180.0, 6) for h in hs}
        if len(axes) >= 2:
            out.append(node)
    return out


def intersection_fraction(graph: PoseGraph) -> float:
    if graph.n_nodes <= 1:
        return 0.0
    return len(intersection_nodes(graph)) / graph.n_nodes


@dataclass
class AlignmentMap:
    pairs: dict[int, int]
    residuals: dict[int, float]


def align_validation(train: PoseGraph, val: TraversalRecord, tolerance: float) -> AlignmentMap:
    """Map every training node to the nearest validation sample by position.

    Views are stored in the world frame, so the recorded heading of the
    validation sample only has to agree modulo ``rotation_step``; any
    sample qualifies.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    val.validate()
    vpos = val.positions()
    tpos = train.positions()
    d = np.hypot(tpos[:, None, 0] - vpos[None, :, 0], tpos[:, None, 1] - vpos[None, :, 1])
    best = np.argmin(d, axis=1)
    res = d[np.arange(len(tpos)), best]
    bad = np.flatnonzero(res > tolerance + 1e-12)
    if len(bad):
        raise AlignmentError([int(i) for i in bad], [float(res[i]) for i in bad], tolerance)
    return AlignmentMap(
        pairs={i: int(b) for i, b in enumerate(best)},
        residuals={i: float(r) for i, r in enumerate(res)},
    )


def edge_sample_offsets(
    graph: PoseGraph, record: TraversalRecord, tol: float | None = None
) -> dict[tuple[int, int], list[tuple[float, int]]]:
    """Locate recorded samples that lie strictly between two adjacent nodes.

    Returns ``{(a, b): [(offset_from_a, sample_index), ...]}`` with ``a < b``
    and offsets sorted. When a location is recorded twice only the earlier
    sample is kept.
    """
    tol = graph.spacing * 1e-3 if tol is None else tol
    npos = graph.positions()
    adj = graph.adjacency()
    out: dict[tuple[int, int], dict[float, int]] = {}
    for idx, s in enumerate(record.samples):
        p = np.array([s.x, s.y])
        d = np.hypot(*(npos - p).T)
        a = int(np.argmin(d))
        if d[a] <= tol:
            continue
        for b in adj[a]:
            lo, hi = min(a, b), max(a, b)
            u = npos[hi] - npos[lo]
            length = float(np.hypot(*u))
            w = float(np.dot(p - npos[lo], u) / length)
            r = p - npos[lo]
            perp = abs(u[0] * r[1] - u[1] * r[0]) / length
            if perp <= tol and tol < w < length - tol:
                key = round(w, 6)
                out.setdefault((lo, hi), {}).setdefault(key, idx)
                break
    return {k: sorted(v.items()) for k, v in sorted(out.items())}


# --------------------------------------------------------------------------
# Synthetic environments
# --------------------------------------------------------------------------


@dataclass
class EnvSpec:
    """Occupancy layout of a synthetic environment.

    ``cells`` are free ``(row, col)`` grid cells; row 0 is the northern row.
    """

    cells: list[tuple[int, int]]
    spacing: float = 0.1
    rotation_step: float = 90.0
    samples_per_edge: int = 4

    @property
    def n_rows(self) -> int:
        return max(r for r, _ in self.cells) + 1

    def cell_position(self, cell: tuple[int, int]) -> tuple[float, float]:
        r, c = cell
        return round(c * self.spacing, _ROUND) + 0.0, round((self.n_rows - 1 - r) * self.spacing, _ROUND) + 0.0


class SpecError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def parse_env_spec(text: str) -> EnvSpec:
    """Parse an ``envspec v1`` layout description.

    Keys: ``spacing``, ``rotation_step``, ``samples_per_edge``; layout either
    as ``grid ROWS COLS`` or as ``map`` followed by rows of ``.`` (free) and
    ``#`` (wall) up to ``end`` or end of file.
    """
    lines = text.splitlines()
    if not lines or lines[0].split() != ["envspec", "v1"]:
        raise SpecError("expected header 'envspec v1'", 1)
    kw: dict = {}
    cells: list[tuple[int, int]] = []
    layout_seen = False
    i = 1
    while i < len(lines):
        lineno = i + 1
        raw = lines[i].strip()
        i += 1
        if not raw:
            continue
        parts = raw.split()
        key = parts[0]
        try:
            if key in ("spacing", "rotation_step") and len(parts) == 2:
                kw[key] = float(parts[1])
                if kw[key] <= 0:
                    raise SpecError(f"{key} must be positive", lineno)
            elif key == "samples_per_edge" and len(parts) == 2:
                kw[key] = int(parts[1])
                if kw[key] < 1:
                    raise SpecError("samples_per_edge must be >= 1", lineno)
            elif key == "grid" and len(parts) == 3:
                rows, cols = int(parts[1]), int(parts[2])
                if rows < 1 or cols < 1:
                    raise SpecError("grid dimensions must be >= 1", lineno)
                cells = [(r, c) for r in range(rows) for c in range(cols)]
                layout_seen = True
            elif key == "map" and len(parts) == 1:
                r = 0
                while i < len(lines) and lines[i].strip() != "end":
                    row = lines[i].rstrip()
                    if set(row) - {".", "#", " "}:
                        raise SpecError(f"unexpected character in map row {row!r}", i + 1)
                    cells += [(r, c) for c, ch in enumerate(row) if ch == "."]
                    r += 1
                    i += 1
                i += 1
                layout_seen = True
            else:
                raise SpecError(f"unrecognised line {raw!r}", lineno)
        except ValueError as exc:
            if isinstance(exc, SpecError):
                raise
            raise SpecError(f"bad value in {raw!r}", lineno) from None
    if not layout_seen:
        raise SpecError("no 'grid' or 'map' layout given")
    if not cells:
        raise SpecError("layout has no free cells")
    if "rotation_step" in kw and kw["rotation_step"] != 90.0:
        raise SpecError("synthetic layouts support rotation_step 90 only")
    return EnvSpec(cells=cells, **kw)


def _cell_neighbors(cell: tuple[int, int], free: set) -> list[tuple[int, int]]:
    r, c = cell
    return [n for n in ((r - 1, c), (r, c + 1), (r + 1, c), (r, c - 1)) if n in free]


def _covering_walk(spec: EnvSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Depth-first walk that crosses every edge of the layout at least once."""
    free = set(spec.cells)
    start = spec.cells[int(rng.integers(len(spec.cells)))]
    walk = [start]
    seen = {start}
    walked: set[frozenset] = set()

    # explicit stack of (cell, remaining neighbors) avoids recursion limits
    def order(cell):
        nbs = _cell_neighbors(cell, free)
        return [nbs[i] for i in rng.permutation(len(nbs))]

    stack = [(start, order(start))]
    while stack:
        cell, todo = stack[-1]
        if not todo:
            stack.pop()
            if stack:
                walk.append(stack[-1][0])
            continue
        nb = todo.pop(0)
        e = frozenset((cell, nb))
        if e in walked:
            continue
        walked.add(e)
        walk.append(nb)
        if nb in seen:
            walk.append(cell)
        else:
            seen.add(nb)
            stack.append((nb, order(nb)))
    if len(seen) != len(free):
        raise SpecError("layout is not connected")
    return walk


def generate_synthetic_environment(
    spec: EnvSpec | str, seed: int
) -> tuple[PoseGraph, TraversalRecord]:
    """Generate a pose graph and a traversal record that rebuilds to it.

    The traversal is a seeded depth-first walk crossing every layout edge,
    sampled ``samples_per_edge`` times per edge; revisited node positions
    are declared as duplicate ranges. Feature references name physical
    locations (``n<node>`` or ``e<a>_<b>_<k>``), so revisits share them.
    """
    if isinstance(spec, str):
        spec = parse_env_spec(spec)
    rng = np.random.default_rng(seed)
    walk = _covering_walk(spec, rng)

    ids: dict[tuple[int, int], int] = {}
    for cell in walk:
        ids.setdefault(cell, len(ids))

    m = spec.samples_per_edge
    samples: list[Sample] = []
    dups: list[tuple[int, int]] = []
    first_heading: dict[tuple[int, int], float] = {}
    dt = 0.1
    for step, cell in enumerate(walk):
        x, y = spec.cell_position(cell)
        if step == 0:
            nx, ny = spec.cell_position(walk[1]) if len(walk) > 1 else (x, y + 1)
            h = bearing(nx - x, ny - y)
        else:
            px, py = spec.cell_position(walk[step - 1])
            h = bearing(x - px, y - py)
            for k in range(1, m):
                f = k / m
                a, b = ids[walk[step - 1]], ids[cell]
                lo_k = k if a < b else m - k
                samples.append(
                    Sample(
                        round(len(samples) * dt, 6),
                        round(px + f * (x - px), _ROUND) + 0.0,
                        round(py + f * (y - py), _ROUND) + 0.0,
                        h,
                        f"e{min(a, b)}_{max(a, b)}_{lo_k}",
                    )
                )
        if cell in first_heading:
            dups.append((len(samples), len(samples)))
        else:
            first_heading[cell] = h
        samples.append(Sample(round(len(samples) * dt, 6), x, y, h, f"n{ids[cell]}"))
    record = TraversalRecord(samples, closures=[], duplicates=dups)

    cells_by_id = sorted(ids, key=ids.get)
    poses = []
    for cell in cells_by_id:
        x, y = spec.cell_position(cell)
        poses.append(Pose(x, y, snap_heading(first_heading[cell], spec.rotation_step)))
    edges: dict[tuple[int, float], int] = {}
    free = set(spec.cells)
    for cell in cells_by_id:
        for nb in _cell_neighbors(cell, free):
            (x0, y0), (x1, y1) = spec.cell_position(cell), spec.cell_position(nb)
            edges[(ids[cell], bearing(x1 - x0, y1 - y0))] = ids[nb]
    graph = PoseGraph(
        poses, edges, spec.spacing, spec.rotation_step, [f"n{i}" for i in range(len(poses))]
    )
    return graph, record


def grid_spec(rows: int, cols: int, spacing: float = 0.1) -> str:
    return f"envspec v1\nspacing {spacing}\ngrid {rows} {cols}\n"


def map_spec(rows: Iterable[str], spacing: float = 0.1) -> str:
    return "envspec v1\nspacing {}\nmap\n{}\nend\n".format(spacing, "\n".join(rows))


def corridor_spec(n: int, spacing: float = 0.1) -> str:
    return grid_spec(1, n, spacing)


def plus_spec(arm: int, spacing: float = 0.1) -> str:
    """Plus-shaped layout with four arms of ``arm`` cells around a centre."""
    size = 2 * arm + 1
    rows = []
    for r in range(size):
        if r == arm:
            rows.append("." * size)
        else:
            rows.append("#" * arm + "." + "#" * arm)
    return map_spec(rows, spacing)


def office_spec(spacing: float = 0.1) -> str:
    """Office-scale layout: 572 nodes with an action-step diameter near 227."""
    return map_spec(_office_rows(), spacing)


def _office_rows(
    width: int = 132, height: int = 84, spur_every: int = 7, spur_len: int = 4
) -> list[str]:
    # rectangular corridor loop with dead-end offices off both long sides
    grid = [["#"] * width for _ in range(height + 2 * spur_len)]
    top, bottom = spur_len, spur_len + height - 1
    for c in range(width):
        grid[top][c] = grid[bottom][c] = "."
    for r in range(top, bottom + 1):
        grid[r][0] = grid[r][width - 1] = "."
    for c in range(spur_every // 2, width, spur_every):
        if c in (0, width - 1, width // 2):
            continue
        for k in range(1, spur_len + 1):
            grid[top - k][c] = grid[bottom + k][c] = "."
    return ["".join(r) for r in grid]


def ring_graph(n: int, spacing: float = 0.1) -> PoseGraph:
    """Corridor of ``n`` nodes whose two ends are joined into a loop.

    Every node has exactly two collinear forward edges, so moving forward
    forever circulates the loop without rotating. No planar traversal
    produces this graph; it is a topological construction.
    """
    if n < 3:
        raise GraphError("a ring needs at least 3 nodes")
    poses = [Pose(round(i * spacing, _ROUND), 0.0, 90.0) for i in range(n)]
    edges = {}
    for i in range(n):
        edges[(i, 90.0)] = (i + 1) % n
        edges[(i, 270.0)] = (i - 1) % n
    return PoseGraph(poses, edges, spacing, 90.0)


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_traversal(record: TraversalRecord, path: str | Path) -> None:
    lines = ["traversal v1"]
    for s in record.samples:
        lines.append(f"{_fmt(s.t)} {_fmt(s.x)} {_fmt(s.y)} {_fmt(s.heading)} {s.feature_ref}")
    lines += [f"closure {i} {j}" for i, j in record.closures]
    lines += [f"dup {i} {j}" for i, j in record.duplicates]
    Path(path).write_text("\n".join(lines) + "\n")


def read_traversal(path: str | Path) -> TraversalRecord:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split() != ["traversal", "v1"]:
        raise GraphError(f"{path}: expected header 'traversal v1'")
    samples, closures, dups = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "closure" and len(parts) == 3:
                closures.append((int(parts[1]), int(parts[2])))
            elif parts[0] == "dup" and len(parts) == 3:
                dups.append((int(parts[1]), int(parts[2])))
            elif len(parts) == 5:
                t, x, y, h = map(float, parts[:4])
                samples.append(Sample(t, x, y, h, parts[4]))
            else:
                raise ValueError
        except ValueError:
            raise GraphError(f"{path}:{lineno}: malformed line {line!r}") from None
    return TraversalRecord(samples, closures, dups)


def write_graph(graph: PoseGraph, path: str | Path) -> None:
    lines = [f"posegraph v1 {_fmt(graph.spacing)} {_fmt(graph.rotation_step)}"]
    for i, (p, ref) in enumerate(zip(graph.poses, graph.feature_refs)):
        lines.append(f"node {i} {_fmt(p.x)} {_fmt(p.y)} {_fmt(p.heading)} {ref}")
    for (a, h), b in sorted(graph.edges.items()):
        lines.append(f"edge {a} {_fmt(h)} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path: str | Path) -> PoseGraph:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["posegraph", "v1"]:
        raise GraphError(f"{path}: expected header 'posegraph v1 spacing rotation_step'")
    spacing, rot = float(head[2]), float(head[3])
    poses, refs, edges = [], [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "node" and len(parts) == 6:
                if int(parts[1]) != len(poses):
                    raise GraphError(f"{path}:{lineno}: node ids must be dense and ordered")
                poses.append(Pose(float(parts[2]), float(parts[3]), float(parts[4])))
                refs.append(parts[5])
            elif parts[0] == "edge" and len(parts) == 4:
                edges[(int(parts[1]), float(parts[2]))] = int(parts[3])
            else:
                raise ValueError
        except ValueError as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(f"{path}:{lineno}: malformed line {line!r}") from None
    return PoseGraph(poses, edges, spacing, rot, refs)
