"""Observation function: frozen four-view feature vectors per pose.

Each recorded location (a graph node or an intermediate frame along an
edge) stores four ``d``-dimensional view features in the world frame, view
``k`` looking along compass heading ``90 * k``. An observation concatenates
the four views starting from the agent's heading.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .graph import PoseGraph, TraversalRecord, AlignmentMap, edge_sample_offsets

N_VIEWS = 4
SYNTHETIC_FRAME_STEP = 0.025
DEFAULT_SIGMA_POS = 0.05
DEFAULT_SIGMA_ROT = 5.0


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    d: int = 8
    aliasing_pairs: tuple[tuple[int, int], ...] = ()
    view_noise: float = 0.0
    day_shift: float = 0.0

    def __post_init__(self):
        if self.d < 1:
            raise FeatureError("d must be >= 1")
        if self.view_noise < 0 or self.day_shift < 0:
            raise FeatureError("noise levels must be non-negative")


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Recorded view features plus the noise model used to sample them.

    ``node_features`` has shape ``(n_nodes, 4, d)``. ``edge_features`` maps
    ``(a, b)`` with ``a < b`` to ``(offsets, features)``: offsets in meters
    from ``a``, strictly increasing inside ``(0, spacing)``, and features of
    shape ``(m, 4, d)``.
    """

    graph: PoseGraph
    node_features: np.ndarray
    edge_features: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict
    )
    sigma_pos: float = DEFAULT_SIGMA_POS
    sigma_rot: float = DEFAULT_SIGMA_ROT
    stochastic: bool = False

    def __post_init__(self):
        nf = np.asarray(self.node_features, dtype=float)
        if nf.ndim != 3 or nf.shape[0] != self.graph.n_nodes or nf.shape[1] != N_VIEWS:
            raise FeatureError(
                f"node_features must have shape ({self.graph.n_nodes}, 4, d), got {nf.shape}"
            )
        if not np.isfinite(nf).all():
            raise FeatureError("node features must be finite")
        if self.sigma_pos < 0 or self.sigma_rot < 0:
            raise FeatureError("sigma_pos and sigma_rot must be non-negative")
        for (a, b), (off, feats) in self.edge_features.items():
            if not a < b:
                raise FeatureError(f"edge key {(a, b)} must be ordered a < b")
            if len(off) != len(feats) or feats.shape[1:] != nf.shape[1:]:
                raise FeatureError(f"edge {(a, b)} features have inconsistent shape")
            if len(off) and (
                np.any(np.diff(off) <= 0) or off[0] <= 0 or off[-1] >= self.graph.spacing
            ):
                raise FeatureError(f"edge {(a, b)} offsets must increase inside (0, spacing)")
        object.__setattr__(self, "node_features", nf)

    @property
    def d(self) -> int:
        return self.node_features.shape[2]

    @property
    def obs_dim(self) -> int:
        return N_VIEWS * self.d

    def with_noise(self, **changes) -> "ObservationModel":
        return replace(self, **changes)

    @cached_property
    def _axis_tables(self):
        """Per node and travel axis: signed offsets and stacked sample features.

        Axis 0 runs along headings 0/180, axis 1 along 90/270; positive
        offsets point toward heading 0 or 90 respectively.
        """
        g = self.graph
        rows = [self.node_features[i] for i in range(g.n_nodes)]
        tables: list[list[tuple[int, np.ndarray, np.ndarray]]] = []
        for node in range(g.n_nodes):
            per_axis = []
            for axis in (0, 1):
                offs = [0.0]
                idx = [node]
                present = False
                for sign, heading in ((1.0, 90.0 * axis), (-1.0, 90.0 * axis + 180.0)):
                    nb = g.neighbor(node, heading)
                    if nb is None:
                        continue
                    present = True
                    key = (min(node, nb), max(node, nb))
                    if key not in self.edge_features:
                        continue
                    off, feats = self.edge_features[key]
                    for o, f in zip(off, feats):
                        offs.append(sign * (o if node == key[0] else g.spacing - o))
                        rows.append(f)
                        idx.append(len(rows) - 1)
                if present:
                    order = np.argsort(offs, kind="stable")
                    per_axis.append(
                        (axis, np.asarray(offs)[order], np.asarray(idx, dtype=np.int64)[order])
                    )
            tables.append(per_axis)
        return tables, np.stack(rows)

    def deterministic(self, node: int, heading: float) -> np.ndarray:
        shift = int(round(heading / 90.0)) % N_VIEWS
        order = (shift + np.arange(N_VIEWS)) % N_VIEWS
        return self.node_features[node][order].reshape(-1)


_VIEW_ORDER = [(k + np.arange(N_VIEWS)) % N_VIEWS for k in range(N_VIEWS)]


def sample_observation(
    model: ObservationModel, node: int, heading: float, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Observation of ``(node, heading)``, perturbed when the model is stochastic.

    The perturbed position is drawn along one of the node's travel axes
    (uniformly when it has two) and snapped to the nearest recorded frame;
    the perturbed heading is snapped to the nearest recorded view.
    """
    if not 0 <= node < model.graph.n_nodes:
        raise FeatureError(f"node {node} has no features")
    if not model.stochastic:
        return model.deterministic(node, heading)
    if rng is None:
        raise ValueError("stochastic observations need an rng")
    tables, rows = model._axis_tables
    axes = tables[node]
    sample = node
    if axes:
        _, offs, idx = axes[0] if len(axes) == 1 else axes[int(rng.integers(len(axes)))]
        offset = rng.normal(0.0, model.sigma_pos)
        k = int(np.searchsorted(offs, offset))
        if k == len(offs) or (k > 0 and offset - offs[k - 1] <= offs[k] - offset):
            k -= 1
        sample = idx[k]
    turned = heading + rng.normal(0.0, model.sigma_rot)
    return rows[sample][_VIEW_ORDER[int(np.rint(turned / 90.0)) % N_VIEWS]].reshape(-1)


def synthetic_offsets(spacing: float, step: float = SYNTHETIC_FRAME_STEP) -> np.ndarray:
    m = max(1, int(round(spacing / step)))
    return np.array([round(k * spacing / m, 6) for k in range(1, m)])


def encode_synthetic(
    spec: EncoderSpec,
    graph: PoseGraph,
    seed: int,
    day: str = "train",
    *,
    sigma_pos: float = DEFAULT_SIGMA_POS,
    sigma_rot: float = DEFAULT_SIGMA_ROT,
    stochastic: bool = False,
) -> ObservationModel:
    """Stand-in for a frozen pretrained encoder.

    Every node view gets a standard-normal base vector; aliased node pairs
    share their base. Each recorded frame adds its own ``view_noise``
    clutter, and edge frames blend the endpoint bases linearly. The
    ``validation`` day adds an independent ``day_shift`` perturbation to
    every frame on top of identical training-day draws.
    """
    if day not in ("train", "validation"):
        raise FeatureError(f"day must be 'train' or 'validation', got {day!r}")
    n = graph.n_nodes
    for a, b in spec.aliasing_pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise FeatureError(f"aliasing pair ({a}, {b}) references a missing node")
    base_rng = np.random.default_rng([seed, 0])
    noise_rng = np.random.default_rng([seed, 1])
    day_rng = np.random.default_rng([seed, 2])

    base = base_rng.standard_normal((n, N_VIEWS, spec.d))
    for a, b in spec.aliasing_pairs:
        base[b] = base[a]

    def finish(x: np.ndarray) -> np.ndarray:
        x = x + spec.view_noise * noise_rng.standard_normal(x.shape)
        if day == "validation":
            x = x + spec.day_shift * day_rng.standard_normal(x.shape)
        else:
            day_rng.standard_normal(x.shape)
        return x

    nodes = finish(base)
    offsets = synthetic_offsets(graph.spacing)
    w = (offsets / graph.spacing)[:, None, None]
    edges = {}
    keys = sorted({(min(a, b), max(a, b)) for (a, _), b in graph.edges.items()})
    for a, b in keys:
        if len(offsets) == 0:
            break
        edges[(a, b)] = (offsets.copy(), finish((1 - w) * base[a] + w * base[b]))
    return ObservationModel(
        graph, nodes, edges, sigma_pos=sigma_pos, sigma_rot=sigma_rot, stochastic=stochastic
    )


def models_equal(a: ObservationModel, b: ObservationModel) -> bool:
    if a.graph != b.graph or not np.array_equal(a.node_features, b.node_features):
        return False
    if a.edge_features.keys() != b.edge_features.keys():
        return False
    for k, (off, feats) in a.edge_features.items():
        off2, feats2 = b.edge_features[k]
        if not (np.array_equal(off, off2) and np.array_equal(feats, feats2)):
            return False
    return (a.sigma_pos, a.sigma_rot, a.stochastic) == (b.sigma_pos, b.sigma_rot, b.stochastic)


# --------------------------------------------------------------------------
# Feature manifests
# --------------------------------------------------------------------------


def read_feature_manifest(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a ``features v1 d`` manifest into ``{feature_ref: (4, d) array}``."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[:2] != ["features", "v1"]:
        raise FeatureError(f"{path}: expected header 'features v1 d'")
    d = int(head[2])
    full: dict[str, np.ndarray] = {}
    views: dict[str, dict[int, np.ndarray]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "feat":
            vals = parts[2:]
            if len(vals) != N_VIEWS * d:
                raise FeatureError(
                    f"{path}:{lineno}: record {parts[1]!r} has {len(vals)} values, "
                    f"expected {N_VIEWS * d}"
                )
            full[parts[1]] = np.array(vals, dtype=float).reshape(N_VIEWS, d)
        elif parts[0] == "viewfeat":
            view = int(parts[2])
            vals = parts[3:]
            if len(vals) != d:
                raise FeatureError(
                    f"{path}:{lineno}: record {parts[1]!r} view {view} has {len(vals)} "
                    f"values, expected {d}"
                )
            if not 0 <= view < N_VIEWS:
                raise FeatureError(f"{path}:{lineno}: view index {view} out of range")
            views.setdefault(parts[1], {})[view] = np.array(vals, dtype=float)
        else:
            raise FeatureError(f"{path}:{lineno}: malformed line")
    for ref, vs in views.items():
        if len(vs) != N_VIEWS:
            raise FeatureError(f"{path}: record {ref!r} is missing views")
        full[ref] = np.stack([vs[k] for k in range(N_VIEWS)])
    return d, full


def _ref_for(refs: dict[str, np.ndarray], ref: str, path) -> np.ndarray:
    if ref not in refs:
        raise FeatureError(f"{path}: missing feature record {ref!r}")
    return refs[ref]


def ingest_precomputed_features(
    manifest: str | Path,
    graph: PoseGraph,
    record: TraversalRecord,
    alignment: AlignmentMap | None = None,
    *,
    sigma_pos: float = DEFAULT_SIGMA_POS,
    sigma_rot: float = DEFAULT_SIGMA_ROT,
    stochastic: bool = False,
    edge_tolerance: float | None = None,
) -> ObservationModel:
    """Attach manifest features to graph nodes and edge frames.

    Node features come from the graph's own feature references, or, for a
    validation recording, from the sample each node is aligned with. Frames
    lying between adjacent nodes become edge intermediates.
    """
    _, refs = read_feature_manifest(manifest)
    if alignment is None:
        node_refs = graph.feature_refs
    else:
        node_refs = [record.samples[alignment.pairs[i]].feature_ref for i in range(graph.n_nodes)]
    nodes = np.stack([_ref_for(refs, r, manifest) for r in node_refs])
    edges = {}
    for key, items in edge_sample_offsets(graph, record, edge_tolerance).items():
        off = np.array([o for o, _ in items])
        feats = np.stack([_ref_for(refs, record.samples[i].feature_ref, manifest) for _, i in items])
        edges[key] = (off, feats)
    return ObservationModel(
        graph, nodes, edges, sigma_pos=sigma_pos, sigma_rot=sigma_rot, stochastic=stochastic
    )


def write_feature_manifest(
    model: ObservationModel,
    record: TraversalRecord,
    path: str | Path,
    alignment: AlignmentMap | None = None,
    edge_tolerance: float | None = None,
) -> None:
    """Export the features a later ingest of ``record`` will look up."""
    g = model.graph
    out: dict[str, np.ndarray] = {}
    if alignment is None:
        node_refs = g.feature_refs
    else:
        node_refs = [record.samples[alignment.pairs[i]].feature_ref for i in range(g.n_nodes)]
    for i, ref in enumerate(node_refs):
        out.setdefault(ref, model.node_features[i])
    for key, items in edge_sample_offsets(g, record, edge_tolerance).items():
        if key not in model.edge_features:
            raise FeatureError(f"model has no frames for edge {key}")
        off, feats = model.edge_features[key]
        for o, i in items:
            k = int(np.argmin(np.abs(off - o)))
            if abs(off[k] - o) > 1e-6:
                raise FeatureError(f"model has no frame at offset {o} on edge {key}")
            out.setdefault(record.samples[i].feature_ref, feats[k])
    lines = [f"features v1 {model.d}"]
    for ref, f in out.items():
        lines.append(f"feat {ref} " + " ".join(repr(float(v)) for v in f.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")
