"""Road graphs, flow series, features and sliding windows.

File formats
------------
Edge list: CSV with header ``from,to,distance``; node ids are 0-based
integers and distances are positive floats. Edges are undirected, and a
duplicated pair keeps the smallest distance seen.

Flow matrix: CSV where each row is one timestep and each column one node,
with an optional first header row of node labels. A header is recognized
by containing at least one non-numeric cell; a row of bare numeric ids is
indistinguishable from data and is loaded as data. Cells are vehicle
counts per interval; an empty cell or a negative value marks a missing
reading.

Windowing
---------
A sample anchored at step t for node n packs the feature window of n over
[t-w+1, t], one feature window per sampled neighbor over the same range,
the static spatial weights of those neighbors, and the raw targets over
[t+1, t+horizon]. Features per step are (raw value, window-min-max
normalized value, stepwise change rate). Per node a series of length L
yields L - w - horizon + 1 samples, so one batch carries exactly
B * (K+1) * w * M input elements no matter how large the graph is.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .rng import Xorshift64Star

FEATURES = 3  # raw, window-normalized, change rate


class DataError(ValueError):
    """Malformed input file or an impossible data request."""


# ---------------------------------------------------------------------------
# graph


@dataclass
class RoadGraph:
    n: int
    edges: list  # (a, b, distance) with a < b, deduplicated
    adj: dict = field(repr=False, default_factory=dict)

    def neighbors(self, node: int) -> list:
        return self.adj.get(node, [])


def build_graph(n: int, edge_iter) -> RoadGraph:
    """Assemble a RoadGraph from (a, b, distance) triples."""
    best = {}
    for a, b, dist in edge_iter:
        if a == b:
            raise DataError(f"self-loop edge on node {a}")
        if not (0 <= a < n and 0 <= b < n):
            raise DataError(f"edge ({a}, {b}) references a node outside 0..{n - 1}")
        if dist <= 0:
            raise DataError(f"edge ({a}, {b}) has non-positive distance {dist}")
        key = (a, b) if a < b else (b, a)
        if key not in best or dist < best[key]:
            best[key] = dist
    edges = [(a, b, best[(a, b)]) for a, b in sorted(best)]
    adj = {}
    for a, b, dist in edges:
        adj.setdefault(a, []).append((b, dist))
        adj.setdefault(b, []).append((a, dist))
    for node in adj:
        adj[node].sort()
    return RoadGraph(n=n, edges=edges, adj=adj)


def load_edges(path, n: int | None = None) -> RoadGraph:
    """Parse an edge-list CSV. Node count defaults to max id + 1."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty edge file")
        normalized = [c.strip().lower() for c in header]
        if normalized != ["from", "to", "distance"]:
            raise DataError(f"{path}: expected header 'from,to,distance', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                a, b, dist = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.append((a, b, dist))
    if n is None:
        if not rows:
            raise DataError(f"{path}: no edges and no node count given")
        n = max(max(a, b) for a, b, _ in rows) + 1
    try:
        return build_graph(n, rows)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass
class SpatialWeights:
    """Static proximity matrix: 1/distance where an edge exists, else 0."""

    a_s: np.ndarray

    def masked_row(self, target: int, neighbors) -> np.ndarray:
        """Weights from target to each sampled neighbor (0 if no direct edge)."""
        return self.a_s[target, list(neighbors)].astype(np.float64)


def spatial_weights(g: RoadGraph) -> SpatialWeights:
    a = np.zeros((g.n, g.n))
    for i, j, dist in g.edges:
        a[i, j] = a[j, i] = 1.0 / dist
    return SpatialWeights(a_s=a)


# ---------------------------------------------------------------------------
# flows


@dataclass
class FlowDataset:
    values: np.ndarray          # (L, N) float64
    missing_mask: np.ndarray    # (L, N) bool, True where the reading was absent
    interval_minutes: int = 5
    start_offset: int = 0       # index of row 0 in the original series

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def nodes(self) -> int:
        return self.values.shape[1]


def load_flows(path, interval_minutes: int = 5) -> FlowDataset:
    """Parse a flow CSV (rows = timesteps, columns = nodes)."""
    rows = []
    n_cols = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            raise DataError(f"{path}: empty flow file")

        def is_header(cells):
            for c in cells:
                c = c.strip()
                if not c:
                    return False
                try:
                    float(c)
                except ValueError:
                    return True
            return False

        data_rows = reader if is_header(first) else _chain_row(first, reader)
        for lineno, row in enumerate(data_rows, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if n_cols is None:
                n_cols = len(row)
            elif len(row) != n_cols:
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected {n_cols}")
            parsed = np.empty(n_cols)
            for j, cell in enumerate(row):
                cell = cell.strip()
                if not cell:
                    parsed[j] = np.nan
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {lineno} col {j}: bad value {cell!r}") from None
                parsed[j] = np.nan if v < 0 else v
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.vstack(rows)
    mask = np.isnan(values)
    values = np.where(mask, 0.0, values)
    return FlowDataset(values=values, missing_mask=mask, interval_minutes=interval_minutes)


def _chain_row(first, rest):
    yield first
    yield from rest


def impute_missing(d: FlowDataset) -> FlowDataset:
    """Fill missing readings per node by linear interpolation in time.

    Leading and trailing gaps take the nearest observed value. A node with
    no observed reading at all cannot be recovered and raises.
    """
    values = d.values.copy()
    idx = np.arange(d.length)
    for col in range(d.nodes):
        miss = d.missing_mask[:, col]
        if not miss.any():
            continue
        if miss.all():
            raise DataError(f"node {col} has no observed values to interpolate from")
        obs = ~miss
        values[miss, col] = np.interp(idx[miss], idx[obs], values[obs, col])
    return FlowDataset(values=values, missing_mask=d.missing_mask.copy(),
                       interval_minutes=d.interval_minutes, start_offset=d.start_offset)


def chronological_split(d: FlowDataset, ratios=(0.6, 0.2, 0.2), w: int = 12,
                        horizon: int = 1) -> tuple:
    """Cut the series into contiguous train/val/test stretches, in time order.

    Slice lengths are floor(L * ratio) for train and val with the remainder
    going to test, so no timestep is shared or dropped. Each requested slice
    must still fit at least one window (w + horizon steps).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n_train = int(d.length * ratios[0])
    n_val = int(d.length * ratios[1])
    bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, d.length)]
    out = []
    for name, (lo, hi) in zip(("train", "val", "test"), bounds):
        size = hi - lo
        if ratios[("train", "val", "test").index(name)] > 0 and size < w + horizon:
            raise DataError(f"{name} slice has {size} steps; needs at least w + horizon = {w + horizon}")
        out.append(FlowDataset(values=d.values[lo:hi].copy(),
                               missing_mask=d.missing_mask[lo:hi].copy(),
                               interval_minutes=d.interval_minutes,
                               start_offset=d.start_offset + lo))
    return tuple(out)


# ---------------------------------------------------------------------------
# neighbors


@dataclass
class NeighborSet:
    target: int
    neighbors: list
    hop_limit: int


def hop_candidates(g: RoadGraph, target: int, hops: int) -> list:
    """All nodes reachable within the hop limit, excluding the target."""
    seen = {target}
    frontier = [target]
    out = []
    for _ in range(hops):
        nxt = []
        for node in frontier:
            for nbr, _dist in g.neighbors(node):
                if nbr not in seen:
                    seen.add(nbr)
                    nxt.append(nbr)
                    out.append(nbr)
        frontier = nxt
    out.sort()
    return out


def _select_slots(cand: list, target: int, k: int, rng: Xorshift64Star) -> list:
    """Fill exactly k neighbor slots from a candidate pool.

    More candidates than k: uniform sample without replacement. Fewer (but
    some): keep them all and pad with replacement so every sample has the
    same width. An empty pool (isolated node) fills every slot with the
    target itself, which later zeroes its spatial weights.
    """
    if not cand:
        return [target] * k
    if len(cand) == k:
        return list(cand)
    if len(cand) > k:
        return sorted(rng.sample(cand, k))
    return list(cand) + [cand[rng.randint(len(cand))] for _ in range(k - len(cand))]


def sample_neighbors(g: RoadGraph, target: int, k: int, hops: int,
                     rng: Xorshift64Star) -> NeighborSet:
    """Draw k neighbor slots for a target node from its hop-limited pool."""
    if k < 0:
        raise DataError("k must be >= 0")
    if not (0 <= target < g.n):
        raise DataError(f"target {target} outside graph of {g.n} nodes")
    if k > 0 and g.n == 1:
        raise DataError("cannot sample neighbors from a single-node graph")
    if k == 0:
        return NeighborSet(target=target, neighbors=[], hop_limit=hops)
    chosen = _select_slots(hop_candidates(g, target, hops), target, k, rng)
    return NeighborSet(target=target, neighbors=chosen, hop_limit=hops)


# ---------------------------------------------------------------------------
# features and windows


def engineer_features(window) -> np.ndarray:
    """Per-step features for one raw window: raw, min-max scaled, change rate.

    Min-max scaling uses the window's own extrema; a constant window maps
    to zeros. The change rate is (x_t - x_{t-1}) / x_{t-1} with 0 for the
    first step and wherever the previous value is 0.
    """
    raw = np.asarray(window, dtype=np.float64)
    if raw.ndim != 1 or raw.size < 2:
        raise DataError(f"feature window must be 1-D with >= 2 steps, got shape {raw.shape}")
    out = np.zeros((raw.size, FEATURES))
    out[:, 0] = raw
    lo, hi = raw.min(), raw.max()
    if hi > lo:
        out[:, 1] = (raw - lo) / (hi - lo)
    prev = raw[:-1]
    np.divide(raw[1:] - prev, prev, out=out[1:, 2], where=prev != 0.0)
    return out


@dataclass
class WindowSample:
    x: np.ndarray            # (w, FEATURES) target features
    g: np.ndarray            # (k, w, FEATURES) neighbor features
    spatial_row: np.ndarray  # (k,) static weights target -> neighbor
    y: np.ndarray            # (horizon,) raw targets
    node: int
    anchor: int              # index of the last input step within the split
    neighbor_ids: list
    y_observed: np.ndarray   # (horizon,) False where the target was imputed


@dataclass
class Batch:
    x: np.ndarray            # (B, w, FEATURES)
    g: np.ndarray            # (B, k, w, FEATURES)
    spatial: np.ndarray      # (B, k)
    y: np.ndarray            # (B, horizon)
    nodes: np.ndarray
    anchors: np.ndarray
    y_observed: np.ndarray   # (B, horizon)

    @property
    def input_elements(self) -> int:
        """Model-input element count: B * (k + 1) * w * FEATURES."""
        return self.x.size + self.g.size

    def __len__(self):
        return self.x.shape[0]


def collate(samples) -> Batch:
    if not samples:
        raise DataError("cannot collate an empty batch")
    return Batch(
        x=np.stack([s.x for s in samples]),
        g=np.stack([s.g for s in samples]),
        spatial=np.stack([s.spatial_row for s in samples]),
        y=np.stack([s.y for s in samples]),
        nodes=np.array([s.node for s in samples]),
        anchors=np.array([s.anchor for s in samples]),
        y_observed=np.stack([s.y_observed for s in samples]),
    )


class WindowProvider:
    """Lazy window source over one chronological slice.

    Samples are indexed node-major: index i maps to node i // per_node and
    anchor offset i % per_node. Nothing is materialized up front, so the
    memory footprint stays at the flow matrix regardless of sample count.
    Neighbor sets are redrawn per (sample, epoch) from streams derived off
    (seed, split tag, epoch, node, anchor); evaluation uses epoch 0.
    """

    def __init__(self, flows: FlowDataset, graph: RoadGraph, sw: SpatialWeights,
                 w: int, horizon: int, k: int, hops: int, seed: int, tag: str):
        if flows.length < w + horizon:
            raise DataError(f"slice of {flows.length} steps cannot fit w={w} + horizon={horizon}")
        if flows.nodes != graph.n:
            raise DataError(f"flow matrix has {flows.nodes} nodes but graph has {graph.n}")
        self.flows = flows
        self.graph = graph
        self.sw = sw
        self.w = w
        self.horizon = horizon
        self.k = k
        self.hops = hops
        self.seed = seed
        self.tag = tag
        self.per_node = flows.length - w - horizon + 1
        self._cand = {}

    def __len__(self):
        return self.per_node * self.flows.nodes

    def _candidates(self, node):
        got = self._cand.get(node)
        if got is None:
            got = hop_candidates(self.graph, node, self.hops)
            self._cand[node] = got
        return got

    def _draw_neighbors(self, node, anchor, epoch):
        if self.k == 0:
            return []
        cand = self._candidates(node)
        if len(cand) == self.k:
            return list(cand)  # no randomness needed, skip stream setup
        rng = Xorshift64Star(self.seed, "neighbors", self.tag, epoch, node, anchor)
        return _select_slots(cand, node, self.k, rng)

    def sample(self, index: int, epoch: int = 0) -> WindowSample:
        if not (0 <= index < len(self)):
            raise DataError(f"sample index {index} outside 0..{len(self) - 1}")
        node, offset = divmod(index, self.per_node)
        anchor = offset + self.w - 1
        lo, hi = offset, offset + self.w
        neighbors = self._draw_neighbors(node, anchor, epoch)
        vals = self.flows.values
        x = engineer_features(vals[lo:hi, node])
        g = np.stack([engineer_features(vals[lo:hi, nbr]) for nbr in neighbors]) \
            if neighbors else np.zeros((0, self.w, FEATURES))
        y = vals[hi:hi + self.horizon, node].copy()
        observed = ~self.flows.missing_mask[hi:hi + self.horizon, node]
        spatial = self.sw.masked_row(node, neighbors) if neighbors else np.zeros(0)
        return WindowSample(x=x, g=g, spatial_row=spatial, y=y, node=node,
                            anchor=anchor, neighbor_ids=list(neighbors),
                            y_observed=observed)

    def batches(self, order=None, batch_size: int = 64, epoch: int = 0):
        """Yield collated batches; order defaults to sequential."""
        idx = np.arange(len(self)) if order is None else order
        for at in range(0, len(idx), batch_size):
            chunk = idx[at:at + batch_size]
            yield collate([self.sample(int(i), epoch) for i in chunk])


def make_windows(flows: FlowDataset, graph: RoadGraph, sw: SpatialWeights,
                 w: int, horizon: int, k: int, hops: int, seed: int = 0,
                 tag: str = "windows"):
    """Generate every WindowSample of a slice once, in index order."""
    provider = WindowProvider(flows, graph, sw, w, horizon, k, hops, seed, tag)
    for i in range(len(provider)):
        yield provider.sample(i)
