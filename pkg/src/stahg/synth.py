"""Deterministic synthetic road networks, traffic flows and baselines.

Flows superpose four effects per node: a sinusoidal daily demand with a
node-specific phase, diffusion of the previous step's flow deviations
from graph neighbors (weighted by reciprocal edge distance, scaled by
kappa), Gaussian observation noise, and occasional multi-step incidents
that multiply the emitted flow by a drop factor. Everything derives from
the spec's single seed through the portable generator in ``rng``; the
system RNG is never touched, so identical specs produce byte-identical
CSV files on any platform.

Draw order (the determinism contract): node phases first, one uniform per
node in id order; then the time loop emits, for each step t and node n in
ascending order, one standard normal when noise > 0, then one uniform for
incident onset when incident_rate > 0 and no incident is active. Graph
generation draws its own stream: point coordinates for random-geometric
layouts, then one uniform per edge for path/grid distances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import DataError, FlowDataset, RoadGraph, WindowProvider, build_graph
from .rng import Xorshift64Star
from .train import MetricsReport, compute_metrics

TOPOLOGIES = ("path", "grid", "random-geometric")


@dataclass
class SynthSpec:
    nodes: int = 12
    topology: str = "path"
    steps: int = 2000
    period: int = 144            # timesteps per synthetic day
    base: float = 10.0           # mean demand level
    amplitude: float = 5.0       # demand swing
    kappa: float = 0.2           # neighbor-deviation diffusion in [0, 1)
    noise: float = 0.05          # observation noise sigma
    incident_rate: float = 0.002  # per-(node, step) onset probability
    incident_drop: float = 0.3   # flow multiplier while an incident is active
    incident_steps: int = 6      # incident duration
    radius: float = 0.35         # random-geometric connection radius
    seed: int = 0
    interval_minutes: int = 5

    def validate(self) -> None:
        if self.nodes < 1:
            raise DataError("nodes must be >= 1")
        if self.topology not in TOPOLOGIES:
            raise DataError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.period < 2:
            raise DataError("period must be >= 2")
        if not (0.0 <= self.kappa < 1.0):
            raise DataError("kappa must lie in [0, 1)")
        if self.noise < 0:
            raise DataError("noise must be >= 0")
        if not (0.0 <= self.incident_rate < 1.0):
            raise DataError("incident_rate must lie in [0, 1)")
        if not (0.0 < self.incident_drop <= 1.0):
            raise DataError("incident_drop must lie in (0, 1]")
        if self.incident_steps < 1:
            raise DataError("incident_steps must be >= 1")
        if self.radius <= 0:
            raise DataError("radius must be positive")


# ---------------------------------------------------------------------------
# graph generation


def _edge_distances(n_edges: int, rng: Xorshift64Star) -> list:
    return [0.5 + 4.5 * rng.uniform() for _ in range(n_edges)]


def gen_graph(spec: SynthSpec) -> RoadGraph:
    """Build the road graph for a spec; distances land in [0.5, 5.0]."""
    spec.validate()
    rng = Xorshift64Star(spec.seed, "graph")
    n = spec.nodes
    if spec.topology == "path":
        pairs = [(i, i + 1) for i in range(n - 1)]
        dists = _edge_distances(len(pairs), rng)
        return build_graph(n, [(a, b, d) for (a, b), d in zip(pairs, dists)])
    if spec.topology == "grid":
        # near-square lattice; the last row may be partial
        cols = max(1, math.isqrt(n))
        if cols * cols < n:
            cols += 1
        pairs = []
        for i in range(n):
            if (i % cols) + 1 < cols and i + 1 < n:
                pairs.append((i, i + 1))
            if i + cols < n:
                pairs.append((i, i + cols))
        dists = _edge_distances(len(pairs), rng)
        return build_graph(n, [(a, b, d) for (a, b), d in zip(pairs, dists)])
    # random-geometric: connect points closer than the radius
    pts = np.array([[rng.uniform(), rng.uniform()] for _ in range(n)])
    triples = []
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = pts[i, 0] - pts[j, 0], pts[i, 1] - pts[j, 1]
            dist = math.sqrt(dx * dx + dy * dy)
            if dist < spec.radius:
                triples.append((i, j, 0.5 + 4.5 * dist / spec.radius))
    return build_graph(n, triples)


# ---------------------------------------------------------------------------
# flow generation


def gen_flows(graph: RoadGraph, spec: SynthSpec) -> FlowDataset:
    """Emit the (steps, nodes) flow matrix for a graph + spec.

    With kappa = 0, noise = 0 and incident_rate = 0 every column is an
    exact shifted sinusoid. Deviations (flow minus demand) are what
    diffuses, so incidents and noise propagate to graph neighbors at
    lag 1 with strength kappa.
    """
    spec.validate()
    if graph.n != spec.nodes:
        raise DataError(f"graph has {graph.n} nodes, spec says {spec.nodes}")
    n, length = spec.nodes, spec.steps
    phase_rng = Xorshift64Star(spec.seed, "phase")
    phases = [2.0 * math.pi * phase_rng.uniform() for _ in range(n)]
    rng = Xorshift64Star(spec.seed, "flow")

    # reciprocal-distance neighbor weights, normalized per node
    nbrs = []
    for node in range(n):
        ws = [(m, 1.0 / dist) for m, dist in graph.neighbors(node)]
        total = sum(w for _, w in ws)
        nbrs.append([(m, w / total) for m, w in ws] if total > 0 else [])

    values = np.zeros((length, n))
    dev_prev = np.zeros(n)
    dev_now = np.zeros(n)
    remaining = [0] * n
    two_pi = 2.0 * math.pi
    for t in range(length):
        tod = two_pi * (t % spec.period) / spec.period
        for node in range(n):
            demand = spec.base + spec.amplitude * math.sin(tod + phases[node])
            raw = demand
            if spec.kappa > 0.0 and nbrs[node]:
                raw += spec.kappa * sum(w * dev_prev[m] for m, w in nbrs[node])
            if spec.noise > 0.0:
                raw += spec.noise * rng.normal()
            if spec.incident_rate > 0.0:
                if remaining[node] == 0 and rng.uniform() < spec.incident_rate:
                    remaining[node] = spec.incident_steps
                if remaining[node] > 0:
                    raw *= spec.incident_drop
                    remaining[node] -= 1
            flow = raw if raw > 0.0 else 0.0
            values[t, node] = flow
            dev_now[node] = flow - demand
        dev_prev, dev_now = dev_now, dev_prev
    return FlowDataset(values=values, missing_mask=np.zeros((length, n), dtype=bool),
                       interval_minutes=spec.interval_minutes)


# ---------------------------------------------------------------------------
# CSV emission


def write_edges_csv(path, graph: RoadGraph) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("from,to,distance\n")
        for a, b, dist in graph.edges:
            fh.write(f"{a},{b},{dist!r}\n")


def write_flows_csv(path, flows: FlowDataset) -> None:
    # header labels must be non-numeric: the loader treats an all-numeric
    # first row as data, since bare node ids are indistinguishable from it
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"n{i}" for i in range(flows.nodes)) + "\n")
        for row in flows.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# trivial baselines


def persistence_baseline(provider: WindowProvider, mape_floor: float = 1.0,
                         exclude_imputed: bool = False) -> MetricsReport:
    """Predict every horizon step as the last observed input value."""
    ys, yhats, observed = [], [], []
    for batch in provider.batches(batch_size=512):
        last = batch.x[:, -1, 0:1]
        ys.append(batch.y)
        yhats.append(np.repeat(last, batch.y.shape[1], axis=1))
        observed.append(batch.y_observed)
    y = np.vstack(ys)
    yhat = np.vstack(yhats)
    mask = np.vstack(observed) if exclude_imputed else None
    return compute_metrics(y, yhat, mape_floor=mape_floor, mask=mask)


def historical_average_baseline(train_flows: FlowDataset, provider: WindowProvider,
                                period: int, mape_floor: float = 1.0,
                                exclude_imputed: bool = False) -> MetricsReport:
    """Predict by the training-split mean at the same phase of the period.

    Phases are absolute timestep indices modulo the period, so the
    alignment survives chronological splitting. Periods that do not
    divide the training length simply yield partial-cycle means; a phase
    never seen in training falls back to the node's overall mean.
    """
    if period < 1:
        raise DataError("period must be >= 1")
    n = train_flows.nodes
    sums = np.zeros((period, n))
    counts = np.zeros((period, n))
    for t in range(train_flows.length):
        p = (train_flows.start_offset + t) % period
        sums[p] += train_flows.values[t]
        counts[p] += 1.0
    node_mean = train_flows.values.mean(axis=0)
    means = np.where(counts > 0, sums / np.maximum(counts, 1.0), node_mean[None, :])

    ys, yhats, observed = [], [], []
    horizon = provider.horizon
    base = provider.flows.start_offset
    for batch in provider.batches(batch_size=512):
        yhat = np.empty_like(batch.y)
        for row, (node, anchor) in enumerate(zip(batch.nodes, batch.anchors)):
            for s in range(horizon):
                p = (base + anchor + 1 + s) % period
                yhat[row, s] = means[p, node]
        ys.append(batch.y)
        yhats.append(yhat)
        observed.append(batch.y_observed)
    y = np.vstack(ys)
    yhat = np.vstack(yhats)
    mask = np.vstack(observed) if exclude_imputed else None
    return compute_metrics(y, yhat, mape_floor=mape_floor, mask=mask)
