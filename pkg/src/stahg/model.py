"""Recurrent graph forecaster: gated encoders, hybrid attention over
sampled neighbors, and a coarse temporal-graph refinement.

One forward pass over a window of w steps runs K+1 gated recurrent
encoders side by side: one for the target node (carry r) and one per
sampled neighbor (carry u_i). At every step the target's fresh state h
is first enriched with a statically weighted sum of neighbor states
(h_s = relu(W_s^T [h, sum_i a_si u_i]); the a_si are reciprocal edge
distances, not learned), then an attention over neighbor states keyed by
h_s produces the hybrid representation
r = relu(W_fuse1^T [h, sum_i alpha_i W_v^T u_i]). Each neighbor state is
updated in turn, u_i := relu(W_fuse2^T [h, u_i]), with gradient flow
from that update into h blocked by default so neighbor refreshes do not
steer the target encoder. After the last step, attenuation-weighted sums
of the per-step states (weight 1/(w-t+1), so the final step weighs 1)
form one summary row per node; row-softmaxed inner-product similarities,
sparsified to the top_k entries per row plus a unit self-loop, give a
small adjacency over the K+1 nodes, and one row-normalized graph
convolution re-mixes the last-step states into the refined target
representation fed to a two-layer MLP head that emits all horizon steps
at once.

Parameters default to one gate set per (encoder, timestep); flags enable
conventional sharing across time or across the neighbor encoders. The
embedding that lifts the 3 per-step features to width D is shared across
timesteps within an encoder. Checkpoints are JSON maps from stable
parameter names (``encoder{k}.cell{t}.W_i``, ``hgat.W_q``, ...) to shape
plus row-major values, and round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import TrainingConfig
from .data import FEATURES, Batch, collate
from .diffcore import DimensionError, Tensor
from .rng import substream


class CheckpointError(ValueError):
    """Checkpoint file malformed or incompatible with the config."""


# ---------------------------------------------------------------------------
# parameters


@dataclass
class CellParams:
    w_i: Tensor
    w_f: Tensor
    w_c: Tensor
    w_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    def named(self, prefix):
        yield f"{prefix}.W_i", self.w_i
        yield f"{prefix}.W_f", self.w_f
        yield f"{prefix}.W_c", self.w_c
        yield f"{prefix}.W_o", self.w_o
        yield f"{prefix}.b_i", self.b_i
        yield f"{prefix}.b_f", self.b_f
        yield f"{prefix}.b_c", self.b_c
        yield f"{prefix}.b_o", self.b_o


@dataclass
class EncoderParams:
    embed_w: Tensor   # (D, FEATURES)
    embed_b: Tensor   # (D,)
    cells: list       # one CellParams per timestep, or a single shared one

    def cell(self, t: int) -> CellParams:
        return self.cells[t if len(self.cells) > 1 else 0]

    def named(self, prefix):
        yield f"{prefix}.embed.W", self.embed_w
        yield f"{prefix}.embed.b", self.embed_b
        for t, c in enumerate(self.cells):
            yield from c.named(f"{prefix}.cell{t}")


@dataclass
class HgatParams:
    w_s: Tensor       # (D, 2D) spatial fuse
    w_q: Tensor       # (D, D)
    w_k: Tensor       # (D, D)
    w_v: Tensor       # (D, D)
    w_fuse1: Tensor   # (D, 2D) temporal fuse
    w_fuse2: Tensor   # (D, 2D) neighbor update

    def named(self):
        yield "hgat.W_s", self.w_s
        yield "hgat.W_q", self.w_q
        yield "hgat.W_k", self.w_k
        yield "hgat.W_v", self.w_v
        yield "hgat.W_fuse1", self.w_fuse1
        yield "hgat.W_fuse2", self.w_fuse2


@dataclass
class PredictorParams:
    w1: Tensor        # (D, D)
    b1: Tensor        # (D,)
    w2: Tensor        # (horizon, D)
    b2: Tensor        # (horizon,)

    def named(self):
        yield "predictor.W1", self.w1
        yield "predictor.b1", self.b1
        yield "predictor.W2", self.w2
        yield "predictor.b2", self.b2


@dataclass
class ModelParams:
    encoders: list            # [target] + neighbor encoders (1 shared if share_encoders)
    hgat: HgatParams
    w_g: Tensor               # (D, D) graph-convolution weight
    predictor: PredictorParams
    share_encoders: bool
    share_time: bool
    c0: dict                  # "encoder{k}.c0" -> (1, D) array; empty for zero init

    def encoder(self, slot: int) -> EncoderParams:
        """Encoder for window slot: 0 is the target, 1..K the neighbors."""
        if slot == 0:
            return self.encoders[0]
        return self.encoders[1] if self.share_encoders else self.encoders[slot]

    def named_tensors(self) -> list:
        out = []
        for e, enc in enumerate(self.encoders):
            out.extend(enc.named(f"encoder{e}"))
        out.extend(self.hgat.named())
        out.append(("ctg.W_g", self.w_g))
        out.extend(self.predictor.named())
        return out

    def initial_carry(self, storage_index: int, batch: int, d: int) -> Tensor:
        buf = self.c0.get(f"encoder{storage_index}.c0")
        if buf is None:
            return dc.zeros((batch, d))
        return dc.constant(np.repeat(buf, batch, axis=0))


def _glorot(rng, out_dim: int, in_dim: int) -> np.ndarray:
    a = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-a, a, size=(out_dim, in_dim))


def init_params(cfg: TrainingConfig) -> ModelParams:
    """Fresh parameters, deterministic in cfg.seed."""
    cfg.validate()
    rng = substream(cfg.seed, "init")
    d, w = cfg.d, cfg.w

    def make_cell():
        return CellParams(
            w_i=dc.parameter(_glorot(rng, d, 2 * d)),
            w_f=dc.parameter(_glorot(rng, d, 2 * d)),
            w_c=dc.parameter(_glorot(rng, d, 2 * d)),
            w_o=dc.parameter(_glorot(rng, d, 2 * d)),
            b_i=dc.parameter(np.zeros(d)),
            b_f=dc.parameter(np.zeros(d)),
            b_c=dc.parameter(np.zeros(d)),
            b_o=dc.parameter(np.zeros(d)),
        )

    def make_encoder():
        n_cells = 1 if cfg.share_time else w
        return EncoderParams(
            embed_w=dc.parameter(_glorot(rng, d, FEATURES)),
            embed_b=dc.parameter(np.zeros(d)),
            cells=[make_cell() for _ in range(n_cells)],
        )

    n_encoders = 1 if cfg.k == 0 else (2 if cfg.share_encoders else cfg.k + 1)
    encoders = [make_encoder() for _ in range(n_encoders)]
    hgat = HgatParams(
        w_s=dc.parameter(_glorot(rng, d, 2 * d)),
        w_q=dc.parameter(_glorot(rng, d, d)),
        w_k=dc.parameter(_glorot(rng, d, d)),
        w_v=dc.parameter(_glorot(rng, d, d)),
        w_fuse1=dc.parameter(_glorot(rng, d, 2 * d)),
        w_fuse2=dc.parameter(_glorot(rng, d, 2 * d)),
    )
    predictor = PredictorParams(
        w1=dc.parameter(_glorot(rng, d, d)),
        b1=dc.parameter(np.zeros(d)),
        w2=dc.parameter(_glorot(rng, cfg.horizon, d)),
        b2=dc.parameter(np.zeros(cfg.horizon)),
    )
    c0 = {}
    if cfg.c_init == "normal":
        c_rng = substream(cfg.seed, "c0")
        for e in range(n_encoders):
            c0[f"encoder{e}.c0"] = c_rng.normal(0.0, 0.01, size=(1, d))
    return ModelParams(encoders=encoders, hgat=hgat,
                       w_g=dc.parameter(_glorot(rng, d, d)),
                       predictor=predictor,
                       share_encoders=cfg.share_encoders,
                       share_time=cfg.share_time, c0=c0)


# ---------------------------------------------------------------------------
# forward building blocks


def embed_input(x: Tensor, enc: EncoderParams) -> Tensor:
    """Lift per-step features (B, FEATURES) to the hidden width."""
    return dc.affine(x, enc.embed_w, enc.embed_b)


def cell_step(r_prev: Tensor, h_hat: Tensor, c_prev: Tensor,
              cell: CellParams) -> tuple[Tensor, Tensor]:
    """One gated recurrent update on the fused input [r_prev, h_hat].

    i = sigmoid(W_i^T z + b_i), f, o likewise; candidate tanh(W_c^T z + b_c);
    c = f * c_prev + i * candidate; h = o * tanh(c).
    """
    z = dc.concat(r_prev, h_hat, axis=1)
    i = dc.sigmoid(dc.affine(z, cell.w_i, cell.b_i))
    f = dc.sigmoid(dc.affine(z, cell.w_f, cell.b_f))
    cand = dc.tanh(dc.affine(z, cell.w_c, cell.b_c))
    o = dc.sigmoid(dc.affine(z, cell.w_o, cell.b_o))
    c = dc.add(dc.mul(f, c_prev), dc.mul(i, cand))
    h = dc.mul(o, dc.tanh(c))
    return c, h


def hgat_spatial(h: Tensor, u_list, weight_cols, w_s: Tensor) -> Tensor:
    """Statically weighted neighbor mix: relu(W_s^T [h, sum_i a_si u_i]).

    weight_cols holds one (B, 1) tensor per neighbor (reciprocal edge
    distances); pass None to zero the whole neighbor term (ablation, or
    no neighbors at all).
    """
    if weight_cols is not None and u_list:
        agg = dc.scale_rows(u_list[0], weight_cols[0])
        for u, s in zip(u_list[1:], weight_cols[1:]):
            agg = dc.add(agg, dc.scale_rows(u, s))
    else:
        agg = dc.zeros(h.shape)
    return dc.relu(dc.affine(dc.concat(h, agg, axis=1), w_s))


def hgat_temporal(h: Tensor, h_s: Tensor, u_list, hgat: HgatParams,
                  literal_eq5: bool = False):
    """Attention over neighbor states keyed by the spatially enriched h_s.

    Scores e_i = (W_q^T h_s) . (W_k^T u_i) normalize to weights via
    softmax (or plain e/sum(e) in literal mode, which divides by zero on
    adversarial scores and exists only for comparison). Returns the hybrid
    representation relu(W_fuse1^T [h, sum_i alpha_i W_v^T u_i]) and the
    (B, K) weight tensor, or None when there are no neighbors.
    """
    if not u_list:
        agg = dc.zeros(h.shape)
        return dc.relu(dc.affine(dc.concat(h, agg, axis=1), hgat.w_fuse1)), None
    q = dc.affine(h_s, hgat.w_q)
    scores = [dc.row_sum(dc.mul(q, dc.affine(u, hgat.w_k))) for u in u_list]
    e = scores[0]
    for s in scores[1:]:
        e = dc.concat(e, s, axis=1)
    if literal_eq5:
        alpha = dc.scale_rows(e, dc.reciprocal(dc.row_sum(e)))
    else:
        alpha = dc.softmax(e, axis=-1)
    cols = dc.split(alpha, [1] * len(u_list), axis=1)
    agg = dc.scale_rows(dc.affine(u_list[0], hgat.w_v), cols[0])
    for u, a in zip(u_list[1:], cols[1:]):
        agg = dc.add(agg, dc.scale_rows(dc.affine(u, hgat.w_v), a))
    r = dc.relu(dc.affine(dc.concat(h, agg, axis=1), hgat.w_fuse1))
    return r, alpha


def message_pass(h: Tensor, u_list, w_fuse2: Tensor, block_h_grad: bool = True) -> list:
    """Refresh each neighbor state: u_i := relu(W_fuse2^T [h, u_i]).

    With block_h_grad the target representation enters as data only; its
    gradient is stopped so neighbor refreshes cannot steer the target
    encoder.
    """
    h_in = dc.stop_gradient(h) if block_h_grad else h
    return [dc.relu(dc.affine(dc.concat(h_in, u, axis=1), w_fuse2)) for u in u_list]


def attenuation_weights(w: int) -> np.ndarray:
    """Per-step aggregation weights 1/(w - t + 1) for t = 1..w (last step = 1)."""
    return 1.0 / np.arange(w, 0, -1, dtype=np.float64)


def ctg_aggregate(r_steps, u_steps) -> list:
    """Summary rows: attenuation-weighted sums of per-step representations.

    Row 0 sums the target states, row i the states of neighbor i. Recent
    steps dominate: the last step enters with weight 1.
    """
    w = len(r_steps)
    gammas = attenuation_weights(w)

    def weighted(seq):
        acc = dc.scale(seq[0], gammas[0])
        for t in range(1, w):
            acc = dc.add(acc, dc.scale(seq[t], gammas[t]))
        return acc

    return [weighted(r_steps)] + [weighted(u) for u in u_steps]


def ctg_adjacency(e_rows, top_k: int):
    """Sparse similarity adjacency over the K+1 summary rows.

    Raw scores are inner products; each row's off-diagonal scores softmax
    to a distribution, of which only the top_k entries survive; the
    diagonal is a constant unit self-loop. Returns the masked row-0 weight
    tensor (B, K) needed by the refinement step and the dense adjacency
    values (B, K+1, K+1) for inspection/export.
    """
    m = len(e_rows)
    batch = e_rows[0].data.shape[0]
    if m == 1:
        return None, np.ones((batch, 1, 1))
    if not (1 <= top_k <= m - 1):
        raise DimensionError(f"top_k {top_k} outside 1..{m - 1}")
    pair = {}
    for i in range(m):
        for j in range(i + 1, m):
            pair[(i, j)] = dc.row_sum(dc.mul(e_rows[i], e_rows[j]))
    dense = np.zeros((batch, m, m))
    dense[:, np.arange(m), np.arange(m)] = 1.0
    row0_masked = None
    for i in range(m):
        others = [j for j in range(m) if j != i]
        e = None
        for j in others:
            s = pair[(i, j) if i < j else (j, i)]
            e = s if e is None else dc.concat(e, s, axis=1)
        theta = dc.softmax(e, axis=-1)
        vals = theta.data
        if top_k < m - 1:
            keep = np.zeros_like(vals)
            order = np.argpartition(-vals, top_k - 1, axis=1)[:, :top_k]
            np.put_along_axis(keep, order, 1.0, axis=1)
            masked = dc.mul(theta, dc.constant(keep))
        else:
            masked = theta
        dense[:, i, others] = masked.data
        if i == 0:
            row0_masked = masked
    return row0_masked, dense


def gcn_refine(r_last: Tensor, u_last, row0_masked, w_g: Tensor) -> Tensor:
    """Row-normalized one-layer graph convolution, returning the target row.

    The target row of A_t is [1 (self-loop), masked similarities]; its
    normalized mix of last-step states passes through relu(. W_g^T).
    """
    if row0_masked is None:
        return dc.relu(dc.affine(r_last, w_g))
    batch = r_last.data.shape[0]
    denom = dc.add(dc.row_sum(row0_masked), dc.constant(np.ones((batch, 1))))
    cols = dc.split(row0_masked, [1] * len(u_last), axis=1)
    acc = r_last
    for u, a in zip(u_last, cols):
        acc = dc.add(acc, dc.scale_rows(u, a))
    return dc.relu(dc.affine(dc.scale_rows(acc, dc.reciprocal(denom)), w_g))


def predict(r: Tensor, pred: PredictorParams, dropout_rate: float,
            training: bool, rng=None) -> Tensor:
    """Two-layer MLP head with dropout between the layers."""
    hidden = dc.relu(dc.affine(r, pred.w1, pred.b1))
    hidden = dc.dropout(hidden, dropout_rate, training, rng)
    return dc.affine(hidden, pred.w2, pred.b2)


# ---------------------------------------------------------------------------
# full forward


def forward_batch(params: ModelParams, batch: Batch, cfg: TrainingConfig,
                  training: bool = False, rng=None, want_r_trace: bool = False):
    """Run the forecaster over a collated batch.

    Returns (yhat, trace): yhat is a (B, horizon) tensor; trace carries
    numpy copies of the per-step attention rows ("alphas", w x B x K), the
    dense coarse adjacency ("a_t", B x (K+1) x (K+1), None under
    ablate_ctg), neighbor ids and spatial weights, plus per-step target
    states ("r_steps") when requested.
    """
    b, w, nf = batch.x.shape
    k = batch.g.shape[1]
    if w != cfg.w or k != cfg.k or nf != FEATURES:
        raise DimensionError(
            f"batch shaped (w={w}, k={k}, features={nf}) does not match "
            f"config (w={cfg.w}, k={cfg.k}, features={FEATURES})")
    d = cfg.d
    # time-major contiguous views so each step slices cheaply
    xs = np.ascontiguousarray(batch.x.transpose(1, 0, 2))
    gs = np.ascontiguousarray(batch.g.transpose(1, 2, 0, 3)) if k else None

    if cfg.ablate_spatial or k == 0:
        weight_cols = None
    else:
        weight_cols = [dc.constant(np.ascontiguousarray(batch.spatial[:, i:i + 1]))
                       for i in range(k)]

    target_enc = params.encoder(0)
    r = dc.zeros((b, d))
    c = params.initial_carry(0, b, d)
    neigh = []
    for i in range(k):
        store = 1 if params.share_encoders else i + 1
        neigh.append({"u": dc.zeros((b, d)), "c": params.initial_carry(store, b, d)})

    block_msg = cfg.sg_mode == "message"
    r_steps, u_steps = [], [[] for _ in range(k)]
    alphas = np.zeros((w, b, k))
    r_trace = [] if want_r_trace else None

    for t in range(w):
        h_hat = embed_input(dc.constant(xs[t]), target_enc)
        r_in = dc.stop_gradient(r) if cfg.sg_mode == "recurrence" else r
        c, h = cell_step(r_in, h_hat, c, target_enc.cell(t))
        us = []
        for i in range(k):
            enc = params.encoder(i + 1)
            hh = embed_input(dc.constant(gs[i][t]), enc)
            ci, ui = cell_step(neigh[i]["u"], hh, neigh[i]["c"], enc.cell(t))
            neigh[i]["c"] = ci
            us.append(ui)
        h_s = hgat_spatial(h, us, weight_cols, params.hgat.w_s)
        r, alpha = hgat_temporal(h, h_s, us, params.hgat, cfg.literal_eq5)
        if alpha is not None:
            alphas[t] = alpha.data
        updated = message_pass(h, us, params.hgat.w_fuse2, block_msg)
        for i in range(k):
            neigh[i]["u"] = updated[i]
            u_steps[i].append(updated[i])
        r_steps.append(r)
        if want_r_trace:
            r_trace.append(r.data.copy())

    if cfg.ablate_ctg:
        refined = r
        a_dense = None
    else:
        e_rows = ctg_aggregate(r_steps, u_steps)
        row0, a_dense = ctg_adjacency(e_rows, cfg.effective_top_k() if k else 1)
        refined = gcn_refine(r, [nb["u"] for nb in neigh], row0, params.w_g)

    yhat = predict(refined, params.predictor, cfg.dropout, training, rng)
    trace = {
        "alphas": alphas,
        "a_t": a_dense,
        "neighbor_ids": None,
        "spatial_row": batch.spatial.copy(),
        "r_steps": r_trace,
    }
    return yhat, trace


def forward(params: ModelParams, sample, cfg: TrainingConfig,
            training: bool = False, rng=None):
    """Single-sample forward; yhat has shape (1, horizon)."""
    batch = collate([sample])
    yhat, trace = forward_batch(params, batch, cfg, training=training, rng=rng)
    trace["neighbor_ids"] = list(sample.neighbor_ids)
    return yhat, trace


# ---------------------------------------------------------------------------
# checkpoints

_CHECKPOINT_FORMAT = "stahg-checkpoint-v1"


def save_checkpoint(path, params: ModelParams, cfg: TrainingConfig) -> None:
    """Write parameters plus the resolved config as deterministic JSON."""
    from dataclasses import asdict

    doc = {
        "format": _CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in params.named_tensors()
        },
        "buffers": {
            name: {"shape": list(a.shape), "data": a.reshape(-1).tolist()}
            for name, a in sorted(params.c0.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelParams, TrainingConfig]:
    """Rebuild parameters from a checkpoint, validating names and shapes."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    try:
        cfg = TrainingConfig(**doc["config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: config does not match this version ({exc})") from None
    cfg.validate()
    params = init_params(cfg)
    stored = doc["params"]
    expected = dict(params.named_tensors())
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match the config "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in expected.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != t.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {shape}, config implies {t.data.shape}")
        t.data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
        t.grad = np.zeros_like(t.data)
    bufs = doc.get("buffers", {})
    if sorted(bufs) != sorted(params.c0):
        raise CheckpointError(f"{path}: carry buffers do not match c_init={cfg.c_init!r}")
    for name, entry in bufs.items():
        params.c0[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return params, cfg
