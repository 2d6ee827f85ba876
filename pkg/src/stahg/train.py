"""Objective, optimizer, training loop, metrics and grid search."""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .config import TrainingConfig
from .data import WindowProvider
from .diffcore import Tape, Tensor
from .model import ModelParams, forward_batch, init_params
from .rng import substream

__all__ = [
    "TrainingConfig", "MetricsReport", "AdamState", "FitResult", "GridResult",
    "smooth_l1", "adam_step", "fit", "evaluate", "compute_metrics",
    "expand_grid", "grid_search",
]


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# objective


def smooth_l1(yhat: Tensor, y, beta: float = 1.0, literal: bool = False) -> Tensor:
    """Mean smooth-L1 loss between predictions and raw targets.

    Quadratic within |d| < beta (0.5 d^2 / beta), linear outside
    (|d| - 0.5 beta); value and slope agree at the knee. ``literal``
    switches to the 0.5-threshold branch form (0.5 d^2 vs |d| - 0.5),
    kept for comparison despite its jump at the threshold.
    """
    target = y if isinstance(y, Tensor) else dc.constant(y)
    if target.data.shape != yhat.data.shape:
        raise dc.DimensionError(
            f"loss shapes differ: predictions {yhat.data.shape}, targets {target.data.shape}")
    return dc.mean(dc.huber(dc.sub(yhat, target), beta=beta, literal=literal))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, clip_norm: float = 0.0) -> None:
    """One Adam update over (name, Tensor) pairs, in place.

    The step counter advances before bias correction, so the first call
    moves each coordinate by roughly lr * sign(grad). A non-finite
    gradient aborts the step naming the offending parameter; clip_norm
    rescales the global gradient norm when it exceeds the bound.

    Gradient buffers are consumed as scratch space during the update;
    call zero_grad before accumulating the next batch.
    """
    named = list(named_params)
    if clip_norm > 0.0:
        sq = 0.0
        for _, p in named:
            sq += float((p.grad * p.grad).sum())
        norm = np.sqrt(sq)
        if norm > clip_norm:
            scale = clip_norm / norm
            for _, p in named:
                p.grad = p.grad * scale
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in named:
        g = p.grad
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        np.multiply(g, g, out=g)
        v += (1.0 - state.beta2) * g
        # g now serves as the denominator buffer: sqrt(v / bc2) + eps
        np.divide(v, bc2, out=g)
        np.sqrt(g, out=g)
        g += state.eps
        np.divide(m, g, out=g)
        p.data -= (state.lr / bc1) * g


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float          # percent, over targets with |y| > mape_floor
    count: int           # number of (sample, step) pairs scored
    per_step: list       # one {"mae", "rmse", "mape", "count"} per horizon step

    def as_dict(self) -> dict:
        return asdict(self)


def _score(y: np.ndarray, yhat: np.ndarray, mape_floor: float) -> dict:
    err = yhat - y
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    sel = np.abs(y) > mape_floor
    mape = float((np.abs(err[sel] / y[sel])).mean() * 100.0) if sel.any() else float("nan")
    return {"mae": mae, "rmse": rmse, "mape": mape, "count": int(y.size)}


def compute_metrics(y: np.ndarray, yhat: np.ndarray, mape_floor: float = 1.0,
                    mask: np.ndarray | None = None) -> MetricsReport:
    """MAE / RMSE / MAPE over (S, horizon) arrays plus a per-step breakdown.

    MAPE skips targets with |y| <= mape_floor. An optional boolean mask
    (True = keep) drops excluded entries, e.g. imputed targets.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 2:
        raise ValueError(f"metrics need matching (S, horizon) arrays, got {y.shape} vs {yhat.shape}")
    if mask is None:
        mask = np.ones(y.shape, dtype=bool)
    if not mask.any():
        raise ValueError("no targets left to score after masking")
    overall = _score(y[mask], yhat[mask], mape_floor)
    per_step = []
    for s in range(y.shape[1]):
        sel = mask[:, s]
        if sel.any():
            per_step.append(_score(y[sel, s], yhat[sel, s], mape_floor))
        else:
            per_step.append({"mae": float("nan"), "rmse": float("nan"),
                             "mape": float("nan"), "count": 0})
    return MetricsReport(mae=overall["mae"], rmse=overall["rmse"],
                         mape=overall["mape"], count=overall["count"],
                         per_step=per_step)


# ---------------------------------------------------------------------------
# evaluate


def predictions(provider: WindowProvider, params: ModelParams, cfg: TrainingConfig):
    """Eval-mode predictions over a whole provider, batch by batch."""
    ys, yhats, observed = [], [], []
    for batch in provider.batches(batch_size=cfg.batch_size):
        yhat, _ = forward_batch(params, batch, cfg, training=False)
        ys.append(batch.y)
        yhats.append(yhat.data)
        observed.append(batch.y_observed)
    return np.vstack(ys), np.vstack(yhats), np.vstack(observed)


def evaluate(provider: WindowProvider, params: ModelParams,
             cfg: TrainingConfig) -> MetricsReport:
    if len(provider) == 0:
        raise ValueError("cannot evaluate an empty window set")
    y, yhat, observed = predictions(provider, params, cfg)
    mask = observed if cfg.exclude_imputed else None
    return compute_metrics(y, yhat, mape_floor=cfg.mape_floor, mask=mask)


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    params: ModelParams        # best-val-MAE parameters
    history: list              # per-epoch records
    best_epoch: int
    diverged: bool


def _clone_data(params: ModelParams) -> dict:
    return {name: t.data.copy() for name, t in params.named_tensors()}


def _restore_data(params: ModelParams, snapshot: dict) -> None:
    for name, t in params.named_tensors():
        t.data = snapshot[name].copy()
        t.grad = np.zeros_like(t.data)


def fit(train_provider: WindowProvider, val_provider: WindowProvider,
        cfg: TrainingConfig, params: ModelParams | None = None,
        log=None) -> FitResult:
    """Train with Adam on the smooth-L1 objective.

    Epoch order is shuffled from a seeded stream; neighbor sets are redrawn
    per sample each epoch inside the provider; dropout masks come from a
    (seed, epoch, batch) stream. History records one line per epoch with
    the mean train loss and validation MAE/RMSE/MAPE. The parameters kept
    are those of the best-val-MAE epoch. A non-finite loss or gradient
    stops training early and returns the last good state with
    ``diverged`` set.
    """
    cfg.validate()
    if params is None:
        params = init_params(cfg)
    named = params.named_tensors()
    tensors = [t for _, t in named]
    state = AdamState(lr=cfg.learning_rate)
    history = []
    best = {"mae": np.inf, "epoch": 0, "data": _clone_data(params)}
    diverged = False

    for epoch in range(1, cfg.epochs + 1):
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(train_provider))
        loss_sum, seen = 0.0, 0
        try:
            for b_idx, batch in enumerate(
                    train_provider.batches(order=order, batch_size=cfg.batch_size,
                                           epoch=epoch)):
                drop_rng = substream(cfg.seed, "dropout", epoch, b_idx)
                with Tape() as tape:
                    yhat, _ = forward_batch(params, batch, cfg, training=True,
                                            rng=drop_rng)
                    loss = smooth_l1(yhat, batch.y, beta=cfg.huber_beta,
                                     literal=cfg.literal_eq9)
                dc.backward(tape, loss)
                adam_step(named, state, clip_norm=cfg.clip_norm)
                dc.zero_grad(tensors)
                loss_sum += float(loss.data) * len(batch)
                seen += len(batch)
        except (dc.NonFiniteError, DivergenceError) as exc:
            diverged = True
            history.append({"epoch": epoch, "train_loss": float("nan"),
                            "val_mae": float("nan"), "val_rmse": float("nan"),
                            "val_mape": float("nan"), "diverged": str(exc)})
            break
        report = evaluate(val_provider, params, cfg)
        record = {"epoch": epoch, "train_loss": loss_sum / max(seen, 1),
                  "val_mae": report.mae, "val_rmse": report.rmse,
                  "val_mape": report.mape}
        history.append(record)
        if log is not None:
            log(record)
        if report.mae < best["mae"]:
            best = {"mae": report.mae, "epoch": epoch, "data": _clone_data(params)}

    _restore_data(params, best["data"])
    return FitResult(params=params, history=history,
                     best_epoch=best["epoch"], diverged=diverged)


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    overrides: dict
    val_mae: float
    val_rmse: float
    best_epoch: int
    error: str | None = None


def expand_grid(candidates: dict) -> list[dict]:
    """Cartesian product of {field: [values]} into override dicts."""
    if not candidates:
        return [{}]
    keys = sorted(candidates)
    return [dict(zip(keys, combo))
            for combo in itertools.product(*(candidates[k] for k in keys))]


def grid_search(flows_by_role, graph, sw, base_cfg: TrainingConfig,
                candidates: dict, log=None) -> list[GridResult]:
    """Fit every candidate config with a reduced epoch budget and rank.

    flows_by_role maps "train"/"val" to FlowDataset slices. Providers are
    rebuilt per candidate because w/k/hop change the windowing. Results
    sort by (val MAE, val RMSE, k); a failed run is kept with its error
    and sorts last.
    """
    results = []
    for overrides in expand_grid(candidates):
        cfg = replace(base_cfg, epochs=base_cfg.grid_epochs, **overrides)
        try:
            cfg.validate()
            tr = WindowProvider(flows_by_role["train"], graph, sw, cfg.w,
                                cfg.horizon, cfg.k, cfg.hop, cfg.seed, "train")
            va = WindowProvider(flows_by_role["val"], graph, sw, cfg.w,
                                cfg.horizon, cfg.k, cfg.hop, cfg.seed, "val")
            run = fit(tr, va, cfg)
            rec = run.history[run.best_epoch - 1] if run.best_epoch else run.history[-1]
            results.append(GridResult(overrides=overrides, val_mae=rec["val_mae"],
                                      val_rmse=rec["val_rmse"],
                                      best_epoch=run.best_epoch))
        except Exception as exc:  # keep searching; report the failure
            results.append(GridResult(overrides=overrides, val_mae=float("inf"),
                                      val_rmse=float("inf"), best_epoch=0,
                                      error=f"{type(exc).__name__}: {exc}"))
        if log is not None:
            log(results[-1])
    results.sort(key=lambda r: (r.val_mae, r.val_rmse, r.overrides.get("k", base_cfg.k)))
    return results


def history_to_jsonl(history: list) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)
