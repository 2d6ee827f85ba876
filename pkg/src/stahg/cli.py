"""Command line entry points.

Commands
    synth             generate a synthetic road graph + flow series as CSVs
    train             fit the forecaster (or run a config grid search)
    eval              score a saved checkpoint on a data split
    gradcheck         finite-difference audit of the differentiation stack
    export-attention  dump per-window attention weights for inspection

Exit codes: 0 success, 1 usage/config/data errors, 2 numeric failures
(divergence, non-finite values, a failed gradient check).

Every option can also come from a flat ``key = value`` config file via
--config; explicit flags win over the file, which wins over built-in
defaults. Blank lines and ``#`` comments are ignored; unknown keys are
rejected. The environment variable STAHG_SEED supplies the seed when
neither the file nor a flag sets one. Commands that write into an output
directory echo their fully resolved configuration to ``config.txt`` there,
so ``stahg <cmd> --config <out>/config.txt`` reproduces the run exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import resource
import sys
import time

from .config import TrainingConfig
from .data import (DataError, FlowDataset, RoadGraph, WindowProvider,
                   chronological_split, impute_missing, load_edges,
                   load_flows, spatial_weights)
from .diffcore import DimensionError, NonFiniteError
from .model import (CheckpointError, forward, load_checkpoint,
                    save_checkpoint)
from .synth import SynthSpec, gen_flows, gen_graph, write_edges_csv, write_flows_csv
from .train import DivergenceError, evaluate, fit, grid_search, history_to_jsonl
from . import gradcheck


class UsageError(Exception):
    """Bad flags, bad config keys or values, missing required inputs."""


class _Parser(argparse.ArgumentParser):
    """argparse normally exits with status 2 on usage errors; route them
    through UsageError instead so the documented exit code (1) holds."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config file handling


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainingConfig)}
_SYNTH_FIELDS = {f.name: f for f in dataclasses.fields(SynthSpec)}
_PATH_KEYS = ("edges", "flows", "out_dir")


def _coerce(key: str, raw: str, default):
    """Parse a config-file value to the type of the field's default."""
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"{key}: expected true/false, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; values stay raw strings here."""
    out = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    return out


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_config_echo(path, values: dict) -> None:
    """Persist the resolved run configuration; parseable by --config."""
    with open(path, "w") as fh:
        for key in sorted(values):
            if values[key] is not None:
                fh.write(f"{key} = {_fmt(values[key])}\n")


def _resolve(args, field_map: dict, extra_keys: tuple):
    """Merge defaults <- config file <- STAGE env seed <- explicit flags.

    Returns (values, extras, explicit): field values keyed by name, the
    non-field keys (paths), and the set of keys the user set explicitly
    via file or flag.
    """
    values = {name: f.default for name, f in field_map.items()}
    extras = dict.fromkeys(extra_keys)
    explicit = set()

    if getattr(args, "config", None):
        for key, raw in parse_config_file(args.config).items():
            if key in field_map:
                values[key] = _coerce(key, raw, field_map[key].default)
                explicit.add(key)
            elif key in extra_keys:
                extras[key] = raw
            else:
                raise UsageError(f"unknown config key {key!r} in {args.config}")

    env_seed = os.environ.get("STAHG_SEED")
    if env_seed is not None and "seed" in field_map and "seed" not in explicit \
            and getattr(args, "seed", None) is None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"STAHG_SEED must be an integer, got {env_seed!r}") from None
        explicit.add("seed")

    for name in field_map:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
            explicit.add(name)
    for key in extra_keys:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            extras[key] = flag_value
    return values, extras, explicit


def resolve_training(args):
    values, extras, explicit = _resolve(args, _TRAIN_FIELDS, _PATH_KEYS)
    cfg = TrainingConfig(**values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg, extras, explicit


def resolve_synth(args):
    values, extras, _ = _resolve(args, _SYNTH_FIELDS, ("out_dir",))
    spec = SynthSpec(**values)
    try:
        spec.validate()
    except DataError as exc:
        raise UsageError(str(exc)) from None
    return spec, extras


# ---------------------------------------------------------------------------
# shared plumbing


def _require(extras: dict, *keys):
    for key in keys:
        if not extras.get(key):
            raise UsageError(f"--{key.replace('_', '-')} is required "
                             f"(flag or config key '{key}')")


def _load_data(extras) -> tuple[RoadGraph, FlowDataset]:
    graph = load_edges(extras["edges"])
    flows = impute_missing(load_flows(extras["flows"]))
    if flows.nodes != graph.n:
        raise DataError(f"flow file has {flows.nodes} nodes but the edge "
                        f"list implies {graph.n}")
    return graph, flows


def _providers(graph, flows, cfg: TrainingConfig) -> dict:
    sw = spatial_weights(graph)
    ratios = (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio)
    parts = chronological_split(flows, ratios, w=cfg.w, horizon=cfg.horizon)
    out = {}
    for name, part in zip(("train", "val", "test"), parts):
        if part.length:  # a zero-ratio slice comes back empty; skip it
            out[name] = WindowProvider(part, graph, sw, cfg.w, cfg.horizon,
                                       cfg.k, cfg.hop, cfg.seed, name)
    return out


def _peak_rss_mb() -> float:
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return round(kb / 1024.0, 2)


def _echo_values(cfg: TrainingConfig, extras: dict) -> dict:
    values = dataclasses.asdict(cfg)
    values.update({k: v for k, v in extras.items() if v})
    return values


def _ablation_tag(cfg: TrainingConfig) -> str:
    tag = ""
    if cfg.ablate_spatial:
        tag += "_wo_As"
    if cfg.ablate_ctg:
        tag += "_wo_ctg"
    return tag


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec, extras = resolve_synth(args)
    _require(extras, "out_dir")
    out_dir = extras["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    graph = gen_graph(spec)
    flows = gen_flows(graph, spec)
    write_edges_csv(os.path.join(out_dir, "edges.csv"), graph)
    write_flows_csv(os.path.join(out_dir, "flows.csv"), flows)
    echo = dataclasses.asdict(spec)
    echo["out_dir"] = out_dir
    write_config_echo(os.path.join(out_dir, "config.txt"), echo)
    print(f"synth: {spec.nodes} nodes ({spec.topology}), {len(graph.edges)} edges, "
          f"{spec.steps} steps -> {out_dir}")
    return 0


def _parse_int_list(raw: str, flag: str) -> list:
    try:
        return [int(tok) for tok in raw.split(",") if tok.strip() != ""]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {raw!r}") from None


def _run_grid(args, cfg, extras, providers_input) -> int:
    graph, flows = providers_input
    sw = spatial_weights(graph)
    ratios = (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio)
    train_part, val_part, _ = chronological_split(flows, ratios, w=cfg.w,
                                                  horizon=cfg.horizon)
    if train_part.length == 0 or val_part.length == 0:
        raise UsageError("grid search needs non-empty train and val splits")
    candidates = {
        "k": _parse_int_list(args.grid_k, "--grid-k"),
        "w": _parse_int_list(args.grid_w, "--grid-w"),
        "hop": _parse_int_list(args.grid_hop, "--grid-hop"),
    }

    def log(res):
        status = f"val_mae {res.val_mae:.6f}" if res.error is None else f"FAILED {res.error}"
        print(f"grid {res.overrides}: {status}")

    results = grid_search({"train": train_part, "val": val_part}, graph, sw,
                          cfg, candidates, log=log)
    out_dir = extras["out_dir"]
    doc = [dataclasses.asdict(r) for r in results]
    with open(os.path.join(out_dir, "grid.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")
    write_config_echo(os.path.join(out_dir, "config.txt"), _echo_values(cfg, extras))
    best = results[0]
    if best.error is not None:
        print("grid: every candidate failed", file=sys.stderr)
        return 2
    print(f"grid: best {best.overrides} val_mae {best.val_mae:.6f} "
          f"(epoch {best.best_epoch}) -> {out_dir}/grid.json")
    return 0


def cmd_train(args) -> int:
    cfg, extras, _ = resolve_training(args)
    _require(extras, "edges", "flows", "out_dir")
    out_dir = extras["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    graph, flows = _load_data(extras)

    if args.grid:
        return _run_grid(args, cfg, extras, (graph, flows))

    providers = _providers(graph, flows, cfg)
    if "train" not in providers or "val" not in providers:
        raise UsageError("training needs non-empty train and val splits; "
                         "check the ratios against the series length")

    started = time.monotonic()

    def log(rec):
        print(f"epoch {rec['epoch']:>3}  train_loss {rec['train_loss']:.6f}  "
              f"val_mae {rec['val_mae']:.6f}  val_rmse {rec['val_rmse']:.6f}")

    result = fit(providers["train"], providers["val"], cfg, log=log)
    elapsed = time.monotonic() - started

    tag = _ablation_tag(cfg)
    save_checkpoint(os.path.join(out_dir, f"checkpoint{tag}.json"), result.params, cfg)
    with open(os.path.join(out_dir, f"history{tag}.jsonl"), "w") as fh:
        fh.write(history_to_jsonl(result.history))
    write_config_echo(os.path.join(out_dir, "config.txt"), _echo_values(cfg, extras))

    test_report = None
    if "test" in providers and len(providers["test"]) and not result.diverged:
        test_report = evaluate(providers["test"], result.params, cfg)

    best_rec = result.history[result.best_epoch - 1] if result.best_epoch else None
    summary = {
        "command": "train",
        "elapsed_seconds": round(elapsed, 3),
        "peak_rss_mb": _peak_rss_mb(),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "diverged": result.diverged,
        "n_params": sum(t.data.size for _, t in result.params.named_tensors()),
        "windows": {name: len(p) for name, p in providers.items()},
        "val_best": None if best_rec is None else {
            "mae": best_rec["val_mae"], "rmse": best_rec["val_rmse"],
            "mape": best_rec["val_mape"]},
        "test": None if test_report is None else test_report.as_dict(),
    }
    with open(os.path.join(out_dir, f"summary{tag}.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")

    if result.diverged:
        print("training diverged; last good parameters were kept", file=sys.stderr)
        return 2
    line = f"done: best epoch {result.best_epoch}"
    if test_report is not None:
        line += (f", test mae {test_report.mae:.6f} rmse {test_report.rmse:.6f} "
                 f"mape {test_report.mape:.2f}%")
    print(line + f" -> {out_dir}")
    return 0


def _merged_eval_config(args, ckpt_cfg: TrainingConfig):
    """Checkpoint config with non-shape overrides; shape conflicts error."""
    cfg, extras, explicit = resolve_training(args)
    overrides = {}
    for name in explicit:
        stored = getattr(ckpt_cfg, name)
        wanted = getattr(cfg, name)
        if name in TrainingConfig.SHAPE_FIELDS:
            if wanted != stored:
                raise UsageError(
                    f"{name}={_fmt(wanted)} conflicts with the checkpoint "
                    f"({name}={_fmt(stored)}); shape fields are fixed at save time")
        else:
            overrides[name] = wanted
    merged = dataclasses.replace(ckpt_cfg, **overrides)
    try:
        merged.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return merged, extras


def _split_provider(args, extras, cfg) -> WindowProvider:
    _require(extras, "edges", "flows")
    graph, flows = _load_data(extras)
    providers = _providers(graph, flows, cfg)
    if args.split not in providers:
        raise UsageError(f"split {args.split!r} is empty under ratios "
                         f"({cfg.train_ratio}, {cfg.val_ratio}, {cfg.test_ratio})")
    return providers[args.split]


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    params, ckpt_cfg = load_checkpoint(args.checkpoint)
    cfg, extras = _merged_eval_config(args, ckpt_cfg)
    provider = _split_provider(args, extras, cfg)

    report = evaluate(provider, params, cfg)
    print(f"split {args.split}: {len(provider)} windows")
    print(f"mae  {report.mae:.6f}")
    print(f"rmse {report.rmse:.6f}")
    print(f"mape {report.mape:.4f}%")
    if cfg.horizon > 1:
        print("step  mae        rmse       mape")
        for i, row in enumerate(report.per_step, 1):
            print(f"{i:>4}  {row['mae']:<9.6f}  {row['rmse']:<9.6f}  {row['mape']:.4f}%")

    if extras.get("out_dir"):
        os.makedirs(extras["out_dir"], exist_ok=True)
        doc = {"split": args.split, "windows": len(provider),
               "checkpoint": args.checkpoint, **report.as_dict()}
        with open(os.path.join(extras["out_dir"], "metrics.json"), "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
        write_config_echo(os.path.join(extras["out_dir"], "config.txt"),
                          _echo_values(cfg, extras))
    return 0


def cmd_export_attention(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    params, ckpt_cfg = load_checkpoint(args.checkpoint)
    cfg, extras = _merged_eval_config(args, ckpt_cfg)
    _require(extras, "out_dir")
    provider = _split_provider(args, extras, cfg)
    indices = _parse_int_list(args.samples, "--samples")
    if not indices:
        raise UsageError("--samples must name at least one window index")
    out_dir = extras["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    for index in indices:
        if not (0 <= index < len(provider)):
            raise UsageError(f"sample index {index} outside 0..{len(provider) - 1}")
        sample = provider.sample(index)
        yhat, trace = forward(params, sample, cfg)
        steps = []
        for t in range(cfg.w):
            steps.append({
                "timestep": t,
                "target_node": int(sample.node),
                "neighbor_ids": [int(i) for i in sample.neighbor_ids],
                "weights": [float(v) for v in trace["alphas"][t, 0]],
            })
        doc = {
            "sample_index": index,
            "target_node": int(sample.node),
            "anchor": int(sample.anchor),
            "spatial_weights": [float(v) for v in sample.spatial_row],
            "steps": steps,
            "coarse_adjacency": None if trace["a_t"] is None
            else [[float(v) for v in row] for row in trace["a_t"][0]],
            "prediction": [float(v) for v in yhat.data[0]],
            "target": [float(v) for v in sample.y],
        }
        path = os.path.join(out_dir, f"attention_{index}.json")
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")
        print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradcheck.run_all(eps=args.eps)
    width = max(len(r["component"]) for r in rows)
    failed = 0
    for r in rows:
        mark = "PASS" if r["passed"] else "FAIL"
        failed += not r["passed"]
        print(f"{r['component']:<{width}}  max_rel {r['max_rel_err']:.3e}  "
              f"(< {r['threshold']:.0e})  {mark}  worst {r['worst']}")
    print(f"gradient check: {len(rows) - failed}/{len(rows)} passed")
    return 0 if failed == 0 else 2


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: _Parser) -> None:
    for name, f in _TRAIN_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=name, action=argparse.BooleanOptionalAction,
                           default=None)
        elif isinstance(f.default, int):
            p.add_argument(flag, dest=name, type=int, default=None)
        elif isinstance(f.default, float):
            p.add_argument(flag, dest=name, type=float, default=None)
        else:
            p.add_argument(flag, dest=name, default=None)


def _add_synth_flags(p: _Parser) -> None:
    for name, f in _SYNTH_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        if isinstance(f.default, int):
            p.add_argument(flag, dest=name, type=int, default=None)
        elif isinstance(f.default, float):
            p.add_argument(flag, dest=name, type=float, default=None)
        else:
            p.add_argument(flag, dest=name, default=None)


def _add_data_flags(p: _Parser, out_dir: bool = True) -> None:
    p.add_argument("--edges", default=None, help="edge-list CSV (from,to,distance)")
    p.add_argument("--flows", default=None, help="flow CSV, rows = steps, columns = nodes")
    if out_dir:
        p.add_argument("--out-dir", dest="out_dir", default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="stahg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("synth", help="generate synthetic graph + flow CSVs")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    _add_synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit the forecaster")
    p.add_argument("--config", default=None)
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--grid", action="store_true",
                   help="grid-search k/w/hop instead of a single fit")
    p.add_argument("--grid-k", default="2,4,6,8")
    p.add_argument("--grid-w", default="11,16")
    p.add_argument("--grid-hop", default="1,2,3")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", help="dump attention weights as JSON")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--samples", default="0",
                   help="comma-separated window indices within the split")
    _add_data_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "cmd", None) is None:
            parser.print_usage(sys.stderr)
            print("error: a command is required", file=sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, DimensionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
