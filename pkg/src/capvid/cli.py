"""Command-line surface: dataset synthesis, caption selection, training,
evaluation, statistics, and ablation sweeps.

Config precedence is defaults < --config JSON file < explicit flags.
Every run writes a resolved_config.json next to its outputs so it can
be reproduced exactly. Exit codes: 2 configuration, 3 data/format,
4 runtime. Diagnostics go to stderr; stdout carries data only when
--stdout is set.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .captionsel import (SelectionStrategy, caption_stats, read_selection,
                         select_dataset, write_selection)
from .embstore import Dataset, SynthSpec, load_dataset, load_table, synthesize
from .errors import (CapvidError, ConfigError, DataError, EvalError,
                     FormatError, MissingCaptionerError, ShapeError, SpecError)
from .evaluator import caption_bottleneck_eval, cross_eval, evaluate
from .poolcore import PoolingConfig
from .trainer import (ProjectionModel, TrainConfig, finetune_gt,
                      load_checkpoint, save_checkpoint, train)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

STRATEGY_ALIASES = {
    "all": ("all", 1),
    "middle1": ("middle_one", 1),
    "top1": ("top_k_per_captioner", 1),
    "top2": ("top_k_per_captioner", 2),
    "top3": ("top_k_per_captioner", 3),
    "randtop2": ("rand_of_top_k", 2),
    "randtop3": ("rand_of_top_k", 3),
}


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_csv(path: Path, rows: list[dict], fieldnames: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    text = buf.getvalue()
    path.write_text(text)
    return text


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, the optional JSON config file, and explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _strategy_from(cfg: dict) -> SelectionStrategy:
    name = cfg["strategy"]
    captioners = cfg["captioners"]
    if isinstance(captioners, str):
        captioners = [c for c in captioners.split(",") if c]
    if name in STRATEGY_ALIASES:
        kind, k = STRATEGY_ALIASES[name]
        if cfg.get("k") is not None and name in ("all", "middle1"):
            pass
        return SelectionStrategy(kind, captioners, k=k)
    if name in ("top_k_per_captioner", "top_k_combined", "rand_of_top_k"):
        return SelectionStrategy(name, captioners, k=int(cfg.get("k") or 1))
    if name in ("all", "middle_one"):
        return SelectionStrategy(name, captioners)
    raise ConfigError(f"unknown strategy {name!r}")


def _pooling_from(cfg: dict) -> PoolingConfig:
    return PoolingConfig(tau=float(cfg["tau"]),
                         caption_combine=cfg["combine"],
                         combine_temperature=float(cfg["combine_temperature"]))


def _train_config_from(cfg: dict) -> TrainConfig:
    temp = 1.0 if cfg.get("literal_eq3") else float(cfg["infonce_temperature"])
    return TrainConfig(
        batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]),
        lr0=float(cfg["lr0"]),
        infonce_temperature=temp,
        pooling=_pooling_from(cfg),
        strategy=_strategy_from(cfg),
        seed=int(cfg["seed"]),
        warmup_steps=int(cfg["warmup_steps"]),
    )


def _load_datasets(paths: list[str]) -> list[Dataset]:
    return [load_dataset(p) for p in paths]


def _gallery_ids(dataset: Dataset, split: str):
    if split == "all" or split not in dataset.manifest.splits:
        return None
    return dataset.video_ids(split)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(cfg: dict, out: Path, payload: str, args) -> None:
    _write_json(out / "resolved_config.json",
                {**cfg, "capvid_version": __version__,
                 "kernel_backend": kernels.backend_name()})
    if getattr(args, "stdout", False):
        sys.stdout.write(payload)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

SYNTH_DEFAULTS = {
    "seed": 0, "out": "synth-data", "videos": 200, "dim": 32, "frames": 5,
    "captions_per_captioner": 10, "captioners": "synthcap-a,synthcap-b",
    "sigma_frame": 0.2, "sigma_caption": 0.3, "p_junk": 0.5,
    "queries_per_video": 2, "signal_dim": None, "eval_fraction": 0.25,
    "modality_gap": 0.5, "name": "synth",
}


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_DEFAULTS)
    out = _out_dir(cfg)
    captioners = tuple(c for c in str(cfg["captioners"]).split(",") if c)
    spec = SynthSpec(
        videos=int(cfg["videos"]), dim=int(cfg["dim"]),
        frames_per_video=int(cfg["frames"]),
        captions_per_captioner=int(cfg["captions_per_captioner"]),
        captioners=captioners,
        sigma_frame=float(cfg["sigma_frame"]),
        sigma_caption=float(cfg["sigma_caption"]),
        p_junk=float(cfg["p_junk"]),
        queries_per_video=int(cfg["queries_per_video"]),
        signal_dim=None if cfg["signal_dim"] is None else int(cfg["signal_dim"]),
        eval_fraction=float(cfg["eval_fraction"]),
        modality_gap=float(cfg["modality_gap"]),
        name=str(cfg["name"]),
    )
    manifest = synthesize(int(cfg["seed"]), spec, out)
    summary = {
        "name": manifest.name, "videos": len(manifest.videos),
        "captions": len(manifest.captions), "queries": len(manifest.queries),
        "dim": manifest.dim,
        "splits": {k: len(v) for k, v in manifest.splits.items()},
    }
    _log(f"synthesized {summary['videos']} videos -> {out}")
    _finish(cfg, out, json.dumps(summary, sort_keys=True) + "\n", args)
    return 0


SELECT_DEFAULTS = {
    "manifest": None, "out": "selection", "strategy": "top2", "k": None,
    "captioners": "synthcap-a,synthcap-b", "seed": 0,
}


def cmd_select(args) -> int:
    cfg = _resolve(args, SELECT_DEFAULTS)
    if not cfg["manifest"]:
        raise ConfigError("select requires --manifest")
    out = _out_dir(cfg)
    dataset = load_dataset(cfg["manifest"])
    strategy = _strategy_from(cfg)
    pools = select_dataset(dataset, strategy)
    path = out / "selection.jsonl"
    write_selection(pools, path)
    n_caps = sum(len(p.selected) for p in pools.values())
    _log(f"selected {n_caps} captions over {len(pools)} videos -> {path}")
    _finish(cfg, out, path.read_text(), args)
    return 0


TRAIN_DEFAULTS = {
    "manifest": None, "manifests": None, "out": "train-run",
    "strategy": "top2", "k": None, "captioners": "synthcap-a,synthcap-b",
    "selection_file": None,
    "epochs": 10, "batch_size": 16, "lr0": 0.02,
    "infonce_temperature": 0.2, "literal_eq3": False,
    "tau": 0.1, "combine": "mean", "combine_temperature": 0.1,
    "warmup_steps": 0, "seed": 0,
}


def _manifest_list(cfg: dict) -> list[str]:
    paths = []
    if cfg.get("manifest"):
        paths.append(cfg["manifest"])
    extra = cfg.get("manifests")
    if extra:
        if isinstance(extra, str):
            extra = [p for p in extra.split(",") if p]
        paths.extend(extra)
    if not paths:
        raise ConfigError("at least one manifest is required")
    return paths


def cmd_train(args) -> int:
    cfg = _resolve(args, TRAIN_DEFAULTS)
    out = _out_dir(cfg)
    datasets = _load_datasets(_manifest_list(cfg))
    tconf = _train_config_from(cfg)
    selections = None
    if cfg["selection_file"]:
        if len(datasets) != 1:
            raise ConfigError("--selection-file applies to a single manifest")
        selections = {datasets[0].name: read_selection(datasets[0],
                                                       cfg["selection_file"])}
    model, log = train(datasets, tconf, selections=selections)
    fingerprint = config_fingerprint({k: v for k, v in cfg.items() if k != "out"})
    save_checkpoint(model, out / "checkpoint.ckpt", config_hash=fingerprint,
                    steps=tconf.epochs)
    log_text = "".join(json.dumps(e, sort_keys=True) + "\n" for e in log)
    (out / "train_log.jsonl").write_text(log_text)
    _log(f"trained {tconf.epochs} epochs; final mean loss "
         f"{log[-1]['mean_loss']:.4f} -> {out}")
    _finish(cfg, out, log_text, args)
    return 0


FINETUNE_DEFAULTS = {
    **{k: v for k, v in TRAIN_DEFAULTS.items()
       if k not in ("strategy", "k", "captioners", "selection_file",
                    "manifests")},
    "out": "finetune-run", "checkpoint": None, "gt_mode": "mcqs",
}


def cmd_finetune_gt(args) -> int:
    cfg = _resolve(args, FINETUNE_DEFAULTS)
    if not cfg["manifest"]:
        raise ConfigError("finetune-gt requires --manifest")
    out = _out_dir(cfg)
    dataset = load_dataset(cfg["manifest"])
    if cfg["checkpoint"]:
        model, _ = load_checkpoint(cfg["checkpoint"])
    else:
        model = ProjectionModel.identity(dataset.dim)
    full_cfg = {**TRAIN_DEFAULTS, **cfg}
    tconf = _train_config_from(full_cfg)
    model, log = finetune_gt(model, dataset, tconf, gt_mode=cfg["gt_mode"])
    fingerprint = config_fingerprint({k: v for k, v in cfg.items() if k != "out"})
    save_checkpoint(model, out / "checkpoint.ckpt", config_hash=fingerprint,
                    steps=tconf.epochs)
    log_text = "".join(json.dumps(e, sort_keys=True) + "\n" for e in log)
    (out / "train_log.jsonl").write_text(log_text)
    _log(f"finetuned on ground truth ({cfg['gt_mode']}) -> {out}")
    _finish(cfg, out, log_text, args)
    return 0


EVAL_DEFAULTS = {
    "manifest": None, "out": "eval-run", "checkpoint": None,
    "frozen_baseline": False, "mode": "qs", "tau": 0.1,
    "combine": "mean", "combine_temperature": 0.1,
    "split": "test", "k_select": 2, "text_table": None, "seed": 0,
}


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_DEFAULTS)
    if not cfg["manifest"]:
        raise ConfigError("eval requires --manifest")
    out = _out_dir(cfg)
    dataset = load_dataset(cfg["manifest"])
    pooling = _pooling_from(cfg)
    gallery = _gallery_ids(dataset, cfg["split"])
    if cfg["mode"] == "bottleneck":
        text_table = (load_table(cfg["text_table"]) if cfg["text_table"]
                      else dataset.captions)
        report = caption_bottleneck_eval(dataset, text_table,
                                         int(cfg["k_select"]),
                                         video_ids=gallery)
    else:
        if cfg["checkpoint"] and not cfg["frozen_baseline"]:
            model, _ = load_checkpoint(cfg["checkpoint"])
        else:
            model = ProjectionModel.identity(dataset.dim)
        report = evaluate(model, dataset, cfg["mode"], pooling,
                          video_ids=gallery,
                          fingerprint="frozen" if cfg["frozen_baseline"]
                          else "checkpoint")
    _write_json(out / "eval.json", report.to_json_obj())
    csv_text = _write_csv(out / "eval.csv", report.csv_rows(),
                          ["dataset", "direction", "k", "recall", "median_rank"])
    if getattr(args, "table", False):
        print(report.to_table())
    _log(f"evaluated {dataset.name} ({cfg['mode']}) -> {out}")
    _finish(cfg, out, csv_text, args)
    return 0


CROSS_EVAL_DEFAULTS = {
    "manifests": None, "models": None, "out": "cross-eval", "mode": "qs",
    "tau": 0.1, "combine": "mean", "combine_temperature": 0.1,
    "split": "test", "seed": 0,
}


def _named_paths(raw, what: str) -> dict[str, str]:
    if not raw:
        raise ConfigError(f"cross-eval requires --{what} name=path pairs")
    if isinstance(raw, str):
        raw = [p for p in raw.split(",") if p]
    out = {}
    for item in raw:
        if "=" not in item:
            raise ConfigError(f"--{what} entries must be name=path, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


def cmd_cross_eval(args) -> int:
    cfg = _resolve(args, CROSS_EVAL_DEFAULTS)
    out = _out_dir(cfg)
    datasets = {name: load_dataset(path)
                for name, path in _named_paths(cfg["manifests"], "manifests").items()}
    models = {name: load_checkpoint(path)[0]
              for name, path in _named_paths(cfg["models"], "models").items()}
    pooling = _pooling_from(cfg)
    split = cfg["split"] if cfg["split"] != "all" else None
    grid = cross_eval(models, datasets, cfg["mode"], pooling, split=split)
    rows = []
    model_names = ["frozen"] + sorted(models)
    ds_names = sorted(datasets)
    for m_name in model_names:
        row = {"train": m_name}
        for ds_name in ds_names:
            rep = grid[(m_name, ds_name)]
            row[f"{ds_name}_r@1"] = f"{rep.t2v[1]:.6f}"
            row[f"{ds_name}_r@5"] = f"{rep.t2v.get(5, 0.0):.6f}"
        rows.append(row)
    fields = ["train"] + [f"{d}_r@{k}" for d in ds_names for k in (1, 5)]
    csv_text = _write_csv(out / "grid.csv", rows, fields)
    _write_json(out / "grid.json",
                {f"{m}|{d}": grid[(m, d)].to_json_obj()
                 for (m, d) in grid})
    if getattr(args, "table", False):
        widths = {f: max(len(f), *(len(str(r.get(f, ""))) for r in rows))
                  for f in fields}
        print("  ".join(f"{f:<{widths[f]}}" for f in fields))
        for r in rows:
            print("  ".join(f"{str(r.get(f, '')):<{widths[f]}}" for f in fields))
    _log(f"cross-eval grid ({len(models)} models x {len(datasets)} datasets) -> {out}")
    _finish(cfg, out, csv_text, args)
    return 0


STATS_DEFAULTS = {
    "manifest": None, "out": "stats-run", "strategy": "top2", "k": None,
    "captioners": "synthcap-a,synthcap-b", "seed": 0,
}


def cmd_stats(args) -> int:
    cfg = _resolve(args, STATS_DEFAULTS)
    if not cfg["manifest"]:
        raise ConfigError("stats requires --manifest")
    out = _out_dir(cfg)
    dataset = load_dataset(cfg["manifest"])
    report = caption_stats(dataset, _strategy_from(cfg))
    _write_json(out / "stats.json", report.to_json_obj())
    (out / "stats.txt").write_text(report.to_table() + "\n")
    if getattr(args, "table", False):
        print(report.to_table())
    _log(f"caption statistics for {dataset.name} -> {out}")
    _finish(cfg, out, json.dumps(report.to_json_obj(), sort_keys=True) + "\n", args)
    return 0


SWEEP_DEFAULTS = {
    "manifest": None, "manifests": None, "out": "sweep-run",
    "axis": "strategy", "cells": None, "seeds": None,
    "captioners": "synthcap-a,synthcap-b",
    "epochs": 10, "batch_size": 16, "lr0": 0.02,
    "infonce_temperature": 0.2, "literal_eq3": False,
    "tau": 0.1, "combine": "mean", "combine_temperature": 0.1,
    "warmup_steps": 0, "seed": 0, "split": "test", "jobs": 1,
}

STRATEGY_SWEEP_CELLS = ["all", "middle1", "top1", "randtop2", "randtop3"]
POOLING_SWEEP_CELLS = ["rand4_qs", "weighted4_mcqs", "mean4_mcqs"]


def _sweep_cells(cfg: dict) -> list[str]:
    if cfg["cells"]:
        raw = cfg["cells"]
        return [c for c in raw.split(",") if c] if isinstance(raw, str) else list(raw)
    if cfg["axis"] == "strategy":
        return list(STRATEGY_SWEEP_CELLS)
    if cfg["axis"] == "pooling":
        return list(POOLING_SWEEP_CELLS)
    if cfg["axis"] == "datasets":
        return ["self", "combined"]
    raise ConfigError(f"unknown sweep axis {cfg['axis']!r}")


def _cell_config(cfg: dict, axis: str, cell: str) -> dict:
    cell_cfg = dict(cfg)
    if axis == "strategy":
        if cell not in STRATEGY_ALIASES:
            raise ConfigError(f"unknown strategy cell {cell!r}")
        cell_cfg["strategy"] = cell
    elif axis == "pooling":
        if cell == "rand4_qs":
            cell_cfg["strategy"] = "randtop2"
            cell_cfg["combine"] = "mean"
        elif cell == "weighted4_mcqs":
            cell_cfg["strategy"] = "top2"
            cell_cfg["combine"] = "weighted"
        elif cell == "mean4_mcqs":
            cell_cfg["strategy"] = "top2"
            cell_cfg["combine"] = "mean"
        else:
            raise ConfigError(f"unknown pooling cell {cell!r}")
    elif axis == "datasets":
        if cell not in ("self", "combined"):
            raise ConfigError(f"unknown dataset cell {cell!r}")
        cell_cfg["dataset_cell"] = cell
    return cell_cfg


def _run_sweep_cell(payload: tuple) -> list[dict]:
    """One (cell, seed) unit of a sweep; isolated for --jobs workers."""
    cell, seed, axis, cell_cfg, manifest_paths, split = payload
    datasets = _load_datasets(manifest_paths)
    cell_cfg = dict(cell_cfg)
    cell_cfg["seed"] = seed
    cell_cfg.setdefault("strategy", "top2")
    cell_cfg.setdefault("k", None)
    tconf = _train_config_from(cell_cfg)
    pooling = tconf.pooling
    rows = []
    if axis == "datasets" and cell_cfg.get("dataset_cell") == "self":
        pairs = [([ds], ds) for ds in datasets]
    else:
        pairs = [(datasets, ds) for ds in datasets]
    for train_sets, eval_ds in pairs:
        model, _ = train(train_sets, tconf)
        gallery = _gallery_ids(eval_ds, split)
        report = evaluate(model, eval_ds, "qs", pooling, video_ids=gallery)
        for row in report.csv_rows():
            rows.append({"cell": cell, "seed": seed, **row})
    return rows


def cmd_sweep(args) -> int:
    cfg = _resolve(args, SWEEP_DEFAULTS)
    out = _out_dir(cfg)
    manifest_paths = _manifest_list(cfg)
    cells = _sweep_cells(cfg)
    seeds = cfg["seeds"]
    if seeds is None:
        seeds = [int(cfg["seed"])]
    elif isinstance(seeds, str):
        seeds = [int(s) for s in seeds.split(",") if s]
    work = []
    for cell in cells:
        cell_cfg = _cell_config(cfg, cfg["axis"], cell)
        for seed in seeds:
            work.append((cell, seed, cfg["axis"], cell_cfg, manifest_paths,
                         cfg["split"]))
    failures = []
    results: dict[int, list[dict]] = {}
    if int(cfg["jobs"]) > 1:
        with ProcessPoolExecutor(max_workers=int(cfg["jobs"])) as pool:
            futures = {i: pool.submit(_run_sweep_cell, w)
                       for i, w in enumerate(work)}
            for i, fut in futures.items():
                try:
                    results[i] = fut.result()
                except Exception as exc:
                    failures.append((work[i][0], work[i][1], str(exc)))
    else:
        for i, w in enumerate(work):
            try:
                results[i] = _run_sweep_cell(w)
            except Exception as exc:
                failures.append((w[0], w[1], str(exc)))
    rows = [row for i in sorted(results) for row in results[i]]
    # per-cell mean over seeds, t2v direction
    if len(seeds) > 1:
        for cell in cells:
            by_k: dict[int, list[float]] = {}
            for row in rows:
                if row["cell"] == cell and row["direction"] == "t2v":
                    by_k.setdefault(row["k"], []).append(float(row["recall"]))
            for k in sorted(by_k):
                rows.append({"cell": cell, "seed": "mean", "dataset": "all",
                             "direction": "t2v", "k": k,
                             "recall": f"{float(np.mean(by_k[k])):.6f}",
                             "median_rank": ""})
    csv_text = _write_csv(out / "sweep.csv", rows,
                          ["cell", "seed", "dataset", "direction", "k",
                           "recall", "median_rank"])
    for cell, seed, msg in failures:
        _log(f"cell {cell} (seed {seed}) failed: {msg}")
    _log(f"sweep over {len(cells)} cells x {len(seeds)} seeds -> {out}")
    _finish(cfg, out, csv_text, args)
    return 0 if not failures else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--jobs", type=int)
    parser.add_argument("--table", action="store_true",
                        help="print aligned text tables to stdout")
    parser.add_argument("--stdout", action="store_true",
                        help="also write the primary output to stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capvid",
        description="Text-to-video retrieval training on precomputed "
                    "embeddings with automatic-caption supervision.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    _add_common(p)
    p.add_argument("--videos", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--captions-per-captioner", dest="captions_per_captioner",
                   type=int)
    p.add_argument("--captioners")
    p.add_argument("--sigma-frame", dest="sigma_frame", type=float)
    p.add_argument("--sigma-caption", dest="sigma_caption", type=float)
    p.add_argument("--p-junk", dest="p_junk", type=float)
    p.add_argument("--queries-per-video", dest="queries_per_video", type=int)
    p.add_argument("--signal-dim", dest="signal_dim", type=int)
    p.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    p.add_argument("--modality-gap", dest="modality_gap", type=float)
    p.add_argument("--name")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("select", help="apply a caption-selection strategy")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--strategy")
    p.add_argument("--k", type=int)
    p.add_argument("--captioners")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train projection heads")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--manifests", nargs="+")
    p.add_argument("--strategy")
    p.add_argument("--k", type=int)
    p.add_argument("--captioners")
    p.add_argument("--selection-file", dest="selection_file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--infonce-temperature", dest="infonce_temperature",
                   type=float)
    p.add_argument("--literal-eq3", dest="literal_eq3", action="store_true",
                   default=None,
                   help="use exp(Phi) with no temperature, as written")
    p.add_argument("--tau", type=float)
    p.add_argument("--combine", choices=["mean", "weighted"])
    p.add_argument("--combine-temperature", dest="combine_temperature",
                   type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune-gt", help="finetune on ground-truth captions")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--gt-mode", dest="gt_mode", choices=["mcqs", "single"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--infonce-temperature", dest="infonce_temperature",
                   type=float)
    p.add_argument("--literal-eq3", dest="literal_eq3", action="store_true",
                   default=None)
    p.add_argument("--tau", type=float)
    p.add_argument("--combine", choices=["mean", "weighted"])
    p.add_argument("--combine-temperature", dest="combine_temperature",
                   type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.set_defaults(func=cmd_finetune_gt)

    p = sub.add_parser("eval", help="evaluate retrieval recall")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--frozen-baseline", dest="frozen_baseline",
                   action="store_true", default=None)
    p.add_argument("--mode", choices=["mean_pool", "qs", "mcqs", "bottleneck"])
    p.add_argument("--tau", type=float)
    p.add_argument("--combine", choices=["mean", "weighted"])
    p.add_argument("--combine-temperature", dest="combine_temperature",
                   type=float)
    p.add_argument("--split", choices=["train", "test", "all"])
    p.add_argument("--k-select", dest="k_select", type=int)
    p.add_argument("--text-table", dest="text_table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-eval", help="model x dataset evaluation grid")
    _add_common(p)
    p.add_argument("--manifests", nargs="+",
                   help="name=path pairs of dataset manifests")
    p.add_argument("--models", nargs="+", help="name=path checkpoint pairs")
    p.add_argument("--mode", choices=["mean_pool", "qs", "mcqs"])
    p.add_argument("--tau", type=float)
    p.add_argument("--combine", choices=["mean", "weighted"])
    p.add_argument("--combine-temperature", dest="combine_temperature",
                   type=float)
    p.add_argument("--split", choices=["train", "test", "all"])
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("stats", help="caption statistics report")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--strategy")
    p.add_argument("--k", type=int)
    p.add_argument("--captioners")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="train/eval over an ablation axis")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--manifests", nargs="+")
    p.add_argument("--axis", choices=["strategy", "pooling", "datasets"])
    p.add_argument("--cells")
    p.add_argument("--seeds")
    p.add_argument("--captioners")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--infonce-temperature", dest="infonce_temperature",
                   type=float)
    p.add_argument("--literal-eq3", dest="literal_eq3", action="store_true",
                   default=None)
    p.add_argument("--tau", type=float)
    p.add_argument("--combine", choices=["mean", "weighted"])
    p.add_argument("--combine-temperature", dest="combine_temperature",
                   type=float)
    p.add_argument("--warmup-steps", dest="warmup_steps", type=int)
    p.add_argument("--split", choices=["train", "test", "all"])
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SpecError) as exc:
        _log(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (DataError, FormatError, ShapeError, MissingCaptionerError,
            EvalError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA
    except CapvidError as exc:
        _log(f"runtime error: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
