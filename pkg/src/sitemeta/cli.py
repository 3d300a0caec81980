"""Command-line surface: dataset generation and preprocessing, training,
evaluation, search, and report summarization.

Every run resolves its configuration from defaults, then an optional INI
config file, then explicit flags, and writes the fully-resolved result next
to its outputs so any command can be replayed exactly from that file alone.
All randomness flows from ``--seed``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import datetime
import json
import os
import sys

import numpy as np

from .data import load_table, mosaic_preprocess, save_table, synth_generate, zscore
from .evaluation import (
    EvalReport,
    SearchSpace,
    finetune_few_shot,
    random_search,
    scratch_baseline,
    transfer_baseline,
    zero_shot_eval,
)
from .meta import MetaConfig, load_ring, meta_train, save_ring, write_log_csv
from .models import ModelSpec

DATASET_FILENAME = "dataset.bin"
RING_FILENAME = "checkpoints.bin"
LOG_FILENAME = "log.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
RESOLVED_CONFIG = "resolved.cfg"
TRIALS_FILENAME = "trials.csv"
BEST_CONFIG_FILENAME = "best_config.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for usage problems, not argparse's 2
        raise UsageError(f"{self.prog}: {message}")


_META_FIELDS = {f.name: f.type for f in dataclasses.fields(MetaConfig)}

_EPISODE_FIELDS = {
    "sites": int,
    "n_per_site": int,
    "heterogeneity": float,
    "split": str,
    "feature_shape": str,
    "val_fraction": float,
    "shared_sep": float,
    "site_sep": float,
}
_EPISODE_DEFAULTS = {
    "sites": 38,
    "n_per_site": 160,
    "heterogeneity": 1.0,
    "split": "30/7/1",
    "feature_shape": "32",
    "val_fraction": 0.5,
    "shared_sep": 1.3,
    "site_sep": 2.0,
}

_RUN_FIELDS = ("command", "data", "out", "seed", "threads", "hidden", "ring", "mode",
               "n_trials", "finetune_sites")


def _add_common(p: _Parser, data=False, out=True):
    if data:
        p.add_argument("--data", help="path to a dataset file")
    if out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap; 1 (the default) is the serial reference mode")
    p.add_argument("--config", help="INI config file; flags override its values")


def _add_meta_overrides(p: _Parser):
    for name, ftype in _META_FIELDS.items():
        if name == "seed":
            continue  # --seed is the single randomness source
        kind = str if ftype is str or ftype == "str" else (float if "float" in str(ftype) else int)
        p.add_argument(f"--{name}", type=kind, default=None)


def _add_episode_overrides(p: _Parser):
    for name, kind in _EPISODE_FIELDS.items():
        p.add_argument(f"--{name}", type=kind, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="sitemeta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-site dataset file")
    _add_common(p)
    _add_episode_overrides(p)

    p = sub.add_parser("preprocess", help="mosaic + z-score a volumetric dataset")
    _add_common(p, data=True)

    p = sub.add_parser("meta-train", help="episodic meta-training; writes checkpoints + log")
    _add_common(p, data=True)
    _add_meta_overrides(p)
    p.add_argument("--hidden", default=None, help="comma-separated MLP hidden widths")

    p = sub.add_parser("meta-test", help="few-shot evaluation of a checkpoint ring")
    _add_common(p, data=True)
    p.add_argument("--ring", help="path to a checkpoint ring file")
    _add_meta_overrides(p)

    p = sub.add_parser("zero-shot", help="zero-shot evaluation of the best checkpoint")
    _add_common(p, data=True)
    p.add_argument("--ring", help="path to a checkpoint ring file")

    p = sub.add_parser("baseline", help="transfer or scratch supervised baseline")
    _add_common(p, data=True)
    p.add_argument("--mode", choices=("transfer", "scratch"), default="transfer")
    p.add_argument("--finetune_sites", type=int, default=None,
                   help="meta-test sites used for fine-tuning (default 3)")
    _add_meta_overrides(p)
    p.add_argument("--hidden", default=None)

    p = sub.add_parser("search", help="random search over episode sizes")
    _add_common(p, data=True)
    p.add_argument("--n_trials", type=int, default=None)
    _add_meta_overrides(p)
    p.add_argument("--hidden", default=None)

    p = sub.add_parser("report", help="summarize report JSON files as a table")
    p.add_argument("reports", nargs="+", help="report.json paths")
    p.add_argument("--out", default=None)

    return parser


# ---------------------------------------------------------------------------
# config resolution

def _read_config_file(path: str) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise UsageError(f"cannot read config file {path}")
    known = {"run": set(_RUN_FIELDS), "metalearn": set(_META_FIELDS),
             "episodes": set(_EPISODE_FIELDS), "search": {"n_trials"}}
    out: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in known:
            raise UsageError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in known[section]:
                raise UsageError(f"unknown key {key!r} in config section [{section}]")
        out[section] = dict(cp[section])
    return out


def _resolve(args) -> dict:
    """Defaults, overlaid with config-file values, overlaid with flags."""
    file_cfg = _read_config_file(args.config) if getattr(args, "config", None) else {}

    run = {"command": args.command, "data": None, "out": None, "seed": 0, "threads": 1,
           "hidden": "24", "ring": None, "mode": "transfer", "n_trials": 8,
           "finetune_sites": 3}
    for key, raw in file_cfg.get("run", {}).items():
        if key == "command":
            continue
        run[key] = raw
    for key in ("data", "out", "seed", "threads", "hidden", "ring", "mode",
                "n_trials", "finetune_sites"):
        val = getattr(args, key, None)
        if val is not None:
            run[key] = val
    run["seed"] = int(run["seed"])
    run["threads"] = int(run["threads"])
    run["n_trials"] = int(run["n_trials"])
    run["finetune_sites"] = int(run["finetune_sites"])
    if run["threads"] < 1:
        raise UsageError("--threads must be >= 1")

    meta = {f.name: f.default for f in dataclasses.fields(MetaConfig)}
    for key, raw in file_cfg.get("metalearn", {}).items():
        meta[key] = raw
    for key in _META_FIELDS:
        val = getattr(args, key, None)
        if val is not None:
            meta[key] = val
    meta["seed"] = run["seed"]
    for key, ftype in _META_FIELDS.items():
        if key == "order":
            meta[key] = str(meta[key])
        elif "float" in str(ftype):
            meta[key] = float(meta[key])
        else:
            meta[key] = int(meta[key])
    patience_explicit = (getattr(args, "early_stop_patience", None) is not None
                         or "early_stop_patience" in file_cfg.get("metalearn", {}))
    if not patience_explicit and meta["max_epochs"] >= 1:
        meta["early_stop_patience"] = min(meta["early_stop_patience"], meta["max_epochs"])

    episodes = dict(_EPISODE_DEFAULTS)
    for key, raw in file_cfg.get("episodes", {}).items():
        episodes[key] = raw
    for key in _EPISODE_FIELDS:
        val = getattr(args, key, None)
        if val is not None:
            episodes[key] = val
    for key, kind in _EPISODE_FIELDS.items():
        episodes[key] = kind(episodes[key])

    if "search" in file_cfg and "n_trials" in file_cfg["search"]:
        if getattr(args, "n_trials", None) is None:
            run["n_trials"] = int(file_cfg["search"]["n_trials"])

    return {"run": run, "metalearn": meta, "episodes": episodes,
            "search": {"n_trials": run["n_trials"]}}


def _meta_config(resolved: dict) -> MetaConfig:
    try:
        return MetaConfig(**resolved["metalearn"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _write_resolved(resolved: dict, out_dir: str) -> None:
    cp = configparser.ConfigParser()
    for section in ("run", "metalearn", "episodes", "search"):
        cp[section] = {k: "" if v is None else str(v) for k, v in resolved[section].items()}
    with open(os.path.join(out_dir, RESOLVED_CONFIG), "w") as fh:
        cp.write(fh)


def _ensure_out(resolved: dict) -> str:
    out = resolved["run"]["out"]
    if not out:
        raise UsageError("--out is required")
    os.makedirs(out, exist_ok=True)
    return out


def _require_data(resolved: dict) -> str:
    data = resolved["run"]["data"]
    if not data:
        raise UsageError("--data is required")
    if not os.path.exists(data):
        raise UsageError(f"dataset file {data} does not exist")
    return data


def _parse_split(text: str, n_sites: int) -> tuple[int, int, int]:
    parts = text.split("/")
    if len(parts) != 3:
        raise UsageError(f"--split must look like 30/7/1, got {text!r}")
    split = tuple(int(p) for p in parts)
    if sum(split) != n_sites:
        raise UsageError(f"split {text} does not sum to {n_sites} sites")
    return split


def _parse_feature_shape(text: str) -> tuple[int, ...]:
    try:
        shape = tuple(int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise UsageError(f"bad feature shape {text!r}") from exc
    return shape


def _model_spec(table, resolved: dict) -> ModelSpec:
    shape = table.feature_shape()
    if len(shape) == 1:
        hidden = [int(w) for w in str(resolved["run"]["hidden"]).split(",") if w]
        return ModelSpec.mlp([shape[0], *hidden, 1])
    if len(shape) == 3:
        return ModelSpec.vgg_tiny(input_hw=(shape[1], shape[2]), in_channels=shape[0])
    raise UsageError(f"cannot build a model for feature shape {shape}")


def _write_report(report: EvalReport, out_dir: str) -> None:
    payload = report.to_json_dict()
    payload["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
    with open(os.path.join(out_dir, REPORT_JSON), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, REPORT_CSV), "w") as fh:
        fh.write("protocol,site,auc,n\n")
        for row in report.csv_rows():
            fh.write(row + "\n")


# ---------------------------------------------------------------------------
# commands

def _cmd_gen_data(resolved: dict) -> int:
    out = _ensure_out(resolved)
    ep = resolved["episodes"]
    table = synth_generate(
        n_sites=ep["sites"],
        n_per_site=ep["n_per_site"],
        heterogeneity=ep["heterogeneity"],
        seed=resolved["run"]["seed"],
        feature_shape=_parse_feature_shape(ep["feature_shape"]),
        split=_parse_split(ep["split"], ep["sites"]),
        val_fraction=ep["val_fraction"],
        shared_sep=ep["shared_sep"],
        site_sep=ep["site_sep"],
    )
    save_table(os.path.join(out, DATASET_FILENAME), table)
    _write_resolved(resolved, out)
    print(f"wrote {os.path.join(out, DATASET_FILENAME)}")
    return 0


def _cmd_preprocess(resolved: dict) -> int:
    out = _ensure_out(resolved)
    table = load_table(_require_data(resolved))
    if len(table.feature_shape()) != 3:
        raise UsageError("preprocess expects a dataset of rank-3 volumes")
    for site in table.sites:
        mosaics = np.stack([mosaic_preprocess(v) for v in site.features])
        site.features = zscore(mosaics)[:, None, :, :]
    save_table(os.path.join(out, DATASET_FILENAME), table)
    _write_resolved(resolved, out)
    print(f"wrote {os.path.join(out, DATASET_FILENAME)}")
    return 0


def _cmd_meta_train(resolved: dict) -> int:
    out = _ensure_out(resolved)
    config = _meta_config(resolved)
    table = load_table(_require_data(resolved))
    spec = _model_spec(table, resolved)
    ring, log = meta_train(table, spec, config)
    save_ring(os.path.join(out, RING_FILENAME), ring)
    write_log_csv(os.path.join(out, LOG_FILENAME), log)
    _write_resolved(resolved, out)
    if len(ring):
        print(f"trained {len(log)} epochs, best val AUC {ring.best().score:.4f}")
    else:
        print("no epochs completed")
    return 0


def _require_ring(resolved: dict):
    path = resolved["run"]["ring"]
    if not path:
        raise UsageError("--ring is required")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint file {path} does not exist")
    return load_ring(path)


def _cmd_meta_test(resolved: dict) -> int:
    out = _ensure_out(resolved)
    table = load_table(_require_data(resolved))
    ring = _require_ring(resolved)
    config = _meta_config(resolved)
    rng = np.random.default_rng(resolved["run"]["seed"])
    report = finetune_few_shot(ring, table, config, rng)
    _write_report(report, out)
    _write_resolved(resolved, out)
    print(f"few-shot pooled AUC {report.pooled_auc:.4f} over {report.n_examples} examples")
    return 0


def _cmd_zero_shot(resolved: dict) -> int:
    out = _ensure_out(resolved)
    table = load_table(_require_data(resolved))
    ring = _require_ring(resolved)
    report = zero_shot_eval(ring.best(), table)
    _write_report(report, out)
    _write_resolved(resolved, out)
    print(f"zero-shot AUC {report.pooled_auc:.4f} over {report.n_examples} examples")
    return 0


def _cmd_baseline(resolved: dict) -> int:
    out = _ensure_out(resolved)
    table = load_table(_require_data(resolved))
    config = _meta_config(resolved)
    spec = _model_spec(table, resolved)
    n_sites = resolved["run"]["finetune_sites"]
    if resolved["run"]["mode"] == "transfer":
        report = transfer_baseline(table, spec, config, n_finetune_sites=n_sites)
    else:
        report = scratch_baseline(table, spec, config, n_finetune_sites=n_sites)
    _write_report(report, out)
    _write_resolved(resolved, out)
    print(f"{report.protocol} pooled AUC {report.pooled_auc:.4f}")
    return 0


def _cmd_search(resolved: dict) -> int:
    out = _ensure_out(resolved)
    table = load_table(_require_data(resolved))
    config = _meta_config(resolved)
    spec = _model_spec(table, resolved)
    space = SearchSpace(n_trials=resolved["search"]["n_trials"], seed=resolved["run"]["seed"])
    best, trial_log = random_search(space, table, spec, config)
    with open(os.path.join(out, TRIALS_FILENAME), "w") as fh:
        fh.write("trial,n_sites_per_episode,k_support,t_target,status,val_auc,error\n")
        for row in trial_log:
            auc = "" if row["val_auc"] is None else f"{row['val_auc']:.10g}"
            err = (row["error"] or "").replace(",", ";")
            fh.write(f"{row['trial']},{row['n_sites_per_episode']},{row['k_support']},"
                     f"{row['t_target']},{row['status']},{auc},{err}\n")
    best_resolved = {**resolved, "metalearn": dataclasses.asdict(best)}
    cp = configparser.ConfigParser()
    cp["metalearn"] = {k: str(v) for k, v in best_resolved["metalearn"].items()}
    with open(os.path.join(out, BEST_CONFIG_FILENAME), "w") as fh:
        cp.write(fh)
    _write_resolved(resolved, out)
    print(f"best trial: n_sites={best.n_sites_per_episode} k={best.k_support} t={best.t_target}")
    return 0


def _cmd_report(args) -> int:
    lines = [f"{'protocol':<22}{'pooled AUC':>12}{'bal. acc':>10}{'n':>7}{'zero-shot':>11}"]
    for path in args.reports:
        with open(path) as fh:
            payload = json.load(fh)
        report = EvalReport.from_json_dict(payload)
        zs = f"{report.zero_shot_auc:.4f}" if report.zero_shot_auc is not None else "-"
        lines.append(f"{report.protocol:<22}{report.pooled_auc:>12.4f}"
                     f"{report.balanced_acc:>10.4f}{report.n_examples:>7}{zs:>11}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "summary.txt"), "w") as fh:
            fh.write(table + "\n")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "preprocess": _cmd_preprocess,
    "meta-train": _cmd_meta_train,
    "meta-test": _cmd_meta_test,
    "zero-shot": _cmd_zero_shot,
    "baseline": _cmd_baseline,
    "search": _cmd_search,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "report":
            return _cmd_report(args)
        resolved = _resolve(args)
        return _HANDLERS[args.command](resolved)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
