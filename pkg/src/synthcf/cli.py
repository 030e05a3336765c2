"""Command-line entry point.

Every subcommand reads an optional YAML/JSON experiment config (``--config``),
honours ``--seed`` and ``--out`` overrides, prints one JSON line describing
what it wrote, and exits 0.  On failure it prints ``{"error": ..., "message":
...}`` to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .baselines import mcnnm_estimate, rsc_estimate
from .estimate import read_estimate, write_estimate
from .harness import ExperimentConfig, emit_plot_data, preprocess, run_experiment, spec_from_labels, sweep
from .inference import attention_report, generate_counterfactual, write_attention_csv
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .numerics import rmse_masked
from .panel import InterventionSpec, Panel, ScalingStats, load_panel_csv, write_panel_csv
from .synthgen import generate
from .training import finetune, pretrain

log = logging.getLogger("synthcf")


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping")
    cfg = ExperimentConfig.from_dict(raw)
    if seed is not None:
        cfg = replace(cfg, master_seed=seed, synth=replace(cfg.synth, seed=seed),
                      pretrain=replace(cfg.pretrain, seed=seed), finetune=replace(cfg.finetune, seed=seed))
    if out is not None:
        cfg = replace(cfg, output_dir=out)
    return cfg


def _panel_and_spec(args, cfg: ExperimentConfig) -> tuple[Panel, InterventionSpec]:
    path = args.panel or cfg.panel_path
    if path is None:
        raise ValueError("no panel given; use --panel or panel_path in the config")
    panel = load_panel_csv(path, cfg.schema)
    labels = {"target_unit": cfg.target_unit, "t0": cfg.t0, "covariate": cfg.covariate}
    if args.intervention:
        labels.update(json.loads(Path(args.intervention).read_text(encoding="utf-8")))
    for key in labels:
        if getattr(args, key, None) is not None:
            labels[key] = getattr(args, key)
    if labels["target_unit"] is None or labels["t0"] is None:
        raise ValueError("intervention unknown; give --target-unit and --t0 or --intervention FILE")
    return panel, spec_from_labels(panel, labels["target_unit"], labels["t0"], labels["covariate"])


def _intervention_labels(panel: Panel, spec: InterventionSpec) -> dict:
    return {
        "target_unit": panel.unit_labels[spec.target_unit],
        "t0": panel.time_labels[spec.t0],
        "covariate": panel.covariate_labels[spec.covariate_of_interest],
    }


def _out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- subcommands


def cmd_generate(args, cfg):
    sp = generate(cfg.synth)
    out = _out(cfg)
    panel_path = write_panel_csv(sp.observed, out / "panel.csv")
    mean_path = write_panel_csv(sp.mean, out / "mean.csv")
    truth_path = out / "truth.csv"
    with truth_path.open("w", encoding="utf-8") as fh:
        fh.write("time,truth\n")
        for t, y in zip(sp.observed.time_labels[sp.spec.t0:], sp.truth):
            fh.write(f"{t},{float(y)!r}\n")
    spec_path = out / "intervention.json"
    spec_path.write_text(json.dumps(_intervention_labels(sp.observed, sp.spec), sort_keys=True) + "\n",
                         encoding="utf-8")
    return {"panel": str(panel_path), "mean": str(mean_path), "truth": str(truth_path),
            "intervention": str(spec_path), "theta": sp.theta.tolist()}


def cmd_pretrain(args, cfg):
    panel, spec = _panel_and_spec(args, cfg)
    data, stats = preprocess(panel, spec, cfg.denoise_rank)
    U, T, K = data.shape
    model_cfg = ModelConfig(num_units=U, num_covariates=K, max_time=T, **cfg.model)
    params, train_log = pretrain(data, spec, model_cfg, cfg.pretrain)
    out = _out(cfg)
    meta = {"stage": "pretrain", "scaling": stats.to_dict(), "denoise_rank": cfg.denoise_rank,
            "intervention": _intervention_labels(panel, spec), "train": vars(cfg.pretrain)}
    digest = save_checkpoint(params, out / "pretrained.ckpt", meta)
    train_log.write_csv(out / "pretrain_log.csv")
    return {"checkpoint": str(out / "pretrained.ckpt"), "checkpoint_id": digest,
            "log": str(out / "pretrain_log.csv")}


def _checkpoint_inputs(args, cfg):
    params, meta = load_checkpoint(args.checkpoint)
    panel, spec = _panel_and_spec(args, cfg)
    stats = ScalingStats.from_dict(meta["scaling"]) if "scaling" in meta else None
    denoise = meta.get("denoise_rank", cfg.denoise_rank)
    data, stats = preprocess(panel, spec, denoise, stats)
    return params, meta, panel, spec, data, stats


def cmd_finetune(args, cfg):
    params, meta, panel, spec, data, stats = _checkpoint_inputs(args, cfg)
    params, train_log = finetune(params, data, spec, cfg.finetune)
    out = _out(cfg)
    meta = {**{k: v for k, v in meta.items() if k != "checkpoint_id"}, "stage": "finetune",
            "parent": meta["checkpoint_id"], "finetune": vars(cfg.finetune)}
    digest = save_checkpoint(params, out / "finetuned.ckpt", meta)
    train_log.write_csv(out / "finetune_log.csv")
    return {"checkpoint": str(out / "finetuned.ckpt"), "checkpoint_id": digest,
            "log": str(out / "finetune_log.csv")}


def cmd_infer(args, cfg):
    params, meta, panel, spec, data, stats = _checkpoint_inputs(args, cfg)
    est = generate_counterfactual(params, data, spec, stats, metadata={"checkpoint_id": meta["checkpoint_id"]})
    path, sidecar = write_estimate(est, _out(cfg) / "transformer.csv")
    return {"estimate": str(path), "metadata": str(sidecar)}


def cmd_attention(args, cfg):
    params, _, panel, spec, data, _ = _checkpoint_inputs(args, cfg)
    path = write_attention_csv(attention_report(params, data, spec), _out(cfg) / "attention.csv")
    return {"attention": str(path)}


def cmd_baseline(args, cfg):
    panel, spec = _panel_and_spec(args, cfg)
    hidden = panel.hide_target_post(spec)
    est = rsc_estimate(hidden, spec, cfg.rsc) if args.method == "rsc" else mcnnm_estimate(hidden, spec, cfg.mcnnm)
    path, sidecar = write_estimate(est, _out(cfg) / f"{args.method}.csv")
    return {"estimate": str(path), "metadata": str(sidecar), "converged": est.converged}


def cmd_evaluate(args, cfg):
    est = read_estimate(args.estimate)
    truth = {}
    with Path(args.truth).open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["time", "truth"]:
            raise ValueError(f"{args.truth}: expected header 'time,truth'")
        for line in fh:
            t, y = line.strip().split(",")
            truth[t] = float(y)
    missing = [t for t in est.time_labels if str(t) not in truth]
    if missing:
        raise ValueError(f"truth file lacks times {missing[:5]}")
    y = np.array([truth[str(t)] for t in est.time_labels])
    result = {"estimator": est.estimator, "rmse": rmse_masked(est.prediction, y), "n": int(y.size)}
    if args.out:
        path = _out(cfg) / "evaluation.json"
        path.write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
        result["file"] = str(path)
    return result


def cmd_sweep(args, cfg):
    if args.axis:
        if not args.values:
            raise ValueError("--axis needs --values")
        table = sweep(args.axis, args.values, cfg)
    else:
        table = run_experiment(cfg)
    files = emit_plot_data(table, _out(cfg), cfg)
    failed = sum(r.status != "ok" for r in table.records)
    return {"files": [str(f) for f in files], "runs": len(table.records), "failed": failed}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthcf", description="Transformer synthetic-control counterfactuals.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    panel = argparse.ArgumentParser(add_help=False)
    panel.add_argument("--panel", help="long-format panel CSV (unit,time,covariate,value)")
    panel.add_argument("--intervention", help="JSON with target_unit, t0 and covariate labels")
    panel.add_argument("--target-unit", dest="target_unit")
    panel.add_argument("--t0", help="first post-intervention time label")
    panel.add_argument("--covariate", help="covariate of interest (default: the first)")
    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True)

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="draw a synthetic panel")
    sub.add_parser("pretrain", parents=[common, panel], help="pre-train on donors")
    sub.add_parser("finetune", parents=[common, panel, ckpt], help="fine-tune on the target's pre-period")
    sub.add_parser("infer", parents=[common, panel, ckpt], help="generate the counterfactual")
    sub.add_parser("attention", parents=[common, panel, ckpt], help="donor attention report")
    p = sub.add_parser("baseline", parents=[common, panel], help="RSC or MC-NNM estimate")
    p.add_argument("--method", choices=("rsc", "mcnnm"), required=True)
    p = sub.add_parser("evaluate", parents=[common], help="RMSE of an estimate against a truth CSV")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True, help="CSV with header time,truth")
    p = sub.add_parser("sweep", parents=[common], help="replicated benchmark, optionally over an axis")
    p.add_argument("--axis", choices=("noise", "donor_pool"))
    p.add_argument("--values", nargs="+", type=float)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "attention": cmd_attention,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "sweep" and args.axis == "donor_pool" and args.values:
            args.values = [int(v) for v in args.values]
        result = COMMANDS[args.command](args, cfg)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": args.command}),
              file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
