"""Command-line surface: gen, train, score, calibrate, bench, gradcheck, config.

Exit codes: 0 success, 1 claim/assertion failure, 2 usage or config error.
"""

from __future__ import annotations

import json
import os
import sys
import time

import click
import numpy as np

from . import calibration, config as config_mod, gradcheck, pipeline
from .config import ConfigError
from .features import EmbedderConfig
from .fusion import VARIANTS, profile
from .pipeline import DatasetConfig, ReferringModel

PAPER_MEX_PARAMS = 81_000_000
PAPER_CASCADE_PARAMS = 92_000_000


def _load_config(ctx_obj):
    overrides = {}
    for key in ("seed", "out", "workers"):
        if ctx_obj.get(key) is not None:
            overrides[key] = ctx_obj[key]
    try:
        return config_mod.load(ctx_obj.get("config"), overrides)
    except ConfigError as exc:
        raise click.UsageError(str(exc))


def _write_manifest(cfg, command, outputs):
    os.makedirs(cfg["out"], exist_ok=True)
    path = os.path.join(cfg["out"], f"run_manifest_{command}.json")
    with open(path, "w") as fh:
        json.dump({"command": command, "seed": cfg["seed"],
                   "config_hash": config_mod.config_hash(cfg),
                   "outputs": sorted(outputs)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _embedder_from(cfg, concepts=()):
    e = cfg["embedder"]
    return EmbedderConfig(
        seed=cfg["seed"], raw_visual_dim=e["raw_visual_dim"],
        visual_tokens=e["visual_tokens"], raw_text_dim=e["raw_text_dim"],
        text_tokens=e["text_tokens"], fused_dim=cfg["fusion"]["d_k"],
        truncate_to=e["truncate_to"], oracle_mode=e["oracle_mode"],
        noise_scale=e["noise_scale"], concepts=tuple(concepts),
    )


def _build_model(cfg, dataset):
    emb = _embedder_from(cfg, concepts=dataset["meta"]["concepts"])
    return ReferringModel.build(
        emb, variant=cfg["fusion"]["variant"],
        residual_add=cfg["fusion"]["residual_add"],
        per_pair=cfg["fusion"]["per_pair_projections"],
        mlp_hidden=cfg["embedder"]["mlp_hidden"], seed=cfg["seed"],
        concept_of=pipeline.concept_map(dataset["manifest"]),
    )


def _stats_from(cfg):
    cal = cfg["calibration"]
    if not cal["enabled"]:
        return calibration.disabled_stats()
    if cal["manifest"] is None:
        raise click.UsageError("calibration.enabled requires calibration.manifest")
    if not os.path.exists(cal["manifest"]):
        raise click.UsageError(f"calibration manifest not found: {cal['manifest']}")
    stats = calibration.load_manifest(cal["manifest"])
    stats.tau, stats.a, stats.b = cal["tau"], cal["a"], cal["b"]
    return stats


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="JSON config file; unknown keys are rejected.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--workers", type=int, default=None)
@click.pass_context
def main(ctx, config_path, seed, out, workers):
    ctx.obj = {"config": config_path, "seed": seed, "out": out, "workers": workers}


@main.group("config")
def config_group():
    pass


@config_group.command("show-defaults")
def show_defaults():
    click.echo(json.dumps(config_mod.defaults(), indent=2, sort_keys=True))


@main.command()
@click.pass_context
def gen(ctx):
    """Generate the deterministic synthetic referring dataset."""
    cfg = _load_config(ctx.obj)
    ds = cfg["dataset"]
    dcfg = DatasetConfig(seed=cfg["seed"], n_concepts=ds["n_concepts"],
                         n_tracks=ds["n_tracks"], n_prompts=ds["n_prompts"],
                         n_frames=ds["n_frames"], n_windows=ds["n_windows"],
                         window=cfg["pipeline"]["window"])
    data = pipeline.generate_synthetic_dataset(dcfg)
    out_dir = os.path.join(cfg["out"], "dataset")
    pipeline.save_dataset(out_dir, data, dcfg)
    _write_manifest(cfg, "gen", [out_dir])
    click.echo(f"dataset written to {out_dir}")


def _require_dir(path, what):
    if not os.path.isdir(path):
        raise click.UsageError(f"{what} not found: {path}")


@main.command()
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.pass_context
def train(ctx, dataset_dir):
    """Train the fusion block and projection MLPs on the toy dataset."""
    cfg = _load_config(ctx.obj)
    dataset_dir = dataset_dir or os.path.join(cfg["out"], "dataset")
    _require_dir(dataset_dir, "dataset directory")
    data = pipeline.load_dataset(dataset_dir)
    model = _build_model(cfg, data)
    p = cfg["pipeline"]
    try:
        curve = pipeline.train(data["samples"], data["trajectories"], data["tasks"],
                               model, epochs=p["epochs"], batch_size=p["batch_size"],
                               lr=p["lr"], momentum=p["momentum"],
                               neg_margin=p["neg_margin"], seed=cfg["seed"])
    except pipeline.TrainingError as exc:
        click.echo(f"training aborted: {exc}", err=True)
        sys.exit(1)
    model_dir = os.path.join(cfg["out"], "model")
    model.save(model_dir)
    curve_path = os.path.join(cfg["out"], "loss_curve.json")
    with open(curve_path, "w") as fh:
        json.dump({"epoch_mean_loss": curve}, fh, indent=2)
        fh.write("\n")
    _write_manifest(cfg, "train", [model_dir, curve_path])
    click.echo(f"initial loss {curve[0]:.6f}, final loss {curve[-1]:.6f}")


@main.command()
@click.option("--dataset", "dataset_dir", type=click.Path(), default=None)
@click.option("--model", "model_dir", type=click.Path(), default=None)
@click.pass_context
def score(ctx, dataset_dir, model_dir):
    """Score every (trajectory, prompt) pair, calibrate, and filter."""
    cfg = _load_config(ctx.obj)
    dataset_dir = dataset_dir or os.path.join(cfg["out"], "dataset")
    model_dir = model_dir or os.path.join(cfg["out"], "model")
    _require_dir(dataset_dir, "dataset directory")
    _require_dir(model_dir, "model directory")
    data = pipeline.load_dataset(dataset_dir)
    model = ReferringModel.load(model_dir)
    stats = _stats_from(cfg)
    cands = pipeline.score_all(data["trajectories"], data["tasks"], model,
                               window=cfg["pipeline"]["window"], stats=stats,
                               threshold=cfg["pipeline"]["threshold"],
                               workers=cfg["workers"])
    os.makedirs(cfg["out"], exist_ok=True)
    scores_path = os.path.join(cfg["out"], "scores.jsonl")
    pipeline.write_scores(scores_path, cands)
    outputs = [scores_path]
    if data["labels"]:
        precision, recall = pipeline.precision_recall(cands, data["labels"])
        report_path = os.path.join(cfg["out"], "score_report.json")
        with open(report_path, "w") as fh:
            json.dump({"precision": precision, "recall": recall,
                       "kept": sum(c.kept for c in cands), "total": len(cands)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs.append(report_path)
        click.echo(f"precision {precision:.3f} recall {recall:.3f}")
    _write_manifest(cfg, "score", outputs)
    click.echo(f"scores written to {scores_path}")


@main.command()
@click.option("--scores", "scores_path", type=click.Path(), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--tau", type=float, default=None)
@click.option("--cal-a", type=float, default=None)
@click.option("--cal-b", type=float, default=None)
@click.pass_context
def calibrate(ctx, scores_path, manifest_path, tau, cal_a, cal_b):
    """Re-refine an existing scores file with a calibration manifest."""
    cfg = _load_config(ctx.obj)
    for path, what in ((scores_path, "scores file"), (manifest_path, "calibration manifest")):
        if not os.path.exists(path):
            raise click.UsageError(f"{what} not found: {path}")
    stats = calibration.load_manifest(manifest_path)
    if tau is not None:
        stats.tau = tau
    if cal_a is not None:
        stats.a = cal_a
    if cal_b is not None:
        stats.b = cal_b
    cands = pipeline.read_scores(scores_path)
    prompt_order = sorted({c.prompt_id for c in cands})
    refined = []
    for c in cands:
        s_prime, p = stats.refine(c.raw_score, c.prompt_id,
                                  fallback_index=prompt_order.index(c.prompt_id))
        refined.append(pipeline.ScoredCandidate(
            track_id=c.track_id, prompt_id=c.prompt_id, raw_score=c.raw_score,
            pseudo_freq=p, refined_score=s_prime,
            kept=s_prime > cfg["pipeline"]["threshold"]))
    refined.sort(key=lambda c: (c.prompt_id, -c.refined_score, c.track_id))
    os.makedirs(cfg["out"], exist_ok=True)
    out_path = os.path.join(cfg["out"], "scores_calibrated.jsonl")
    pipeline.write_scores(out_path, refined)
    _write_manifest(cfg, "calibrate", [out_path])
    click.echo(f"calibrated scores written to {out_path}")


@main.command()
@click.pass_context
def bench(ctx):
    """Profile all fusion variants over a dimension sweep; check the efficiency claim."""
    cfg = _load_config(ctx.obj)
    b = cfg["bench"]
    g = t = b["visual_tokens"]
    l = b["text_tokens"]
    rows = []
    for d_k in b["d_k_sweep"]:
        for variant in VARIANTS:
            t0 = time.perf_counter()
            row = profile(variant, g, t, l, d_k, seed=cfg["seed"],
                          with_backward=b["with_backward"],
                          residual_add=cfg["fusion"]["residual_add"])
            row["wall_time_s"] = time.perf_counter() - t0
            if variant == "mex":
                row["param_count_per_pair_mode"] = profile(
                    "mex", g, t, l, d_k, seed=cfg["seed"], per_pair=True)["param_count"]
            rows.append(row)

    def at(variant, d_k):
        return next(r for r in rows if r["variant"] == variant and r["d_k"] == d_k)

    claim = None
    if 256 in b["d_k_sweep"] and g == 16 and l == 20:
        mex, cas = at("mex", 256), at("cascade", 256)
        claim = {
            "params_ok": mex["param_count"] < cas["param_count"],
            "peak_ok": mex["peak_values"] < cas["peak_values"],
            "param_ratio": mex["param_count"] / cas["param_count"],
            "peak_ratio": mex["peak_values"] / cas["peak_values"],
            "reported_paper_params": {"mex": PAPER_MEX_PARAMS,
                                      "cascade": PAPER_CASCADE_PARAMS,
                                      "ratio": PAPER_MEX_PARAMS / PAPER_CASCADE_PARAMS},
        }
    os.makedirs(cfg["out"], exist_ok=True)
    bench_path = os.path.join(cfg["out"], "bench.json")
    with open(bench_path, "w") as fh:
        json.dump({"rows": rows, "claim": claim}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    header = f"{'variant':>8} {'d_k':>5} {'params':>10} {'peak_vals':>10} {'flops':>12} {'wall_s':>8}"
    click.echo(header)
    for r in rows:
        click.echo(f"{r['variant']:>8} {r['d_k']:>5} {r['param_count']:>10} "
                   f"{r['peak_values']:>10} {r['flops']:>12} {r['wall_time_s']:>8.4f}")
    _write_manifest(cfg, "bench", [bench_path])
    if claim is not None:
        click.echo(f"param ratio mex/cascade: {claim['param_ratio']:.3f} "
                   f"(reported full-module ratio "
                   f"{claim['reported_paper_params']['ratio']:.3f})")
        click.echo(f"peak ratio mex/cascade: {claim['peak_ratio']:.3f}")
        if not (claim["params_ok"] and claim["peak_ok"]):
            click.echo("efficiency claim FAILED at the reference dims", err=True)
            sys.exit(1)
    click.echo(f"bench report written to {bench_path}")


@main.command()
@click.option("--g", "g", type=int, default=2)
@click.option("--t", "t", type=int, default=3)
@click.option("--l", "l", type=int, default=4)
@click.option("--d-k", "d_k", type=int, default=8)
@click.option("--step", type=float, default=1e-5)
@click.pass_context
def gradcheck_cmd(ctx, g, t, l, d_k, step):
    """Verify analytic gradients against central finite differences."""
    cfg = _load_config(ctx.obj)
    worst = 0.0
    for variant in VARIANTS:
        err = gradcheck.max_relative_error(variant, g=g, t=t, l=l, d_k=d_k,
                                           seed=cfg["seed"], step=step)
        click.echo(f"{variant}: max relative gradient error {err:.3e}")
        worst = max(worst, err)
    if worst > 1e-4:
        click.echo(f"gradient check FAILED: {worst:.3e} > 1e-4", err=True)
        sys.exit(1)
    click.echo(f"gradient check passed (max {worst:.3e})")


main.add_command(gradcheck_cmd, name="gradcheck")


if __name__ == "__main__":
    main()
