"""``crossdecode`` command line: cohort generation, training, evaluation, ablations and report figures.

Every command writes into its own ``--out`` directory and refuses to touch a non-empty one unless
``--overwrite`` is given.  JSON outputs carry the config hash and seed; CSV outputs start with a
``#`` comment line holding the same two values.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import plotting
from .alignment import init_ridge_head
from .cohort import dataset_digest, generate_cohort, load_cohort, save_cohort
from .config import PRESETS, ConfigError, ExperimentConfig, dump_config, from_dict, load_config, preset
from .evaluation import Decoders, blend_reconstruction, evaluate, predict, voxel_importance
from .fingerprint import run_fingerprint_experiment
from .numerics import make_rng
from .model import load_adapted, load_shared, save_adapted, save_shared
from .training import VARIANTS, finetune, init_adapted, pretrain, pretrain_subjects, variant_config

log = logging.getLogger("crossdecode")

DEFAULT_ABLATION = ("ridge-only", "lora-only", "lora-skip", "full", "nonlinear-head", "rank4", "rank16")


def max_workers() -> int:
    """Worker cap from MINDTUNER_THREADS (default: CPU count)."""
    raw = os.environ.get("MINDTUNER_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise click.ClickException(f"MINDTUNER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise click.ClickException(f"MINDTUNER_THREADS must be a positive integer, got {raw!r}")
    return n


def _errors(fn):
    """Turn expected failures into a one-line message and exit code 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ValueError, KeyError, FileNotFoundError, FileExistsError) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc
    return wrapper


def resolve_config(config, seed=None, sessions=None, base: dict | None = None) -> ExperimentConfig:
    """``config`` is a YAML/JSON path or a preset name; without one, ``base`` (a stored config) or the defaults."""
    if config is None:
        cfg = from_dict(base) if base else load_config()
    elif Path(config).exists():
        cfg = load_config(config)
    elif config in PRESETS:
        cfg = preset(config)
    else:
        raise ConfigError(f"{config!r} is neither a config file nor a preset ({', '.join(sorted(PRESETS))})")
    over = {}
    if seed is not None:
        over["seed"] = seed
    if sessions is not None:
        over["sessions"] = sessions
    return cfg.replace(**over) if over else cfg


def with_dataset(cfg: ExperimentConfig, cohort) -> ExperimentConfig:
    """The cohort section always follows the dataset actually loaded."""
    stored = cohort.meta.get("config")
    return cfg.replace(cohort=stored) if stored else cfg


def prepare_out(out, overwrite: bool, resume: bool = False) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise click.ClickException(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not (overwrite or resume):
        raise click.ClickException(f"--out {out} is not empty; pass --overwrite to replace its contents")
    out.mkdir(parents=True, exist_ok=True)
    return out


def stamp(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_csv(path, header, rows, cfg: ExperimentConfig):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()} seed={cfg.seed}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def history_csv(path, history, cfg):
    keys = list(history.epochs[0]) if history.epochs else ["epoch"]
    write_csv(path, keys, [[e[k] for k in keys] for e in history.epochs], cfg)


def metric_table(metrics: dict) -> str:
    width = max(len(k) for k in metrics)
    return "\n".join(f"{k:<{width}}  {v:10.4f}" for k, v in metrics.items())


def check_compatible(shared, cohort):
    for sid, head in shared.ridge.items():
        if sid not in cohort.subjects:
            raise ValueError(f"checkpoint has a head for subject {sid}, which the dataset lacks")
        if head.n_voxels != cohort.subjects[sid].n_voxels:
            raise ValueError(f"subject {sid}: checkpoint expects {head.n_voxels} voxels, dataset has "
                             f"{cohort.subjects[sid].n_voxels}")
    s = cohort.stimuli
    bb = shared.backbone
    if (bb.n_tokens, bb.token_dim) != s.image_tokens.shape[1:]:
        raise ValueError(f"checkpoint tokens {(bb.n_tokens, bb.token_dim)} vs dataset {s.image_tokens.shape[1:]}")
    if shared.projector.out_dim != s.text_embedding.shape[1]:
        raise ValueError(f"checkpoint text dim {shared.projector.out_dim} vs dataset {s.text_embedding.shape[1]}")


def load_model(checkpoint, cohort, cfg_override=None, seed=None, sessions=None):
    """Adapted checkpoint, or a shared one with a fresh untrained head for the new subject."""
    ckpt = Path(checkpoint)
    meta = json.loads((ckpt / "manifest.json").read_text()) if (ckpt / "manifest.json").exists() else None
    if meta is None:
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    if meta.get("kind") == "adapted":
        shared, _ = load_shared(meta["shared_checkpoint"])
        check_compatible(shared, cohort)
        model, meta = load_adapted(ckpt, shared)
    elif meta.get("kind") == "shared":
        shared, meta = load_shared(ckpt)
        check_compatible(shared, cohort)
        model = None
    else:
        raise ValueError(f"{ckpt} is not a model checkpoint")
    cfg = with_dataset(resolve_config(cfg_override, seed, sessions, base=meta.get("config")), cohort)
    if model is None:
        # untrained baseline: a random head, since the zero-initialized one maps every trial to the same output
        model = init_adapted(shared, cohort, cfg)
        model.head = init_ridge_head(model.subject_id, model.head.n_voxels, shared.backbone.d0,
                                     make_rng(cfg.seed, "init-ridge", model.subject_id), cfg.loss.ridge_l2,
                                     model.head.weight.data.dtype, cfg.model.nonlinear_head)
    elif model.subject_id not in cohort.subjects or \
            model.head.n_voxels != cohort.subjects[model.subject_id].n_voxels:
        raise ValueError(f"fine-tuned subject {model.subject_id} does not match the dataset")
    return model, cfg, meta


def render_eval_figures(model, cohort, cfg, report, out: Path, decoders):
    sub = cohort.subjects[model.subject_id]
    pred = predict(model, sub.test_voxels[:6])
    true_low = cohort.stimuli.lowlevel[sub.test_stimuli[:6]]
    final = blend_reconstruction(decoders.lowlevel(pred["g"]), pred["z"], cfg.eval.blend_ratio)
    plotting.reconstructions(true_low, final, model.shared.heads.grid, out / "reconstructions.png")
    maps = {k.removeprefix("importance_"): np.asarray(v) for k, v in report.maps.items()}
    if maps:
        plotting.importance_maps(maps, cohort.models[model.subject_id].fingerprint_mask, out / "importance.png")


def write_report(report, cfg, out: Path, overwrite: bool):
    report.write(out / "metrics.json", overwrite=overwrite)
    write_csv(out / "metrics.csv", ["metric", "value"], sorted(report.metrics.items()), cfg)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

config_opt = click.option("--config", default=None, help="YAML/JSON config file or preset name.")
seed_opt = click.option("--seed", type=int, default=None, help="Override the config seed.")
out_opt = click.option("--out", required=True, type=click.Path(file_okay=False), help="Output directory.")
overwrite_opt = click.option("--overwrite", is_flag=True, help="Allow replacing existing outputs.")
dataset_opt = click.option("--dataset", required=True, type=click.Path(exists=True, file_okay=False),
                           help="Cohort directory from gen-cohort.")
sessions_opt = click.option("--sessions", type=int, default=None, help="Training sessions for the new subject.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
def main(verbose):
    """Cross-subject decoding on synthetic cohorts."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@main.command("gen-cohort")
@config_opt
@seed_opt
@out_opt
@overwrite_opt
@_errors
def gen_cohort_cmd(config, seed, out, overwrite):
    """Generate a synthetic cohort dataset."""
    cfg = resolve_config(config, seed)
    out = prepare_out(out, overwrite)
    cohort = generate_cohort(cfg.cohort, cfg.seed)
    save_cohort(cohort, out, overwrite=overwrite)
    dump_config(cfg, out / "config.yaml")
    click.echo(f"{len(cohort.subject_ids)} subjects, gamma {cohort.gamma}, seed {cohort.seed}")
    click.echo(f"digest {dataset_digest(cohort)}")


@main.command("pretrain")
@config_opt
@dataset_opt
@seed_opt
@out_opt
@overwrite_opt
@click.option("--resume", is_flag=True, help="Continue from the training state in --out.")
@_errors
def pretrain_cmd(config, dataset, seed, out, overwrite, resume):
    """Train the shared model on every subject except the held-out one."""
    cohort = load_cohort(dataset)
    cfg = with_dataset(resolve_config(config, seed), cohort)
    out = prepare_out(out, overwrite, resume)
    shared, history = pretrain(cohort, cfg, state_dir=out / "state", resume=resume)
    save_shared(shared, out, {**stamp(cfg), "config": cfg.to_dict(), "dataset": str(Path(dataset).resolve()),
                              "subjects": pretrain_subjects(cohort, cfg)}, overwrite=True)
    history_csv(out / "history.csv", history, cfg)
    plotting.loss_curves(history, out / "loss.png")
    click.echo(f"pretrained on subjects {pretrain_subjects(cohort, cfg)}; final loss {history.epochs[-1]['total']:.4f}")


@main.command("finetune")
@config_opt
@dataset_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False),
              help="Shared checkpoint from pretrain.")
@seed_opt
@sessions_opt
@out_opt
@overwrite_opt
@click.option("--variant", default="full", type=click.Choice(sorted(VARIANTS)), help="Adapter configuration.")
@click.option("--resume", is_flag=True, help="Continue from the training state in --out.")
@_errors
def finetune_cmd(config, dataset, checkpoint, seed, sessions, out, overwrite, variant, resume):
    """Fit the held-out subject on top of a frozen shared model."""
    cohort = load_cohort(dataset)
    shared, meta = load_shared(checkpoint)
    check_compatible(shared, cohort)
    cfg = with_dataset(resolve_config(config, seed, sessions, base=meta.get("config")), cohort)
    cfg = variant_config(cfg, variant)
    out = prepare_out(out, overwrite, resume)
    model, history = finetune(shared, cohort, cfg, state_dir=out / "state", resume=resume)
    save_adapted(model, out, {**stamp(cfg), "config": cfg.to_dict(), "variant": variant,
                              "shared_checkpoint": str(Path(checkpoint).resolve())}, overwrite=True)
    history_csv(out / "history.csv", history, cfg)
    plotting.loss_curves(history, out / "loss.png")
    click.echo(f"fine-tuned subject {model.subject_id} ({variant}, {cfg.sessions} session(s)); "
               f"final loss {history.epochs[-1]['total']:.4f}")


@main.command("eval")
@config_opt
@dataset_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False),
              help="Fine-tuned checkpoint, or a shared one to score an untrained subject head.")
@seed_opt
@out_opt
@overwrite_opt
@_errors
def eval_cmd(config, dataset, checkpoint, seed, out, overwrite):
    """Score the new subject's test set: retrieval, identification, reconstruction, semantics, brain fit."""
    cohort = load_cohort(dataset)
    model, cfg, _ = load_model(checkpoint, cohort, config, seed)
    out = prepare_out(out, overwrite)
    decoders = Decoders.fit(cohort, cohort.train_ids, cfg.eval.decoder_l2)
    report = evaluate(model, cohort, cfg, decoders)
    write_report(report, cfg, out, overwrite)
    render_eval_figures(model, cohort, cfg, report, out, decoders)
    click.echo(metric_table(report.metrics))


def _ablation_cell(dataset, checkpoint, cfg_dict, variant, out):
    cohort = load_cohort(dataset)
    shared, _ = load_shared(checkpoint)
    cfg = variant_config(from_dict(cfg_dict), variant)
    model, _ = finetune(shared, cohort, cfg)
    report = evaluate(model, cohort, cfg)
    Path(out).mkdir(parents=True, exist_ok=True)
    report.write(Path(out) / "metrics.json", overwrite=True)
    return variant, report.metrics


@main.command("ablate")
@config_opt
@dataset_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False),
              help="Shared checkpoint from pretrain.")
@seed_opt
@sessions_opt
@out_opt
@overwrite_opt
@click.option("--variants", default=",".join(DEFAULT_ABLATION), show_default=True,
              help=f"Comma-separated cells from: {', '.join(sorted(VARIANTS))}.")
@_errors
def ablate_cmd(config, dataset, checkpoint, seed, sessions, out, overwrite, variants):
    """Fine-tune and evaluate each ablation cell with a shared seed."""
    names = [v.strip() for v in variants.split(",") if v.strip()]
    if not names:
        raise click.ClickException("empty ablation grid")
    unknown = [v for v in names if v not in VARIANTS]
    if unknown:
        raise click.ClickException(f"unknown ablation {unknown}; choose from {sorted(VARIANTS)}")
    cohort = load_cohort(dataset)
    shared, meta = load_shared(checkpoint)
    check_compatible(shared, cohort)
    cfg = with_dataset(resolve_config(config, seed, sessions, base=meta.get("config")), cohort)
    out = prepare_out(out, overwrite)
    jobs = [(dataset, checkpoint, cfg.to_dict(), v, str(out / v)) for v in names]
    workers = min(max_workers(), len(jobs))
    if workers == 1:
        results = dict(_ablation_cell(*j) for j in jobs)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = dict(pool.map(_ablation_cell, *zip(*jobs)))
    rows = [{"variant": v, **results[v]} for v in names]
    keys = ["image_retrieval", "brain_retrieval", "two_way_high", "two_way_low", "pixcorr", "semantic_accuracy",
            "brain_corr_fingerprint"]
    write_csv(out / "ablation.csv", ["variant", *keys], [[r["variant"], *(r[k] for k in keys)] for r in rows], cfg)
    write_json(out / "ablation.json", {**stamp(cfg), "cells": rows})
    plotting.ablation_bars(rows, out / "ablation.png")
    width = max(len(n) for n in names)
    click.echo(f"{'variant':<{width}}  image_ret  brain_ret")
    for r in rows:
        click.echo(f"{r['variant']:<{width}}  {r['image_retrieval']:9.2f}  {r['brain_retrieval']:9.2f}")


@main.command("fingerprint")
@config_opt
@seed_opt
@out_opt
@overwrite_opt
@_errors
def fingerprint_cmd(config, seed, out, overwrite):
    """Simulate the position-matching experiment and fit within/between-observer DI consistency."""
    cfg = resolve_config(config, seed)
    out = prepare_out(out, overwrite)
    fit = run_fingerprint_experiment(cfg.fingerprint, cfg.seed)
    write_json(out / "fit.json", {**stamp(cfg), **fit.summary()})
    n_obs, n_blocks, n_loc = fit.di.shape
    rows = [[o, b, *np.round(fit.di[o, b], 8)] for o in range(n_obs) for b in range(n_blocks)]
    write_csv(out / "di.csv", ["observer", "block", *(f"loc{i}" for i in range(n_loc))], rows, cfg)
    write_csv(out / "locations.csv", ["location", "eccentricity", "angle"],
              [[i, fit.eccentricity[i], round(float(fit.angle[i]), 8)] for i in range(n_loc)], cfg)
    plotting.distortion_scatter(fit, out / "di_scatter.png")
    click.echo(f"r_within {fit.r_within:.3f}  r_between {fit.r_between:.3f}")


@main.command("importance")
@config_opt
@dataset_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True, file_okay=False),
              help="Fine-tuned checkpoint.")
@out_opt
@overwrite_opt
@_errors
def importance_cmd(config, dataset, checkpoint, out, overwrite):
    """Per-voxel first-layer weight importance for the head and adapters."""
    cohort = load_cohort(dataset)
    model, cfg, _ = load_model(checkpoint, cohort, config)
    out = prepare_out(out, overwrite)
    maps = voxel_importance(model)
    mask = cohort.models[model.subject_id].fingerprint_mask
    kinds = list(maps)
    write_csv(out / "importance.csv", ["voxel", "fingerprint", *kinds],
              [[i, int(mask[i]), *(round(float(maps[k][i]), 8) for k in kinds)] for i in range(len(mask))], cfg)
    summary = {k: {"fingerprint": float(maps[k][mask].mean()) if mask.any() else None,
                   "other": float(maps[k][~mask].mean()) if (~mask).any() else None} for k in kinds}
    write_json(out / "importance.json", {**stamp(cfg), "subject_id": model.subject_id, "summary": summary})
    plotting.importance_maps(maps, mask, out / "importance.png")
    for k, s in summary.items():
        click.echo(f"{k:<10} fingerprint {s['fingerprint']:.3f}  other {s['other']:.3f}")


if __name__ == "__main__":
    main()
