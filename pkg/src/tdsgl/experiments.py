"""Prepared-dataset cache, run directories, repeats, beta sweeps and ablations."""

from __future__ import annotations

import csv
import json
import logging
import os
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import data as data_mod
from .config import ABLATION_VARIANTS, apply_variant
from .encoder import load_checkpoint
from .evaluator import evaluate
from .graph import (
    build_cooccurrence,
    build_interaction_matrix,
    build_normalized_adjacency,
    load_csr,
    masks_from_cooccurrence,
    save_csr,
)
from .trainer import Hyperparameters, final_embeddings, train

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "TDSGL_DATA"


def resolve_dataset(name_or_path: str) -> str:
    """A path as-is, otherwise ``$TDSGL_DATA/<name>`` (default root ``./data``)."""
    if os.path.exists(name_or_path):
        return name_or_path
    root = os.environ.get(DATA_ROOT_ENV, "data")
    candidate = os.path.join(root, name_or_path)
    if os.path.exists(candidate):
        return candidate
    raise FileNotFoundError(f"dataset not found: {name_or_path} (also tried {candidate})")


def _source_files(path: str) -> list[str]:
    if os.path.isdir(path):
        names = ("train.txt", "valid.txt", "val.txt", "test.txt")
        return [os.path.join(path, n) for n in names if os.path.exists(os.path.join(path, n))]
    return [path]


def default_prepared_dir(path: str, ratios, seed: int) -> str:
    base = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
    tag = "-".join(f"{r:g}" for r in ratios)
    return os.path.join(base, f"prepared-r{tag}-s{seed}")


def prepare(
    dataset_path: str,
    out_dir: str | None = None,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
    betas=(8,),
    fmt: str = "auto",
) -> tuple[dict, bool]:
    """Parse, split and serialize a dataset and cache its co-occurrence masks.

    Returns ``(manifest, cache_hit)``; a hit means the split was already on
    disk for the same source bytes, ratios and seed.
    """
    ratios = tuple(float(r) for r in ratios)
    data_mod._check_ratios(ratios)
    sources = _source_files(dataset_path)
    if not sources:
        raise FileNotFoundError(f"no interaction files under {dataset_path}")
    for s in sources:
        if not os.path.exists(s):
            raise FileNotFoundError(f"dataset path not found: {s}")
    digest = data_mod.file_digest(sources)
    out_dir = out_dir or default_prepared_dir(dataset_path, ratios, seed)
    key = {"sha256": digest, "ratios": list(ratios), "seed": seed}

    cache_hit = False
    manifest_file = os.path.join(out_dir, data_mod.MANIFEST_NAME)
    if os.path.exists(manifest_file):
        manifest = data_mod.read_manifest(out_dir)
        cache_hit = manifest.get("source", {}).get("key") == key
    if not cache_hit:
        raw = data_mod.read_interactions(dataset_path, fmt)
        split = data_mod.split_dataset(raw, ratios, seed)
        split.validate()
        manifest = data_mod.write_dataset(
            split, out_dir, source={"path": os.path.abspath(dataset_path), "key": key},
            seed=seed, ratios=list(ratios),
        )
    dataset = data_mod.load_dataset(out_dir) if cache_hit else split
    built = ensure_masks(out_dir, dataset, betas, rebuild=not cache_hit)
    log.info("prepared %s (%s); masks built for beta %s", out_dir, "cache hit" if cache_hit else "fresh", built)
    manifest["path"] = out_dir
    return manifest, cache_hit


def _mask_paths(directory: str, beta: int) -> tuple[str, str]:
    return (os.path.join(directory, f"f_user.b{beta}.csr"), os.path.join(directory, f"f_item.b{beta}.csr"))


def ensure_masks(directory: str, dataset, betas, rebuild: bool = False) -> list[int]:
    """Cache co-occurrence matrices and false-negative sets; returns the betas newly built."""
    p_paths = (os.path.join(directory, "p_user.csr"), os.path.join(directory, "p_item.csr"))
    if rebuild or not all(os.path.exists(p) for p in p_paths):
        p_user, p_item = build_cooccurrence(build_interaction_matrix(dataset))
        save_csr(p_paths[0], p_user)
        save_csr(p_paths[1], p_item)
        rebuild = True
    else:
        p_user = p_item = None
    built = []
    for beta in sorted(set(int(b) for b in betas)):
        paths = _mask_paths(directory, beta)
        if not rebuild and all(os.path.exists(p) for p in paths):
            continue
        if p_user is None:
            p_user, p_item = load_csr(p_paths[0]), load_csr(p_paths[1])
        masks = masks_from_cooccurrence(p_user, p_item, beta)
        save_csr(paths[0], masks.f_user)
        save_csr(paths[1], masks.f_item)
        built.append(beta)
    return built


def load_prepared(directory: str, beta: int, beta_item: int | None = None):
    """Dataset plus co-occurrence masks; masks are rebuilt from the cached ``P`` matrices."""
    dataset = data_mod.load_dataset(directory)
    ensure_masks(directory, dataset, [beta] + ([beta_item] if beta_item else []))
    p_user = load_csr(os.path.join(directory, "p_user.csr"))
    p_item = load_csr(os.path.join(directory, "p_item.csr"))
    return dataset, masks_from_cooccurrence(p_user, p_item, beta, beta_item)


def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here, capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def new_run_dir(out_root: str, variant: str, hyper: Hyperparameters) -> str:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(out_root, f"{stamp}-{variant}-b{hyper.beta}-s{hyper.seed}")
    path, n = base, 0
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            n += 1
            path = f"{base}-{n}"


def heldout_metrics(state, dataset, hyper: Hyperparameters):
    """Test metrics for a checkpoint; train and validation items are excluded from ranking."""
    norm_adj = build_normalized_adjacency(build_interaction_matrix(dataset), hyper.self_loop)
    final = final_embeddings(state, norm_adj, hyper.layers)
    exclude = np.concatenate([dataset.train, dataset.validation])
    return evaluate(final, dataset.num_users, dataset.test, exclude, hyper.eval_k)


def run_training(prepared_dir: str, hyper: Hyperparameters, variant: str, out_root: str = "runs") -> dict:
    """One full training run in a fresh run directory; returns the final-metrics record."""
    hyper = apply_variant(hyper, variant)
    dataset, masks = load_prepared(prepared_dir, hyper.beta, hyper.beta_item)
    run_dir = new_run_dir(out_root, variant, hyper)
    manifest = {
        "variant": variant,
        "hyperparameters": hyper.to_dict(),
        "prepared_dir": os.path.abspath(prepared_dir),
        "dataset_manifest_sha256": data_mod.manifest_hash(prepared_dir),
        "git_describe": git_describe(),
        "start": _now(),
    }
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    t0 = time.perf_counter()
    result = train(dataset, hyper, run_dir=run_dir, masks=masks)
    report = heldout_metrics(result.best_state, dataset, hyper)
    k = hyper.eval_k
    final = {
        **report.to_dict(),
        "best_epoch": result.best_epoch,
        f"val_recall@{k}": result.best_val,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "seconds": time.perf_counter() - t0,
        "run_dir": run_dir,
        "seed": hyper.seed,
        "variant": variant,
        "beta": hyper.beta,
    }
    _write_json(os.path.join(run_dir, "final_metrics.json"), final)
    manifest["end"] = _now()
    _write_json(os.path.join(run_dir, "manifest.json"), manifest)
    return final


def evaluate_run(run_dir: str) -> dict:
    """Recompute test metrics from a run directory's checkpoint."""
    with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    hyper = Hyperparameters(**manifest["hyperparameters"])
    dataset = data_mod.load_dataset(manifest["prepared_dir"])
    state = load_checkpoint(os.path.join(run_dir, "checkpoint.bin"))
    return heldout_metrics(state, dataset, hyper).to_dict()


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _run_one(args):
    return run_training(*args)


def run_repeats(
    prepared_dir: str,
    hyper: Hyperparameters,
    variant: str,
    repeats: int = 1,
    out_root: str = "runs",
    jobs: int = 1,
) -> tuple[list[dict], dict]:
    """``repeats`` runs with seeds ``seed + r``; returns records and a mean/std summary."""
    jobs_args = [(prepared_dir, hyper.replace(seed=hyper.seed + r), variant, out_root) for r in range(repeats)]
    records = _map(jobs_args, jobs)
    summary = summarize(records, hyper.eval_k)
    if repeats > 1:
        _write_json(os.path.join(out_root, f"summary-{variant}-b{hyper.beta}-s{hyper.seed}.json"), summary)
    return records, summary


def _map(jobs_args, jobs: int) -> list[dict]:
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_one, jobs_args))
    return [_run_one(a) for a in jobs_args]


def summarize(records: list[dict], k: int = 20) -> dict:
    out = {"n_runs": len(records), "seeds": [r["seed"] for r in records], "runs": [r["run_dir"] for r in records]}
    for metric in (f"recall@{k}", f"ndcg@{k}"):
        vals = np.array([r[metric] for r in records], dtype=float)
        out[f"{metric}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        out[f"{metric}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def _write_summary_csv(path: str, key: str, rows: list[tuple[object, dict]], k: int) -> None:
    fields = [key, "n_runs", f"recall@{k}_mean", f"recall@{k}_std", f"ndcg@{k}_mean", f"ndcg@{k}_std"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for label, s in rows:
            w.writerow([label] + [s[f] for f in fields[1:]])


def sweep_beta(
    prepared_dir: str,
    hyper: Hyperparameters,
    betas,
    variant: str = "tdsgl",
    repeats: int = 1,
    out_root: str = "runs",
    jobs: int = 1,
) -> list[tuple[int, dict, list[dict]]]:
    """One run set per threshold; writes ``sweep-beta.csv`` under ``out_root``."""
    betas = [int(b) for b in betas]
    if not betas:
        raise ValueError("empty beta sweep")
    os.makedirs(out_root, exist_ok=True)
    dataset = data_mod.load_dataset(prepared_dir)
    ensure_masks(prepared_dir, dataset, betas)
    rows = []
    for beta in betas:
        records, summary = run_repeats(prepared_dir, hyper.replace(beta=beta), variant, repeats, out_root, jobs)
        rows.append((beta, summary, records))
    _write_summary_csv(os.path.join(out_root, "sweep-beta.csv"), "beta", [(b, s) for b, s, _ in rows], hyper.eval_k)
    return rows


def ablate(
    prepared_dir: str,
    hyper: Hyperparameters,
    variants=ABLATION_VARIANTS,
    repeats: int = 1,
    out_root: str = "runs",
    jobs: int = 1,
) -> list[tuple[str, dict, list[dict]]]:
    """Same seeds and hyperparameters across variants; writes ``ablation.csv``."""
    os.makedirs(out_root, exist_ok=True)
    rows = []
    for variant in variants:
        records, summary = run_repeats(prepared_dir, hyper, variant, repeats, out_root, jobs)
        rows.append((variant, summary, records))
    _write_summary_csv(os.path.join(out_root, "ablation.csv"), "variant", [(v, s) for v, s, _ in rows], hyper.eval_k)
    return rows
