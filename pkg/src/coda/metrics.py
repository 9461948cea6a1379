"""Segmentation metrics, checkpoint evaluation, and the seed-range study."""

from __future__ import annotations

import numpy as np

from . import engine, scenegen, segnet
from .config import RunConfig, config_hash


class MetricsError(ValueError):
    pass


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, k: int = segnet.N_CLASSES) -> np.ndarray:
    """k x k counts, rows ground truth, columns prediction."""
    if pred.shape != truth.shape:
        raise MetricsError(f"prediction {pred.shape} vs truth {truth.shape}")
    idx = truth.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """tp / (tp + fp + fn) per class; classes with empty union come out NaN."""
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou


def miou(cm: np.ndarray) -> float:
    """Mean IoU over classes that appear at all (zero-union classes excluded)."""
    iou = iou_per_class(cm)
    if np.all(np.isnan(iou)):
        raise MetricsError("confusion matrix is empty: no class has any pixel")
    return float(np.nanmean(iou))


def _entry(cm: np.ndarray) -> dict:
    return {
        "per_class": [None if np.isnan(v) else float(v) for v in iou_per_class(cm)],
        "miou": miou(cm),
        "pixels": int(cm.sum()),
    }


def evaluate_samples(state: engine.TrainState, samples, savpt_enabled: bool) -> dict:
    """Per-scene and pooled IoU report for labeled samples under one toggle."""
    sev_cfg = state.config.severity_cfg()
    k = segnet.N_CLASSES
    scene_cms: dict[str, np.ndarray] = {}
    total = np.zeros((k, k), dtype=np.int64)
    from . import autodiff as ad

    for s in samples:
        if s.label is None:
            raise MetricsError(f"evaluation sample {s.id} has no label")
        with ad.no_grad():
            logits, _, _ = engine.forward_sample(
                s,
                state.student,
                state.prompt_bank,
                state.adapter_bank,
                sev_cfg,
                savpt_enabled,
            )
        pred = segnet.predict(logits)[0]
        cm = confusion_matrix(pred, s.label, k)
        scene_cms[s.scene] = scene_cms.get(s.scene, np.zeros((k, k), dtype=np.int64)) + cm
        total += cm
    return {
        "savpt": bool(savpt_enabled),
        "scene": {name: _entry(cm) for name, cm in sorted(scene_cms.items())},
        "overall": _entry(total),
        "config_hash": config_hash(state.config),
    }


def evaluate_checkpoint(ckpt_path, manifest_path, savpt_enabled: bool) -> dict:
    state = engine.load_checkpoint(ckpt_path)
    samples = scenegen.load_manifest(manifest_path)
    report = evaluate_samples(state, samples, savpt_enabled)
    report["checkpoint"] = str(ckpt_path)
    report["iteration"] = state.iteration
    return report


# ---------------------------------------------------------------- range study


def train_and_evaluate(cfg: RunConfig, train_samples, eval_samples):
    """Train one full schedule in memory; returns (state, eval report)."""
    state = engine.init_train_state(cfg)
    engine.train_loop(state, train_samples, cfg.total_iters)
    return state, evaluate_samples(state, eval_samples, cfg.savpt)


def sweep_variant(args) -> dict:
    """Train-and-evaluate one config variant (process-pool friendly)."""
    variant, train_samples, eval_samples = args
    _, rep = train_and_evaluate(variant, train_samples, eval_samples)
    return rep


def run_for_miou(cfg: RunConfig, train_samples, eval_samples) -> float:
    """Train one full schedule in memory and return the final overall mIoU."""
    return train_and_evaluate(cfg, train_samples, eval_samples)[1]["overall"]["miou"]


def _range_worker(args) -> dict:
    cfg, strategy, seed, train_samples, eval_samples = args
    import dataclasses

    run_cfg = dataclasses.replace(cfg, seed=int(seed), strategy=strategy)
    try:
        score = run_for_miou(run_cfg, train_samples, eval_samples)
        return {"strategy": strategy, "seed": int(seed), "miou": score}
    except Exception as e:  # noqa: BLE001 - partial report by contract
        return {"strategy": strategy, "seed": int(seed), "error": f"{type(e).__name__}: {e}"}


def seed_range_study(
    cfg: RunConfig, strategies, seeds, train_samples, eval_samples, workers: int = 1
) -> dict:
    """Final mIoU per (strategy, seed) with per-strategy average and range.

    Runs are independent, so workers > 1 fans them out over processes. A
    failed run is recorded as a marker row instead of aborting the study.
    A single seed degenerates to a range of zero.
    """
    if not seeds:
        raise MetricsError("range study needs at least one seed")
    strategies = list(dict.fromkeys(strategies))
    jobs = [
        (cfg, strategy, seed, train_samples, eval_samples)
        for strategy in strategies
        for seed in seeds
    ]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_range_worker, jobs))
    else:
        rows = [_range_worker(job) for job in jobs]

    report: dict = {"seeds": list(seeds), "strategies": {}, "config_hash": config_hash(cfg)}
    for strategy in strategies:
        runs = [
            {k: v for k, v in row.items() if k != "strategy"}
            for row in rows
            if row["strategy"] == strategy
        ]
        scores = [r["miou"] for r in runs if "miou" in r]
        report["strategies"][strategy] = {
            "runs": runs,
            "average": float(np.mean(scores)) if scores else None,
            "range": float(max(scores) - min(scores)) if scores else None,
            "failed": sum(1 for r in runs if "error" in r),
        }
    return report
