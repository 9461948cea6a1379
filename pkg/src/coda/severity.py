"""Severity trigger: tag each adverse image high- or low-severity.

A pixel is severe when its grayscale value falls below sigma; the image is
high-severity when the severe fraction strictly exceeds tau. Both comparisons
are strict, so a ratio exactly equal to tau stays low. Classification always
runs on the raw image, before any prompt is added.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio, scenegen

HIGH = "high"
LOW = "low"


@dataclass(frozen=True)
class SeverityConfig:
    sigma: float = 0.5  # grayscale threshold; the spec of the method leaves it open
    tau: float = 0.38

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must be in [0,1], got {self.sigma}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1], got {self.tau}")


def grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 grayscale map in [0,1]."""
    return scenegen.luminance(img)


def severe_ratio(img: np.ndarray, cfg: SeverityConfig) -> float:
    gray = grayscale(img)
    return float(np.count_nonzero(gray < cfg.sigma)) / gray.size


def classify(img: np.ndarray, cfg: SeverityConfig) -> str:
    """HIGH iff count(gray < sigma) / (H*W) > tau, both inequalities strict."""
    return HIGH if severe_ratio(img, cfg) > cfg.tau else LOW


def severity_histogram(manifest_path, cfg: SeverityConfig, dump_dir=None) -> dict:
    """Per-scene high/low counts over every sample in a manifest.

    With dump_dir set, also writes a debug PPM per sample painting severe
    pixels purple and the rest green.
    """
    samples = scenegen.load_manifest(manifest_path)
    hist: dict[str, dict[str, int]] = {}
    for s in samples:
        bucket = hist.setdefault(s.scene, {HIGH: 0, LOW: 0})
        bucket[classify(s.image, cfg)] += 1
        if dump_dir is not None:
            dump_severity_map(s, cfg, dump_dir)
    return {
        "sigma": cfg.sigma,
        "tau": cfg.tau,
        "total": len(samples),
        "scenes": {k: hist[k] for k in sorted(hist)},
    }


def dump_severity_map(sample, cfg: SeverityConfig, dump_dir) -> None:
    severe = grayscale(sample.image) < cfg.sigma
    vis = np.where(
        severe[..., None],
        np.array([0.55, 0.15, 0.65], dtype=np.float32),
        np.array([0.25, 0.75, 0.30], dtype=np.float32),
    )
    out = Path(dump_dir)
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(out / f"{sample.id}_severity.ppm", vis)
