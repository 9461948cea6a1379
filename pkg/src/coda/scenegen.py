"""Procedural synthetic driving scenes and their adverse-weather corruptions.

Produces the desk benchmark: labeled clean source scenes, easy intermediate
scenes (slight fog/rain/snow plus structure-selected candidates), hard
intermediate night scenes, and full-intensity adverse target scenes. Scenes
are 5-class (sky, road, building, vegetation, obstacle) square images; every
stochastic choice comes from a labeled stream of the dataset seed, so a build
is a pure function of its config.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imageio, rng

DOMAINS = ("source", "M1", "M2", "target")
SCENES = ("clean", "fog", "rain", "snow", "night")
CORRUPTIONS = ("fog", "rain", "snow", "night")

CLASS_NAMES = ("sky", "road", "building", "vegetation", "obstacle")
N_CLASSES = len(CLASS_NAMES)

# BT.601 luma weights; also used by the severity trigger and SSIM.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)

_BASE_COLORS = np.array(
    [
        [0.55, 0.70, 0.90],  # sky
        [0.36, 0.36, 0.38],  # road
        [0.48, 0.33, 0.27],  # building
        [0.21, 0.45, 0.18],  # vegetation
        [0.85, 0.38, 0.10],  # obstacle
    ],
    dtype=np.float32,
)


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 64
    horizon: float = 0.5
    buildings: int = 3
    obstacles: int = 2

    def __post_init__(self):
        if self.size < 16 or self.size % 4:
            raise SceneError(f"scene size must be >=16 and divisible by 4, got {self.size}")


@dataclass
class ImageSample:
    """One benchmark image: pixels, optional label map, and its pool tags.

    In the training manifest a label is present iff domain == source; the
    evaluation split keeps labels for every domain and lives in its own
    manifest, so the training loop never sees them.
    """

    image: np.ndarray
    label: np.ndarray | None
    domain: str
    scene: str
    id: str

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise SceneError(f"unknown domain {self.domain!r}")
        if self.scene not in SCENES:
            raise SceneError(f"unknown scene {self.scene!r}")
        lo, hi = float(self.image.min()), float(self.image.max())
        if lo < 0.0 or hi > 1.0:
            raise SceneError(f"sample {self.id}: pixels outside [0,1] ({lo}, {hi})")


@dataclass(frozen=True)
class CorruptionParams:
    kind: str
    intensity: float
    seed: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise SceneError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.intensity <= 1.0:
            raise SceneError(f"intensity must be in [0,1], got {self.intensity}")


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 grayscale of an HxWx3 image, clamped to [0,1]."""
    return np.clip(img @ LUMA_WEIGHTS, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------ rendering


def render_clean(spec: SceneSpec) -> ImageSample:
    """Deterministic clean scene with exact labels."""
    n = spec.size
    hrow = int(round(n * spec.horizon))
    label = np.zeros((n, n), dtype=np.uint8)

    layout = rng.stream(spec.seed, "scenegen", "layout")
    rows = np.arange(n)[:, None]
    cols = np.arange(n)[None, :]

    # ground: vegetation with a road trapezoid widening toward the camera
    label[hrow:] = 3
    cx = n * layout.uniform(0.35, 0.65)
    w_top = n * 0.06
    w_bot = n * layout.uniform(0.28, 0.42)
    depth = (rows - hrow) / max(n - hrow, 1)
    half = w_top + (w_bot - w_top) * depth
    road = (rows >= hrow) & (np.abs(cols - cx) <= half)
    label[road] = 1

    # buildings rise from the horizon line
    for _ in range(spec.buildings):
        bw = int(layout.uniform(0.10, 0.24) * n)
        bh = int(layout.uniform(0.15, 0.42) * n)
        x0 = int(layout.uniform(0, max(n - bw, 1)))
        label[max(hrow - bh, 0) : hrow, x0 : x0 + bw] = 2

    # obstacles sit on the road in the lower half of the ground
    for _ in range(spec.obstacles):
        side = max(2, int(layout.uniform(0.04, 0.09) * n))
        r0 = int(layout.uniform(hrow + (n - hrow) * 0.4, n - side))
        road_half = w_top + (w_bot - w_top) * (r0 - hrow) / max(n - hrow, 1)
        c0 = int(np.clip(cx + layout.uniform(-road_half, road_half) - side / 2, 0, n - side))
        label[r0 : r0 + side, c0 : c0 + side] = 4

    palette = rng.stream(spec.seed, "scenegen", "palette")
    colors = np.clip(_BASE_COLORS + palette.uniform(-0.04, 0.04, size=(N_CLASSES, 3)), 0, 1)
    img = colors[label].astype(np.float32)

    # vertical shading plus fine texture so scenes are not flat color fields
    shade = (0.92 + 0.16 * (rows / n)).astype(np.float32)
    img *= shade[..., None]
    texture = rng.stream(spec.seed, "scenegen", "texture")
    img += texture.normal(0.0, 0.02, size=img.shape).astype(np.float32)

    img = imageio.snap_to_grid(np.clip(img, 0.0, 1.0))
    return ImageSample(image=img, label=label, domain="source", scene="clean", id=f"s{spec.seed}")


# ----------------------------------------------------------------- corruption


def corrupt(img: ImageSample, p: CorruptionParams) -> ImageSample:
    """Weather the image; label rides along unchanged, pixels stay in [0,1]."""
    if p.intensity == 0.0:
        return replace(img, image=img.image.copy())
    out = _CORRUPTORS[p.kind](img.image, p)
    out = imageio.snap_to_grid(np.clip(out, 0.0, 1.0))
    label = None if img.label is None else img.label.copy()
    return ImageSample(image=out, label=label, domain=img.domain, scene=p.kind, id=img.id)


def _corrupt_fog(img: np.ndarray, p: CorruptionParams) -> np.ndarray:
    # white blend graded by depth; caps at 0.85 so full fog still leaves
    # enough structure near the horizon to be learnable
    h = img.shape[0]
    rows = np.arange(h, dtype=np.float32)
    hrow = h // 2
    depth = np.ones(h, dtype=np.float32)
    below = rows >= hrow
    depth[below] = 1.0 - 0.85 * (rows[below] - hrow) / max(h - hrow, 1)
    blend = np.clip(p.intensity * (0.25 + 0.60 * depth), 0.0, 1.0)[:, None, None]
    return img + blend * (1.0 - img)


def _corrupt_rain(img: np.ndarray, p: CorruptionParams) -> np.ndarray:
    h, w = img.shape[:2]
    gen = rng.stream(p.seed, "corrupt", "rain")
    overlay = np.zeros((h, w), dtype=np.float32)
    n_streaks = int(6 + 70 * p.intensity * (h * w) / 4096)
    slant = 0.35
    for _ in range(n_streaks):
        r0 = int(gen.uniform(0, h))
        c0 = int(gen.uniform(0, w))
        length = int(gen.uniform(h / 10, h / 4))
        bright = gen.uniform(0.18, 0.40) * (0.5 + 0.5 * p.intensity)
        rr = r0 + np.arange(length)
        cc = (c0 + slant * np.arange(length)).astype(int)
        keep = (rr < h) & (cc < w)
        overlay[rr[keep], cc[keep]] += bright
    return img + overlay[..., None]


def _corrupt_snow(img: np.ndarray, p: CorruptionParams) -> np.ndarray:
    h, w = img.shape[:2]
    gen = rng.stream(p.seed, "corrupt", "snow")
    overlay = np.zeros((h, w), dtype=np.float32)
    n_flakes = int(12 + 0.03 * p.intensity * h * w)
    rr = gen.integers(0, h, size=n_flakes)
    cc = gen.integers(0, w, size=n_flakes)
    bright = gen.uniform(0.35, 0.75, size=n_flakes).astype(np.float32)
    np.add.at(overlay, (rr, cc), bright)
    big = gen.random(n_flakes) < 0.4  # some flakes are 2px tall
    rr2 = np.minimum(rr[big] + 1, h - 1)
    np.add.at(overlay, (rr2, cc[big]), bright[big] * 0.8)
    return img + overlay[..., None]


def _corrupt_night(img: np.ndarray, p: CorruptionParams) -> np.ndarray:
    gen = rng.stream(p.seed, "corrupt", "night")
    gamma = 1.0 + 2.5 * p.intensity
    dark = np.power(img, gamma, dtype=np.float32)
    noise = gen.normal(0.0, 0.05 * p.intensity, size=img.shape).astype(np.float32)
    return dark + noise


_CORRUPTORS = {
    "fog": _corrupt_fog,
    "rain": _corrupt_rain,
    "snow": _corrupt_snow,
    "night": _corrupt_night,
}


# ----------------------------------------------------------------------- ssim


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """Structural similarity on grayscale, uniform sliding windows.

    K1=0.01, K2=0.03, dynamic range 1.0. Identical inputs give exactly 1.0;
    the stabilizers keep constant images well-defined.
    """
    if a.shape != b.shape:
        raise SceneError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    ga = luminance(a) if a.ndim == 3 else a.astype(np.float32)
    gb = luminance(b) if b.ndim == 3 else b.astype(np.float32)
    if ga.shape[0] < window or ga.shape[1] < window:
        raise SceneError(f"ssim: image {ga.shape} smaller than {window}x{window} window")
    c1 = np.float32(0.01**2)
    c2 = np.float32(0.03**2)

    from numpy.lib.stride_tricks import sliding_window_view

    wa = sliding_window_view(ga, (window, window))
    wb = sliding_window_view(gb, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    ea2 = (wa * wa).mean(axis=(-1, -2))
    eb2 = (wb * wb).mean(axis=(-1, -2))
    eab = (wa * wb).mean(axis=(-1, -2))
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def generate_intermediate(
    img_t: ImageSample,
    kind: str,
    n_candidates: int = 3,
    intensities: list[float] | None = None,
) -> ImageSample:
    """Pick the lightly-corrupted candidate structurally closest to the target.

    Candidates are corruptions of the target image at low intensities; the one
    with the highest similarity to the target wins and joins the easy pool.
    """
    if n_candidates < 1:
        raise SceneError(f"need at least 1 candidate, got {n_candidates}")
    if img_t.domain != "target":
        raise SceneError(f"intermediate generation expects a target sample, got {img_t.domain}")
    base_seed = rng.split(0, "intermediate", img_t.id, kind)
    if intensities is None:
        gen = rng.stream(base_seed, "intensities")
        intensities = list(gen.uniform(0.05, 0.35, size=n_candidates))
    elif len(intensities) != n_candidates:
        raise SceneError("intensities must match n_candidates")
    best = None
    best_score = -np.inf
    for i, intensity in enumerate(intensities):
        cand = corrupt(
            img_t, CorruptionParams(kind=kind, intensity=float(intensity), seed=base_seed + i)
        )
        score = ssim(cand.image, img_t.image)
        if score > best_score:
            best, best_score = cand, score
    return ImageSample(
        image=best.image,
        label=None,
        domain="M1",
        scene=best.scene,
        id=f"{img_t.id}-gen-{kind}",
    )


# ------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class DatasetConfig:
    seed: int = 7
    size: int = 64
    counts: dict = field(
        default_factory=lambda: {"source": 32, "m1": 32, "m2": 16, "target": 32}
    )
    eval_per_scene: int = 12  # big enough that eval noise does not drown run spread
    m1_intensity: float = 0.3
    m2_intensity: float = 0.7
    target_intensity: float = 1.0
    n_candidates: int = 3
    generated_every: int = 4  # every k-th easy sample is a selected candidate
    horizon: float = 0.5
    buildings: int = 3
    obstacles: int = 2


_DAYTIME = ("fog", "rain", "snow")


def _spec(cfg: DatasetConfig, *labels) -> SceneSpec:
    return SceneSpec(
        seed=rng.split(cfg.seed, "scene", *labels),
        size=cfg.size,
        horizon=cfg.horizon,
        buildings=cfg.buildings,
        obstacles=cfg.obstacles,
    )


def _fresh_adverse(cfg: DatasetConfig, role: str, i: int, kind: str, intensity: float,
                   domain: str, keep_label: bool) -> ImageSample:
    base = render_clean(_spec(cfg, role, str(i)))
    out = corrupt(
        base,
        CorruptionParams(kind=kind, intensity=intensity, seed=rng.split(cfg.seed, role, str(i))),
    )
    return ImageSample(
        image=out.image,
        label=out.label if keep_label else None,
        domain=domain,
        scene=kind,
        id=f"{role}{i:03d}",
    )


def build_samples(cfg: DatasetConfig) -> tuple[list[ImageSample], list[ImageSample]]:
    """Materialize the train pools and the labeled evaluation split."""
    train: list[ImageSample] = []

    for i in range(cfg.counts["source"]):
        base = render_clean(_spec(cfg, "source", str(i)))
        train.append(replace(base, id=f"source{i:03d}"))

    targets = []
    for i in range(cfg.counts["target"]):
        kind = CORRUPTIONS[i % len(CORRUPTIONS)]
        targets.append(
            _fresh_adverse(cfg, "target", i, kind, cfg.target_intensity, "target", False)
        )

    daytime_targets = [t for t in targets if t.scene in _DAYTIME]
    gen_cursor = 0
    for i in range(cfg.counts["m1"]):
        kind = _DAYTIME[i % len(_DAYTIME)]
        if cfg.generated_every and (i + 1) % cfg.generated_every == 0 and daytime_targets:
            src = daytime_targets[gen_cursor % len(daytime_targets)]
            gen_cursor += 1
            sample = generate_intermediate(src, src.scene, cfg.n_candidates)
            sample = replace(sample, id=f"m1{i:03d}")
        else:
            sample = _fresh_adverse(cfg, "m1", i, kind, cfg.m1_intensity, "M1", False)
        train.append(sample)

    for i in range(cfg.counts["m2"]):
        train.append(_fresh_adverse(cfg, "m2", i, "night", cfg.m2_intensity, "M2", False))

    train.extend(targets)

    evalset = []
    for s, kind in enumerate(CORRUPTIONS):
        for i in range(cfg.eval_per_scene):
            evalset.append(
                _fresh_adverse(
                    cfg, "eval", s * cfg.eval_per_scene + i, kind, cfg.target_intensity,
                    "target", True,
                )
            )
    return train, evalset


def write_manifest(samples: list[ImageSample], root: Path, manifest_name: str,
                   training: bool) -> Path:
    """Write images/labels plus a JSONL manifest; atomic against partial writes."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        if training and (s.label is not None) != (s.domain == "source"):
            raise SceneError(f"sample {s.id}: training label only allowed on source domain")
        image_path = f"images/{s.id}.ppm"
        imageio.write_ppm(root / image_path, s.image)
        label_path = None
        if s.label is not None:
            label_path = f"labels/{s.id}.pgm"
            imageio.write_pgm(root / label_path, s.label)
        lines.append(
            json.dumps(
                {
                    "id": s.id,
                    "image_path": image_path,
                    "label_path": label_path,
                    "domain": s.domain,
                    "scene": s.scene,
                },
                sort_keys=True,
            )
        )
    manifest = root / manifest_name
    tmp = root / (manifest_name + ".tmp")
    try:
        with open(tmp, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, manifest)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return manifest


def build_dataset(cfg: DatasetConfig, out_dir) -> tuple[Path, Path]:
    """Generate the benchmark on disk; returns (train manifest, eval manifest)."""
    train, evalset = build_samples(cfg)
    root = Path(out_dir)
    train_manifest = write_manifest(train, root, "manifest.jsonl", training=True)
    eval_manifest = write_manifest(evalset, root, "eval_manifest.jsonl", training=False)
    return train_manifest, eval_manifest


def load_manifest(manifest_path) -> list[ImageSample]:
    """Read samples listed in a manifest back into memory."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    samples = []
    for line in manifest_path.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        try:
            image = imageio.read_ppm(root / entry["image_path"])
            label = (
                imageio.read_pgm(root / entry["label_path"])
                if entry.get("label_path")
                else None
            )
        except (OSError, imageio.PnmError) as e:
            raise SceneError(f"sample {entry.get('id', '?')}: {e}") from e
        samples.append(
            ImageSample(
                image=image,
                label=label,
                domain=entry["domain"],
                scene=entry["scene"],
                id=entry["id"],
            )
        )
    return samples
