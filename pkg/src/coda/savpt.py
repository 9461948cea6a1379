"""Severity-routed visual prompts and feature adapters.

Two branches (high / low severity) each own five learnable pixel patches that
are added to target-side images, and a bottleneck adapter (down-project, GELU,
up-project with residual, then single-head spatial self-attention and channel
layer norm). Both branches are created bitwise identical and train alternately:
an image only ever contributes gradient to the branch it was routed to, so a
branch that saw no image in a step stays bitwise untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rng, severity

BRANCHES = ("high", "low")
PLACEMENTS = ("corner_center", "padding", "random")
INITS = ("zeros", "ones", "uniform01", "normal01")
N_PATCHES = 5


class SavptError(ValueError):
    pass


@dataclass(frozen=True)
class SavptConfig:
    placement: str = "corner_center"
    init: str = "zeros"  # from-scratch patches work best
    patch_size: int = 8
    reduction: int = 4
    channels: int = 64
    placement_seed: int = 0

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise SavptError(f"unknown placement {self.placement!r}")
        if self.init not in INITS:
            raise SavptError(f"unknown init {self.init!r}")
        if self.channels % self.reduction:
            raise SavptError(
                f"reduction {self.reduction} must divide channel width {self.channels}"
            )


class PromptBank:
    """Learnable patches per branch, with an access counter for audits."""

    def __init__(self, cfg: SavptConfig, params: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.params = params
        self.reads = 0

    def patches(self, branch: str) -> list[ad.Tensor]:
        return [self.params[f"prompt.{branch}.{i}"] for i in range(N_PATCHES)]


class AdapterBank:
    """Bottleneck adapter + attention + layer norm weights per branch."""

    def __init__(self, cfg: SavptConfig, params: dict[str, ad.Tensor]):
        self.cfg = cfg
        self.params = params
        self.reads = 0


def _draw(gen: np.random.Generator, init: str, shape) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if init == "ones":
        return np.ones(shape, dtype=np.float32)
    if init == "uniform01":
        return gen.uniform(0.0, 1.0, size=shape).astype(np.float32)
    return gen.normal(0.0, 1.0, size=shape).astype(np.float32)


def init_prompt_params(cfg: SavptConfig, seed: int) -> dict[str, ad.Tensor]:
    """Both branches start from the same drawn values, bitwise."""
    gen = rng.stream(seed, "init", "prompt")
    shape = (3, cfg.patch_size, cfg.patch_size)
    base = [_draw(gen, cfg.init, shape) for _ in range(N_PATCHES)]
    params = {}
    for branch in BRANCHES:
        for i, val in enumerate(base):
            params[f"prompt.{branch}.{i}"] = ad.Tensor(val.copy(), requires_grad=True)
    return params


def init_adapter_params(cfg: SavptConfig, seed: int) -> dict[str, ad.Tensor]:
    gen = rng.stream(seed, "init", "adapter")
    c, r = cfg.channels, cfg.reduction
    d = c // r

    def he(shape):
        limit = np.sqrt(6.0 / shape[0])
        return gen.uniform(-limit, limit, size=shape).astype(np.float32)

    # up-projection and attention output start at zero so the adapter begins
    # as (residual, then layer norm) and drifts away only as it trains
    base = {
        "down.w": he((c, d)),
        "down.b": np.zeros(d, dtype=np.float32),
        "up.w": np.zeros((d, c), dtype=np.float32),
        "up.b": np.zeros(c, dtype=np.float32),
        "att.wq": he((c, c)),
        "att.wk": he((c, c)),
        "att.wv": he((c, c)),
        "att.wo": np.zeros((c, c), dtype=np.float32),
        "ln.gain": np.ones(c, dtype=np.float32),
        "ln.shift": np.zeros(c, dtype=np.float32),
    }
    params = {}
    for branch in BRANCHES:
        for key, val in base.items():
            params[f"adapter.{branch}.{key}"] = ad.Tensor(val.copy(), requires_grad=True)
    return params


def calibrate_layer_norm(params: dict[str, ad.Tensor], tokens: np.ndarray, eps: float = 1e-5):
    """Fit both branches' ln gain/shift to best reconstruct the probe tokens.

    A unit-scale layer norm output sits far from the feature statistics the
    decoder was built around, which can push downstream GELUs into their dead
    zone and silence the whole branch. The closed-form per-channel regression
    of input on normalized input keeps a fresh module inside the decoder's
    operating range; both branches receive the identical fit.
    """
    tokens = tokens.astype(np.float32)
    mu = tokens.mean(axis=-1, keepdims=True)
    var = ((tokens - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (tokens - mu) / np.sqrt(var + eps)
    xm, tm = xhat.mean(axis=0), tokens.mean(axis=0)
    cov = ((xhat - xm) * (tokens - tm)).mean(axis=0)
    gain = cov / (((xhat - xm) ** 2).mean(axis=0) + 1e-8)
    shift = tm - gain * xm
    for branch in BRANCHES:
        params[f"adapter.{branch}.ln.gain"].data = gain.astype(np.float32).copy()
        params[f"adapter.{branch}.ln.shift"].data = shift.astype(np.float32).copy()


def branch_param_names(branch: str) -> set[str]:
    names = {f"prompt.{branch}.{i}" for i in range(N_PATCHES)}
    names |= {
        f"adapter.{branch}.{key}"
        for key in (
            "down.w", "down.b", "up.w", "up.b",
            "att.wq", "att.wk", "att.wv", "att.wo",
            "ln.gain", "ln.shift",
        )
    }
    return names


# ----------------------------------------------------------------- placement


def patch_positions(
    placement: str, h: int, w: int, p: int, placement_seed: int = 0, place_key: str = ""
) -> list[tuple[int, int]]:
    """Top-left corners where the patches land; cycled for frame tilings."""
    if p > h or p > w:
        raise SavptError(f"patch {p}x{p} larger than image {h}x{w}")
    if placement == "corner_center":
        if 3 * p > h or 3 * p > w:
            raise SavptError(
                f"corner_center patches {p}x{p} would overlap on a {h}x{w} image"
            )
        return [
            (0, 0),
            (0, w - p),
            (h - p, 0),
            (h - p, w - p),
            ((h - p) // 2, (w - p) // 2),
        ]
    if placement == "padding":
        if h % p or w % p:
            raise SavptError(f"padding placement needs image {h}x{w} divisible by {p}")
        tiles = []
        for c in range(0, w, p):
            tiles.append((0, c))
            tiles.append((h - p, c))
        for r in range(p, h - p, p):
            tiles.append((r, 0))
            tiles.append((r, w - p))
        return tiles
    gen = rng.stream(placement_seed, "prompt_place", place_key)
    return [
        (int(gen.integers(0, h - p + 1)), int(gen.integers(0, w - p + 1)))
        for _ in range(N_PATCHES)
    ]


def apply_prompts(img: np.ndarray, branch: str, bank: PromptBank, place_key: str = "") -> ad.Tensor:
    """Add the branch's patches to a CHW image and clamp back into [0,1].

    Pixels outside the patch footprints keep their exact input values; pixels
    pushed past the valid range are clamped and stop passing gradient there.
    """
    if branch not in BRANCHES:
        raise SavptError(f"unknown branch {branch!r}")
    c, h, w = img.shape
    p = bank.cfg.patch_size
    positions = patch_positions(
        bank.cfg.placement, h, w, p, bank.cfg.placement_seed, place_key
    )
    bank.reads += 1
    patches = bank.patches(branch)
    overlay = None
    for i, (r0, c0) in enumerate(positions):
        placed = ad.embed(patches[i % N_PATCHES], (c, h, w), (0, r0, c0))
        overlay = placed if overlay is None else ad.add(overlay, placed)
    return ad.clamp01(ad.add(ad.Tensor(img), overlay))


# ------------------------------------------------------------------- adapter


def apply_adapter(feat: ad.Tensor, branch: str, adapters: AdapterBank) -> ad.Tensor:
    """Refine an NCHW feature map in place of the branch; shape preserved."""
    if branch not in BRANCHES:
        raise SavptError(f"unknown branch {branch!r}")
    n, c, h, w = feat.data.shape
    if c != adapters.cfg.channels:
        raise SavptError(
            f"adapter width mismatch: feature has {c} channels, "
            f"adapter expects {adapters.cfg.channels}"
        )
    adapters.reads += 1
    p = adapters.params
    key = f"adapter.{branch}"

    tokens = ad.transpose(ad.reshape(feat, (n, c, h * w)), 1, 2)  # (n, hw, c)
    hidden = ad.gelu(ad.add(ad.matmul(tokens, p[f"{key}.down.w"]), p[f"{key}.down.b"]))
    up = ad.add(ad.matmul(hidden, p[f"{key}.up.w"]), p[f"{key}.up.b"])
    a = ad.add(tokens, up)

    q = ad.matmul(a, p[f"{key}.att.wq"])
    k = ad.matmul(a, p[f"{key}.att.wk"])
    v = ad.matmul(a, p[f"{key}.att.wv"])
    att = ad.matmul(ad.scaled_dot_attention(q, k, v), p[f"{key}.att.wo"])
    a = ad.add(a, att)

    out = ad.layer_norm(a, p[f"{key}.ln.gain"], p[f"{key}.ln.shift"], axis=-1)
    return ad.reshape(ad.transpose(out, 1, 2), (n, c, h, w))


def project_prompts(params: dict[str, ad.Tensor], limit: float) -> None:
    """Clip stepped prompt patches into [-limit, limit], in place.

    Patches are meant to perturb images, not occlude them; unbounded patches
    chase the teacher's labels (which move with the patch) and random-walk to
    saturation. Only parameters that received a gradient are touched, so a
    frozen branch stays bitwise frozen.
    """
    if limit is None or limit <= 0:
        return
    for name, p in params.items():
        if name.startswith("prompt.") and p.grad is not None:
            np.clip(p.data, -limit, limit, out=p.data)


def route_and_freeze(batch, sev_cfg: severity.SeverityConfig) -> tuple[list[str], set[str]]:
    """Severity-route a target-side batch.

    Returns the branch per image plus the names of parameters allowed to move
    this step; everything outside that set must come out of the optimizer
    bitwise unchanged.
    """
    assignments = [severity.classify(s.image, sev_cfg) for s in batch]
    active: set[str] = set()
    for branch in assignments:
        active |= branch_param_names(branch)
    return assignments, active
