"""Tiny fully-convolutional encoder-decoder segmenter.

Three conv/GELU/avg-pool encoder blocks (widths 16, 32, 64) down to an H/8
bottleneck where a feature hook may attach, two upsample+conv decoder blocks,
and a 1x1 head whose logits are nearest-upsampled back to input resolution.
No normalization layers, so batch size 1 behaves identically to larger
batches and forward is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import rng

WIDTHS = (16, 32, 64)
N_CLASSES = 5
BOTTLENECK_CHANNELS = WIDTHS[-1]
DOWNSCALE = 8

ENCODER_PREFIXES = ("enc1", "enc2", "enc3")


class SegNetError(ValueError):
    pass


def _he_uniform(gen: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return gen.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(seed: int) -> dict[str, ad.Tensor]:
    """He-uniform conv weights, zero biases, drawn from the init stream."""
    gen = rng.stream(seed, "init", "segnet")
    shapes = {
        "enc1.w": (WIDTHS[0], 3, 3, 3),
        "enc2.w": (WIDTHS[1], WIDTHS[0], 3, 3),
        "enc3.w": (WIDTHS[2], WIDTHS[1], 3, 3),
        "dec1.w": (WIDTHS[1], WIDTHS[2], 3, 3),
        "dec2.w": (WIDTHS[0], WIDTHS[1], 3, 3),
        "head.w": (N_CLASSES, WIDTHS[0], 1, 1),
    }
    params: dict[str, ad.Tensor] = {}
    for name, shape in shapes.items():
        params[name] = ad.Tensor(_he_uniform(gen, shape), requires_grad=True)
        params[name.replace(".w", ".b")] = ad.Tensor(
            np.zeros(shape[0], dtype=np.float32), requires_grad=True
        )
    return params


def _block(x, params, name, pool: bool):
    w, b = params[f"{name}.w"], params[f"{name}.b"]
    f = w.data.shape[0]
    h = ad.gelu(ad.add(ad.conv2d(x, w, stride=1, pad=1), ad.reshape(b, (f, 1, 1))))
    return ad.downsample_avg(h, 2) if pool else h


def forward(img, params: dict, adapter_hook=None):
    """Segment one NCHW batch; returns (logits, bottleneck feature).

    adapter_hook, when given, transforms the bottleneck before decoding.
    """
    x = img if isinstance(img, ad.Tensor) else ad.Tensor(np.asarray(img, dtype=np.float32))
    if x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.data.shape)
    n, c, h, w = x.data.shape
    if h % DOWNSCALE or w % DOWNSCALE:
        raise SegNetError(f"input {h}x{w} not divisible by {DOWNSCALE}")
    if c != 3:
        raise SegNetError(f"expected 3 input channels, got {c}")

    e1 = _block(x, params, "enc1", pool=True)
    e2 = _block(e1, params, "enc2", pool=True)
    bottleneck = _block(e2, params, "enc3", pool=True)

    feat = adapter_hook(bottleneck) if adapter_hook is not None else bottleneck
    d1 = _block(ad.upsample_nearest(feat, 2), params, "dec1", pool=False)
    d2 = _block(ad.upsample_nearest(d1, 2), params, "dec2", pool=False)
    head = ad.add(
        ad.conv2d(d2, params["head.w"], stride=1, pad=0),
        ad.reshape(params["head.b"], (N_CLASSES, 1, 1)),
    )
    logits = ad.upsample_nearest(head, 2)
    return logits, bottleneck


def encoder_forward(img, params: dict):
    """Bottleneck features only (used for the frozen-encoder distance loss)."""
    x = img if isinstance(img, ad.Tensor) else ad.Tensor(np.asarray(img, dtype=np.float32))
    if x.data.ndim == 3:
        x = ad.reshape(x, (1,) + x.data.shape)
    e1 = _block(x, params, "enc1", pool=True)
    e2 = _block(e1, params, "enc2", pool=True)
    return _block(e2, params, "enc3", pool=True)


def predict(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class id."""
    data = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    if data.ndim == 4:
        return np.argmax(data, axis=1).astype(np.uint8)
    return np.argmax(data, axis=0).astype(np.uint8)
