"""Self-training core: student/teacher pair, losses, steps, and checkpoints.

The student carries the segmenter plus both prompt/adapter branches; the
teacher is a gradient-free copy synchronized by exponential moving average
after every step and used only to produce pseudo-labels. Target images are
processed one at a time so each image's gradient lands exclusively on the
branch it was routed to.
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import optim, rng, savpt, scheduler, segnet
from .config import RunConfig, config_hash, from_dict
from .scenegen import ImageSample

CHECKPOINT_MAGIC = b"CODA"
CHECKPOINT_VERSION = 1
SMOOTH_WINDOW = 100


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class PseudoLabel:
    labels: np.ndarray  # H x W class ids
    q: float  # confident-pixel fraction in [0, 1]


@dataclass
class TrainState:
    config: RunConfig
    student: dict[str, ad.Tensor]
    teacher: dict[str, ad.Tensor]
    frozen_encoder: dict[str, ad.Tensor]
    opt_state: dict
    iteration: int
    streams: dict[str, np.random.Generator]
    prompt_bank: savpt.PromptBank
    adapter_bank: savpt.AdapterBank
    teacher_prompt_bank: savpt.PromptBank
    teacher_adapter_bank: savpt.AdapterBank
    loss_window: deque


def _chw(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def _bank_views(params: dict[str, ad.Tensor], cfg) -> tuple[savpt.PromptBank, savpt.AdapterBank]:
    prompt_params = {k: v for k, v in params.items() if k.startswith("prompt.")}
    adapter_params = {k: v for k, v in params.items() if k.startswith("adapter.")}
    return savpt.PromptBank(cfg, prompt_params), savpt.AdapterBank(cfg, adapter_params)


def init_train_state(cfg: RunConfig) -> TrainState:
    scfg = cfg.savpt_cfg()
    student = segnet.init_params(cfg.seed)
    student.update(savpt.init_prompt_params(scfg, cfg.seed))
    student.update(savpt.init_adapter_params(scfg, cfg.seed))
    _calibrate_adapters(cfg, student)

    teacher = {
        name: ad.Tensor(p.data.copy(), requires_grad=False) for name, p in student.items()
    }
    frozen = {
        name: ad.Tensor(p.data.copy(), requires_grad=False)
        for name, p in student.items()
        if name.startswith(segnet.ENCODER_PREFIXES)
    }
    bank, adapters = _bank_views(student, scfg)
    t_bank, t_adapters = _bank_views(teacher, scfg)
    return TrainState(
        config=cfg,
        student=student,
        teacher=teacher,
        frozen_encoder=frozen,
        opt_state=optim.init_state(student),
        iteration=0,
        streams={
            "source": rng.stream(cfg.seed, "sample", "source"),
            "target": rng.stream(cfg.seed, "sample", "target"),
        },
        prompt_bank=bank,
        adapter_bank=adapters,
        teacher_prompt_bank=t_bank,
        teacher_adapter_bank=t_adapters,
        loss_window=deque(maxlen=SMOOTH_WINDOW),
    )


def _calibrate_adapters(cfg: RunConfig, student: dict[str, ad.Tensor]) -> None:
    """Anchor fresh layer norms to real bottleneck statistics (probe forward)."""
    from .scenegen import SceneSpec, render_clean

    probes = np.stack(
        [
            _chw(
                render_clean(
                    SceneSpec(
                        seed=rng.split(cfg.seed, "adapter_calibration", str(i)),
                        size=cfg.data.size,
                        horizon=cfg.data.horizon,
                        buildings=cfg.data.buildings,
                        obstacles=cfg.data.obstacles,
                    )
                ).image
            )
            for i in range(2)
        ]
    )
    with ad.no_grad():
        bneck = segnet.encoder_forward(probes, student)
    c = bneck.data.shape[1]
    tokens = bneck.data.transpose(0, 2, 3, 1).reshape(-1, c)
    savpt.calibrate_layer_norm(student, tokens)


# ------------------------------------------------------------------- updates


def ema_update(teacher: dict[str, ad.Tensor], student: dict[str, ad.Tensor], alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, every parameter."""
    if not 0.0 <= alpha <= 1.0:
        raise TrainingError(f"ema alpha must be in [0,1], got {alpha}")
    for name, s in student.items():
        t = teacher[name]
        if t.data.shape != s.data.shape:
            raise TrainingError(
                f"ema shape mismatch for {name}: {t.data.shape} vs {s.data.shape}"
            )
        if alpha == 0.0:
            t.data = s.data.copy()
        elif alpha != 1.0:
            t.data = alpha * t.data + (1.0 - alpha) * s.data


# ------------------------------------------------------------------ forwards


def forward_sample(
    sample: ImageSample,
    params: dict[str, ad.Tensor],
    bank: savpt.PromptBank,
    adapters: savpt.AdapterBank,
    sev_cfg,
    savpt_enabled: bool,
    branch: str | None = None,
):
    """One image through the network, prompts and adapter applied when active.

    Prompts and adapters only ever touch target-side images; source images and
    the disabled path take the plain network. Returns (logits, bottleneck,
    branch used or None).
    """
    x = _chw(sample.image)
    if not savpt_enabled or sample.domain == "source":
        logits, bneck = segnet.forward(x, params)
        return logits, bneck, None
    if branch is None:
        branch = savpt.route_and_freeze([sample], sev_cfg)[0][0]
    prompted = savpt.apply_prompts(x, branch, bank, place_key=sample.id)
    logits, bneck = segnet.forward(
        prompted, params, adapter_hook=lambda f: savpt.apply_adapter(f, branch, adapters)
    )
    return logits, bneck, branch


def pseudo_label(state: TrainState, sample: ImageSample, branch: str | None) -> PseudoLabel:
    """Teacher prediction and confidence for one target-side image.

    Teacher and student score the same augmented image, so the prompted
    pixels are built from the student's current patches; the teacher itself
    keeps its plain trunk, anchoring labels to the source-supervised weights
    instead of echoing the adapted path back at itself. That is what lets the
    adapter branch learn to agree with the plain path. Runs off-tape, before
    any gradient work.
    """
    before = len(ad.active_tape().nodes)
    with ad.no_grad():
        x = _chw(sample.image)
        if state.config.savpt and branch is not None and sample.domain != "source":
            x = savpt.apply_prompts(x, branch, state.prompt_bank, place_key=sample.id).data
        logits, _ = segnet.forward(x, state.teacher)
    assert len(ad.active_tape().nodes) == before, "teacher forward leaked tape nodes"
    return pseudo_from_logits(logits.data[0], state.config.p_thresh)


def pseudo_from_logits(z: np.ndarray, p_thresh: float) -> PseudoLabel:
    """Argmax labels plus the fraction of pixels whose max softmax >= p_thresh."""
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=0, keepdims=True)
    labels = np.argmax(z, axis=0).astype(np.uint8)
    q = float(np.count_nonzero(probs.max(axis=0) >= p_thresh)) / labels.size
    return PseudoLabel(labels=labels, q=q)


# -------------------------------------------------------------------- losses


def cross_entropy(logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Mean per-pixel negative log-likelihood of the labeled classes."""
    n, k, h, w = logits.data.shape
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if labels.max() >= k:
        raise TrainingError(f"label id {int(labels.max())} out of range for {k} classes")
    onehot = np.zeros((n, k, h, w), dtype=logits.data.dtype)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    picked = ad.tsum(ad.mul(ad.log_softmax(logits, axis=1), ad.Tensor(onehot)))
    return ad.mul(picked, -1.0 / (n * h * w))


def loss_source(student_logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    return cross_entropy(student_logits, labels)


def loss_target(student_logits: ad.Tensor, pl: PseudoLabel) -> ad.Tensor:
    return ad.mul(cross_entropy(student_logits, pl.labels), float(pl.q))


def loss_fd(student_bottleneck: ad.Tensor, frozen_bottleneck: ad.Tensor) -> ad.Tensor:
    if student_bottleneck.data.shape != frozen_bottleneck.data.shape:
        raise TrainingError(
            f"feature shapes differ: {student_bottleneck.data.shape} "
            f"vs {frozen_bottleneck.data.shape}"
        )
    d = ad.sub(student_bottleneck, frozen_bottleneck)
    return ad.tmean(ad.mul(d, d))


def _chain_add(terms: list[ad.Tensor]) -> ad.Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc


# ---------------------------------------------------------------------- step


def learning_rate_for(cfg: RunConfig, iteration: int):
    """Linear warm-up, then flat, with two rate groups.

    Decoder and head take the fast rate: their gradients come from the source
    loss every step, so large normalized steps stay consistent. Everything
    trained only by the noisier target-side signal (prompt patches, adapters)
    joins the encoder in the slow group; at the fast rate their Adam noise
    floor alone keeps predictions churning and the branches never settle.
    """
    warmup = max(1, int(cfg.warmup_frac * cfg.total_iters))
    scale = min(1.0, (iteration + 1) / warmup)
    slow = (*segnet.ENCODER_PREFIXES, "prompt.", "adapter.")

    def lr_for(name: str) -> float:
        base = cfg.lr_encoder if name.startswith(slow) else cfg.lr_decoder
        return base * scale

    return lr_for


def train_step(
    state: TrainState,
    source_batch: list[ImageSample],
    target_batch: list[ImageSample],
) -> dict:
    """One optimizer step on the student (+ routed branches), one EMA sync.

    Source loss and feature-distance loss average over the source batch; the
    target loss is a plain sum of per-image confidence-weighted terms, so an
    image's contribution to its branch is independent of its batch mates.
    """
    cfg = state.config
    sev_cfg = cfg.severity_cfg()
    ad.fresh_tape()
    ad.zero_grad(state.student)

    for s in source_batch:
        if s.label is None:
            raise TrainingError(f"source sample {s.id} has no label")
    # source images always take the plain path, so the pair batches into one
    # forward; mean-over-pixels losses make this identical to per-image terms
    src_imgs = np.stack([_chw(s.image) for s in source_batch])
    src_labels = np.stack([s.label for s in source_batch])
    logits, bneck = segnet.forward(src_imgs, state.student)
    l_s = loss_source(logits, src_labels)
    with ad.no_grad():
        frozen_b = segnet.encoder_forward(src_imgs, state.frozen_encoder)
    l_fd = loss_fd(bneck, frozen_b)

    if cfg.savpt:
        branches, _ = savpt.route_and_freeze(target_batch, sev_cfg)
    else:
        branches = [None] * len(target_batch)
    tgt_terms, qs = [], []
    for s, branch in zip(target_batch, branches):
        pl = pseudo_label(state, s, branch)
        qs.append(pl.q)
        logits, _, _ = forward_sample(
            s, state.student, state.prompt_bank, state.adapter_bank, sev_cfg, cfg.savpt,
            branch=branch,
        )
        tgt_terms.append(loss_target(logits, pl))
    # divide by the configured batch size (a constant), never the actual batch
    # length: per-image gradient contributions then decompose exactly, which
    # the branch-isolation oracle relies on
    l_t = ad.mul(_chain_add(tgt_terms), 1.0 / cfg.batch_target)

    parts = {
        "loss_s": float(l_s.data),
        "loss_t": float(l_t.data),
        "loss_fd": float(l_fd.data),
    }
    if not all(np.isfinite(v) for v in parts.values()):
        raise TrainingError(f"non-finite loss at iteration {state.iteration}: {parts}")

    total = ad.add(ad.add(l_s, ad.mul(l_fd, cfg.lambda_fd)), l_t)
    ad.backward(total)

    optim.adamw_step(
        state.student,
        state.opt_state,
        lr_for=learning_rate_for(cfg, state.iteration),
        weight_decay=cfg.weight_decay,
    )
    savpt.project_prompts(state.student, cfg.prompt_limit)
    ema_update(state.teacher, state.student, cfg.ema_alpha)
    state.iteration += 1
    state.loss_window.append(parts["loss_s"])
    parts["loss_total"] = float(total.data)
    parts["q_mean"] = float(np.mean(qs))
    parts["branches"] = branches
    return parts


# ----------------------------------------------------------------- run loop


def train_loop(
    state: TrainState,
    train_samples: list[ImageSample],
    n_iters: int,
    on_step=None,
) -> None:
    """Run n_iters steps, sampling batches per the configured strategy."""
    cfg = state.config
    budgets = cfg.budgets()
    for _ in range(n_iters):
        t = state.iteration
        stage = scheduler.strategy_stage(cfg.strategy, t, budgets)
        source_batch = scheduler.sample_source_batch(
            train_samples, state.streams["source"], cfg.batch_source
        )
        target_batch = scheduler.sample_target_batch(
            stage, train_samples, state.streams["target"], cfg.batch_target
        )
        metrics = train_step(state, source_batch, target_batch)
        if on_step is not None:
            metrics["stage"] = stage
            metrics["source_ids"] = [s.id for s in source_batch]
            metrics["batch_ids"] = [s.id for s in target_batch]
            on_step(t, metrics)


def smoothed_loss(state: TrainState) -> float:
    return float(np.mean(state.loss_window)) if state.loss_window else float("nan")


# -------------------------------------------------------------- persistence


def save_checkpoint(state: TrainState, path) -> None:
    """Versioned binary: magic, header JSON, f32 payload, trailing CRC32."""
    names = sorted(state.student)
    frozen_names = sorted(state.frozen_encoder)
    header = {
        "config": state.config.to_dict(),
        "config_hash": config_hash(state.config),
        "iteration": state.iteration,
        "params": [[n, list(state.student[n].data.shape)] for n in names],
        "frozen": frozen_names,
        "opt_t": {n: state.opt_state[n]["t"] for n in names},
        "rng": {k: rng.state_of(g) for k, g in sorted(state.streams.items())},
        "loss_window": [float(v) for v in state.loss_window],
    }
    chunks = []
    for n in names:
        chunks.append(state.student[n].data)
    for n in names:
        chunks.append(state.teacher[n].data)
    for n in frozen_names:
        chunks.append(state.frozen_encoder[n].data)
    for n in names:
        chunks.append(state.opt_state[n]["m"])
    for n in names:
        chunks.append(state.opt_state[n]["v"])
    payload = b"".join(np.ascontiguousarray(c, dtype="<f4").tobytes() for c in chunks)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path) -> TrainState:
    raw = open(path, "rb").read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: version {version}, expected {CHECKPOINT_VERSION}"
        )
    if len(raw) < 12 + header_len + 4:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    header = json.loads(raw[12 : 12 + header_len])
    names = [n for n, _ in header["params"]]
    shapes = {n: tuple(s) for n, s in header["params"]}
    frozen_names = header["frozen"]
    count = sum(int(np.prod(shapes[n])) for n in names)
    frozen_count = sum(int(np.prod(shapes[n])) for n in frozen_names)
    payload_len = 4 * (4 * count + frozen_count)
    expected = 12 + header_len + payload_len + 4
    if len(raw) != expected:
        raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes, expected {expected}")
    payload = raw[12 + header_len : 12 + header_len + payload_len]
    (crc,) = struct.unpack("<I", raw[-4:])
    if crc != (zlib.crc32(payload) & 0xFFFFFFFF):
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch")

    flat = np.frombuffer(payload, dtype="<f4")
    pos = 0

    def take(n):
        nonlocal pos
        size = int(np.prod(shapes[n]))
        arr = flat[pos : pos + size].reshape(shapes[n]).copy()
        pos += size
        return arr

    cfg = from_dict(header["config"])
    student = {n: ad.Tensor(take(n), requires_grad=True) for n in names}
    teacher = {n: ad.Tensor(take(n), requires_grad=False) for n in names}
    frozen = {n: ad.Tensor(take(n), requires_grad=False) for n in frozen_names}
    opt_state = {n: {"m": take(n), "v": None, "t": header["opt_t"][n]} for n in names}
    for n in names:
        opt_state[n]["v"] = take(n)

    scfg = cfg.savpt_cfg()
    bank, adapters = _bank_views(student, scfg)
    t_bank, t_adapters = _bank_views(teacher, scfg)
    return TrainState(
        config=cfg,
        student=student,
        teacher=teacher,
        frozen_encoder=frozen,
        opt_state=opt_state,
        iteration=header["iteration"],
        streams={k: rng.restore(v) for k, v in header["rng"].items()},
        prompt_bank=bank,
        adapter_bank=adapters,
        teacher_prompt_bank=t_bank,
        teacher_adapter_bank=t_adapters,
        loss_window=deque(header["loss_window"], maxlen=SMOOTH_WINDOW),
    )


def clone_state(state: TrainState) -> TrainState:
    """Deep, independent copy (for replay oracles and determinism checks)."""
    return copy.deepcopy(state)
