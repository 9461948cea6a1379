"""Run configuration: one flat record for every knob, hashed for provenance.

The hash covers everything that can change results (data recipe, thresholds,
budgets, rates, seeds) and deliberately excludes filesystem locations, so the
same experiment re-rooted elsewhere keeps its identity. Checkpoints and
reports embed the hash; `coda verify` walks the chain.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .savpt import SavptConfig
from .scenegen import DatasetConfig
from .scheduler import STRATEGIES, StageBudgets
from .severity import SeverityConfig

_UNHASHED = ("data_dir", "run_root")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    data: DatasetConfig = field(default_factory=DatasetConfig)

    sigma: float = 0.5
    tau: float = 0.38

    savpt: bool = True
    placement: str = "corner_center"
    prompt_init: str = "zeros"
    patch_size: int = 8
    adapter_reduction: int = 4
    prompt_limit: float = 0.15  # patches stay perturbations, never occlusions

    strategy: str = "cod_tra"
    m1_iters: int = 60
    m2_iters: int = 200
    chain_end: int = 600
    total_iters: int = 2000

    ema_alpha: float = 0.99
    p_thresh: float = 0.968
    lambda_fd: float = 0.005
    batch_source: int = 2
    batch_target: int = 2

    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-2
    weight_decay: float = 0.01
    warmup_frac: float = 0.05

    log_every: int = 50
    data_dir: str = "data"
    run_root: str = "runs"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")

    def budgets(self) -> StageBudgets:
        return StageBudgets(
            m1_iters=self.m1_iters,
            m2_iters=self.m2_iters,
            chain_end=self.chain_end,
            total_iters=self.total_iters,
        )

    def savpt_cfg(self) -> SavptConfig:
        return SavptConfig(
            placement=self.placement,
            init=self.prompt_init,
            patch_size=self.patch_size,
            reduction=self.adapter_reduction,
            placement_seed=self.seed,
        )

    def severity_cfg(self) -> SeverityConfig:
        return SeverityConfig(sigma=self.sigma, tau=self.tau)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    data = d.pop("data", {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(data=DatasetConfig(**data), **d)


def config_hash(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    for key in _UNHASHED:
        d.pop(key, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load(path) -> RunConfig:
    try:
        return from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
