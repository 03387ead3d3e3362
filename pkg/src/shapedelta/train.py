"""Training loop, run configuration files and model checkpoints."""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import DeltaVAE, LossWeights, ModelConfig, PairData
from .nn import NonFiniteError, adam_init, adam_step, load_checkpoint, save_checkpoint
from .shape import Taxonomy
from .synth import derive_seed

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    feature_width: int = 64
    latent_width: int = 0
    lr: float = 1e-3
    epochs: int = 30
    max_steps: int = 0  # 0: no cap beyond epochs
    batch_size: int = 32
    lambda_: float = 10.0
    beta: float = 0.05
    mu: float = 20.0
    gamma: float = 0.1
    variational: bool = True
    skip_connections: bool = True
    group_norm: bool = True
    leaf_classifier: bool = True
    box_deltas: bool = True
    dtype: str = "float32"
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_width=self.feature_width, latent_width=self.latent_width,
            skip_connections=self.skip_connections, group_norm=self.group_norm,
            leaf_classifier=self.leaf_classifier, box_deltas=self.box_deltas, dtype=self.dtype,
        )

    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_, self.beta if self.variational else 0.0, self.mu, self.gamma)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_ALIASES = {"lambda": "lambda_"}


def _coerce(name: str, raw: str):
    typ = TrainConfig.__dataclass_fields__[name].type
    if typ == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw.strip()


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines (``#`` comments); unknown keys are an error."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[run]\n" + text)
    values = {}
    for key, raw in cp["run"].items():
        name = _ALIASES.get(key, key)
        if name not in TrainConfig.__dataclass_fields__:
            raise ValueError(f"unknown config key {key!r}")
        values[name] = _coerce(name, raw)
    return dataclasses.replace(base or TrainConfig(), **values)


def read_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_text(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        key = "lambda" if k == "lambda_" else k
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------


def model_checkpoint(model: DeltaVAE, path, step: int = 0, extra: dict | None = None) -> None:
    header = {
        "model_config": model.config.to_dict(),
        "taxonomy": model.taxonomy.to_dict(),
        "seed": model.seed,
        "step": step,
    }
    header.update(extra or {})
    save_checkpoint(path, dict(model.state_dict()), header)


def load_model(path) -> tuple[DeltaVAE, dict]:
    tensors, header = load_checkpoint(path)
    model = DeltaVAE(Taxonomy.from_dict(header["taxonomy"]),
                     ModelConfig.from_dict(header["model_config"]), seed=header.get("seed", 0))
    state = {k: v.to(model.dtype) for k, v in tensors.items()}
    model.load_state_dict(state)
    return model, header


@dataclass
class TrainResult:
    model: DeltaVAE
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def train(model: DeltaVAE, pairs: list[PairData], cfg: TrainConfig, log_path=None,
          checkpoint_dir=None, time_budget: float | None = None) -> TrainResult:
    """Minibatch training with Adam.

    Batch order comes from ``cfg.seed``; reparameterization noise from a
    separate stream of the same seed.  A non-finite loss aborts the run.
    """
    if not pairs:
        raise TrainingError("no training pairs")
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be positive")
    rng = np.random.default_rng(derive_seed(cfg.seed, "batch-order"))
    noise = torch.Generator().manual_seed(derive_seed(cfg.seed, "latent-noise") % (2 ** 63))
    weights = cfg.weights()
    params = list(model.parameters())
    state = adam_init(params)
    history: list[dict] = []
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    step = 0
    start = time.perf_counter()
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(pairs))
            for s in range(0, len(order), cfg.batch_size):
                batch = model.batch([pairs[i] for i in order[s:s + cfg.batch_size]])
                try:
                    loss, terms = model.loss(batch, weights, cfg.variational, noise)
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite activations at step {step} (epoch {epoch}): {exc}") from exc
                if not math.isfinite(terms["total"]):
                    raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}): {terms}")
                grads = torch.autograd.grad(loss, params, allow_unused=True)
                bad = [n for (n, _), g in zip(model.named_parameters(), grads)
                       if g is not None and not torch.isfinite(g).all()]
                if bad:
                    raise TrainingError(f"non-finite gradients at step {step} in {bad[:5]}")
                adam_step(params, grads, state, lr=cfg.lr)
                step += 1
                record = {"step": step, "epoch": epoch, **terms}
                history.append(record)
                if logf and (step % cfg.log_every == 0 or step == 1):
                    logf.write(json.dumps(record, sort_keys=True) + "\n")
                if ckdir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    model_checkpoint(model, ckdir / f"step{step:07d}.ckpt", step)
                if cfg.max_steps and step >= cfg.max_steps:
                    raise StopIteration
                if time_budget is not None and time.perf_counter() - start > time_budget:
                    log.warning("time budget reached after %d steps", step)
                    raise StopIteration
    except StopIteration:
        pass
    finally:
        if logf:
            logf.close()
    model.eval()
    if ckdir:
        model_checkpoint(model, ckdir / "final.ckpt", step)
    return TrainResult(model, history, step, time.perf_counter() - start)
