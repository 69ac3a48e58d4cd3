"""Training loop, ablation modes and the NDJSON training log."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-export)
from .losses import ContrastiveBatchView, total_loss
from .model import ModelConfig, forward, init_parameters, loss_scalars, no_decay_names
from .numerics.optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .numerics.tensor import Tape, Tensor, backward

# mode -> (weighted resampling, multiview loss, class mask); each row adds one ingredient
MODES = {
    "class-only": (False, False, False),
    "resampling": (True, False, False),
    "multiview": (True, True, False),
    "final": (True, True, True),
}


class NumericalError(RuntimeError):
    def __init__(self, step: int, norms: dict, what: str = "non-finite loss"):
        self.step = step
        self.norms = norms
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)
        report = ", ".join(f"{k}={v:.4g}" for k, v in worst[:8])
        super().__init__(f"{what} at step {step}; parameter norms: {report}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 512
    schedule: LrSchedule = field(default_factory=LrSchedule)
    views_in: int = 5
    views_target: int = 5
    resampling: bool = True
    multiview_loss: bool = True
    class_mask: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    grad_clip: float | None = None  # global L2 norm; None disables clipping
    weight_decay: float = 0.01
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.multiview_loss and self.views_target < 1:
            raise ValueError("the multiview loss needs views_target >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    @property
    def mode(self) -> str | None:
        key = (self.resampling, self.multiview_loss, self.class_mask)
        return next((name for name, toggles in MODES.items() if toggles == key), None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("mode", None)
        if "schedule" in d and isinstance(d["schedule"], dict):
            d["schedule"] = LrSchedule(**d["schedule"])
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig(**d["model"])
        return cls(**d)


def ablation_mode(mode: str, cfg: TrainConfig | None = None) -> TrainConfig:
    """``cfg`` with the loss toggles of one of the four named modes."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    resampling, mv, mask = MODES[mode]
    return replace(cfg or TrainConfig(), resampling=resampling, multiview_loss=mv, class_mask=mask)


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    lr: float
    L_c: float
    L_mv: float | None
    L_total: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    params: dict
    log: list
    checkpoints: list

    def epoch_means(self) -> list:
        by_epoch: dict = {}
        for r in self.log:
            by_epoch.setdefault(r.epoch, []).append(r.L_total)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def steps_per_epoch(num_instances: int, batch_size: int) -> int:
    return -(-num_instances // batch_size)


def step_rng(seed: int, step: int) -> np.random.Generator:
    # one independent stream per step, so replay needs no carried RNG state
    return np.random.default_rng([seed, 0x7EA1, step])


def _global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def step_gradients(params: dict, batch: D.Batch, targets, cfg: TrainConfig) -> tuple:
    """Loss terms and per-parameter gradients for one sampled batch.

    Returns ``(L_total, L_c, L_mv or None, grads)`` with float losses and a
    gradient array for every parameter name. Unseen views are ignored
    unless the multiview loss is on.
    """
    with Tape() as tape:
        fused = forward(batch.inputs, params, cfg.model)
        t, b = loss_scalars(params)
        view = ContrastiveBatchView(
            fused, targets, batch.class_ids, t, b,
            batch.unseen if cfg.multiview_loss else None,
            batch.unseen_owner if cfg.multiview_loss else None,
            cfg.class_mask)
        loss, lc, lmv = total_loss(view)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, float(lc.data), None if lmv is None else float(lmv.data), None
    grads = backward(loss, tape)
    g = {n: grads.get(p, np.zeros(p.shape)) for n, p in params.items()}
    return value, float(lc.data), None if lmv is None else float(lmv.data), g


def train(instances, vocab: D.ClassVocabulary, cfg: TrainConfig, out_dir=None,
          log_path=None, progress=None) -> TrainResult:
    """Optimize a freshly initialized model on ``instances``.

    Every mode draws the same batches, views and unseen targets for a given
    seed (uniform and inverse-frequency weights coincide on balanced data),
    so modes differ only in what the loss does with them. Checkpoints go to
    ``out_dir`` as ``step_XXXXXXX.json`` and ``final.json``.
    """
    if not instances:
        raise D.DataError("cannot train on an empty dataset")
    mcfg = cfg.model
    class_row = {}
    for inst in instances:
        if inst.class_id not in class_row:
            class_row[inst.class_id] = vocab.index_of(inst.class_id)
    embeddings = vocab.embeddings()
    if embeddings.shape[1] != mcfg.descriptor_dim:
        raise D.DataError(
            f"vocabulary dim {embeddings.shape[1]} != model descriptor_dim {mcfg.descriptor_dim}")
    matrices = [inst.descriptor_matrix() for inst in instances]
    if matrices[0].shape[1] != mcfg.descriptor_dim:
        raise D.DataError(
            f"descriptor dim {matrices[0].shape[1]} != model descriptor_dim {mcfg.descriptor_dim}")

    if cfg.resampling:
        weights = D.instance_weights(instances, D.with_frequencies(vocab, instances))
    else:
        weights = D.uniform_weights(instances)
    sampler = D.SamplerConfig(cfg.batch_size, cfg.views_in, cfg.views_target, cfg.seed)

    params = init_parameters(mcfg, cfg.seed)
    names = list(params)
    no_decay = no_decay_names(names)
    state = OptimizerState(weight_decay=cfg.weight_decay)
    per_epoch = steps_per_epoch(len(instances), cfg.batch_size)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    log, checkpoints = [], []

    def checkpoint(tag: str, step: int):
        if out_dir is None:
            return
        meta = {"step": step, "train_config": cfg.to_dict()}
        checkpoints.append(save_checkpoint(params, mcfg, out_dir / f"{tag}.json", meta))

    try:
        step = 0
        for epoch in range(cfg.epochs):
            for _ in range(per_epoch):
                t0 = time.perf_counter()
                batch = D.sample_batch(instances, weights, sampler, step_rng(cfg.seed, step), matrices)
                targets = embeddings[[class_row[c] for c in batch.class_ids]]
                value, lc, lmv, g = step_gradients(params, batch, targets, cfg)
                if g is None:
                    raise NumericalError(step, _norms(params))
                if cfg.grad_clip is not None:
                    norm = _global_norm(g)
                    if norm > cfg.grad_clip:
                        g = {n: v * (cfg.grad_clip / norm) for n, v in g.items()}
                lr = lr_at(step, cfg.schedule)
                new = adamw_step({n: params[n].data for n in names}, g, state, lr, no_decay)
                params = {n: Tensor(new[n], requires_grad=True) for n in names}
                if not all(np.isfinite(p.data).all() for p in params.values()):
                    raise NumericalError(step, _norms(params), "non-finite parameters")
                rec = TrainLogRecord(step, epoch, lr, lc, lmv, value,
                                     round((time.perf_counter() - t0) * 1e3, 3))
                log.append(rec)
                if log_fh is not None:
                    log_fh.write(rec.to_json() + "\n")
                step += 1
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    checkpoint(f"step_{step:07d}", step)
            if progress is not None:
                progress(epoch, log)
        checkpoint("final", step)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params, log, checkpoints)


def _norms(params: dict) -> dict:
    return {n: float(np.linalg.norm(p.data)) for n, p in params.items()}
