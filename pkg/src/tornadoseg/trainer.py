"""Adam with decoupled weight decay, one-cycle schedule and the training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .augment import AugmentConfig, augment_pipeline, frame_rng
from .evaluation import ConfusionMatrix, miou
from .exceptions import ContractError, DivergenceError
from .losses import LossWeights, TVConfig, class_frequencies, compute_losses
from .pointcloud import IGNORE_ID, LabelArray, PointCloud
from .tensor import Tensor, no_grad, ops


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the published schedule."""

    epochs: int = 50
    batch_size: int = 4
    max_lr: float = 0.004
    div_factor: float = 10.0
    anneal_fraction: float = 0.3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    one_cycle: bool = True
    seed: int = 0
    max_steps: int | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    tv: TVConfig = field(default_factory=TVConfig)
    lovasz_classes: str = "present"
    class_weighting: bool = True
    augment: AugmentConfig | None = None
    validate_every: int = 1
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if not self.max_lr > 0:
            raise ContractError("max_lr must be positive")
        if self.validate_every < 1:
            raise ContractError("validate_every must be >= 1")
        if self.div_factor < 1 or not 0 <= self.anneal_fraction <= 1:
            raise ContractError("div_factor must be >= 1 and anneal_fraction in [0, 1]")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place update: ``p *= 1 - lr * wd`` then a bias-corrected Adam step.

    ``params`` maps names to tensors (or arrays); only names present in
    ``grads`` are touched.
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        data = p.data if isinstance(p, Tensor) else p
        g = np.asarray(g)
        if g.shape != data.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            data *= 1.0 - lr * weight_decay
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(data.dtype)
    return state


def one_cycle_lr(step: int, total_steps: int, max_lr: float = 0.004, div_factor: float = 10.0,
                 anneal_fraction: float = 0.3) -> float:
    """Linear warm-up from ``max_lr / div_factor`` then cosine decay to 0.

    The warm-up covers the first ``1 - anneal_fraction`` of the steps; the
    last step returns 0.
    """
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    start = max_lr / div_factor
    last = total_steps - 1
    if last == 0:
        return start
    peak = (1.0 - anneal_fraction) * last
    if step <= peak:
        return start + (max_lr - start) * (step / peak if peak > 0 else 1.0)
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * (step - peak) / (last - peak)))


# ----------------------------------------------------------------------------


def pixel_labels(frame: M.FrameInputs, labels: np.ndarray, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Label of each pixel's winning point; empty pixels get ``ignore_id``."""
    out = np.full(frame.winner.shape, ignore_id, dtype=np.int64)
    ok = frame.winner >= 0
    out[ok] = np.asarray(labels)[frame.winner[ok]]
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    log: list
    validation: list
    best_miou: float
    steps: int


def _snapshot(params: dict) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in params.items()}


def predict_points(params, cfg: M.ModelConfig, frames: Sequence[M.FrameInputs],
                   batch_size: int = 8) -> list:
    """Per-point argmax labels (inference-mode batch norm)."""
    preds = []
    with no_grad():
        for i in range(0, len(frames), batch_size):
            out = M.forward_frames(frames[i:i + batch_size], params, cfg, training=False)
            preds.extend(np.argmax(t.data, axis=1) for t in out.point_logits)
    return preds


def evaluate_frames(params, cfg: M.ModelConfig, frames, labels, batch_size: int = 8):
    cm = ConfusionMatrix(cfg.num_classes)
    for pred, lab in zip(predict_points(params, cfg, frames, batch_size), labels):
        cm.accumulate(pred, lab)
    return cm


def train(dataset: Sequence[tuple[PointCloud, LabelArray]], cfg: TrainConfig,
          validation: Sequence[tuple[PointCloud, LabelArray]] | None = None,
          params: dict | None = None,
          on_step: Callable[[str], None] | None = None) -> TrainResult:
    """Optimize the model on ``dataset``.

    Each step processes ``batch_size`` frames in a fixed order within an
    epoch and minimizes the mean of their weighted losses. After every epoch
    the model is scored on ``validation`` (the training set when omitted)
    and the parameters with the best mIoU are kept.
    """
    if not dataset:
        raise ContractError("empty training set")
    mcfg = cfg.model
    mcfg.check_image(mcfg.projection.height, mcfg.projection.width)
    if params is None:
        params = M.init_params(mcfg, cfg.seed)
    M.check_params(params, mcfg)
    labels = [lab.semantic for _, lab in dataset]
    stats = class_frequencies(labels, mcfg.num_classes) if cfg.class_weighting else None
    base_frames = [M.prepare_frame(c, mcfg) for c, _ in dataset]
    val_set = validation if validation is not None else dataset
    val_frames = [M.prepare_frame(c, mcfg) for c, _ in val_set]
    val_labels = [lab.semantic for _, lab in val_set]

    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    trainable = [k for k, v in params.items() if v.requires_grad]
    state = AdamState()
    log: list[str] = []
    val_log: list[str] = []
    best = _snapshot(params)
    best_miou = -math.inf
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        for start in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = list(range(start, min(start + cfg.batch_size, n)))
            frames, frame_labels = [], []
            for i in idx:
                if cfg.augment is None:
                    frames.append(base_frames[i])
                    frame_labels.append(labels[i])
                else:
                    rng = frame_rng(cfg.seed, step * n + i)
                    cloud, lab = augment_pipeline(dataset[i][0], dataset[i][1], cfg.augment, rng)
                    frames.append(M.prepare_frame(cloud, mcfg))
                    frame_labels.append(lab.semantic)
            lr = (one_cycle_lr(step, total, cfg.max_lr, cfg.div_factor, cfg.anneal_fraction)
                  if cfg.one_cycle else cfg.max_lr)
            out = M.forward_frames(frames, params, mcfg, training=True)
            terms = []
            for b, (frame, lab) in enumerate(zip(frames, frame_labels)):
                probs = ops.softmax(ops.getitem(out.pixel_logits, b), axis=0)
                h, w = mcfg.projection.height, mcfg.projection.width
                target = pixel_labels(frame, lab).reshape(h, w)
                terms.append(compute_losses(probs, target, frame.valid_mask.reshape(h, w), stats,
                                            cfg.loss_weights, cfg.tv, cfg.lovasz_classes))
            scale = 1.0 / len(terms)
            loss = ops.mul(ops.add_n([t.total for t in terms]), scale)
            parts = {key: sum(getattr(t, key).item() for t in terms) * scale
                     for key in ("wce", "lovasz", "tv")}
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at step {step} (epoch {epoch}): {parts}")
            loss.backward()
            grads = {k: params[k].grad for k in trainable if params[k].grad is not None}
            adam_step(params, grads, state, lr, cfg.weight_decay, cfg.betas, cfg.adam_eps)
            line = (f"step={step} lr={_fmt(lr)} wce={_fmt(parts['wce'])} ls={_fmt(parts['lovasz'])} "
                    f"tv={_fmt(parts['tv'])} total={_fmt(loss.item())}")
            log.append(line)
            if on_step is not None:
                on_step(line)
            step += 1
        last_epoch = epoch == cfg.epochs - 1 or step >= total
        if (epoch + 1) % cfg.validate_every and not last_epoch:
            continue
        cm = evaluate_frames(params, mcfg, val_frames, val_labels, cfg.batch_size)
        score = miou(cm)
        val_log.append(f"epoch={epoch} step={step} miou={_fmt(score)} accuracy={_fmt(cm.accuracy())}")
        if score > best_miou:
            best_miou, best = score, _snapshot(params)
    return TrainResult(params, best, log, val_log, best_miou, step)
