"""Soft-IoU training with Adam and milestone learning-rate decay."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Sample, pad_crop, random_flip, standardize
from .errors import CheckpointError, TrainingError
from .metrics import EvalReport, evaluate
from .model import LcaeNet, ModelConfig, predict
from .nn import functional as F
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.tape import Tape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "loss", "iou", "pd", "fa_e6")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    batch_size: int = 16
    lr0: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_factor: float = 0.1
    milestones: tuple = (200, 300)
    schedule: str = "step"  # or "poly"
    poly_power: float = 0.9
    seed: int = 0
    loss_epsilon: float = 1e-6
    crop_size: int = 256
    augment: bool = True
    eval_batch_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if list(self.milestones) != sorted(self.milestones) or any(m >= self.epochs for m in self.milestones):
            raise ValueError(f"milestones must be ascending and below epochs={self.epochs}")
        if self.schedule not in ("step", "poly"):
            raise ValueError("schedule must be 'step' or 'poly'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**raw)


# loss -------------------------------------------------------------------------

def soft_iou_loss(prob, target, eps: float = 1e-6) -> Tensor:
    """``1 - (sum(p t) + eps) / (sum(p) + sum(t) - sum(p t) + eps)`` over every pixel of the batch."""
    prob_shape = prob.shape
    target = np.asarray(target, dtype=prob.dtype if isinstance(prob, Tensor) else np.float64)
    if tuple(prob_shape) != target.shape:
        raise ValueError(f"prediction shape {tuple(prob_shape)} != target shape {target.shape}")
    inter = F.sum(F.mul(prob, target))
    union = F.sub(F.add(F.sum(prob), float(target.sum())), inter)
    return F.sub(1.0, F.div(F.add(inter, eps), F.add(union, eps)))


# optimiser --------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, config: TrainConfig) -> None:
    """Bias-corrected Adam, in place on ``params`` and ``state``.

    Parameters without a gradient entry are treated as having zero gradient.
    """
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if lr:
            p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step decay at each milestone, or polynomial decay when ``schedule == 'poly'``."""
    if config.schedule == "poly":
        return config.lr0 * (1 - epoch / config.epochs) ** config.poly_power
    return config.lr0 * config.decay_factor ** sum(1 for m in config.milestones if epoch >= m)


# batching ---------------------------------------------------------------------

def _prepare(sample: Sample, rng, config: TrainConfig, train: bool, size: int) -> Sample:
    sample = pad_crop(sample, rng, size, train=train)
    if train and config.augment:
        sample = random_flip(sample, rng)
    return sample


def _batch_arrays(samples: Sequence[Sample], raw: bool, dtype) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    x = np.stack([standardize(s.image) for s in samples])[:, None].astype(dtype)
    raw_x = np.stack([s.image for s in samples])[:, None] if raw else None
    y = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return x, raw_x, y


def predict_probs(net: LcaeNet, samples: Sequence[Sample], batch_size: int = 16) -> list[np.ndarray]:
    """Eval-mode probability maps at the configured input size (centre crop/pad)."""
    was_training = net.training
    net.eval()
    size = net.config.input_size[0]
    raw = net.config.lca_input == "raw"
    probs = []
    try:
        for i in range(0, len(samples), batch_size):
            chunk = [pad_crop(s, None, size, train=False) for s in samples[i:i + batch_size]]
            x, raw_x, _ = _batch_arrays(chunk, raw, net.dtype)
            probs.extend(net(x, lca_source=raw_x).data[:, 0])
    finally:
        net.train(was_training)
    return probs


def evaluate_model(net: LcaeNet, samples: Sequence[Sample], threshold: float = 0.5,
                   batch_size: int = 16) -> EvalReport:
    size = net.config.input_size[0]
    probs = predict_probs(net, samples, batch_size)
    gts = [pad_crop(s, None, size, train=False).mask for s in samples]
    return evaluate([predict(p, threshold) for p in probs], gts, allow_no_targets=True)


# loop -------------------------------------------------------------------------

@dataclass
class TrainResult:
    net: LcaeNet
    history: list = field(default_factory=list)  # one dict per epoch
    best_iou: float = -1.0
    best_epoch: int = -1
    best_state: dict | None = None


def save_training_state(path, net: LcaeNet, state: OptimizerState, epoch: int, extra: dict | None = None) -> None:
    arrays = {f"model/{k}": v for k, v in net.state_dict().items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.v.items()})
    meta = {"kind": "training_state", "model_config": net.config.to_dict(), "epoch": epoch,
            "adam_step": state.step, "dtype": net.dtype.name}
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def save_model(path, net: LcaeNet, extra: dict | None = None, state: dict | None = None) -> None:
    """Write model parameters and buffers (``state`` overrides the live ones)."""
    meta = {"kind": "model", "model_config": net.config.to_dict(), "dtype": net.dtype.name}
    meta.update(extra or {})
    save_checkpoint(path, state if state is not None else net.state_dict(), meta)


def load_model(path, dtype=None) -> tuple[LcaeNet, dict]:
    arrays, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: no model_config in checkpoint metadata")
    config = ModelConfig.from_dict(meta["model_config"])
    net = LcaeNet(config, dtype=dtype or meta.get("dtype", "float32"))
    if meta.get("kind") == "training_state":
        arrays = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    net.load_state_dict(arrays)
    return net, meta


def _resume(path, net: LcaeNet) -> tuple[OptimizerState, int, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "training_state":
        raise CheckpointError(f"{path}: not a training-state checkpoint")
    if meta["model_config"] != net.config.to_dict():
        raise CheckpointError(f"{path}: model config differs from the one being trained")
    net.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    state = OptimizerState(
        m={k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        step=int(meta["adam_step"]),
    )
    return state, int(meta["epoch"]) + 1, meta


def train_loop(net: LcaeNet, train_samples: Sequence[Sample], config: TrainConfig,
               eval_samples: Sequence[Sample] | None = None, out_dir=None, resume=None,
               progress=None) -> TrainResult:
    """Run ``config.epochs`` epochs of shuffled mini-batch training.

    Each epoch logs lr, mean batch loss and (when ``eval_samples`` is given)
    held-out IoU/Pd/Fa. With ``out_dir`` set, appends ``train_log.tsv``,
    writes ``best.ckpt`` (best held-out IoU), ``last.ckpt`` and
    ``state.ckpt`` (resumable). Shuffling and augmentation streams are derived
    from ``(seed, epoch)`` so a resumed run replays the same batches.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    size = net.config.input_size[0]
    if net.config.input_size != (size, size) or config.crop_size != size:
        raise ValueError(f"crop size {config.crop_size} must equal the square model input {net.config.input_size}")
    raw = net.config.lca_input == "raw"
    params = dict(net.named_parameters())
    opt = OptimizerState()
    start = 0
    result = TrainResult(net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        opt, start, meta = _resume(resume, net)
        result.best_iou = meta.get("best_iou", -1.0)
        result.best_epoch = meta.get("best_epoch", -1)
        if out is not None and (out / "best.ckpt").is_file():
            result.best_state, _ = load_checkpoint(out / "best.ckpt")
    log_path = out / "train_log.tsv" if out is not None else None
    if log_path is not None and (start == 0 or not log_path.exists()):
        log_path.write_text("\t".join(LOG_COLUMNS) + "\n")

    n = len(train_samples)
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        net.train()
        losses = []
        for b, first in enumerate(range(0, n, config.batch_size)):
            idx = order[first:first + config.batch_size]
            batch = [_prepare(train_samples[i], np.random.default_rng([config.seed, epoch, int(i)]),
                              config, True, size) for i in idx]
            x, raw_x, y = _batch_arrays(batch, raw, net.dtype)
            with Tape() as tape:
                prob = net(x, lca_source=raw_x)
                loss = soft_iou_loss(prob, y, config.loss_epsilon)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                    f"(samples {[train_samples[i].id for i in idx]})")
            grads = tape.backward(loss)
            adam_step(params, {k: grads[p] for k, p in params.items() if p in grads}, opt, lr, config)
            losses.append(value)

        row = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))}
        if eval_samples:
            report = evaluate_model(net, eval_samples, batch_size=config.eval_batch_size)
            row.update(iou=report.iou, pd=report.pd, fa_e6=report.fa_e6)
            if report.iou > result.best_iou:
                result.best_iou, result.best_epoch = report.iou, epoch
                result.best_state = net.state_dict()
                if out is not None:
                    save_model(out / "best.ckpt", net, {"epoch": epoch, "iou": report.iou})
        else:
            row.update(iou=float("nan"), pd=float("nan"), fa_e6=float("nan"))
        result.history.append(row)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(_format_row(row) + "\n")
        if out is not None:
            save_model(out / "last.ckpt", net, {"epoch": epoch})
            save_training_state(out / "state.ckpt", net, opt, epoch,
                                {"best_iou": result.best_iou, "best_epoch": result.best_epoch})
        log.info("epoch %d lr %.3g loss %.4f iou %.4f (%.1fs)", epoch, lr, row["loss"], row["iou"],
                 time.perf_counter() - t0)
        if progress is not None:
            progress(row)
    return result


def _format_row(row: dict) -> str:
    return "\t".join(f"{row[c]:.8g}" if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS)


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
