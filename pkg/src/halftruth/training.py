"""Composite loss, AdamW, gradient clipping, LR schedule and the training loop."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd.tensor import Tensor, make_node, no_grad
from .corpus import Label, Manifest, atomic_write_bytes, mix_seed
from .features import AugmentConfig, FeatureSet, augment, read_cache
from .models import CAFNet, MFAAN, ModelOutput, model_config_dict, probabilities
from .nn import Module, checkpoint_bytes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    aux_coeff: float = 0.4
    temp_coeff: float = 0.3
    class_weights: tuple[float, float, float] = (1.622, 0.811, 0.568)
    mfaan_class_weights: tuple[float, float] = (2.0, 1.0)

    def __post_init__(self):
        if min(self.aux_coeff, self.temp_coeff, *self.class_weights, *self.mfaan_class_weights) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 1e-4
    clip_norm: float | None = 1.0
    patience: int = 10
    max_epochs: int = 15
    seed: int = 42
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    augment: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0 or self.max_epochs < 1:
            raise ValueError("invalid training configuration")
        if self.patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience must be >= 1")


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# losses


def weighted_cross_entropy(logits: Tensor, labels, class_weights) -> Tensor:
    """Class-weighted cross-entropy, normalised by the sum of the sample weights."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    C = z.shape[-1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(labels))
    nll = lse - shifted[rows, labels]
    total_w = w.sum()
    value = np.asarray((w * nll).sum() / total_w, dtype=z.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (((g * (w / total_w))[:, None] * p).astype(z.dtype),)

    return make_node(value, (logits,), bw, "weighted_cross_entropy")


def boundary_mse(pred: Tensor, truth, ht_mask) -> Tensor:
    """MSE over the half-truth rows only; a detached 0 when there are none."""
    mask = np.asarray(ht_mask, dtype=bool)
    if not mask.any():
        return Tensor(np.zeros((), dtype=pred.dtype))
    truth = np.nan_to_num(np.asarray(truth, dtype=np.float64))
    diff = (pred.data - truth) * mask[:, None]
    n = 2 * int(mask.sum())
    value = np.asarray((diff**2).sum() / n, dtype=pred.dtype)
    return make_node(value, (pred,), lambda g: ((2.0 * g * diff / n).astype(pred.dtype),), "boundary_mse")


def combine_losses(l_cls, l_aux, l_temp, weights: LossWeights = LossWeights()):
    """``L_cls + aux_coeff * L_aux + temp_coeff * L_temp`` on floats or Tensors."""
    if isinstance(l_cls, Tensor):
        from .autograd import ops

        return ops.add(ops.add(l_cls, ops.mul(l_aux, weights.aux_coeff)), ops.mul(l_temp, weights.temp_coeff))
    return l_cls + weights.aux_coeff * l_aux + weights.temp_coeff * l_temp


def composite_loss(output: ModelOutput, labels, boundaries, weights: LossWeights = LossWeights()):
    """Total CAFNet loss plus its three float components."""
    labels = np.asarray(labels)
    l_cls = weighted_cross_entropy(output.main_logits, labels, weights.class_weights)
    l_aux = weighted_cross_entropy(output.aux_logits, labels, weights.class_weights)
    l_temp = boundary_mse(output.boundaries, boundaries, labels == Label.HALF_TRUTH)
    total = combine_losses(l_cls, l_aux, l_temp, weights)
    return total, {"cls": float(l_cls.data), "aux": float(l_aux.data), "temp": float(l_temp.data)}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(params, grads, states, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update, in place on the parameter arrays.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """
    b1, b2 = betas
    for i, (p, g) in enumerate(zip(params, grads)):
        st = states[i]
        if st.m.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ValueError(f"optimizer state shape {st.m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(p)
        st.step += 1
        st.m *= b1
        st.m += (1 - b1) * g
        st.v *= b2
        st.v += (1 - b2) * g * g
        m_hat = st.m / (1 - b1**st.step)
        v_hat = st.v / (1 - b2**st.step)
        update = m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p
        p -= (lr * update).astype(p.dtype)


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Tensor]]
    lr: float

    def size(self) -> int:
        return int(sum(p.size for _, p in self.params))


class AdamW:
    def __init__(self, groups, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if isinstance(groups, Module):
            raise TypeError("pass parameter groups, e.g. [ParamGroup('all', list(model.named_parameters()), lr)]")
        self.groups = list(groups)
        self.weight_decay, self.betas, self.eps = weight_decay, betas, eps
        self.state = {
            name: AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for g in self.groups for name, p in g.params
        }

    def set_lr(self, lr):
        for g in self.groups:
            g.lr = lr

    def scale_lr(self, factor: float):
        for g in self.groups:
            g.lr *= factor

    def step(self):
        for g in self.groups:
            names = [n for n, _ in g.params]
            adamw_step(
                [p.data for _, p in g.params],
                [p.grad for _, p in g.params],
                [self.state[n] for n in names],
                g.lr,
                self.weight_decay,
                self.betas,
                self.eps,
            )


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Scale all gradients by ``min(1, max_norm / (norm + 1e-12))``; returns the scale."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    scale = min(1.0, max_norm / (norm + 1e-12))
    if scale < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return scale


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a new best (lower) metric."""

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 3):
        self.lr, self.factor, self.patience = lr, factor, patience
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def finetune_param_groups(model: Module, backbone_lr: float = 1e-5, head_lr: float = 1e-4) -> list[ParamGroup]:
    """Split parameters into a slow backbone group and a fast head group."""
    heads = getattr(model, "HEAD_MODULES", ("fc1", "fc2"))
    backbone, head = [], []
    for name, p in model.named_parameters():
        (head if any(name == h or name.startswith(h + ".") for h in heads) else backbone).append((name, p))
    groups = [ParamGroup("backbone", backbone, backbone_lr), ParamGroup("heads", head, head_lr)]
    assigned = sum(len(g.params) for g in groups)
    if assigned != len(list(model.named_parameters())):
        raise ValueError("some parameters were not assigned to a group")
    return groups


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    mfcc: np.ndarray  # [N, 40, 251]
    lfcc: np.ndarray
    chroma: np.ndarray  # [N, 12, 251]
    labels: np.ndarray  # [N]
    boundaries: np.ndarray  # [N, 2], NaN where absent
    paths: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.mfcc[idx], self.lfcc[idx], self.chroma[idx], self.labels[idx], self.boundaries[idx],
            [self.paths[i] for i in idx] if self.paths else [],
        )

    def binary(self) -> "Dataset":
        """HalfTruth folded into Fake for two-class training."""
        labels = np.where(self.labels == Label.HALF_TRUTH, Label.FAKE, self.labels)
        return Dataset(self.mfcc, self.lfcc, self.chroma, labels, self.boundaries, self.paths)

    @classmethod
    def from_features(cls, features: list[FeatureSet], labels, boundaries, paths=()):
        return cls(
            np.stack([f.mfcc for f in features]),
            np.stack([f.lfcc for f in features]),
            np.stack([f.chroma for f in features]),
            np.asarray(labels, dtype=np.int64),
            np.asarray(boundaries, dtype=np.float64).reshape(-1, 2),
            list(paths),
        )


def cache_path(cache_dir, rel_path: str) -> Path:
    return Path(cache_dir) / Path(rel_path).with_suffix(".caff")


def load_dataset(manifest: Manifest, cache_dir) -> Dataset:
    missing = [rel for rel, _ in manifest.entries if not cache_path(cache_dir, rel).exists()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} feature caches missing, e.g. {missing[:3]}")
    feats = [read_cache(cache_path(cache_dir, rel)) for rel, _ in manifest.entries]
    return Dataset.from_features(feats, manifest.labels(), manifest.boundaries(), [rel for rel, _ in manifest.entries])


# ---------------------------------------------------------------------------
# loop


def _deterministic(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _batch_loss(model, batch: Dataset, weights: LossWeights):
    if isinstance(model, CAFNet):
        out = model(batch.mfcc, batch.lfcc, batch.chroma)
        loss, _ = composite_loss(out, batch.labels, batch.boundaries, weights)
        return loss, out.main_logits
    logits = model(batch.mfcc, batch.lfcc, batch.chroma)
    return weighted_cross_entropy(logits, batch.labels, weights.mfaan_class_weights), logits


@dataclass
class Predictions:
    probs: np.ndarray  # [N, C]
    boundaries: np.ndarray | None  # [N, 2] for CAFNet
    loss: float

    @property
    def predicted(self) -> np.ndarray:
        return self.probs.argmax(axis=1)


def predict(model: Module, data: Dataset, batch_size: int = 64, weights: LossWeights = LossWeights()) -> Predictions:
    """Eval-mode inference; the mode of ``model`` is restored afterwards."""
    was_training = model.training
    model.eval()
    probs, bounds, loss_sum, weight_sum = [], [], 0.0, 0.0
    try:
        with no_grad():
            for s in range(0, len(data), batch_size):
                batch = data.subset(np.arange(s, min(s + batch_size, len(data))))
                if isinstance(model, CAFNet):
                    out = model(batch.mfcc, batch.lfcc, batch.chroma)
                    loss, _ = composite_loss(out, batch.labels, batch.boundaries, weights)
                    logits = out.main_logits
                    bounds.append(out.boundaries.data.astype(np.float64))
                else:
                    logits = model(batch.mfcc, batch.lfcc, batch.chroma)
                    loss = weighted_cross_entropy(logits, batch.labels, weights.mfaan_class_weights)
                probs.append(probabilities(logits))
                loss_sum += float(loss.data) * len(batch)
                weight_sum += len(batch)
    finally:
        model.train(was_training)
    return Predictions(np.concatenate(probs), np.concatenate(bounds) if bounds else None, loss_sum / weight_sum)


def config_hash(model: Module, config: TrainConfig) -> str:
    blob = json.dumps({"model": model_config_dict(model), "train": asdict(config)}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FitResult:
    log: list[dict]
    best_epoch: int
    best_val_acc: float
    best_state: dict[str, np.ndarray]
    steps: int


def fit(
    model: Module,
    train: Dataset,
    val: Dataset,
    config: TrainConfig = TrainConfig(),
    weights: LossWeights = LossWeights(),
    groups: list[ParamGroup] | None = None,
    checkpoint: str | Path | None = None,
    log_path: str | Path | None = None,
    augment_config: AugmentConfig | None = None,
) -> FitResult:
    """Train with early stopping on validation accuracy; restores the best weights.

    An epoch counts as an improvement when validation accuracy rises, or
    stays equal while validation loss falls; ``patience`` epochs without
    one end the run.

    MFAAN runs get a plateau LR schedule on validation loss; CAFNet runs use a
    constant LR with gradient-norm clipping. ``groups`` overrides the single
    default parameter group (used for layer-wise fine-tuning).
    """
    is_cafnet = isinstance(model, CAFNet)
    if isinstance(model, MFAAN):
        train, val = train.binary(), val.binary()
    groups = groups or [ParamGroup("all", list(model.named_parameters()), config.lr)]
    opt = AdamW(groups, weight_decay=config.weight_decay)
    scheduler = None if is_cafnet else PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience)
    aug_cfg = augment_config or AugmentConfig()
    model.set_rng(np.random.default_rng(mix_seed(config.seed, 0xD50)))
    chash = config_hash(model, config)

    records, best_acc, best_loss, best_epoch, best_state, bad, steps = [], -1.0, np.inf, -1, None, 0, 0
    log_file = Path(log_path) if log_path else None
    lines = []
    with _deterministic(config.deterministic):
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = np.random.default_rng(mix_seed(config.seed, epoch, 1)).permutation(len(train))
            aug_rng = np.random.default_rng(mix_seed(config.seed, epoch, 2))
            loss_sum = 0.0
            for s in range(0, len(order), config.batch_size):
                batch = train.subset(order[s : s + config.batch_size])
                if config.augment:
                    feats = [
                        augment(FeatureSet(batch.mfcc[i], batch.lfcc[i], batch.chroma[i]), aug_rng, aug_cfg)
                        for i in range(len(batch))
                    ]
                    batch = Dataset.from_features(feats, batch.labels, batch.boundaries)
                model.zero_grad()
                try:
                    loss, _ = _batch_loss(model, batch, weights)
                    loss.backward()
                except FloatingPointError as exc:
                    raise NumericalError(f"non-finite values at epoch {epoch}, step {steps + 1}: {exc}") from exc
                if is_cafnet and config.clip_norm is not None:
                    clip_grad_norm(model.parameters(), config.clip_norm)
                opt.step()
                steps += 1
                loss_sum += float(loss.data) * len(batch)
            preds = predict(model, val, config.batch_size, weights)
            val_acc = float(np.mean(preds.predicted == val.labels))
            lr_now = groups[-1].lr
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / len(train),
                "val_loss": preds.loss,
                "val_acc": val_acc,
                "lr": lr_now,
                "seconds": round(time.perf_counter() - t0, 3),
            }
            records.append(record)
            lines.append(json.dumps(record))
            log.info("epoch %d: %s", epoch, record)
            if log_file:
                atomic_write_bytes(log_file, ("\n".join(lines) + "\n").encode())
            if scheduler is not None:
                before = scheduler.lr
                # relative scaling keeps layer-wise group ratios intact
                opt.scale_lr(scheduler.step(preds.loss) / before)
            # accuracy first; among equal accuracies the lower validation loss wins
            if val_acc > best_acc or (val_acc == best_acc and preds.loss < best_loss):
                best_acc, best_loss, best_epoch, bad = val_acc, preds.loss, epoch, 0
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
                if checkpoint:
                    atomic_write_bytes(checkpoint, checkpoint_bytes(model))
                    side = {"config_hash": chash, "epoch": epoch, "val_acc": val_acc}
                    atomic_write_bytes(Path(str(checkpoint) + ".json"), (json.dumps(side) + "\n").encode())
            else:
                bad += 1
                if bad >= config.patience:
                    break
    model.load_state_dict(best_state)
    return FitResult(records, best_epoch, best_acc, best_state, steps)
