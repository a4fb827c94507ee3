"""Adam, plateau learning-rate decay and the epoch loop."""

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_into, snapshot
from .data import make_batches
from .errors import ConfigError, OptimizerError, TrainingError


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    plateau_factor: float = 10.0
    plateau_patience: int = 1
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    max_epochs: int = 44
    seed: int = 0
    augment: bool = True
    pos_weight: bool = False
    head_init: str = "identity_start"
    variant: str = "densenet121"

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.plateau_factor < 1 or self.plateau_patience < 1:
            raise ConfigError("plateau_factor must be >= 1 and plateau_patience >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class MomentState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def _adam_update(value, grad, m, v, t, lr, cfg):
    """In-place Adam update of ``value``, ``m`` and ``v`` at step ``t``."""
    m *= cfg.beta1
    m += (1 - cfg.beta1) * grad
    v *= cfg.beta2
    v += (1 - cfg.beta2) * np.square(grad)
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    value -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def adam_step(param, grad, state, cfg, lr=None, name="param"):
    """One Adam step on a single tensor; returns ``(new_param, new_state)``."""
    if not np.all(np.isfinite(grad)):
        raise OptimizerError(f"non-finite gradient for {name}")
    value, m, v = param.copy(), state.m.copy(), state.v.copy()
    t = state.t + 1
    _adam_update(value, grad, m, v, t, cfg.lr if lr is None else lr, cfg)
    return value, MomentState(m, v, t)


class Adam:
    def __init__(self, params, cfg):
        self.cfg = cfg
        self.lr = cfg.lr
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self, params):
        for p in params:
            if not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"non-finite gradient for {p.name}")
        self.t += 1
        for p in params:
            _adam_update(p.value, p.grad, self.m[p.name], self.v[p.name], self.t, self.lr, self.cfg)

    def state_dict(self):
        return {
            "t": self.t,
            "lr": self.lr,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state):
        if set(state["m"]) != set(self.m) or set(state["v"]) != set(self.v):
            raise OptimizerError("optimizer state does not match the model parameters")
        self.t, self.lr = int(state["t"]), float(state["lr"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]


def lr_on_plateau(val_losses, current_lr, cfg):
    """Learning rate for the next epoch given the validation history.

    An epoch is bad unless it beats the best loss so far by more than
    ``plateau_threshold``. After ``plateau_patience`` consecutive bad epochs
    the rate drops by ``plateau_factor`` (floored at ``min_lr``) and the
    count restarts. Only a decay triggered by the latest epoch changes the
    rate returned here.
    """
    if not val_losses:
        raise ValueError("lr_on_plateau needs at least one completed epoch")
    best, bad, decay_now = val_losses[0], 0, False
    for loss in val_losses[1:]:
        decay_now = False
        if loss < best - cfg.plateau_threshold:
            best, bad = loss, 0
        else:
            bad += 1
            if bad >= cfg.plateau_patience:
                decay_now, bad = True, 0
    if decay_now:
        return max(current_lr / cfg.plateau_factor, cfg.min_lr)
    return current_lr


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    @property
    def train_losses(self):
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    def to_history(self):
        return {
            "train_loss": self.train_losses,
            "val_loss": self.val_losses,
            "lr": [e.lr for e in self.epochs],
        }

    @classmethod
    def from_history(cls, history):
        rows = zip(history.get("train_loss", []), history.get("val_loss", []), history.get("lr", []))
        return cls([EpochRecord(i + 1, tl, vl, lr, 0.0) for i, (tl, vl, lr) in enumerate(rows)])

    def to_csv(self):
        lines = ["epoch,train_loss,val_loss,lr,seconds"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.lr!r},{e.seconds:.3f}")
        return "\n".join(lines) + "\n"


@dataclass
class FitResult:
    best: object  # Checkpoint with the lowest validation loss, None if a resumed run never improved
    last: object
    log: TrainLog


def positive_weights(labels):
    pos = labels.sum(axis=0)
    neg = labels.shape[0] - pos
    return np.where(pos > 0, neg / np.maximum(pos, 1), 1.0).astype(np.float32)


def _loss_and_grad(model, images, meta, labels, pos_weight):
    logits = model.forward(images, meta, training=True)
    probs = nn.sigmoid(logits)
    loss = nn.bce_loss(probs, labels, pos_weight=pos_weight)
    dprobs = nn.bce_loss_backward(probs, labels, pos_weight=pos_weight)
    return loss, nn.sigmoid_backward(dprobs, logits)


def dataset_loss(model, dataset, batch_size=64, pos_weight=None):
    """Mean BCE over every entry of ``dataset`` in eval mode."""
    total = 0.0
    for i in range(0, len(dataset), batch_size):
        sl = slice(i, i + batch_size)
        probs = nn.sigmoid(model.forward(dataset.images[sl], dataset.meta[sl], training=False))
        total += nn.bce_loss(probs, dataset.labels[sl], pos_weight=pos_weight) * len(probs)
    return total / len(dataset)


def fit(model, train, val, cfg, *, config_echo=None, resume=None, on_epoch=None):
    """Train ``model`` for ``cfg.max_epochs`` epochs and track the best val loss.

    ``resume`` is a checkpoint carrying optimizer state; its weights are
    loaded into ``model`` and training continues from its epoch count.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("fit needs non-empty train and val sets")
    echo = dict(config_echo) if config_echo is not None else asdict(cfg)
    params = model.parameters()
    opt = Adam(params, cfg)
    log = TrainLog()
    start_epoch, best_loss, best = 0, float("inf"), None
    if resume is not None:
        load_into(model, resume)
        if resume.optimizer is None:
            raise TrainingError("cannot resume from a checkpoint without optimizer state")
        opt.load_state_dict(resume.optimizer)
        log = TrainLog.from_history(resume.history)
        start_epoch, best_loss = resume.epoch, resume.best_val_loss
    pos_weight = positive_weights(train.labels) if cfg.pos_weight else None

    for epoch in range(start_epoch, cfg.max_epochs):
        tic = time.perf_counter()
        lr_used = opt.lr
        total = 0.0
        for b, (images, meta, labels) in enumerate(make_batches(train, cfg.batch_size, cfg.seed, cfg.augment, epoch)):
            model.zero_grad()
            loss, dlogits = _loss_and_grad(model, images, meta, labels, pos_weight)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            model.backward(dlogits)
            opt.step(params)
            total += loss * len(images)
        train_loss = total / len(train)
        val_loss = dataset_loss(model, val, max(cfg.batch_size, 64), pos_weight)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        log.epochs.append(EpochRecord(epoch + 1, train_loss, val_loss, lr_used, time.perf_counter() - tic))
        opt.lr = lr_on_plateau(log.val_losses, opt.lr, cfg)
        if val_loss < best_loss:
            best_loss = val_loss
            best = snapshot(model, echo, epoch + 1, best_loss, history=log.to_history())
        if on_epoch is not None:
            on_epoch(log.epochs[-1])

    last = snapshot(model, echo, max(start_epoch, cfg.max_epochs), best_loss, opt, log.to_history())
    return FitResult(best, last, log)
