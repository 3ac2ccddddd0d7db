"""Training loops (standalone and single-path supernet) and subnet evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as T
from ..optim import SGD, cosine_lr
from .supernet import Supernet, parse_path, path_str, sample_path


class TrainingAborted(RuntimeError):
    """Loss went non-finite; ``record`` holds the offending iteration."""

    def __init__(self, record):
        self.record = record
        super().__init__(f"non-finite loss at iteration {record['iteration']}: {record['loss']}")


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    warmup: int = 0

    def to_dict(self):
        return asdict(self)


class Trainer:
    """Owns model, optimizer, RNG and iteration counter: everything a resume needs.

    For a :class:`Supernet` each step samples one path uniformly (unless
    ``fixed_path`` pins it) and only that path's parameters receive updates.
    """

    def __init__(self, model, cfg: TrainConfig, rng, fixed_path=None):
        self.model = model
        self.cfg = cfg
        self.rng = rng
        self.is_supernet = isinstance(model, Supernet)
        self.fixed_path = parse_path(fixed_path, model.num_cells) if fixed_path is not None else None
        self.optimizer = SGD(
            model.named_parameters(), cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay
        )
        self.iteration = 0

    def _forward(self, images, path):
        x = T.Tensor(images)
        return self.model(x, path) if self.is_supernet else self.model(x)

    def step(self, images, labels):
        path = None
        if self.is_supernet:
            path = self.fixed_path if self.fixed_path is not None else sample_path(self.rng, self.model.num_cells)
        n = len(labels)
        idx = self.rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        self.optimizer.zero_grad()
        record = {"iteration": self.iteration}
        if path is not None:
            record["path"] = path_str(path)
        try:
            with np.errstate(all="ignore"):
                logits = self._forward(images[idx], path)
                loss = T.cross_entropy(logits, labels[idx], self.cfg.label_smoothing)
            record["loss"] = loss.item()
        except T.NumericError as exc:
            record.update(loss=float("nan"), error=str(exc))
        if not math.isfinite(record["loss"]):
            raise TrainingAborted(record)
        T.backward(loss)
        lr = cosine_lr(self.cfg.lr, self.iteration, self.cfg.iterations, self.cfg.warmup)
        self.optimizer.step(lr)
        record["lr"] = lr
        self.iteration += 1
        return record

    def run(self, images, labels, until=None, callback=None):
        """Step until ``until`` (default: cfg.iterations); returns the per-step log."""
        until = self.cfg.iterations if until is None else until
        log = []
        while self.iteration < until:
            rec = self.step(images, labels)
            log.append(rec)
            if callback is not None and callback(self, rec) is False:
                break
        return log


def train_supernet(supernet, images, labels, cfg: TrainConfig, rng, fixed_path=None):
    """Run SPOS training; returns ``(trainer, log)``."""
    trainer = Trainer(supernet, cfg, rng, fixed_path)
    log = trainer.run(images, labels)
    return trainer, log


def predict(forward, images, batch_size=256):
    preds = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward(T.Tensor(images[i : i + batch_size]))
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(forward, images, labels, batch_size=256):
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(forward, images, batch_size) == labels))


def evaluate_subnet(supernet: Supernet, path, images, labels, batch_size=256):
    """Accuracy of the subnet ``path`` using weights inherited from the supernet."""
    path = parse_path(path, supernet.num_cells)
    return accuracy(lambda x: supernet(x, path), images, labels, batch_size)
