"""Checkpoint persistence for trainers (standalone models and supernets).

A checkpoint holds the genotype, every named parameter, the optimizer's
momentum buffers, the trainer RNG state and the iteration counter, so a
resumed run continues exactly where the saved one stopped.
"""

from __future__ import annotations

import numpy as np

from . import io
from .arch import Genotype
from .layers import ViT
from .nas.spos import TrainConfig, Trainer
from .nas.supernet import Supernet

MAGIC = b"PSVL"
VERSION = 1
KINDS = ("vit", "supernet")


class CheckpointError(ValueError):
    """Checkpoint does not fit the model or file it is loaded into."""

    def __init__(self, code, message):
        self.code = code
        super().__init__(f"{code}: {message}")


def _kind(model):
    return "supernet" if isinstance(model, Supernet) else "vit"


def encode_trainer(trainer: Trainer, run_config=None) -> bytes:
    meta = {
        "kind": _kind(trainer.model),
        "iteration": trainer.iteration,
        "rng_state": trainer.rng.bit_generator.state,
        "train_config": trainer.cfg.to_dict(),
        "fixed_path": None if trainer.fixed_path is None else "".join(c.value for c in trainer.fixed_path),
        "run_config": run_config or {},
    }
    tensors = {}
    for name, p in sorted(trainer.model.named_parameters()):
        tensors[f"param/{name}"] = p.data
    for name, buf in sorted(trainer.optimizer.state_dict().items()):
        tensors[f"optim/{name}"] = buf
    return io.encode(MAGIC, VERSION, [trainer.model.genotype.to_dict(), meta], tensors)


def save(path, trainer: Trainer, run_config=None) -> bytes:
    data = encode_trainer(trainer, run_config)
    with open(path, "wb") as f:
        f.write(data)
    return data


def read(path):
    """Return ``(genotype, meta, params, optim_state)`` without building a model."""
    with open(path, "rb") as f:
        buf = f.read()
    return decode(buf)


def decode(buf):
    try:
        blobs, tensors = io.decode(buf, MAGIC, VERSION)
    except io.FormatError as exc:
        raise CheckpointError(exc.code, str(exc)) from exc
    if len(blobs) != 2:
        raise CheckpointError("TRUNCATED", f"expected 2 JSON blobs, found {len(blobs)}")
    genotype = Genotype.from_dict(blobs[0])
    meta = blobs[1]
    if meta.get("kind") not in KINDS:
        raise CheckpointError("BAD_KIND", f"unknown model kind {meta.get('kind')!r}")
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    optim = {k[len("optim/") :]: v for k, v in tensors.items() if k.startswith("optim/")}
    return genotype, meta, params, optim


def build_model(genotype, kind, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    return Supernet(genotype, rng) if kind == "supernet" else ViT(genotype, rng)


def _load_params(model, params):
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))[:3]
        extra = sorted(set(params) - set(own))[:3]
        raise CheckpointError("SHAPE_MISMATCH", f"parameter names differ: missing={missing} unexpected={extra}")
    for name, arr in params.items():
        if own[name].shape != arr.shape:
            raise CheckpointError("SHAPE_MISMATCH", f"{name}: file {arr.shape} vs model {own[name].shape}")
        own[name].data[...] = arr


def load_into(trainer: Trainer, path):
    """Restore a checkpoint into an existing trainer (its genotype must match)."""
    genotype, meta, params, optim = read(path)
    if genotype != trainer.model.genotype:
        raise CheckpointError("GENOTYPE_MISMATCH", "checkpoint genotype differs from the model being restored")
    if meta["kind"] != _kind(trainer.model):
        raise CheckpointError("GENOTYPE_MISMATCH", f"checkpoint holds a {meta['kind']}, model is a {_kind(trainer.model)}")
    _load_params(trainer.model, params)
    trainer.optimizer.load_state_dict(optim)
    trainer.rng.bit_generator.state = meta["rng_state"]
    trainer.iteration = int(meta["iteration"])
    return meta


def load_trainer(path):
    """Rebuild model and trainer from a checkpoint; returns ``(trainer, meta)``."""
    genotype, meta, params, optim = read(path)
    model = build_model(genotype, meta["kind"])
    _load_params(model, params)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    trainer = Trainer(model, TrainConfig(**meta["train_config"]), rng, meta.get("fixed_path"))
    trainer.optimizer.load_state_dict(optim)
    trainer.iteration = int(meta["iteration"])
    return trainer, meta


def load_model(path):
    """Just the model (weights restored); returns ``(model, meta)``."""
    genotype, meta, params, _ = read(path)
    model = build_model(genotype, meta["kind"])
    _load_params(model, params)
    return model, meta
