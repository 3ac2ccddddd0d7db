"""Synthetic class-conditional image data, plus on-disk persistence.

Each class renders an oriented sinusoidal grating (class-specific orientation,
frequency and colour, random phase) and a Gaussian blob near a class-specific
position, then adds pixel noise.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import io

DATA_MAGIC = b"PSVD"
DATA_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "data.bin"


class DatasetError(ValueError):
    def __init__(self, code, message):
        self.code = code
        super().__init__(f"{code}: {message}")


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 7
    num_classes: int = 10
    num_samples: int = 500
    image_size: int = 32
    channels: int = 3
    noise: float = 0.5
    blob_jitter: float = 3.0
    val_percent: int = 20

    def __post_init__(self):
        if self.num_classes <= 0 or self.num_samples % self.num_classes:
            raise DatasetError("UNBALANCED", "num_samples must be a positive multiple of num_classes")
        if self.image_size <= 0 or self.channels <= 0:
            raise DatasetError("BAD_SHAPE", "image_size and channels must be positive")
        if not 0 <= self.val_percent < 100:
            raise DatasetError("BAD_SPLIT", "val_percent must lie in [0, 100)")


@dataclass
class Dataset:
    images: np.ndarray  # [n, H, W, C] float64
    labels: np.ndarray  # [n] int64
    val_mask: np.ndarray  # [n] bool
    spec: dict

    @property
    def train(self):
        m = ~self.val_mask
        return self.images[m], self.labels[m]

    @property
    def val(self):
        return self.images[self.val_mask], self.labels[self.val_mask]

    @property
    def image_shape(self):
        return self.images.shape[1:]


def is_val_index(seed, index, val_percent):
    """Deterministic split by hashing (seed, index)."""
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % 100 < val_percent


def class_patterns(spec: SyntheticSpec):
    """Per-class rendering parameters, derived from the generator seed."""
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    k = spec.num_classes
    out = []
    for c in range(k):
        colour = rng.normal(size=spec.channels)
        colour /= np.linalg.norm(colour) + 1e-12
        blob_colour = rng.normal(size=spec.channels)
        blob_colour /= np.linalg.norm(blob_colour) + 1e-12
        out.append(
            {
                "orientation": np.pi * c / k,
                "frequency": 2.0 + (c % 3),
                "colour": colour,
                "blob_colour": blob_colour,
                "blob_centre": rng.uniform(0.25, 0.75, size=2) * spec.image_size,
            }
        )
    return out


def generate(spec: SyntheticSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s, dtype=np.float64), np.arange(s, dtype=np.float64), indexing="ij")
    patterns = class_patterns(spec)
    labels = np.repeat(np.arange(spec.num_classes), spec.num_samples // spec.num_classes)
    labels = rng.permutation(labels).astype(np.int64)
    images = np.empty((spec.num_samples, s, s, spec.channels))
    for i, c in enumerate(labels):
        p = patterns[c]
        theta, freq = p["orientation"], p["frequency"]
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / s + phase)
        cy, cx = p["blob_centre"] + rng.normal(0.0, spec.blob_jitter, size=2)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (s / 8) ** 2))
        img = 0.6 * wave[..., None] * p["colour"] + 1.0 * blob[..., None] * p["blob_colour"]
        images[i] = img + spec.noise * rng.normal(size=img.shape)
    val = np.array([is_val_index(spec.seed, i, spec.val_percent) for i in range(spec.num_samples)], dtype=bool)
    return Dataset(images, labels, val, asdict(spec))


def save_dataset(directory, ds: Dataset):
    os.makedirs(directory, exist_ok=True)
    counts = np.bincount(ds.labels, minlength=int(ds.labels.max()) + 1 if ds.labels.size else 0)
    manifest = {
        "version": DATA_VERSION,
        "spec": ds.spec,
        "num_samples": int(len(ds.labels)),
        "image_shape": list(ds.image_shape),
        "class_counts": [int(x) for x in counts],
        "num_train": int((~ds.val_mask).sum()),
        "num_val": int(ds.val_mask.sum()),
        "val_indices": [int(i) for i in np.flatnonzero(ds.val_mask)],
        "payload": PAYLOAD,
    }
    try:
        with open(os.path.join(directory, MANIFEST), "w") as f:
            f.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
        io.write(
            os.path.join(directory, PAYLOAD),
            DATA_MAGIC,
            DATA_VERSION,
            [{"num_samples": manifest["num_samples"]}],
            {"images": ds.images, "labels": ds.labels, "val_mask": ds.val_mask.astype(np.int64)},
        )
    except OSError as exc:
        raise DatasetError("IO_ERROR", f"cannot write dataset to {directory}: {exc}") from exc
    return manifest


def load_dataset(directory) -> Dataset:
    mpath = os.path.join(directory, MANIFEST)
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except OSError as exc:
        raise DatasetError("MISSING", f"no dataset manifest at {mpath}") from exc
    if manifest.get("version") != DATA_VERSION:
        raise DatasetError("VERSION_MISMATCH", f"manifest version {manifest.get('version')} != {DATA_VERSION}")
    _, tensors = io.read(os.path.join(directory, manifest["payload"]), DATA_MAGIC, DATA_VERSION)
    images, labels = tensors["images"], tensors["labels"]
    if len(labels) != manifest["num_samples"] or list(images.shape[1:]) != manifest["image_shape"]:
        raise DatasetError("MANIFEST_MISMATCH", "payload does not match its manifest")
    return Dataset(images, labels, tensors["val_mask"].astype(bool), manifest["spec"])


def load_image_folder(directory, image_size, val_percent=20, seed=0) -> Dataset:
    """8-bit RGB images, one sub-directory per class, resized to ``image_size``."""
    from PIL import Image

    classes = sorted(d for d in os.listdir(directory) if os.path.isdir(os.path.join(directory, d)))
    if not classes:
        raise DatasetError("EMPTY", f"no class directories under {directory}")
    images, labels = [], []
    for c, name in enumerate(classes):
        for fn in sorted(os.listdir(os.path.join(directory, name))):
            with Image.open(os.path.join(directory, name, fn)) as im:
                im = im.convert("RGB").resize((image_size, image_size))
                images.append(np.asarray(im, dtype=np.float64) / 127.5 - 1.0)
                labels.append(c)
    n = len(labels)
    val = np.array([is_val_index(seed, i, val_percent) for i in range(n)], dtype=bool)
    spec = {"source": os.path.abspath(directory), "classes": classes, "image_size": image_size, "seed": seed}
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), val, spec)
