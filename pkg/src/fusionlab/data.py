"""Seeded synthetic image sets and the binary tensor container.

Container layout (all integers little-endian u32)::

    b"FLAB" | version | { name_len | name (utf-8) | rank | dims... | float32 data }*

Tensors follow one another until end of file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FLAB"
VERSION = 1

_SPLIT_CODES = {"train": 1, "test": 2, "pretrain": 3}


class FormatError(ValueError):
    """Wrong magic bytes or unsupported version."""


class CorruptionError(ValueError):
    """The file ends in the middle of a record."""


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    classes: int = 10
    image: int = 32
    channels: int = 1
    train_per_class: int = 16
    test_per_class: int = 50
    pretrain_per_class: int = 100
    seed: int = 0
    noise_std: float = 0.03
    noise_smoothing: float = 2.0
    pixel_noise_std: float = 0.01
    contrast: float = 0.05

    def __post_init__(self):
        if min(self.train_per_class, self.test_per_class, self.pretrain_per_class) < 1:
            raise ValueError("per-class counts must be >= 1")
        if self.noise_std < 0 or self.pixel_noise_std < 0:
            raise ValueError("noise std must be >= 0")
        if self.classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticDataset:
    spec: SyntheticDatasetSpec
    templates: np.ndarray
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    pretrain_x: np.ndarray
    pretrain_y: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_x, self.train_y
        if name == "test":
            return self.test_x, self.test_y
        if name == "pretrain":
            return self.pretrain_x, self.pretrain_y
        raise KeyError(name)


def _grid(side: int):
    ax = (np.arange(side) + 0.5) / side
    return np.meshgrid(ax, ax, indexing="ij")


def _pattern(rng: np.random.Generator, side: int, n_waves: int, n_blobs: int) -> np.ndarray:
    yy, xx = _grid(side)
    out = np.zeros((side, side))
    for _ in range(n_waves):
        freq = rng.uniform(1.0, 3.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.15, 0.85, 2)
        width = rng.uniform(0.08, 0.2)
        sign = rng.choice([-1.0, 1.0])
        out += 2.0 * sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    out -= out.mean()
    return out / (out.std() + 1e-12)


def class_templates(spec: SyntheticDatasetSpec) -> np.ndarray:
    """One (H, W, C) template per class: shared background plus a class-specific pattern."""
    side, ch = spec.image, spec.channels
    shared = _pattern(np.random.default_rng([spec.seed, 0]), side, 3, 2)
    out = np.empty((spec.classes, side, side, ch))
    for c in range(spec.classes):
        for k in range(ch):
            own = _pattern(np.random.default_rng([spec.seed, 1, c, k]), side, 2, 2)
            out[c, :, :, k] = 0.5 + 0.1 * shared + spec.contrast * own
    return np.clip(out, 0.0, 1.0)


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with wrap-around borders, rescaled to unit variance."""
    if sigma <= 0:
        return field
    k = _gauss_kernel(sigma)
    r = len(k) // 2
    out = field
    for axis in (0, 1):
        acc = np.zeros_like(out)
        for i, w in enumerate(k):
            acc += w * np.roll(out, i - r, axis=axis)
        out = acc
    # variance of a unit white field after the blur is (sum k^2)^2
    return out / np.sum(k**2)


def _sample(spec: SyntheticDatasetSpec, template: np.ndarray, split: str, index: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 2, _SPLIT_CODES[split], index])
    side, ch = spec.image, spec.channels
    noise = np.empty((side, side, ch))
    for k in range(ch):
        noise[:, :, k] = _smooth(rng.standard_normal((side, side)), spec.noise_smoothing)
    img = template + spec.noise_std * noise
    if spec.pixel_noise_std:
        img = img + spec.pixel_noise_std * rng.standard_normal((side, side, ch))
    return np.clip(img, 0.0, 1.0)


def generate_dataset(spec: SyntheticDatasetSpec) -> SyntheticDataset:
    """Deterministic in (spec.seed, split, sample index); splits use disjoint noise streams."""
    templates = class_templates(spec)

    def build(split: str, per_class: int):
        xs, ys = [], []
        for c in range(spec.classes):
            for j in range(per_class):
                index = c * per_class + j
                xs.append(_sample(spec, templates[c], split, index))
                ys.append(c)
        return np.stack(xs).astype(np.float32), np.asarray(ys, dtype=np.int64)

    train_x, train_y = build("train", spec.train_per_class)
    test_x, test_y = build("test", spec.test_per_class)
    pre_x, pre_y = build("pretrain", spec.pretrain_per_class)
    return SyntheticDataset(spec, templates.astype(np.float32), train_x, train_y, test_x, test_y,
                            pre_x, pre_y)


def nearest_centroid_accuracy(ds: SyntheticDataset) -> float:
    """Accuracy of classifying test images by the nearest class template."""
    t = ds.templates.reshape(len(ds.templates), -1)
    x = ds.test_x.reshape(len(ds.test_x), -1)
    d = ((x[:, None, :] - t[None, :, :]) ** 2).sum(-1)
    return float((d.argmin(1) == ds.test_y).mean())


# ---------------------------------------------------------------------------
# tensor container


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def read_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 8:
        raise CorruptionError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(data):
        name = "<unnamed>"
        try:
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise struct.error("name")
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 4 * count
            if end > len(data):
                raise struct.error("payload")
        except struct.error:
            raise CorruptionError(f"{path}: file truncated inside tensor {name!r}") from None
        out[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims).astype(np.float32)
        pos = end
    return out


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(state, path) -> None:
    """Write a :class:`~fusionlab.state.ModelState` to ``path``."""
    if not 0 <= state.seed < 2**24:
        raise ValueError("seed must fit exactly in float32 (0 <= seed < 2**24)")
    tensors = dict(state.tensors())
    tensors["meta/config"] = _encode_text(json.dumps(state.echo(), sort_keys=True))
    tensors["meta/seed"] = np.array([state.seed], dtype=np.float32)
    write_tensors(path, tensors)


def load_checkpoint(path):
    from .state import ModelState

    tensors = read_tensors(path)
    try:
        echo = json.loads(_decode_text(tensors.pop("meta/config")))
        seed = int(tensors.pop("meta/seed")[0])
    except KeyError as exc:
        raise FormatError(f"{path}: missing metadata tensor {exc}") from None
    return ModelState.from_echo(echo, tensors, seed)


def save_dataset(ds: SyntheticDataset, path) -> None:
    write_tensors(path, {
        "images/train": ds.train_x,
        "labels/train": ds.train_y.astype(np.float32),
        "images/test": ds.test_x,
        "labels/test": ds.test_y.astype(np.float32),
    })


def load_dataset_arrays(path) -> dict[str, np.ndarray]:
    t = read_tensors(path)
    for k in ("labels/train", "labels/test"):
        t[k] = t[k].astype(np.int64)
    return t
