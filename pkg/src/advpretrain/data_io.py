"""Synthetic datasets, on-disk formats and deterministic splits.

All binary formats are little-endian with fixed-width fields.

Dataset file::

    magic  b"ASSP"
    u16    version (1)
    u32    N, C, H, W
    u16    flags: bit 0 labels present, bits 1-3 task id (0 none, 1 selfie,
           2 rotation, 3 jigsaw), bits 8-15 class count
    u8     N*C*H*W pixels, value = round(255 * x)
    u8     N labels (only when bit 0 is set)

Checkpoint file::

    magic  b"ASCK"
    u16    version (1)
    u32    header length L
    L      UTF-8 JSON header (sorted keys): arch_id, provenance, tensors
           [{name, shape, offset, count}]
    f32    concatenated tensor payload
    32     SHA-256 of everything before it

Bitmap file::

    magic  b"ASBM"
    u16    version (1)
    u32    bit count
    u8     packed bits, least significant bit first
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"ASSP"
CHECKPOINT_MAGIC = b"ASCK"
BITMAP_MAGIC = b"ASBM"
FORMAT_VERSION = 1
TASK_CODES = {None: 0, "selfie": 1, "rotation": 2, "jigsaw": 3}


class FormatError(Exception):
    """Wrong magic, unsupported version or malformed header."""


class TruncationError(FormatError):
    def __init__(self, what: str, expected: int, actual: int):
        self.expected, self.actual = expected, actual
        super().__init__(f"{what} truncated: expected {expected} bytes, found {actual}")


class IntegrityError(FormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray                 # (N, C, H, W) in [0, 1]
    labels: np.ndarray | None = None   # (N,) int
    num_classes: int = 0
    provenance: str = ""
    task_id: str | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ValueError("one label per image required")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       self.num_classes, self.provenance, self.task_id)


# ---------------------------------------------------------------- generation

# the first four families look different under every quarter turn, so the
# orientation of an image can only be read off its shape
SHAPE_FAMILIES = ("triangles", "tees", "ells", "domes", "bars", "discs")


def _shape_mask(kind: str, size: int, cy: float, cx: float, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    r = scale
    thick = max(r * 0.3, 0.7)
    if kind == "triangles":
        # apex up
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "tees":
        top = (np.abs(dy + r - thick) <= thick) & (np.abs(dx) <= r)
        return top | ((np.abs(dx) <= thick) & (dy >= -r) & (dy <= r))
    if kind == "ells":
        stem = (np.abs(dx + r - thick) <= thick) & (np.abs(dy) <= r)
        return stem | ((np.abs(dy - r + thick) <= thick) & (np.abs(dx) <= r))
    if kind == "domes":
        return (dy ** 2 + dx ** 2 <= r ** 2) & (dy <= 0.25 * r)
    if kind == "bars":
        gap = max(r * 0.55, 1.0)
        within_x = np.abs(dx) <= r
        return within_x & ((np.abs(dy - gap) <= thick * 0.75) | (np.abs(dy + gap) <= thick * 0.75))
    if kind == "discs":
        return dy ** 2 + dx ** 2 <= r ** 2
    raise ValueError(kind)


TEXTURE_SEED = 7919


def class_textures(classes: int, channels: int, size: int, block: int = 4) -> np.ndarray:
    """Fixed +-1 pattern of ``block`` x ``block`` cells per class, shape (classes, C, H, W).

    Cells rather than single pixels keep the pattern visible through pooling.
    """
    rng = np.random.default_rng([TEXTURE_SEED, classes, channels, size])
    cells = rng.choice([-1.0, 1.0], size=(classes, channels, size // block, size // block))
    return np.kron(cells, np.ones((block, block)))


def generate_synthetic_dataset(seed: int, n: int, classes: int = 4, size: int = 16,
                               channels: int = 3, noise: float = 0.05,
                               contrast: tuple = (0.25, 0.5), texture: float = 0.02,
                               shape_fidelity: float = 0.8, scale: tuple = (0.36, 0.46)) -> Dataset:
    """Balanced shape-family images on a flat, noisy background.

    Class c draws shape family c with probability ``shape_fidelity`` and a
    uniformly chosen other family otherwise.  Position, scale, colour and
    contrast are random per image.  Shapes are drawn upright, so rotation
    pretext tasks have to recognise them to tell the orientation.

    Each class also adds a fixed +-``texture`` sign pattern
    (:func:`class_textures`).  It predicts the label perfectly and is easy to
    learn, but with ``texture`` below the attack budget an eps = 8/255
    attacker can erase it, so it plays the role of a predictive but
    non-robust feature.  Standard training leans on it; adversarial training
    has to fall back on the shapes.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if not 2 <= classes <= len(SHAPE_FAMILIES):
        raise ValueError(f"classes must be in [2, {len(SHAPE_FAMILIES)}]")
    if not 0 <= shape_fidelity <= 1:
        raise ValueError("shape_fidelity must lie in [0, 1]")
    if texture < 0 or noise < 0:
        raise ValueError("texture and noise amplitudes must be non-negative")
    if size <= 0 or size % 4:
        raise ValueError("size must be a positive multiple of 4")
    if not 0 < scale[0] <= scale[1] < 0.5:
        raise ValueError("scale must satisfy 0 < lo <= hi < 0.5")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    images = np.empty((n, channels, size, size))
    patterns = texture * class_textures(classes, channels, size)
    for i, lab in enumerate(labels):
        base = rng.uniform(0.3, 0.6, size=channels)
        img = np.broadcast_to(base[:, None, None], (channels, size, size))
        r = rng.uniform(*scale) * size
        cy = rng.uniform(r, size - r)
        cx = rng.uniform(r, size - r)
        family = lab
        if rng.uniform() >= shape_fidelity:
            family = (lab + rng.integers(1, classes)) % classes
        mask = _shape_mask(SHAPE_FAMILIES[family], size, cy, cx, r)
        sign = rng.choice([-1.0, 1.0])
        colour = rng.uniform(0.4, 1.0, size=channels)
        colour = colour / np.abs(colour).max()
        amp = rng.uniform(*contrast)
        img = img + sign * amp * colour[:, None, None] * mask[None]
        img = img + patterns[lab] + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    # quantize once so generated data equals its serialized form
    images = np.round(images * 255) / 255
    return Dataset(images, labels, classes, provenance=f"synthetic:seed={seed}")


# ---------------------------------------------------------------- dataset I/O

def save_dataset(ds: Dataset, path) -> None:
    n, c, h, w = ds.images.shape
    if ds.num_classes > 255:
        raise ValueError("class count must fit in 8 bits")
    flags = (1 if ds.labels is not None else 0) | (TASK_CODES[ds.task_id] << 1) | (ds.num_classes << 8)
    header = DATASET_MAGIC + struct.pack("<HIIIIH", FORMAT_VERSION, n, c, h, w, flags)
    pixels = np.round(ds.images * 255).astype(np.uint8).tobytes()
    labels = b"" if ds.labels is None else ds.labels.astype(np.uint8).tobytes()
    Path(path).write_bytes(header + pixels + labels)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    head_len = 4 + struct.calcsize("<HIIIIH")
    if len(raw) < 4 or raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    if len(raw) < head_len:
        raise TruncationError("dataset header", head_len, len(raw))
    version, n, c, h, w, flags = struct.unpack("<HIIIIH", raw[4:head_len])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    has_labels = bool(flags & 1)
    codes = {v: k for k, v in TASK_CODES.items()}
    task = codes.get((flags >> 1) & 0b111)
    num_classes = flags >> 8
    npix = n * c * h * w
    expected = head_len + npix + (n if has_labels else 0)
    if len(raw) < expected:
        raise TruncationError("dataset", expected, len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=npix, offset=head_len)
    images = pixels.reshape(n, c, h, w).astype(np.float64) / 255
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=head_len + npix).astype(np.int64)
    return Dataset(images, labels, num_classes, provenance=str(path), task_id=task)


def split_indices(n: int, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n_train = int(round(ratio * n))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} examples at ratio {ratio} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_train_val(ds: Dataset, ratio: float = 0.9, seed: int = 0) -> tuple[Dataset, Dataset]:
    tr, va = split_indices(len(ds), ratio, seed)
    return ds.subset(tr), ds.subset(va)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    arch_id: str
    tensors: dict                      # name -> float32 array
    provenance: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION
    digest: str = ""

    @classmethod
    def from_params(cls, params, provenance: dict | None = None, prefixes: tuple = ()) -> "Checkpoint":
        tensors = {k: v.data.astype("<f4") for k, v in params.named_tensors().items()
                   if not prefixes or k.startswith(prefixes)}
        return cls(params.arch_id, tensors, dict(provenance or {}))


def _checkpoint_bytes(ck: Checkpoint) -> bytes:
    table, offset, chunks = [], 0, []
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(ck.tensors[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"arch_id": ck.arch_id, "provenance": ck.provenance, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<HI", ck.version, len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ck: Checkpoint, path) -> str:
    raw = _checkpoint_bytes(ck)
    Path(path).write_bytes(raw)
    ck.digest = raw[-32:].hex()
    return ck.digest


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    if len(raw) < 10:
        raise TruncationError("checkpoint", 10, len(raw))
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 10 + hlen:
        raise TruncationError("checkpoint header", 10 + hlen, len(raw))
    try:
        header = json.loads(raw[10:10 + hlen])
        count = sum(int(e["count"]) for e in header["tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        if len(raw) >= 42 and hashlib.sha256(raw[:-32]).digest() != raw[-32:]:
            raise IntegrityError(f"{path}: content digest mismatch") from None
        raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from None
    expected = 10 + hlen + 4 * count + 32
    if len(raw) < expected:
        raise TruncationError("checkpoint", expected, len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: content digest mismatch")
    payload = np.frombuffer(body, dtype="<f4", offset=10 + hlen)
    tensors = {}
    for entry in header["tensors"]:
        start, count = entry["offset"], entry["count"]
        if start + count > payload.size:
            raise FormatError(f"{path}: tensor {entry['name']} lies outside the payload")
        tensors[entry["name"]] = payload[start:start + count].reshape(entry["shape"]).copy()
    return Checkpoint(header["arch_id"], tensors, header["provenance"], version, digest.hex())


def load_into_model(params, ck: Checkpoint) -> list:
    """Copy checkpoint tensors into ``params``; return model tensors it did not cover."""
    from .models import ArchitectureMismatchError
    if ck.arch_id != params.arch_id:
        raise ArchitectureMismatchError(params.arch_id, ck.arch_id)
    named = params.named_tensors()
    return params.load_state({k: v.astype(np.float64) for k, v in ck.tensors.items() if k in named})


# ---------------------------------------------------------------- metrics

class MetricsWriter:
    """Append-only JSON-lines metrics stream, flushed after every epoch."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._last_epoch: dict = {}

    def write_epoch(self, scenario: str, epoch: int, metrics: dict) -> None:
        last = self._last_epoch.get(scenario)
        if last is not None and epoch <= last:
            raise ValueError(f"{scenario}: epoch {epoch} is not after {last}")
        self._last_epoch[scenario] = epoch
        with self.path.open("a") as fh:
            for name in sorted(metrics):
                fh.write(json.dumps({"scenario": scenario, "epoch": epoch, "metric": name,
                                     "value": metrics[name]}, sort_keys=True) + "\n")
            fh.flush()


def emit_metrics(records, path) -> None:
    """Write an iterable of (scenario, epoch, {metric: value}) tuples."""
    writer = MetricsWriter(path)
    for scenario, epoch, metrics in records:
        writer.write_epoch(scenario, epoch, metrics)


def read_metrics(path) -> list:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------- bitmaps

def save_bitmap(bits, path) -> None:
    bits = np.asarray(bits, dtype=bool)
    packed = np.packbits(bits, bitorder="little").tobytes()
    Path(path).write_bytes(BITMAP_MAGIC + struct.pack("<HI", FORMAT_VERSION, bits.size) + packed)


def load_bitmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != BITMAP_MAGIC:
        raise FormatError(f"{path}: not a bitmap file (bad magic)")
    if len(raw) < 10:
        raise TruncationError("bitmap header", 10, len(raw))
    version, n = struct.unpack("<HI", raw[4:10])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported bitmap version {version}")
    need = 10 + (n + 7) // 8
    if len(raw) < need:
        raise TruncationError("bitmap", need, len(raw))
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=10), bitorder="little", count=n)
    return bits.astype(bool)
