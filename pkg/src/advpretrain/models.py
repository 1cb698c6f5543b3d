"""Small conv classifiers split into a shared encoder, pretext heads and a classifier head."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


INPUT_SHIFT = 0.5


class ModelError(Exception):
    pass


class ArchitectureMismatchError(ModelError):
    def __init__(self, expected: str, found: str):
        self.expected, self.found = expected, found
        super().__init__(f"architecture mismatch: model is {expected!r}, checkpoint is {found!r}")


@dataclass(frozen=True)
class Architecture:
    arch_id: str
    in_channels: int
    size: int
    conv_channels: tuple = (16, 32)
    embed_dim: int = 64

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels, self.size, self.size)

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * (self.size // 4) ** 2


ARCHITECTURES = {
    "desk16": Architecture("desk16", 3, 16),
    "desk8": Architecture("desk8", 3, 8),
    "desk32": Architecture("desk32", 3, 32),
}


def get_architecture(arch_id: str) -> Architecture:
    try:
        return ARCHITECTURES[arch_id]
    except KeyError:
        raise ModelError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}") from None


@dataclass
class ModelParams:
    arch_id: str
    seed: int
    encoder: dict
    heads: dict = field(default_factory=dict)       # task id -> {name: Tensor}
    classifier: dict | None = None

    @property
    def arch(self) -> Architecture:
        return get_architecture(self.arch_id)

    def named_tensors(self) -> dict:
        out = {f"encoder.{k}": v for k, v in self.encoder.items()}
        for task, head in self.heads.items():
            out.update({f"head.{task}.{k}": v for k, v in head.items()})
        if self.classifier is not None:
            out.update({f"classifier.{k}": v for k, v in self.classifier.items()})
        return out

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state(self, state: dict) -> list:
        """Overwrite matching tensors; return names of model tensors left untouched."""
        named = self.named_tensors()
        for name, arr in state.items():
            if name in named:
                if named[name].shape != tuple(arr.shape):
                    raise ModelError(f"{name}: shape {tuple(arr.shape)} does not match {named[name].shape}")
                named[name].data = np.array(arr, dtype=ad.DTYPE)
        return sorted(set(named) - set(state))

    def copy(self) -> "ModelParams":
        clone = lambda d: {k: Tensor(v.data.copy(), requires_grad=True) for k, v in d.items()}
        return ModelParams(self.arch_id, self.seed, clone(self.encoder),
                           {t: clone(h) for t, h in self.heads.items()},
                           None if self.classifier is None else clone(self.classifier))

    def num_classes(self, task_id: str | None = None) -> int:
        head = self.classifier if task_id is None else self.heads.get(task_id)
        if head is None:
            raise ModelError(f"no {'classifier' if task_id is None else task_id!r} head")
        return head["w"].shape[1]


def _rng_for(seed: int, component: str) -> np.random.Generator:
    # per-component streams: adding a head never shifts the encoder's draws
    return np.random.default_rng([seed, zlib.crc32(component.encode())])


def _kaiming(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def _linear(rng, n_in, n_out):
    return {"w": _kaiming(rng, (n_in, n_out), n_in), "b": Tensor(np.zeros(n_out), requires_grad=True)}


def init_encoder(arch: Architecture, seed: int) -> dict:
    rng = _rng_for(seed, "encoder")
    c1, c2 = arch.conv_channels
    return {
        "conv1.w": _kaiming(rng, (c1, arch.in_channels, 3, 3), arch.in_channels * 9),
        "conv1.b": Tensor(np.zeros(c1), requires_grad=True),
        "conv2.w": _kaiming(rng, (c2, c1, 3, 3), c1 * 9),
        "conv2.b": Tensor(np.zeros(c2), requires_grad=True),
        "proj.w": _kaiming(rng, (arch.flat_dim, arch.embed_dim), arch.flat_dim),
        "proj.b": Tensor(np.zeros(arch.embed_dim), requires_grad=True),
    }


def init_head(arch: Architecture, name: str, n_out: int, seed: int) -> dict:
    if n_out < 1:
        raise ModelError(f"head {name!r} needs a positive class count, got {n_out}")
    return _linear(_rng_for(seed, f"head.{name}"), arch.embed_dim, n_out)


def init_model(arch_id: str, class_counts: dict, seed: int) -> ModelParams:
    """Build a model; ``class_counts`` maps task ids (and "classifier") to output widths."""
    arch = get_architecture(arch_id)
    heads = {t: init_head(arch, t, n, seed) for t, n in class_counts.items() if t != "classifier"}
    clf = None
    if "classifier" in class_counts:
        clf = init_head(arch, "classifier", class_counts["classifier"], seed)
    return ModelParams(arch_id, seed, init_encoder(arch, seed), heads, clf)


def _as_batch(arch: Architecture, x):
    x = ad.as_tensor(x)
    if x.shape == arch.input_shape:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise ad.ShapeError("encode", x.shape, arch.input_shape)
    return x, False


def encode(params: ModelParams, x) -> Tensor:
    """Embedding of one (C, H, W) image or an (N, C, H, W) batch."""
    arch = params.arch
    xb, single = _as_batch(arch, x)
    e = params.encoder
    # fixed centring of [0, 1] pixels; there is no normalization layer
    h = ad.transpose(ad.sub(xb, INPUT_SHIFT), (0, 2, 3, 1))
    h = ad.avg_pool(ad.relu(ad.conv2d(h, e["conv1.w"], e["conv1.b"], channels_last=True)), channels_last=True)
    h = ad.avg_pool(ad.relu(ad.conv2d(h, e["conv2.w"], e["conv2.b"], channels_last=True)), channels_last=True)
    h = ad.reshape(h, (h.shape[0], -1))
    z = ad.relu(ad.add(ad.matmul(h, e["proj.w"]), e["proj.b"]))
    return ad.reshape(z, (arch.embed_dim,)) if single else z


def _apply_head(head: dict, z: Tensor) -> Tensor:
    return ad.add(ad.matmul(z, head["w"]), head["b"])


def forward_task(params: ModelParams, task_id: str, x) -> Tensor:
    if task_id not in params.heads:
        raise ModelError(f"model has no {task_id!r} head (has {sorted(params.heads)})")
    return _apply_head(params.heads[task_id], encode(params, x))


def forward_classifier(params: ModelParams, x) -> Tensor:
    if params.classifier is None:
        raise ModelError("model has no classifier head")
    return _apply_head(params.classifier, encode(params, x))


def trainable_set(params: ModelParams, finetune_kind: str) -> dict:
    """Tensors updated during fine-tuning: classifier only (partial) or encoder + classifier (full)."""
    if params.classifier is None:
        raise ModelError("fine-tuning needs a classifier head")
    kind = finetune_kind.lower()
    clf = {f"classifier.{k}": v for k, v in params.classifier.items()}
    if kind == "partial":
        return clf
    if kind == "full":
        return {**{f"encoder.{k}": v for k, v in params.encoder.items()}, **clf}
    raise ModelError(f"unknown fine-tuning kind {finetune_kind!r}")


def frozen_set(params: ModelParams, finetune_kind: str) -> dict:
    chosen = trainable_set(params, finetune_kind)
    return {k: v for k, v in params.named_tensors().items() if k not in chosen}


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    """Argmax classifier predictions for an (N, C, H, W) array."""
    out = [np.argmax(forward_classifier(params, x[i:i + batch_size]).data, axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)
