"""Pretext tasks: rotation, jigsaw and a reduced selfie (masked-patch identification).

Each transform is a pixel map: output pixel j of an example copies flattened
source pixel ``index[j]`` (or is zero when the index is -1).  Samples carry
that map in ``aux["index"]`` so attacks can perturb the untransformed image and
differentiate through the transform.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import ModelParams, forward_task, ModelError

TASKS = ("selfie", "rotation", "jigsaw")
ROTATION_CLASSES = 4


class TaskError(Exception):
    pass


@dataclass
class TaskSample:
    """A batch of pretext instances (a single image is a batch of one)."""
    input: np.ndarray          # (N, C, H, W), transformed
    label: np.ndarray          # (N,) int
    task_id: str
    aux: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.label)

    def subset(self, idx) -> "TaskSample":
        aux = {k: (v[idx] if isinstance(v, np.ndarray) and v.ndim and len(v) == len(self) else v)
               for k, v in self.aux.items()}
        return TaskSample(self.input[idx], self.label[idx], self.task_id, aux)


@dataclass(frozen=True)
class PermutationSet:
    k: int
    perms: tuple               # tuple of tuples; perms[0] is the identity

    def __len__(self):
        return len(self.perms)

    def as_array(self) -> np.ndarray:
        return np.array(self.perms, dtype=np.int64)


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise TaskError(f"expected (C, H, W) or (N, C, H, W) image data, got shape {x.shape}")
    return x, False


def _apply_map(x: np.ndarray, index: np.ndarray) -> np.ndarray:
    flat = x.reshape(len(x), -1)
    valid = index >= 0
    out = np.take_along_axis(flat, np.where(valid, index, 0), axis=1) * valid
    return out.reshape(x.shape)


def _grid_map(shape: tuple, fn) -> np.ndarray:
    """Flattened index map obtained by transforming an image of pixel ids."""
    ids = np.arange(int(np.prod(shape))).reshape(shape)
    return fn(ids).reshape(-1)


# ---------------------------------------------------------------- rotation

def rotation_map(shape: tuple, r: int) -> np.ndarray:
    # 90 degrees counter-clockwise == transpose then flip rows
    def rot(ids):
        out = ids
        for _ in range(r % 4):
            out = np.swapaxes(out, -1, -2)[..., ::-1, :]
        return out
    return _grid_map(shape, rot)


def rotate(x: np.ndarray, r: int) -> np.ndarray:
    xb, single = _batch(x)
    if xb.shape[-1] != xb.shape[-2]:
        raise TaskError(f"rotation needs square images, got {xb.shape[-2:]}")
    out = _apply_map(xb, np.broadcast_to(rotation_map(xb.shape[1:], r), (len(xb), xb[0].size)))
    return out[0] if single else out


def make_rotation_sample(x, rng: np.random.Generator, labels=None) -> TaskSample:
    xb, _ = _batch(x)
    if xb.shape[-1] != xb.shape[-2]:
        raise TaskError(f"rotation needs square images, got {xb.shape[-2:]}")
    r = rng.integers(0, ROTATION_CLASSES, size=len(xb)) if labels is None else np.asarray(labels)
    maps = np.stack([rotation_map(xb.shape[1:], k) for k in range(ROTATION_CLASSES)])
    index = maps[r]
    return TaskSample(_apply_map(xb, index), r.astype(np.int64), "rotation", {"index": index})


# ---------------------------------------------------------------- jigsaw

def hamming(p, q) -> int:
    return int(np.sum(np.asarray(p) != np.asarray(q)))


def build_permutation_set(k: int, size: int, seed: int = 0, pool_size: int = 2000) -> PermutationSet:
    """Greedy max-min-Hamming permutation subset of the k*k patch positions.

    Starts from the identity and repeatedly adds the candidate whose minimum
    Hamming distance to the chosen set is largest (first candidate wins ties).
    Candidates are every permutation when there are at most 5040 of them,
    otherwise ``pool_size`` random draws; the seed shuffles candidate order.
    """
    n = k * k
    if k < 1:
        raise TaskError("grid side must be positive")
    total = math.factorial(n)
    if not 1 <= size <= total:
        raise TaskError(f"permutation set size must be in [1, {total}], got {size}")
    rng = np.random.default_rng(seed)
    identity = np.arange(n)
    if total <= 5040:
        pool = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        pool = pool[rng.permutation(len(pool))]
    else:
        pool = np.unique(np.stack([rng.permutation(n) for _ in range(max(pool_size, 4 * size))]), axis=0)
        pool = pool[rng.permutation(len(pool))]
    keep = ~np.all(pool == identity, axis=1)
    pool = pool[keep]
    if size > len(pool) + 1:
        raise TaskError(f"candidate pool too small for {size} permutations")
    chosen = [identity]
    mind = np.sum(pool != identity, axis=1)
    used = np.zeros(len(pool), dtype=bool)
    while len(chosen) < size:
        score = np.where(used, -1, mind)
        best = int(np.argmax(score))
        used[best] = True
        chosen.append(pool[best])
        mind = np.minimum(mind, np.sum(pool != pool[best], axis=1))
    return PermutationSet(k, tuple(tuple(int(v) for v in p) for p in chosen))


def jigsaw_map(shape: tuple, k: int, perm) -> np.ndarray:
    """Output patch j (row-major) takes source patch perm[j]."""
    c, h, w = shape
    if h % k or w % k:
        raise TaskError(f"image {h}x{w} is not divisible into a {k}x{k} grid")
    ph, pw = h // k, w // k

    def shuffle(ids):
        patches = ids.reshape(c, k, ph, k, pw).transpose(1, 3, 0, 2, 4).reshape(k * k, c, ph, pw)
        moved = patches[np.asarray(perm)]
        return moved.reshape(k, k, c, ph, pw).transpose(2, 0, 3, 1, 4)
    return _grid_map(shape, shuffle)


def jigsaw(x: np.ndarray, k: int, perm) -> np.ndarray:
    xb, single = _batch(x)
    out = _apply_map(xb, np.broadcast_to(jigsaw_map(xb.shape[1:], k, perm), (len(xb), xb[0].size)))
    return out[0] if single else out


def make_jigsaw_sample(x, perm_set: PermutationSet, rng: np.random.Generator, labels=None) -> TaskSample:
    xb, _ = _batch(x)
    maps = np.stack([jigsaw_map(xb.shape[1:], perm_set.k, p) for p in perm_set.perms])
    lab = rng.integers(0, len(perm_set), size=len(xb)) if labels is None else np.asarray(labels)
    index = maps[lab]
    return TaskSample(_apply_map(xb, index), lab.astype(np.int64), "jigsaw", {"index": index})


# ---------------------------------------------------------------- selfie

def patch_slices(shape: tuple, grid: int, pos: int) -> tuple:
    _, h, w = shape
    ph, pw = h // grid, w // grid
    r, c = divmod(pos, grid)
    return slice(r * ph, (r + 1) * ph), slice(c * pw, (c + 1) * pw)


def make_selfie_sample(x, num_masked: int, rng: np.random.Generator, grid: int = 4) -> TaskSample:
    """Mask ``num_masked`` patches; identify which candidate patch belongs at the target.

    The target is one of the masked positions.  Candidates are the original
    contents of all masked positions in shuffled order, so the decoys come
    from the same image.  The label is the candidate index holding the
    target's true content.
    """
    xb, _ = _batch(x)
    n, c, h, w = xb.shape
    if h % grid or w % grid:
        raise TaskError(f"image {h}x{w} is not divisible into a {grid}x{grid} grid")
    if not 1 <= num_masked < grid * grid:
        raise TaskError(f"num_masked must be in [1, {grid * grid - 1}], got {num_masked}")
    ph, pw = h // grid, w // grid
    positions = np.stack([rng.permutation(grid * grid)[:num_masked] for _ in range(n)])
    order = np.stack([rng.permutation(num_masked) for _ in range(n)])
    target = positions[:, 0]
    label = np.argmax(order == 0, axis=1)          # candidate slot of positions[:, 0]
    index = np.broadcast_to(np.arange(c * h * w), (n, c * h * w)).copy()
    ids = np.arange(c * h * w).reshape(c, h, w)
    candidates = np.empty((n, num_masked, c, ph, pw))
    for i in range(n):
        for slot, src in enumerate(positions[i][order[i]]):
            rs, cs = patch_slices((c, h, w), grid, src)
            candidates[i, slot] = xb[i, :, rs, cs]
        for p in positions[i]:
            rs, cs = patch_slices((c, h, w), grid, p)
            index[i, ids[:, rs, cs].reshape(-1)] = -1
    aux = {"index": index, "positions": positions, "target": target,
           "candidates": candidates, "grid": grid}
    return TaskSample(_apply_map(xb, index), label.astype(np.int64), "selfie", aux)


def _selfie_composites(sample: TaskSample, inputs: ad.Tensor) -> ad.Tensor:
    """Batch of (N * m) images: the masked input with candidate j pasted at the target."""
    aux = sample.aux
    n, c, h, w = inputs.shape
    cands = aux["candidates"]
    m = cands.shape[1]
    paste = np.zeros((n, m, c, h, w))
    for i in range(n):
        rs, cs = patch_slices((c, h, w), aux["grid"], int(aux["target"][i]))
        paste[i, :, :, rs, cs] = cands[i]
    both = ad.add(ad.reshape(inputs, (n, 1, c, h, w)), paste)
    return ad.reshape(both, (n * m, c, h, w))


# ---------------------------------------------------------------- dispatch

def head_width(task_id: str, perm_set: PermutationSet | None = None, grid: int = 4) -> int:
    if task_id == "rotation":
        return ROTATION_CLASSES
    if task_id == "jigsaw":
        if perm_set is None:
            raise TaskError("jigsaw head width needs a permutation set")
        return len(perm_set)
    if task_id == "selfie":
        return grid * grid
    raise TaskError(f"unknown task {task_id!r}")


@dataclass(frozen=True)
class TaskSpec:
    """Sampling parameters for one pretext task."""
    task_id: str
    jigsaw_k: int = 2
    jigsaw_size: int = 24
    perm_seed: int = 0
    selfie_grid: int = 4
    selfie_masked: int = 3

    def perm_set(self) -> PermutationSet | None:
        if self.task_id != "jigsaw":
            return None
        return _cached_perm_set(self.jigsaw_k, self.jigsaw_size, self.perm_seed)

    def width(self) -> int:
        return head_width(self.task_id, self.perm_set(), self.selfie_grid)

    def sample(self, x, rng: np.random.Generator) -> TaskSample:
        if self.task_id == "rotation":
            return make_rotation_sample(x, rng)
        if self.task_id == "jigsaw":
            return make_jigsaw_sample(x, self.perm_set(), rng)
        if self.task_id == "selfie":
            return make_selfie_sample(x, self.selfie_masked, rng, self.selfie_grid)
        raise TaskError(f"unknown task {self.task_id!r}")


_PERM_CACHE: dict = {}


def _cached_perm_set(k, size, seed):
    key = (k, size, seed)
    if key not in _PERM_CACHE:
        _PERM_CACHE[key] = build_permutation_set(k, size, seed)
    return _PERM_CACHE[key]


def task_input(sample: TaskSample, z) -> ad.Tensor:
    """Apply the sample's pixel map to base images ``z`` (differentiably)."""
    z = ad.as_tensor(z)
    out = ad.take_pixels(z, sample.aux["index"])
    return ad.reshape(out, z.shape)


def task_logits(params: ModelParams, sample: TaskSample, inputs=None) -> ad.Tensor:
    inputs = ad.as_tensor(sample.input if inputs is None else inputs)
    if sample.task_id not in params.heads:
        raise ModelError(f"model has no {sample.task_id!r} head (has {sorted(params.heads)})")
    if sample.task_id != "selfie":
        return forward_task(params, sample.task_id, inputs)
    n = inputs.shape[0]
    m = sample.aux["candidates"].shape[1]
    logits = forward_task(params, "selfie", _selfie_composites(sample, inputs))
    # score of candidate j = head logit at the target position for composite j
    target = np.repeat(sample.aux["target"], m)
    return ad.reshape(ad.pick(logits, target), (n, m))


def task_loss(params: ModelParams, sample: TaskSample, inputs=None, reduction: str = "mean") -> ad.Tensor:
    """Cross-entropy of the task head on (possibly replaced) sample inputs."""
    return ad.softmax_cross_entropy(task_logits(params, sample, inputs), sample.label, reduction)


def task_accuracy(params: ModelParams, sample: TaskSample, batch_size: int = 500) -> float:
    correct = 0
    for i in range(0, len(sample), batch_size):
        part = sample.subset(slice(i, i + batch_size))
        correct += int(np.sum(np.argmax(task_logits(params, part).data, axis=1) == part.label))
    return 100.0 * correct / max(len(sample), 1)
