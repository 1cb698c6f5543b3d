"""PGD attacks, the diversity-regularized multi-task attack, and Gaussian augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ModelParams, forward_classifier
from .ssl_tasks import TaskSample, task_input, task_loss

GRAM_JITTER = 1e-12


class AttackError(Exception):
    pass


def parse_number(value) -> float:
    """Parse floats, ints and exact rationals such as "8/255"."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    text = str(value).strip()
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {value!r}") from None


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    norm: str = "linf"
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "epsilon", parse_number(self.epsilon))
        object.__setattr__(self, "alpha", parse_number(self.alpha))
        if self.epsilon < 0:
            raise AttackError("epsilon must be non-negative")
        if self.steps < 0:
            raise AttackError("steps must be non-negative")
        if self.steps > 0 and not self.alpha > 0:
            raise AttackError("alpha must be positive when steps > 0")
        if self.norm not in ("linf", "l2"):
            raise AttackError(f"unknown norm {self.norm!r}")

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


def train_attack(**kw) -> AttackConfig:
    return AttackConfig(**{"steps": 10, "random_start": True, **kw})


def eval_attack(**kw) -> AttackConfig:
    return AttackConfig(**{"steps": 20, "random_start": False, **kw})


def task_rng(cfg: AttackConfig, index: int) -> np.random.Generator:
    """Random-start stream for the index-th task of a joint attack."""
    return np.random.default_rng([cfg.seed, index])


def _check_unit_box(x):
    if x.size and (x.min() < 0 or x.max() > 1):
        raise AttackError("attack input must lie in [0, 1]")


def _flat_norm(v: np.ndarray) -> np.ndarray:
    n = np.sqrt((v.reshape(len(v), -1) ** 2).sum(axis=1))
    return n.reshape((len(v),) + (1,) * (v.ndim - 1))


class _Projector:
    """Feasible set {x' : |x' - x| <= eps in the configured norm, 0 <= x' <= 1}."""

    def __init__(self, x: np.ndarray, cfg: AttackConfig):
        self.x, self.cfg = x, cfg
        eps = cfg.epsilon
        if cfg.norm == "linf":
            lo, hi = x - eps, x + eps
            # pull bounds inward until the round-off-free check x' - x <= eps holds
            while np.any(hi - x > eps):
                hi = np.where(hi - x > eps, np.nextafter(hi, -np.inf), hi)
            while np.any(x - lo > eps):
                lo = np.where(x - lo > eps, np.nextafter(lo, np.inf), lo)
            self.lo, self.hi = np.maximum(lo, 0.0), np.minimum(hi, 1.0)

    def __call__(self, x_adv: np.ndarray) -> np.ndarray:
        if self.cfg.norm == "linf":
            return np.clip(x_adv, self.lo, self.hi)
        eps = self.cfg.epsilon
        delta = x_adv - self.x
        norm = _flat_norm(delta)
        scale = np.where(norm > eps, eps * (1 - 1e-12) / np.where(norm > 0, norm, 1.0), 1.0)
        return np.clip(self.x + delta * scale, 0.0, 1.0)

    def check(self, x_adv: np.ndarray, where: str):
        d = x_adv - self.x
        size = np.abs(d).max(initial=0.0) if self.cfg.norm == "linf" else _flat_norm(d).max(initial=0.0)
        if size > self.cfg.epsilon or x_adv.min(initial=0) < 0 or x_adv.max(initial=0) > 1:
            raise AttackError(f"infeasible perturbation after {where}")


def _random_start(x, cfg, rng):
    if cfg.norm == "linf":
        return x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
    d = rng.normal(size=x.shape)
    d /= np.maximum(_flat_norm(d), 1e-300)
    dim = x[0].size
    radius = cfg.epsilon * rng.uniform(size=(len(x),) + (1,) * (x.ndim - 1)) ** (1.0 / dim)
    return x + d * radius


def _step(x_adv, grad, cfg):
    if cfg.norm == "linf":
        return x_adv + cfg.alpha * ad.sign(grad)
    norm = _flat_norm(grad)
    return x_adv + cfg.alpha * np.where(norm > 0, grad / np.where(norm > 0, norm, 1.0), 0.0)


def value_and_grad(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    leaf = Tensor(x, requires_grad=True)
    loss = loss_fn(leaf)
    value = float(loss.data)
    if not loss.requires_grad:
        return value, np.zeros_like(x)
    ad.backward(loss, wrt=[leaf])
    return value, leaf.grad if leaf.grad is not None else np.zeros_like(x)


class _PGD:
    """State of one projected-gradient ascent run; shared by single and joint attacks."""

    def __init__(self, x: np.ndarray, cfg: AttackConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.proj = _Projector(x, cfg)
        self.x_adv = x.copy()
        if cfg.random_start and cfg.epsilon > 0:
            self.x_adv = self.proj(_random_start(x, cfg, rng))
            self.proj.check(self.x_adv, "random start")

    def step(self, direction: np.ndarray, index: int):
        self.x_adv = self.proj(_step(self.x_adv, direction, self.cfg))
        self.proj.check(self.x_adv, f"step {index}")


def pgd_attack(loss_fn: Callable[[Tensor], Tensor], x, cfg: AttackConfig,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Maximize ``loss_fn`` over the feasible ball around ``x``; return x_adv.

    ``loss_fn`` maps a batch tensor to a scalar; summed per-example losses give
    per-example ascent directions.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    _check_unit_box(x)
    if cfg.epsilon == 0:
        return x.copy()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    state = _PGD(x, cfg, rng)
    for t in range(cfg.steps):
        value, grad = value_and_grad(loss_fn, state.x_adv)
        if not np.isfinite(value):
            raise AttackError(f"non-finite loss at attack step {t}")
        state.step(grad, t)
    return state.x_adv


def classifier_loss_fn(params: ModelParams, labels) -> Callable[[Tensor], Tensor]:
    labels = np.asarray(labels)
    return lambda z: ad.softmax_cross_entropy(forward_classifier(params, z), labels, "sum")


def task_loss_fn(params: ModelParams, sample: TaskSample) -> Callable[[Tensor], Tensor]:
    """Pretext loss as a function of the untransformed base images."""
    return lambda z: task_loss(params, sample, task_input(sample, z), "sum")


# ---------------------------------------------------------------- diversity

@dataclass
class GradientMatrix:
    columns: np.ndarray                 # (..., d, M), unit-norm or zero columns
    task_ids: tuple = ()
    zero: np.ndarray = field(default=None)   # (..., M) True where the raw gradient vanished


def diversity_score(G) -> np.ndarray | float:
    """log det(G^T G + jitter * I) for unit-norm columns; 0 iff orthogonal."""
    cols = G.columns if isinstance(G, GradientMatrix) else np.asarray(G, dtype=np.float64)
    m = cols.shape[-1]
    gram = np.swapaxes(cols, -1, -2) @ cols + GRAM_JITTER * np.eye(m)
    sign, logdet = np.linalg.slogdet(gram)
    return float(logdet) if np.ndim(logdet) == 0 else logdet


def normalize_columns(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit-normalize the last-but-one axis; return (columns, norms, zero flags)."""
    norms = np.sqrt((raw ** 2).sum(axis=-2))
    zero = norms == 0
    cols = raw / np.where(zero, 1.0, norms)[..., None, :]
    return cols, norms, zero


def gradient_matrix(params: ModelParams, samples: Sequence[TaskSample], deltas, x) -> GradientMatrix:
    """Per-example normalized input gradients of each task loss at x + delta_i.

    Returns columns of shape (N, d, M).
    """
    x = np.asarray(x, dtype=np.float64)
    grads = []
    for s, d in zip(samples, deltas):
        _, g = value_and_grad(task_loss_fn(params, s), x + d)
        grads.append(g.reshape(len(x), -1))
    cols, _, zero = normalize_columns(np.stack(grads, axis=-1))
    return GradientMatrix(cols, tuple(s.task_id for s in samples), zero)


def diversity_ascent(cols, norms, zero):
    """d g / d u_i for g = logdet(G^T G + jitter I), G_i = u_i / |u_i|.

    Shapes: cols (N, d, M), norms/zero (N, M).  Returns (N, d, M).
    """
    m = cols.shape[-1]
    gram = np.swapaxes(cols, -1, -2) @ cols + GRAM_JITTER * np.eye(m)
    dG = 2.0 * cols @ np.linalg.inv(gram)
    radial = (cols * dG).sum(axis=-2, keepdims=True)
    du = (dG - cols * radial) / np.where(zero, 1.0, norms)[:, None, :]
    return np.where(zero[:, None, :], 0.0, du)


def joint_ensemble_attack(params: ModelParams, x, samples: Sequence[TaskSample], cfg: AttackConfig,
                          lam: float = 0.0, fd_step: float = 1e-3) -> list:
    """Jointly ascend sum_i loss_i(x + delta_i) + lam * logdet(G^T G).

    ``samples`` holds one pretext sample per task built from the same base
    images ``x``.  The regularizer's gradient needs a Hessian-vector product per
    task; it is taken as a central difference of input gradients along the
    chained direction (two extra gradient evaluations per task per step).
    Returns the perturbations delta_i.
    """
    if not samples:
        raise AttackError("joint attack needs at least one task")
    x = np.asarray(x, dtype=np.float64)
    _check_unit_box(x)
    if cfg.epsilon == 0:
        return [np.zeros_like(x) for _ in samples]
    fns = [task_loss_fn(params, s) for s in samples]
    states = [_PGD(x, cfg, task_rng(cfg, i)) for i in range(len(samples))]
    n = len(x)
    for t in range(cfg.steps):
        grads = []
        for i, (fn, st) in enumerate(zip(fns, states)):
            value, g = value_and_grad(fn, st.x_adv)
            if not np.isfinite(value):
                raise AttackError(f"non-finite loss for task {samples[i].task_id} at attack step {t}")
            grads.append(g)
        directions = grads
        if lam != 0 and len(samples) > 1:
            raw = np.stack([g.reshape(n, -1) for g in grads], axis=-1)
            cols, norms, zero = normalize_columns(raw)
            du = diversity_ascent(cols, norms, zero)
            directions = []
            for i, (fn, st) in enumerate(zip(fns, states)):
                w = du[..., i].reshape(x.shape)
                wn = _flat_norm(w)
                unit = w / np.where(wn > 0, wn, 1.0)
                _, g_up = value_and_grad(fn, st.x_adv + fd_step * unit)
                _, g_dn = value_and_grad(fn, st.x_adv - fd_step * unit)
                hvp = (g_up - g_dn) / (2 * fd_step) * wn
                directions.append(grads[i] + lam * hvp)
        for st, d in zip(states, directions):
            st.step(d, t)
    return [st.x_adv - x for st in states]


def joint_objective(params: ModelParams, x, samples: Sequence[TaskSample], deltas, lam: float) -> float:
    """Value of the joint attack objective (summed over the batch)."""
    total = 0.0
    for s, d in zip(samples, deltas):
        total += float(task_loss_fn(params, s)(Tensor(x + d)).data)
    if lam:
        total += lam * float(np.sum(diversity_score(gradient_matrix(params, samples, deltas, x))))
    return total


# ---------------------------------------------------------------- smoothing

def gaussian_noise(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise AttackError("sigma must be non-negative")
    return rng.normal(0.0, sigma, size=shape) if sigma > 0 else np.zeros(shape)


def gaussian_augment(x, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise AttackError("sigma must be non-negative")
    if sigma == 0:
        return x.copy()
    return np.clip(x + gaussian_noise(x.shape, sigma, rng), 0.0, 1.0)
