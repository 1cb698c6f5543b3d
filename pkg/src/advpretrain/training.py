"""Pretraining (standard, adversarial, noise-augmented, multi-task ensemble), fine-tuning and the scenario matrix."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import (AttackConfig, eval_attack, gaussian_augment, gradient_matrix, diversity_score,
                      joint_ensemble_attack, pgd_attack, task_loss_fn, task_rng, train_attack)
from .autodiff import Tensor
from .data_io import Checkpoint, Dataset, MetricsWriter, load_into_model
from .evaluation import robust_accuracy, standard_accuracy
from .models import ModelParams, forward_classifier, get_architecture, init_model, trainable_set
from .ssl_tasks import TaskSpec, task_accuracy, task_input, task_loss

PRETRAIN_KINDS = ("P1_none", "P2_standard", "P3_adversarial", "P3_smoothing")
FINETUNE_KINDS = ("F1_partial_standard", "F2_partial_adversarial", "F3_full_standard", "F4_full_adversarial")
TASKS = ("selfie", "rotation", "jigsaw")

_ALIASES = {"P1": "P1_none", "P2": "P2_standard", "P3": "P3_adversarial", "P3S": "P3_smoothing",
            "F1": "F1_partial_standard", "F2": "F2_partial_adversarial",
            "F3": "F3_full_standard", "F4": "F4_full_adversarial"}


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    def __init__(self, phase: str, epoch: int, step: int):
        super().__init__(f"{phase}: non-finite loss at epoch {epoch}, step {step}")
        self.epoch, self.step = epoch, step


def canonical_kind(kind: str) -> str:
    kind = _ALIASES.get(kind, kind)
    if kind not in PRETRAIN_KINDS + FINETUNE_KINDS:
        raise TrainingError(f"unknown scenario kind {kind!r}")
    return kind


# ---------------------------------------------------------------- schedules

def cosine_lr(t: float, T: float, lr_max: float, lr_min: float = 0.0) -> float:
    if T <= 0:
        return lr_max
    if not 0 <= t <= T:
        raise TrainingError(f"cosine schedule position {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / T))


def warmup_attack(attack: AttackConfig, step: int, warm_steps: int) -> AttackConfig:
    """Budget for pretraining step ``step``: epsilon and alpha ramp linearly over ``warm_steps``."""
    if step >= warm_steps:
        return attack
    f = (step + 1) / warm_steps
    return attack.with_(epsilon=attack.epsilon * f, alpha=attack.alpha * f)


def multistep_lr(epoch: int, milestones, base: float, factor: float = 10.0) -> float:
    ms = list(milestones)
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise TrainingError(f"milestones must be strictly increasing: {ms}")
    return base / factor ** sum(epoch >= m for m in ms)


def scaled_milestones(fractions, epochs: int) -> tuple:
    """Milestone epochs at the given budget fractions, deduplicated and increasing."""
    out = []
    for f in fractions:
        m = max(1, int(round(f * epochs)))
        if not out or m > out[-1]:
            out.append(m)
    return tuple(out)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class ScenarioConfig:
    pretrain_kind: str = "P1_none"
    finetune_kind: str = "F4_full_adversarial"
    tasks: tuple = ()
    ensemble: bool = False
    lam: float = 0.0
    pretrain_epochs: int = 8
    finetune_epochs: int = 10
    batch_size: int = 64
    pretrain_lr: float = 0.05
    pretrain_lr_min: float = 0.0
    pretrain_eps_warmup: float = 0.5     # fraction of adversarial pretraining with a ramped budget
    finetune_lr: float = 0.1
    milestones: tuple = (0.3, 0.5)       # fractions of the fine-tuning budget
    lr_factor: float = 10.0
    momentum: float = 0.9
    attack: AttackConfig = field(default_factory=train_attack)
    eval_attack: AttackConfig = field(default_factory=eval_attack)
    probe_size: int = 200
    smoothing_sigma: float = 0.25
    seed: int = 0
    arch_id: str = "desk16"
    jigsaw_k: int = 2
    jigsaw_size: int = 24
    selfie_grid: int = 4
    selfie_masked: int = 3
    outer_regularizer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pretrain_kind", canonical_kind(self.pretrain_kind))
        object.__setattr__(self, "finetune_kind", canonical_kind(self.finetune_kind))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        problems = self.problems()
        if problems:
            raise TrainingError("invalid scenario: " + "; ".join(problems))

    def problems(self) -> list:
        out = []
        if self.pretrain_kind not in PRETRAIN_KINDS:
            out.append(f"{self.pretrain_kind} is not a pretraining kind")
        if self.finetune_kind not in FINETUNE_KINDS:
            out.append(f"{self.finetune_kind} is not a fine-tuning kind")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            out.append(f"unknown tasks {bad}")
        if len(set(self.tasks)) != len(self.tasks):
            out.append("duplicate tasks")
        if self.pretrain_kind == "P1_none" and self.tasks:
            out.append("P1_none forbids pretraining tasks")
        if self.pretrain_kind != "P1_none" and not self.tasks:
            out.append(f"{self.pretrain_kind} needs at least one task")
        if self.pretrain_kind == "P1_none" and self.finetune_kind.startswith(("F1", "F2")):
            out.append("partial fine-tuning needs a pretrained encoder")
        if self.ensemble and len(self.tasks) < 2:
            out.append("ensemble pretraining needs at least two tasks")
        if self.ensemble and self.pretrain_kind != "P3_adversarial":
            out.append("ensemble pretraining is adversarial (P3_adversarial)")
        if self.lam < 0:
            out.append("lambda must be non-negative")
        for name in ("pretrain_epochs", "finetune_epochs", "probe_size"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        if self.batch_size < 1:
            out.append("batch_size must be positive")
        if not 0 <= self.momentum < 1:
            out.append("momentum must lie in [0, 1)")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            out.append("learning rates must be positive")
        if not 0 <= self.pretrain_eps_warmup <= 1:
            out.append("pretrain_eps_warmup must lie in [0, 1]")
        if self.smoothing_sigma < 0:
            out.append("smoothing_sigma must be non-negative")
        try:
            get_architecture(self.arch_id)
        except Exception as exc:
            out.append(str(exc))
        return out

    @property
    def scenario_id(self) -> str:
        p, f = self.pretrain_kind.split("_")[0], self.finetune_kind.split("_")[0]
        if self.pretrain_kind == "P3_smoothing":
            p = "P3s"
        tag = "+".join(self.tasks) if self.tasks else "none"
        return f"{p},{f}:{tag}" + (f":lam={self.lam:g}" if self.ensemble else "")

    @property
    def adversarial_finetune(self) -> bool:
        return self.finetune_kind in ("F2_partial_adversarial", "F4_full_adversarial")

    @property
    def finetune_scope(self) -> str:
        return "partial" if self.finetune_kind.startswith(("F1", "F2")) else "full"

    def task_spec(self, task_id: str) -> TaskSpec:
        return TaskSpec(task_id, self.jigsaw_k, self.jigsaw_size, self.seed, self.selfie_grid, self.selfie_masked)

    def pretrain_key(self) -> tuple:
        """Fields that determine the pretraining result (for caching across cells)."""
        return (self.pretrain_kind, self.tasks, self.ensemble, self.lam, self.pretrain_epochs, self.batch_size,
                self.pretrain_lr, self.pretrain_lr_min, self.pretrain_eps_warmup, self.momentum, self.attack, self.smoothing_sigma,
                self.seed, self.arch_id, self.jigsaw_k, self.jigsaw_size, self.selfie_grid, self.selfie_masked,
                self.outer_regularizer, self.probe_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"], d["eval_attack"] = asdict(self.attack), asdict(self.eval_attack)
        return d


@dataclass
class MetricsRecord:
    scenario_id: str
    epochs: list = field(default_factory=list)     # dicts with epoch, train_loss, val_ta, val_ra, ...
    best_epoch: int = 0
    epochs_to_best_ra: int = 0
    wall_clock: float = 0.0
    test_ta: float | None = None
    test_ra: float | None = None
    error: str | None = None

    def add(self, row: dict):
        if self.epochs and row["epoch"] <= self.epochs[-1]["epoch"]:
            raise TrainingError("epoch indices must increase")
        for k in ("val_ta", "val_ra"):
            if k in row and not 0 <= row[k] <= 100:
                raise TrainingError(f"{k}={row[k]} outside [0, 100]")
        self.epochs.append(row)

    def summary(self) -> dict:
        return {"scenario": self.scenario_id, "TA": self.test_ta, "RA": self.test_ra,
                "Epochs": self.epochs_to_best_ra, "best_epoch": self.best_epoch, "error": self.error}

    def deterministic(self) -> dict:
        """Everything except wall-clock time."""
        d = asdict(self)
        d.pop("wall_clock")
        return d


# ---------------------------------------------------------------- optimizer

class SGD:
    """SGD with heavy-ball momentum: v <- m v + g, p <- p - lr v."""

    def __init__(self, tensors: dict, momentum: float = 0.9):
        self.tensors = tensors
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def step(self, lr: float):
        for name in sorted(self.tensors):
            t = self.tensors[name]
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            t.data = t.data - lr * v


def _loss_step(loss: Tensor, opt: SGD, lr: float, phase: str, epoch: int, step: int) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise DivergenceError(phase, epoch, step)
    opt.zero_grad()
    ad.backward(loss, wrt=list(opt.tensors.values()))
    opt.step(lr)
    return value


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _images(data) -> np.ndarray:
    return np.asarray(data.images if isinstance(data, Dataset) else data, dtype=np.float64)


def _streams(seed: int, phase: int):
    """Independent shuffling, transform and attack generators for one phase."""
    return [np.random.default_rng([seed, phase, k]) for k in range(3)]


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainResult:
    params: ModelParams
    checkpoint: Checkpoint
    history: list
    best_epoch: int


def _pretext_model(cfg: ScenarioConfig) -> ModelParams:
    return init_model(cfg.arch_id, {t: cfg.task_spec(t).width() for t in cfg.tasks}, cfg.seed)


def _val_samples(cfg: ScenarioConfig, val: np.ndarray) -> dict:
    rng = np.random.default_rng([cfg.seed, 99])
    return {t: cfg.task_spec(t).sample(val, rng) for t in cfg.tasks}


def _pretext_checkpoint(params, cfg, epoch, extra=None) -> Checkpoint:
    prov = {"scenario": cfg.pretrain_kind, "tasks": list(cfg.tasks), "epoch": epoch, "seed": cfg.seed,
            "lambda": cfg.lam if cfg.ensemble else None, **(extra or {})}
    return Checkpoint.from_params(params, prov, prefixes=("encoder.", "head."))


def _warm_steps(cfg: ScenarioConfig, total: int) -> int:
    """Steps with a ramped attack budget; only epochs after them are eligible for selection."""
    if cfg.pretrain_kind != "P3_adversarial":
        return 0
    return math.ceil(cfg.pretrain_eps_warmup * total)


def pretrain(train, val, cfg: ScenarioConfig, log=None) -> PretrainResult:
    """Single-task pretraining: standard (P2), adversarial (P3) or Gaussian-augmented.

    The returned checkpoint holds the epoch with the best clean pretext accuracy
    on ``val``; zero epochs return the initialization.  Adversarial pretraining
    ramps the attack budget over the first ``pretrain_eps_warmup`` of the steps
    and only selects among epochs trained at the full budget.
    """
    if cfg.pretrain_kind == "P1_none":
        raise TrainingError("P1_none has no pretraining phase")
    if cfg.ensemble or len(cfg.tasks) != 1:
        raise TrainingError("pretrain takes exactly one task; use ensemble_pretrain for several")
    task = cfg.tasks[0]
    spec = cfg.task_spec(task)
    x_train, x_val = _images(train), _images(val)
    params = _pretext_model(cfg)
    tensors = {k: v for k, v in params.named_tensors().items() if k.startswith(("encoder.", f"head.{task}."))}
    opt = SGD(tensors, cfg.momentum)
    shuffle_rng, sample_rng, attack_rng = _streams(cfg.seed, 1)
    val_sample = _val_samples(cfg, x_val)[task]
    steps_per_epoch = math.ceil(len(x_train) / cfg.batch_size)
    total = cfg.pretrain_epochs * steps_per_epoch
    warm = _warm_steps(cfg, total)
    best_state, best_acc, best_epoch, history = params.state(), -1.0, 0, []
    step = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        for idx in _batches(len(x_train), cfg.batch_size, shuffle_rng):
            xb = x_train[idx]
            sample = spec.sample(xb, sample_rng)
            if cfg.pretrain_kind == "P3_adversarial":
                x_adv = pgd_attack(task_loss_fn(params, sample), xb, warmup_attack(cfg.attack, step, warm), attack_rng)
                inputs = task_input(sample, x_adv)
            elif cfg.pretrain_kind == "P3_smoothing":
                inputs = task_input(sample, gaussian_augment(xb, cfg.smoothing_sigma, attack_rng))
            else:
                inputs = None
            lr = cosine_lr(step, total, cfg.pretrain_lr, cfg.pretrain_lr_min)
            losses.append(_loss_step(task_loss(params, sample, inputs), opt, lr, "pretrain", epoch, step))
            step += 1
        acc = task_accuracy(params, val_sample)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_pretext_acc": acc})
        if log:
            log(f"[pretrain {task}] epoch {epoch}: loss {np.mean(losses):.4f} pretext acc {acc:.2f}%")
        if step >= warm and acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, params.state()
    params.load_state(best_state)
    return PretrainResult(params, _pretext_checkpoint(params, cfg, best_epoch), history, best_epoch)


def probe_diversity(params: ModelParams, cfg: ScenarioConfig, x_probe: np.ndarray) -> float:
    """Mean diversity score of clean per-task input gradients on a fixed probe."""
    rng = np.random.default_rng([cfg.seed, 98])
    samples = [cfg.task_spec(t).sample(x_probe, rng) for t in cfg.tasks]
    G = gradient_matrix(params, samples, [np.zeros_like(x_probe)] * len(samples), x_probe)
    return float(np.mean(diversity_score(G)))


def _outer_regularizer_grads(params, samples, deltas, xb, lam, h=1e-3):
    """Finite-difference estimate of lam * d g / d theta along the parameter gradient direction."""
    tensors = params.named_tensors()
    base = {k: t.data.copy() for k, t in tensors.items()}
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if norm == 0:
        return {}
    vals = []
    for sgn in (1.0, -1.0):
        for k, t in tensors.items():
            t.data = base[k] + sgn * h * grads[k] / norm
        vals.append(float(np.sum(diversity_score(gradient_matrix(params, samples, deltas, xb)))))
    for k, t in tensors.items():
        t.data = base[k]
    slope = (vals[0] - vals[1]) / (2 * h)
    # descend on -lam * g: only the component along the current direction is available
    return {k: -lam * slope * grads[k] / norm / len(xb) for k in grads}


def ensemble_pretrain(train, val, cfg: ScenarioConfig, independent_attacks: bool = False,
                      log=None, probe: np.ndarray | None = None) -> PretrainResult:
    """Multi-task adversarial pretraining over a shared encoder with per-task heads.

    Each step attacks all tasks jointly (diversity weight ``cfg.lam``) and updates
    on the summed adversarial task losses.  ``independent_attacks`` replaces the
    joint attack by one plain PGD per task, for comparison.
    """
    if len(cfg.tasks) < 2:
        raise TrainingError("ensemble pretraining needs at least two tasks")
    specs = [cfg.task_spec(t) for t in cfg.tasks]
    x_train, x_val = _images(train), _images(val)
    params = _pretext_model(cfg)
    opt = SGD(params.named_tensors() if params.classifier is None else
              {k: v for k, v in params.named_tensors().items() if not k.startswith("classifier.")}, cfg.momentum)
    shuffle_rng, sample_rng, _ = _streams(cfg.seed, 2)
    val_samples = _val_samples(cfg, x_val)
    probe = x_val[:min(len(x_val), 100)] if probe is None else probe
    steps_per_epoch = math.ceil(len(x_train) / cfg.batch_size)
    total = cfg.pretrain_epochs * steps_per_epoch
    warm = _warm_steps(cfg, total)
    best_state, best_acc, best_epoch, history = params.state(), -1.0, 0, []
    step = 0
    for epoch in range(1, cfg.pretrain_epochs + 1):
        losses = []
        for idx in _batches(len(x_train), cfg.batch_size, shuffle_rng):
            xb = x_train[idx]
            samples = [s.sample(xb, sample_rng) for s in specs]
            acfg = warmup_attack(cfg.attack, step, warm).with_(seed=cfg.seed * 1_000_003 + step)
            if independent_attacks:
                deltas = [pgd_attack(task_loss_fn(params, s), xb, acfg, task_rng(acfg, i)) - xb
                          for i, s in enumerate(samples)]
            else:
                deltas = joint_ensemble_attack(params, xb, samples, acfg, cfg.lam)
            loss = None
            for s, d in zip(samples, deltas):
                term = task_loss(params, s, task_input(s, xb + d))
                loss = term if loss is None else ad.add(loss, term)
            lr = cosine_lr(step, total, cfg.pretrain_lr, cfg.pretrain_lr_min)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError("ensemble pretrain", epoch, step)
            opt.zero_grad()
            ad.backward(loss, wrt=list(opt.tensors.values()))
            if cfg.outer_regularizer and cfg.lam:
                for k, g in _outer_regularizer_grads(params, samples, deltas, xb, cfg.lam).items():
                    if k in opt.tensors and opt.tensors[k].grad is not None:
                        opt.tensors[k].grad = opt.tensors[k].grad + g
            opt.step(lr)
            losses.append(value)
            step += 1
        accs = {t: task_accuracy(params, val_samples[t]) for t in cfg.tasks}
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_pretext_acc": float(np.mean(list(accs.values()))),
               "diversity": probe_diversity(params, cfg, probe)}
        row.update({f"val_acc_{t}": a for t, a in accs.items()})
        history.append(row)
        if log:
            log(f"[ensemble-pretrain lam={cfg.lam:g}] epoch {epoch}: loss {row['train_loss']:.4f} "
                f"pretext acc {row['val_pretext_acc']:.2f}% diversity {row['diversity']:.4f}")
        if step >= warm and row["val_pretext_acc"] > best_acc:
            best_acc, best_epoch, best_state = row["val_pretext_acc"], epoch, params.state()
    params.load_state(best_state)
    return PretrainResult(params, _pretext_checkpoint(params, cfg, best_epoch), history, best_epoch)


def run_pretraining(train, val, cfg: ScenarioConfig, log=None) -> PretrainResult | None:
    if cfg.pretrain_kind == "P1_none":
        return None
    if cfg.ensemble:
        return ensemble_pretrain(train, val, cfg, log=log)
    return pretrain(train, val, cfg, log=log)


# ---------------------------------------------------------------- fine-tuning

@dataclass
class FinetuneResult:
    params: ModelParams
    record: MetricsRecord


def model_from_checkpoint(ck: Checkpoint | None, arch_id: str, num_classes: int, seed: int) -> ModelParams:
    """Fresh model with a random classifier head; encoder (and pretext heads) from ``ck``."""
    counts = {"classifier": num_classes}
    if ck is not None:
        for name, arr in ck.tensors.items():
            if name.startswith("head.") and name.endswith(".w"):
                counts[name.split(".")[1]] = arr.shape[1]
    params = init_model(arch_id, counts, seed)
    if ck is not None:
        load_into_model(params, ck)
    return params


def finetune(train: Dataset, val: Dataset, cfg: ScenarioConfig, checkpoint: Checkpoint | None = None,
             test: Dataset | None = None, log=None, metrics: MetricsWriter | None = None) -> FinetuneResult:
    """Supervised fine-tuning (F1-F4); keeps the epoch with the best validation TA."""
    if cfg.finetune_scope == "partial" and checkpoint is None:
        raise TrainingError(f"{cfg.finetune_kind} needs a pretrained checkpoint")
    t0 = time.perf_counter()
    params = model_from_checkpoint(checkpoint, cfg.arch_id, train.num_classes, cfg.seed)
    opt = SGD(trainable_set(params, cfg.finetune_scope), cfg.momentum)
    shuffle_rng, _, attack_rng = _streams(cfg.seed, 3)
    x, y = _images(train), train.labels
    probe = (val.images[:cfg.probe_size], val.labels[:cfg.probe_size])
    milestones = scaled_milestones(cfg.milestones, cfg.finetune_epochs)
    record = MetricsRecord(cfg.scenario_id)
    best_state, best_ta, step = params.state(), -1.0, 0
    ras = []
    for epoch in range(1, cfg.finetune_epochs + 1):
        lr = multistep_lr(epoch - 1, milestones, cfg.finetune_lr, cfg.lr_factor)
        losses = []
        for idx in _batches(len(x), cfg.batch_size, shuffle_rng):
            xb, yb = x[idx], y[idx]
            if cfg.adversarial_finetune:
                fn = lambda z, yb=yb: ad.softmax_cross_entropy(forward_classifier(params, z), yb, "sum")
                xb = pgd_attack(fn, xb, cfg.attack, attack_rng)
            loss = ad.softmax_cross_entropy(forward_classifier(params, xb), yb)
            losses.append(_loss_step(loss, opt, lr, "finetune", epoch, step))
            step += 1
        ta = standard_accuracy(params, val)
        ra = robust_accuracy(params, probe, cfg.eval_attack).ra if cfg.probe_size else 0.0
        ras.append(ra)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr, "val_ta": ta, "val_ra": ra}
        record.add(row)
        if metrics is not None:
            metrics.write_epoch(cfg.scenario_id, epoch, row)
        if log:
            log(f"[{cfg.scenario_id}] epoch {epoch}: loss {row['train_loss']:.4f} TA {ta:.2f}% RA {ra:.2f}%")
        if ta > best_ta:
            best_ta, record.best_epoch, best_state = ta, epoch, params.state()
    params.load_state(best_state)
    record.epochs_to_best_ra = int(np.argmax(ras)) + 1 if ras else 0
    if test is not None:
        record.test_ta = standard_accuracy(params, test)
        record.test_ra = robust_accuracy(params, test, cfg.eval_attack).ra
    record.wall_clock = time.perf_counter() - t0
    return FinetuneResult(params, record)


# ---------------------------------------------------------------- scenario matrix and grid search

DEFAULT_CELLS = (("P1", "F3"), ("P1", "F4"), ("P2", "F3"), ("P2", "F4"),
                 ("P3", "F1"), ("P3", "F2"), ("P3", "F3"), ("P3", "F4"))


def matrix_configs(task: str, base: ScenarioConfig | None = None, cells=DEFAULT_CELLS) -> list:
    base = base or ScenarioConfig()
    out = []
    for p, f in cells:
        tasks = () if canonical_kind(p) == "P1_none" else (task,)
        out.append(replace(base, pretrain_kind=p, finetune_kind=f, tasks=tasks, ensemble=False))
    return out


@dataclass
class MatrixResult:
    records: list
    models: dict          # scenario id -> ModelParams
    checkpoints: dict     # pretrain key -> Checkpoint


def run_scenario_matrix(configs, train: Dataset, val: Dataset, test: Dataset | None = None,
                        pretrain_data=None, log=None, metrics: MetricsWriter | None = None,
                        cache: dict | None = None) -> MatrixResult:
    """Run every cell in order; a failing cell is recorded and the rest still run.

    Cells with equal pretraining settings share one pretraining run.
    """
    pre_train, pre_val = pretrain_data if pretrain_data is not None else (train, val)
    cache = {} if cache is None else cache
    records, models = [], {}
    for cfg in configs:
        try:
            ck = None
            if cfg.pretrain_kind != "P1_none":
                key = cfg.pretrain_key()
                if key not in cache:
                    cache[key] = run_pretraining(pre_train, pre_val, cfg, log).checkpoint
                ck = cache[key]
            res = finetune(train, val, cfg, ck, test, log, metrics)
            records.append(res.record)
            models[cfg.scenario_id] = res.params
        except Exception as exc:  # keep going; the table shows the failure
            records.append(MetricsRecord(cfg.scenario_id, error=f"{type(exc).__name__}: {exc}"))
            if log:
                log(f"[{cfg.scenario_id}] failed: {exc}")
    return MatrixResult(records, models, cache)


@dataclass
class GridSearchResult:
    best_lambda: float
    records: dict         # lambda -> MetricsRecord
    histories: dict       # lambda -> pretraining history
    scores: dict = field(default_factory=dict)    # lambda -> full-validation TA/RA


def lambda_grid_search(grid, train: Dataset, val: Dataset, cfg: ScenarioConfig, log=None) -> GridSearchResult:
    """Ensemble pretraining + F4 fine-tuning per lambda; pick the best validation RA.

    Ties go to higher validation TA, then to the smaller lambda.
    """
    grid = sorted({float(v) for v in grid})
    if not grid:
        raise TrainingError("empty lambda grid")
    if grid[0] < 0:
        raise TrainingError("lambda values must be non-negative")
    records, histories, scores = {}, {}, {}
    for lam in grid:
        c = replace(cfg, lam=lam, ensemble=True, pretrain_kind="P3_adversarial", finetune_kind="F4_full_adversarial")
        pre = ensemble_pretrain(train, val, c, log=log)
        res = finetune(train, val, c, pre.checkpoint, log=log)
        full = robust_accuracy(res.params, val, c.eval_attack)
        records[lam], histories[lam], scores[lam] = res.record, pre.history, {"val_ta": full.ta, "val_ra": full.ra}
        if log:
            log(f"[lambda-search] lam={lam:g}: val TA {full.ta:.2f}% RA {full.ra:.2f}%")
    key = lambda lam: (scores[lam]["val_ra"], scores[lam]["val_ta"], -lam)
    return GridSearchResult(max(grid, key=key), records, histories, scores)
