"""Standard/robust accuracy, transfer matrices, overlap statistics and prediction-averaging ensembles."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, eval_attack, gaussian_augment, pgd_attack
from .models import ModelParams, forward_classifier, predict


class EvaluationError(Exception):
    pass


def _xy(data):
    if hasattr(data, "images"):
        x, y = data.images, data.labels
    else:
        x, y = data
    if y is None:
        raise EvaluationError("evaluation needs labels")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y)
    if len(x) == 0:
        raise EvaluationError("empty evaluation set")
    return x, y


def param_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, t in sorted(params.named_tensors().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def standard_accuracy(params: ModelParams, data) -> float:
    x, y = _xy(data)
    return 100.0 * float(np.mean(predict(params, x) == y))


@dataclass
class EvalReport:
    model_id: str
    n: int
    ta: float
    ra: float
    attack: AttackConfig
    clean_correct: np.ndarray
    adv_correct: np.ndarray
    success: np.ndarray
    all_examples: bool = False
    x_adv: np.ndarray | None = field(default=None, repr=False)

    @property
    def asr(self) -> float:
        """Success rate over the attackable set (clean-correct, or everything in all-examples mode)."""
        denom = self.n if self.all_examples else int(self.clean_correct.sum())
        return 100.0 * int(self.success.sum()) / denom if denom else 0.0

    @property
    def ra_attackable(self) -> float:
        """Robust accuracy on the attackable set; equals 100 - asr."""
        denom = self.n if self.all_examples else int(self.clean_correct.sum())
        if not denom:
            return 0.0
        return 100.0 * (denom - int(self.success.sum())) / denom

    def record(self) -> dict:
        return {"model": self.model_id, "n": self.n, "ta": self.ta, "ra": self.ra, "asr": self.asr,
                "epsilon": self.attack.epsilon, "alpha": self.attack.alpha, "steps": self.attack.steps,
                "norm": self.attack.norm, "all_examples": self.all_examples}


def success_bits(clean_correct, adv_correct, all_examples=False) -> np.ndarray:
    if all_examples:
        return ~adv_correct
    return clean_correct & ~adv_correct


def attack_classifier(params: ModelParams, x, y, cfg: AttackConfig, batch_size: int = 250) -> np.ndarray:
    """PGD on the summed cross-entropy, batch by batch; batch b uses stream (seed, b)."""
    out = np.empty_like(x)
    for b, i in enumerate(range(0, len(x), batch_size)):
        yb = y[i:i + batch_size]
        fn = lambda z, yb=yb: ad.softmax_cross_entropy(forward_classifier(params, z), yb, "sum")
        out[i:i + batch_size] = pgd_attack(fn, x[i:i + batch_size], cfg, np.random.default_rng([cfg.seed, b]))
    return out


def robust_accuracy(params: ModelParams, data, cfg: AttackConfig | None = None, model_id: str = "model",
                    all_examples: bool = False, keep_adv: bool = False) -> EvalReport:
    """Attack every example; an example counts as robust when correct both clean and attacked."""
    x, y = _xy(data)
    cfg = eval_attack() if cfg is None else cfg
    clean = predict(params, x) == y
    x_adv = attack_classifier(params, x, y, cfg)
    adv = predict(params, x_adv) == y
    robust = adv if all_examples else (clean & adv)
    return EvalReport(model_id, len(x), 100.0 * clean.mean(), 100.0 * robust.mean(), cfg, clean, adv,
                      success_bits(clean, adv, all_examples), all_examples, x_adv if keep_adv else None)


# ---------------------------------------------------------------- transferability

@dataclass
class TransferMatrix:
    model_ids: list
    asr: np.ndarray                 # asr[target, source]
    success: dict                   # (target, source) -> bitmap
    reports: dict                   # source -> EvalReport
    attack: AttackConfig = None

    def diagonal_consistent(self) -> bool:
        """Diagonal success counts equal attackable-minus-robust counts of each source report."""
        for j, mid in enumerate(self.model_ids):
            rep = self.reports[mid]
            denom = rep.n if rep.all_examples else int(rep.clean_correct.sum())
            robust = int((rep.adv_correct & (rep.clean_correct | rep.all_examples)).sum())
            if int(self.success[mid, mid].sum()) != denom - robust:
                return False
            if abs(self.asr[j, j] - (100.0 - rep.ra_attackable)) > 1e-9:
                return False
        return True

    def diagonal_dominant(self) -> list:
        """Per source column: is the diagonal strictly the largest entry?"""
        out = []
        for j in range(len(self.model_ids)):
            col = np.delete(self.asr[:, j], j)
            out.append(bool(np.all(self.asr[j, j] > col)))
        return out

    def render(self) -> str:
        w = max(10, *(len(m) + 2 for m in self.model_ids))
        lines = ["target \\ source".ljust(w) + "".join(m.rjust(w) for m in self.model_ids)]
        for i, t in enumerate(self.model_ids):
            lines.append(t.ljust(w) + "".join(f"{v:.2f}%".rjust(w) for v in self.asr[i]))
        return "\n".join(lines)


def _check_compatible(models: dict):
    if len(models) < 2:
        raise EvaluationError("transfer matrix needs at least two models")
    archs = {m.arch.input_shape for m in models.values()}
    widths = {m.num_classes() for m in models.values()}
    if len(archs) != 1 or len(widths) != 1:
        raise EvaluationError(f"incompatible models: input shapes {archs}, class counts {widths}")


def transfer_matrix(models: dict, data, cfg: AttackConfig | None = None,
                    all_examples: bool = False) -> TransferMatrix:
    """Attack each source once; replay its adversarial examples against every target.

    A cell's success means the target was right on the clean example and wrong on
    the source's adversarial one (all-examples mode: just wrong on the adversarial one).
    """
    _check_compatible(models)
    x, y = _xy(data)
    cfg = eval_attack() if cfg is None else cfg
    ids = list(models)
    clean = {m: predict(models[m], x) == y for m in ids}
    reports, success = {}, {}
    asr = np.zeros((len(ids), len(ids)))
    for j, src in enumerate(ids):
        rep = robust_accuracy(models[src], (x, y), cfg, src, all_examples, keep_adv=True)
        reports[src] = rep
        for i, tgt in enumerate(ids):
            adv = rep.adv_correct if tgt == src else predict(models[tgt], rep.x_adv) == y
            bits = success_bits(clean[tgt], adv, all_examples)
            success[tgt, src] = bits
            denom = len(y) if all_examples else int(clean[tgt].sum())
            asr[i, j] = 100.0 * int(bits.sum()) / denom if denom else 0.0
        rep.x_adv = None
    return TransferMatrix(ids, asr, success, reports, cfg)


def overlap_stats(a, b) -> dict:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise EvaluationError(f"bitmap lengths differ: {a.shape} vs {b.shape}")
    only_a, only_b, both = int((a & ~b).sum()), int((~a & b).sum()), int((a & b).sum())
    union = only_a + only_b + both
    pct = lambda v: 100.0 * v / union if union else 0.0
    return {"only_a": only_a, "only_b": only_b, "both": both, "union": union,
            "pct_only_a": pct(only_a), "pct_only_b": pct(only_b), "pct_both": pct(both),
            "pct_non_overlap": pct(only_a + only_b)}


# ---------------------------------------------------------------- ensembles

def _check_members(models):
    models = list(models.values()) if isinstance(models, dict) else list(models)
    if not models:
        raise EvaluationError("ensemble needs at least one model")
    widths = {m.num_classes() for m in models}
    if len(widths) != 1:
        raise EvaluationError(f"class-count mismatch across members: {sorted(widths)}")
    return models


def ensemble_predict(models, x) -> np.ndarray:
    """Mean of member softmax probabilities."""
    models = _check_members(models)
    x = np.asarray(x, dtype=np.float64)
    probs = [ad.softmax(forward_classifier(m, x)).data for m in models]
    return np.mean(probs, axis=0)


def ensemble_loss(models, z, labels) -> ad.Tensor:
    """Summed cross-entropy of the averaged prediction; a single member uses the plain path."""
    if len(models) == 1:
        return ad.softmax_cross_entropy(forward_classifier(models[0], z), labels, "sum")
    probs = [ad.softmax(forward_classifier(m, z)) for m in models]
    avg = probs[0]
    for p in probs[1:]:
        avg = ad.add(avg, p)
    avg = ad.mul(avg, 1.0 / len(models))
    return ad.mul(ad.tsum(ad.log(ad.pick(avg, labels))), -1.0)


def _ensemble_labels(models, x, batch_size=500):
    if len(models) == 1:
        return predict(models[0], x)
    return np.concatenate([np.argmax(ensemble_predict(models, x[i:i + batch_size]), axis=1)
                           for i in range(0, len(x), batch_size)])


def ensemble_robust_accuracy(models, data, cfg: AttackConfig | None = None, model_id: str = "ensemble",
                             all_examples: bool = False, batch_size: int = 250) -> EvalReport:
    models = _check_members(models)
    x, y = _xy(data)
    cfg = eval_attack() if cfg is None else cfg
    clean = _ensemble_labels(models, x) == y
    x_adv = np.empty_like(x)
    for b, i in enumerate(range(0, len(x), batch_size)):
        yb = y[i:i + batch_size]
        fn = lambda z, yb=yb: ensemble_loss(models, z, yb)
        x_adv[i:i + batch_size] = pgd_attack(fn, x[i:i + batch_size], cfg, np.random.default_rng([cfg.seed, b]))
    adv = _ensemble_labels(models, x_adv) == y
    robust = adv if all_examples else (clean & adv)
    return EvalReport(model_id, len(x), 100.0 * clean.mean(), 100.0 * robust.mean(), cfg, clean, adv,
                      success_bits(clean, adv, all_examples), all_examples)


# ---------------------------------------------------------------- reduced unforeseen battery

def unforeseen_suite(params: ModelParams, data, epsilon: float = 8 / 255, l2_radius: float = 1.0,
                     sigma: float = 0.1, steps: int = 20, seed: int = 0) -> dict:
    """Accuracy (%) on clean data and under attacks not used in training.

    The 2*eps row counts an example as robust only when it also survives the eps
    attack, so it never exceeds the eps row.
    """
    x, y = _xy(data)
    clean = predict(params, x) == y
    base = AttackConfig(epsilon=epsilon, alpha=epsilon / 4, steps=steps, random_start=False, seed=seed)
    at_eps = robust_accuracy(params, (x, y), base)
    big = base.with_(epsilon=2 * epsilon, alpha=2 * epsilon / 4)
    at_2eps = robust_accuracy(params, (x, y), big)
    l2 = base.with_(norm="l2", epsilon=l2_radius, alpha=l2_radius / 4)
    at_l2 = robust_accuracy(params, (x, y), l2)
    noisy = gaussian_augment(x, sigma, np.random.default_rng([seed, 7]))
    gauss = predict(params, noisy) == y
    pct = lambda b: 100.0 * float(np.mean(b))
    return {
        "clean": pct(clean),
        "linf_eps": at_eps.ra,
        "linf_2eps": pct(clean & at_eps.adv_correct & at_2eps.adv_correct),
        "l2": at_l2.ra,
        "gaussian": pct(clean & gauss),
    }


def render_table(rows: list, columns: list, title: str = "") -> str:
    """Plain fixed-width table from a list of dicts."""
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([f"{r.get(c):.2f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    fmt = lambda row: "  ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
    lines = ([title] if title else []) + [fmt(cells[0]), "  ".join("-" * w for w in widths)]
    return "\n".join(lines + [fmt(r) for r in cells[1:]])
