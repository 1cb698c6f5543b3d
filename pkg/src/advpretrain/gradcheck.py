"""Finite-difference verification of every differentiable op and the composite losses."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import forward_classifier, init_model
from .ssl_tasks import TaskSpec, task_input, task_loss

TOLERANCE = 1e-6
FD_STEP = 1e-5
# error denominators never drop below this, so gradients that are exactly zero
# (e.g. a bias shared by all competing logits) are judged with atol = 1e-9
SCALE_FLOOR = 1e-3


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)
    redrawn: int = 0          # cases discarded because a kink sat inside the stencil

    @property
    def passed(self) -> bool:
        return not self.failures and self.cases > 0


@dataclass
class GradcheckReport:
    suites: list
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def render(self) -> str:
        lines = [f"{'check':<24}{'cases':>7}{'redrawn':>9}{'max rel err':>14}  status"]
        for s in self.suites:
            status = "ok" if s.passed else f"FAIL ({len(s.failures)})"
            lines.append(f"{s.name:<24}{s.cases:>7}{s.redrawn:>9}{s.max_rel_err:>14.2e}  {status}")
        lines.append(f"{'all' :<24}{sum(s.cases for s in self.suites):>7}{sum(s.redrawn for s in self.suites):>9}"
                     f"{max((s.max_rel_err for s in self.suites), default=0.0):>14.2e}  "
                     f"{'PASS' if self.passed else 'FAIL'}  ({self.seconds:.1f}s, tol {self.tolerance:g})")
        return "\n".join(lines)


def _coords(rng, size, k):
    return None if size <= k else np.sort(rng.choice(size, k, replace=False))


def _subset_error(a, b, floor):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_function(f: Callable[[list], Tensor], inputs: list, rng, max_coords: int = 24,
                   h: float = FD_STEP) -> tuple[float, bool]:
    """Worst relative error of backward() against central differences over all inputs.

    ``f`` maps a list of tensors to a scalar tensor.  Large inputs are checked on a
    random coordinate subset plus one random direction; subset errors are scaled
    by at least 1e-3 of the full gradient norm so exact zeros against round-off
    do not count as failures.  The second return value is False when the
    difference quotients at h and h/3 disagree, i.e. a kink lies inside the
    stencil and finite differences are not a valid oracle there.
    """
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    ad.backward(f(leaves))
    worst, smooth = 0.0, True
    for i, a in enumerate(inputs):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)

        def fi(v, i=i):
            args = [Tensor(b) for b in inputs]
            args[i] = Tensor(v)
            return f(args)

        coords = _coords(rng, a.size, max_coords)
        numeric = ad.finite_diff_gradient(fi, a, h, coords).reshape(-1)
        fine = ad.finite_diff_gradient(fi, a, h / 3, coords).reshape(-1)
        flat = analytic.reshape(-1)
        sel = slice(None) if coords is None else coords
        floor = max(1e-3 * float(np.linalg.norm(flat)), SCALE_FLOOR)
        if _subset_error(numeric[sel], fine[sel], floor) > TOLERANCE:
            smooth = False
        worst = max(worst, _subset_error(flat[sel], numeric[sel], SCALE_FLOOR if coords is None else floor))
        if coords is not None:
            v = rng.normal(size=a.shape)
            v /= np.linalg.norm(v)
            dd = (float(fi(a + h * v).data) - float(fi(a - h * v).data)) / (2 * h)
            exact = float(np.sum(analytic * v))
            worst = max(worst, abs(dd - exact) / max(abs(dd), abs(exact), SCALE_FLOOR))
    return worst, smooth


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, r))


def _op_cases():
    """(name, builder) pairs; builder(rng) -> (f, inputs)."""

    def elementwise(op):
        def build(rng):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            r = rng.normal(size=shape)
            return (lambda t: _weighted(op(t[0], t[1]), r)), [a, b]
        return build

    def broadcast_add(rng):
        n, m = rng.integers(1, 6, size=2)
        a, b, r = rng.normal(size=(n, m)), rng.normal(size=(m,)), rng.normal(size=(n, m))
        return (lambda t: _weighted(ad.add(t[0], t[1]), r)), [a, b]

    def matmul(rng):
        n, k, m = rng.integers(1, 6, size=3)
        a, b, r = rng.normal(size=(n, k)), rng.normal(size=(k, m)), rng.normal(size=(n, m))
        return (lambda t: _weighted(ad.matmul(t[0], t[1]), r)), [a, b]

    def relu(rng):
        shape = tuple(rng.integers(1, 6, size=2))
        a, r = _away_from_zero(rng, shape), rng.normal(size=shape)
        return (lambda t: _weighted(ad.relu(t[0]), r)), [a]

    def log(rng):
        shape = tuple(rng.integers(1, 6, size=2))
        a, r = rng.uniform(0.5, 2.0, size=shape), rng.normal(size=shape)
        return (lambda t: _weighted(ad.log(t[0]), r)), [a]

    def reshape(rng):
        n, m = rng.integers(1, 6, size=2)
        a, r = rng.normal(size=(n, m)), rng.normal(size=(m, n))
        return (lambda t: _weighted(ad.reshape(t[0], (m, n)), r)), [a]

    def concat(rng):
        n, m1, m2 = rng.integers(1, 5, size=3)
        a, b, r = rng.normal(size=(n, m1)), rng.normal(size=(n, m2)), rng.normal(size=(n, m1 + m2))
        return (lambda t: _weighted(ad.concat([t[0], t[1]], axis=1), r)), [a, b]

    def tsum(rng):
        n, m = rng.integers(1, 6, size=2)
        a, r = rng.normal(size=(n, m)), rng.normal(size=(m,))
        return (lambda t: _weighted(ad.tsum(t[0], axis=0), r)), [a]

    def mean(rng):
        n, m = rng.integers(1, 6, size=2)
        a, r = rng.normal(size=(n, m)), rng.normal(size=(n,))
        return (lambda t: _weighted(ad.mean(t[0], axis=1), r)), [a]

    def take_pixels(rng):
        n, c, s = rng.integers(1, 3), rng.integers(1, 3), 4
        a = rng.normal(size=(n, c, s, s))
        d = c * s * s
        index = np.stack([rng.permutation(d) for _ in range(n)])
        index[rng.uniform(size=index.shape) < 0.2] = -1
        r = rng.normal(size=(n, d))
        return (lambda t: _weighted(ad.take_pixels(t[0], index), r)), [a]

    def transpose(rng):
        a = rng.normal(size=tuple(rng.integers(1, 4, size=3)))
        perm = tuple(rng.permutation(3))
        r = rng.normal(size=tuple(a.shape[p] for p in perm))
        return (lambda t: _weighted(ad.transpose(t[0], perm), r)), [a]

    def conv(kernel, channels_last):
        def build(rng):
            n, c, f, s = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4), 2 * rng.integers(1, 3) + 2
            x = rng.normal(size=(n, s, s, c) if channels_last else (n, c, s, s))
            w, b = rng.normal(size=(f, c, 3, 3)), rng.normal(size=(f,))
            r = rng.normal(size=(n, s, s, f) if channels_last else (n, f, s, s))
            fn = lambda t: _weighted(ad.conv2d(t[0], t[1], t[2], kernel=kernel, channels_last=channels_last), r)
            return fn, [x, w, b]
        return build

    def avg_pool(channels_last):
        def build(rng):
            n, c, s = rng.integers(1, 3), rng.integers(1, 4), 2 * rng.integers(1, 4)
            shape = (n, s, s, c) if channels_last else (n, c, s, s)
            x = rng.normal(size=shape)
            out = (n, s // 2, s // 2, c) if channels_last else (n, c, s // 2, s // 2)
            r = rng.normal(size=out)
            return (lambda t: _weighted(ad.avg_pool(t[0], channels_last=channels_last), r)), [x]
        return build

    def softmax(rng):
        n, m = rng.integers(1, 5), rng.integers(2, 6)
        a, r = rng.normal(size=(n, m)), rng.normal(size=(n, m))
        return (lambda t: _weighted(ad.softmax(t[0]), r)), [a]

    def cross_entropy(rng):
        n, m = rng.integers(1, 6), rng.integers(2, 7)
        a, y = 3 * rng.normal(size=(n, m)), rng.integers(0, m, size=n)
        red = ["mean", "sum"][int(rng.integers(0, 2))]
        return (lambda t: ad.softmax_cross_entropy(t[0], y, red)), [a]

    def pick(rng):
        n, m = rng.integers(1, 6), rng.integers(2, 6)
        a, y, r = rng.normal(size=(n, m)), rng.integers(0, m, size=n), rng.normal(size=(n,))
        return (lambda t: _weighted(ad.pick(t[0], y), r)), [a]

    def l2_normalize(rng):
        n, m = rng.integers(1, 5), rng.integers(1, 6)
        a, r = rng.normal(size=(n, m)), rng.normal(size=(n, m))
        return (lambda t: _weighted(ad.l2_normalize(t[0]), r)), [a]

    return [
        ("add", elementwise(ad.add)), ("add (broadcast)", broadcast_add), ("sub", elementwise(ad.sub)),
        ("mul", elementwise(ad.mul)), ("matmul", matmul), ("relu", relu), ("log", log),
        ("reshape", reshape), ("concat", concat), ("sum", tsum), ("mean", mean),
        ("take_pixels", take_pixels), ("transpose", transpose),
        ("conv2d (blocked)", conv("blocked", False)), ("conv2d (nhwc)", conv("blocked", True)),
        ("conv2d (direct)", conv("direct", False)),
        ("avg_pool", avg_pool(False)), ("avg_pool (nhwc)", avg_pool(True)),
        ("softmax", softmax), ("softmax_cross_entropy", cross_entropy), ("pick", pick),
        ("l2_normalize", l2_normalize),
    ]


def _composite_cases(arch_id: str = "desk8"):
    """Classifier and pretext losses: gradients w.r.t. inputs and w.r.t. parameters."""

    def model_loss(kind):
        def build(rng):
            seed = int(rng.integers(0, 2 ** 31))
            counts = {"classifier": 4}
            spec = None
            if kind != "classifier":
                spec = TaskSpec(kind, jigsaw_k=2, jigsaw_size=24, selfie_grid=4, selfie_masked=3)
                counts[kind] = spec.width()
            params = init_model(arch_id, counts, seed)
            x = rng.uniform(0.05, 0.95, size=(2,) + params.arch.input_shape)
            # one parameter tensor per case, cycled by seed
            own = "classifier." if spec is None else f"head.{kind}."
            names = sorted(k for k in params.named_tensors() if k.startswith(("encoder.", own)))
            pname = names[seed % len(names)]
            ptensor = params.named_tensors()[pname]
            if spec is None:
                y = rng.integers(0, 4, size=2)
                loss = lambda z: ad.softmax_cross_entropy(forward_classifier(params, z), y, "sum")
            else:
                sample = spec.sample(x, rng)
                loss = lambda z: task_loss(params, sample, task_input(sample, z), "sum")

            def f(t):
                return _with_param(params, pname, t[1], lambda: loss(t[0]))
            return f, [x, ptensor.data.copy()]
        return build

    return [(f"loss {k}", model_loss(k)) for k in ("classifier", "rotation", "jigsaw", "selfie")]


def _with_param(params, name: str, value: Tensor, thunk):
    """Evaluate ``thunk`` with tensor ``name`` temporarily replaced by ``value``."""
    group, _, key = name.partition(".")
    if group == "encoder":
        holder = params.encoder
    elif group == "classifier":
        holder = params.classifier
    else:
        task, _, key = key.partition(".")
        holder = params.heads[task]
    old = holder[key]
    holder[key] = value
    try:
        return thunk()
    finally:
        holder[key] = old


def run_gradcheck(cases: int = 100, seed: int = 0, tolerance: float = TOLERANCE,
                  include_composite: bool = True, log=None) -> GradcheckReport:
    t0 = time.perf_counter()
    suites = []
    groups = _op_cases() + (_composite_cases() if include_composite else [])
    for gi, (name, build) in enumerate(groups):
        res = SuiteResult(name)
        rng = np.random.default_rng([seed, gi])
        while res.cases < cases:
            f, inputs = build(rng)
            err, smooth = check_function(f, inputs, rng, max_coords=12 if name.startswith("loss") else 24)
            if not smooth and res.redrawn < cases:
                res.redrawn += 1
                continue
            c = res.cases
            res.cases += 1
            res.max_rel_err = max(res.max_rel_err, err)
            if not err < tolerance:
                res.failures.append((c, err))
        suites.append(res)
        if log:
            log(f"{name}: {res.cases} cases, max rel err {res.max_rel_err:.2e}")
    return GradcheckReport(suites, time.perf_counter() - t0, tolerance)
