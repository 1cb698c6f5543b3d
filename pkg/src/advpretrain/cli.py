"""Command-line entry point: ``advpretrain <subcommand> [--config FILE] [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data_io as dio
from .config import ConfigError, RunConfig, load_config
from .evaluation import (ensemble_robust_accuracy, overlap_stats, render_table, robust_accuracy,
                         transfer_matrix, unforeseen_suite)
from .gradcheck import run_gradcheck
from .models import init_model
from .training import (DEFAULT_CELLS, ensemble_pretrain, finetune, lambda_grid_search, matrix_configs,
                       pretrain, run_scenario_matrix)

SNAPSHOT = "resolved_config.ini"


# ---------------------------------------------------------------- helpers

def _say(msg: str) -> None:
    print(msg, flush=True)


def _overrides(args) -> list:
    out = list(args.set or [])
    pairs = [
        ("out", "run.out_dir"), ("seed", "scenario.seed"), ("pretrain_kind", "scenario.pretrain_kind"),
        ("finetune_kind", "scenario.finetune_kind"), ("tasks", "scenario.tasks"), ("lam", "scenario.lam"),
        ("pretrain_epochs", "scenario.pretrain_epochs"), ("finetune_epochs", "scenario.finetune_epochs"),
        ("checkpoint", "run.checkpoint"), ("models", "run.models"), ("task", "run.matrix_task"),
        ("grid", "lambda.grid"), ("data_seed", "data.seed"), ("n", "data.n"), ("eval_n", "run.eval_n"),
    ]
    for attr, key in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={value}")
    for attr in ("epsilon", "alpha"):
        value = getattr(args, attr, None)
        if value is not None:
            out += [f"attack.{attr}={value}", f"eval_attack.{attr}={value}"]
    if getattr(args, "steps", None) is not None:
        out.append(f"eval_attack.steps={args.steps}")
    if getattr(args, "all_examples", False):
        out.append("run.all_examples=true")
    return out


def _prepare(args) -> tuple[RunConfig, Path]:
    rc = load_config(args.config, _overrides(args))
    out = Path(rc["run"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out / SNAPSHOT)
    return rc, out


def load_datasets(rc: RunConfig):
    """(train, val, test, (pretrain_train, pretrain_val)) as configured."""
    d = rc["data"]
    gen = dict(classes=d["classes"], size=d["size"], noise=d["noise"], texture=d["texture"],
               shape_fidelity=d["shape_fidelity"], contrast=d["contrast"], scale=d["scale"])
    full = dio.load_dataset(d["train_path"]) if d["train_path"] else dio.generate_synthetic_dataset(d["seed"], d["n"], **gen)
    train, val = dio.split_train_val(full, d["split_ratio"], d["seed"])
    if d["test_path"]:
        test = dio.load_dataset(d["test_path"])
    else:
        test = dio.generate_synthetic_dataset(d["test_seed"], d["test_n"], **gen)
    if rc["run"]["eval_n"]:
        test = test.subset(np.arange(min(rc["run"]["eval_n"], len(test))))
    pre = (train, val)
    if d["pretrain_seed"] >= 0:
        corpus = dio.generate_synthetic_dataset(d["pretrain_seed"], d["pretrain_n"] or d["n"], **gen)
        pre = dio.split_train_val(corpus, d["split_ratio"], d["pretrain_seed"])
    return train, val, test, pre


def model_from_file(path) -> tuple:
    """Full model (encoder, heads, classifier) from a checkpoint file."""
    ck = dio.load_checkpoint(path)
    counts = {}
    for name, arr in ck.tensors.items():
        if name == "classifier.w":
            counts["classifier"] = arr.shape[1]
        elif name.startswith("head.") and name.endswith(".w"):
            counts[name.split(".")[1]] = arr.shape[1]
    params = init_model(ck.arch_id, counts, 0)
    dio.load_into_model(params, ck)
    return params, ck


def _dump(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True, default=float) + "\n")


def _save_model(params, path: Path, provenance: dict) -> None:
    dio.save_checkpoint(dio.Checkpoint.from_params(params, provenance), path)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    rc, out = _prepare(args)
    train, val, test, pre = load_datasets(rc)
    full = dio.Dataset(np.concatenate([train.images, val.images]), np.concatenate([train.labels, val.labels]),
                       train.num_classes, train.provenance)
    dio.save_dataset(full, out / "train.assp")
    dio.save_dataset(test, out / "test.assp")
    _say(f"wrote {len(full)} training and {len(test)} test images to {out}")
    return 0


def cmd_pretrain(args) -> int:
    rc, out = _prepare(args)
    cfg = rc.scenario()
    _, _, _, (ptrain, pval) = load_datasets(rc)
    res = pretrain(ptrain, pval, cfg, log=_say)
    dio.save_checkpoint(res.checkpoint, out / "pretrain.asck")
    _dump(out / "pretrain_history.jsonl", res.history)
    _say(f"best epoch {res.best_epoch}; checkpoint {out / 'pretrain.asck'}")
    return 0


def cmd_ensemble_pretrain(args) -> int:
    rc, out = _prepare(args)
    cfg = rc.scenario(ensemble=True, pretrain_kind="P3_adversarial")
    _, _, _, (ptrain, pval) = load_datasets(rc)
    res = ensemble_pretrain(ptrain, pval, cfg, log=_say)
    dio.save_checkpoint(res.checkpoint, out / "ensemble.asck")
    _dump(out / "ensemble_history.jsonl", res.history)
    _say(f"best epoch {res.best_epoch}; checkpoint {out / 'ensemble.asck'}")
    return 0


def cmd_finetune(args) -> int:
    rc, out = _prepare(args)
    ck = dio.load_checkpoint(rc["run"]["checkpoint"]) if rc["run"]["checkpoint"] else None
    overrides = {}
    if ck is not None and rc["scenario"]["pretrain_kind"] in ("P1", "P1_none"):
        # the encoder comes from a file; label the run by its provenance
        tasks = tuple(ck.provenance.get("tasks") or ())
        overrides = dict(pretrain_kind=ck.provenance.get("scenario", "P3_adversarial"), tasks=tasks,
                         ensemble=len(tasks) > 1, lam=ck.provenance.get("lambda") or 0.0)
    cfg = rc.scenario(**overrides)
    train, val, test, _ = load_datasets(rc)
    res = finetune(train, val, cfg, ck, test, log=_say, metrics=dio.MetricsWriter(out / "metrics.jsonl"))
    _save_model(res.params, out / "finetune.asck", {"scenario": cfg.scenario_id, "epoch": res.record.best_epoch,
                                                   "seed": cfg.seed})
    _dump(out / "summary.jsonl", [res.record.summary()])
    _say(render_table([res.record.summary()], ["scenario", "TA", "RA", "Epochs"]))
    return 0


def _cells(rc: RunConfig):
    if not rc["run"]["cells"]:
        return DEFAULT_CELLS
    return tuple(tuple(c.split(":")) for c in rc["run"]["cells"])


def cmd_scenario_matrix(args) -> int:
    rc, out = _prepare(args)
    base = rc.scenario()
    train, val, test, pre = load_datasets(rc)
    configs = matrix_configs(rc["run"]["matrix_task"], base, _cells(rc))
    res = run_scenario_matrix(configs, train, val, test, pre, log=_say,
                              metrics=dio.MetricsWriter(out / "metrics.jsonl"))
    rows = [r.summary() for r in res.records]
    _dump(out / "matrix.jsonl", rows)
    (out / "models").mkdir(exist_ok=True)
    for sid, params in res.models.items():
        _save_model(params, out / "models" / (sid.replace(",", "_").replace(":", "_") + ".asck"), {"scenario": sid})
    table = render_table(rows, ["scenario", "TA", "RA", "Epochs"], "TA (%) / RA (%) / Epochs")
    (out / "matrix.txt").write_text(table + "\n")
    _say(table)
    return 1 if any(r.error for r in res.records) else 0


def _eval_data(rc):
    _, _, test, _ = load_datasets(rc)
    return test


def cmd_evaluate(args) -> int:
    rc, out = _prepare(args)
    if not rc["run"]["checkpoint"]:
        raise ConfigError(["[run] checkpoint is required for evaluate"])
    params, _ = model_from_file(rc["run"]["checkpoint"])
    test = _eval_data(rc)
    cfg = rc.attack("eval_attack")
    rep = robust_accuracy(params, test, cfg, Path(rc["run"]["checkpoint"]).stem, rc["run"]["all_examples"])
    dio.save_bitmap(rep.success, out / "eval_success.bits")
    rows = [rep.record()]
    if args.unforeseen:
        suite = unforeseen_suite(params, test, epsilon=cfg.epsilon, steps=cfg.steps, seed=cfg.seed)
        rows[0]["unforeseen"] = suite
        _say(render_table([{"attack": k, "accuracy": v} for k, v in suite.items()], ["attack", "accuracy"]))
    _dump(out / "eval.jsonl", rows)
    _say(f"TA {rep.ta:.2f}%  RA {rep.ra:.2f}%  (eps {cfg.epsilon:.6g}, {cfg.steps} steps, {cfg.norm})")
    return 0


def _models(rc) -> dict:
    paths = rc["run"]["models"]
    if len(paths) < 1:
        raise ConfigError(["[run] models must list checkpoint files"])
    ids = [Path(p).stem for p in paths]
    if len(set(ids)) < len(ids):
        # same file names in different runs: prefix the run directory
        ids = [f"{Path(p).parent.name}/{Path(p).stem}" for p in paths]
    if len(set(ids)) < len(ids):
        raise ConfigError(["[run] models lists the same checkpoint twice"])
    return {mid: model_from_file(p)[0] for mid, p in zip(ids, paths)}


def cmd_transfer_matrix(args) -> int:
    rc, out = _prepare(args)
    models = _models(rc)
    tm = transfer_matrix(models, _eval_data(rc), rc.attack("eval_attack"), rc["run"]["all_examples"])
    bits = out / "bitmaps"
    bits.mkdir(exist_ok=True)
    rows = []
    for (tgt, src), b in tm.success.items():
        name = f"{tgt}__from__{src}".replace("/", "-")
        dio.save_bitmap(b, bits / f"{name}.bits")
    for j, src in enumerate(tm.model_ids):
        for i, tgt in enumerate(tm.model_ids):
            rows.append({"source": src, "target": tgt, "asr": float(tm.asr[i, j])})
    ids = tm.model_ids
    overlaps = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            st = overlap_stats(tm.success[ids[a], ids[a]], tm.success[ids[b], ids[b]])
            overlaps.append({"a": ids[a], "b": ids[b], **st})
    _dump(out / "transfer.jsonl", rows + overlaps)
    _say(tm.render())
    _say(f"diagonal = 100 - RA: {'yes' if tm.diagonal_consistent() else 'NO'}; "
         f"diagonal is column max: {tm.diagonal_dominant()}")
    for o in overlaps:
        _say(f"{o['a']} vs {o['b']}: only {o['only_a']} / only {o['only_b']} / both {o['both']} "
             f"({o['pct_non_overlap']:.1f}% non-overlapping)")
    return 0


def cmd_ensemble_eval(args) -> int:
    rc, out = _prepare(args)
    models = _models(rc)
    test = _eval_data(rc)
    cfg = rc.attack("eval_attack")
    rows = [robust_accuracy(m, test, cfg, mid).record() for mid, m in models.items()]
    rows.append(ensemble_robust_accuracy(list(models.values()), test, cfg, "ensemble").record())
    _dump(out / "ensemble.jsonl", rows)
    _say(render_table(rows, ["model", "ta", "ra"]))
    return 0


def cmd_lambda_search(args) -> int:
    rc, out = _prepare(args)
    cfg = rc.scenario(ensemble=True, pretrain_kind="P3_adversarial")
    train, val, _, _ = load_datasets(rc)
    res = lambda_grid_search(rc["lambda"]["grid"], train, val, cfg, log=_say)
    rows = [{"lambda": lam, **res.scores[lam], "epochs_to_best_ra": res.records[lam].epochs_to_best_ra}
            for lam in sorted(res.records)]
    _dump(out / "lambda_search.jsonl", rows)
    _say(render_table(rows, ["lambda", "val_ta", "val_ra", "epochs_to_best_ra"]))
    _say(f"best lambda: {res.best_lambda:g}")
    return 0


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(cases=args.cases, seed=args.seed or 0)
    _say(report.render())
    return 0 if report.passed else 1


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate and save the synthetic train/test datasets"),
    "pretrain": (cmd_pretrain, "single-task pretraining (P2/P3/smoothing)"),
    "ensemble-pretrain": (cmd_ensemble_pretrain, "multi-task adversarial pretraining with diversity weight lam"),
    "finetune": (cmd_finetune, "fine-tune (F1-F4), optionally from --checkpoint"),
    "scenario-matrix": (cmd_scenario_matrix, "run the pretraining x fine-tuning matrix and print TA/RA/Epochs"),
    "evaluate": (cmd_evaluate, "TA and RA of a checkpoint on the test set"),
    "transfer-matrix": (cmd_transfer_matrix, "attack success rates between --models"),
    "ensemble-eval": (cmd_ensemble_eval, "robust accuracy of --models and of their averaged prediction"),
    "lambda-search": (cmd_lambda_search, "grid search over the diversity weight"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op and loss"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advpretrain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, help="scenario seed")
        if name == "gradcheck":
            p.add_argument("--cases", type=int, default=100, help="randomized cases per op (default 100)")
            continue
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        p.add_argument("--out", help="output directory (run.out_dir)")
        p.add_argument("--data-seed", type=int, help="dataset generator seed")
        p.add_argument("--n", type=int, help="number of generated training images")
        p.add_argument("--epsilon", help="perturbation radius, e.g. 8/255 (train and eval attacks)")
        p.add_argument("--alpha", help="attack step size, e.g. 2/255")
        if name in ("pretrain", "ensemble-pretrain", "finetune", "scenario-matrix", "lambda-search"):
            p.add_argument("--pretrain-kind")
            p.add_argument("--finetune-kind")
            p.add_argument("--tasks", help="comma-separated pretext tasks")
            p.add_argument("--lam", help="diversity weight")
            p.add_argument("--pretrain-epochs", type=int)
            p.add_argument("--finetune-epochs", type=int)
        if name in ("finetune", "evaluate"):
            p.add_argument("--checkpoint", help="checkpoint file")
        if name in ("transfer-matrix", "ensemble-eval"):
            p.add_argument("--models", help="comma-separated checkpoint files")
        if name in ("evaluate", "transfer-matrix", "ensemble-eval", "scenario-matrix"):
            p.add_argument("--steps", type=int, help="evaluation attack steps")
            p.add_argument("--eval-n", type=int, help="evaluate on the first N test images")
        if name in ("evaluate", "transfer-matrix"):
            p.add_argument("--all-examples", action="store_true",
                           help="count attacks on clean-misclassified examples as successes")
        if name == "evaluate":
            p.add_argument("--unforeseen", action="store_true", help="also run the reduced unforeseen-attack battery")
        if name == "scenario-matrix":
            p.add_argument("--task", help="pretext task for the pretrained rows")
        if name == "lambda-search":
            p.add_argument("--grid", help="comma-separated lambda values")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command][0](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # library errors carry their own type names
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
