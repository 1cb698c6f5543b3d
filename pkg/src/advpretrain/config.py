"""Run configuration: INI files with one level of sections, typed and validated up front."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig, AttackError, parse_number
from .training import ScenarioConfig, TrainingError


class ConfigError(Exception):
    """All problems found in a configuration, reported together."""

    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(str(text).strip())


def _float(text: str) -> float:
    return parse_number(text)


def _str(text: str) -> str:
    return str(text).strip()


def _list(conv):
    def parse(text: str) -> tuple:
        text = str(text).strip()
        return tuple(conv(v) for v in text.split(",") if v.strip()) if text else ()
    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


_ATTACK = {"epsilon": (_float, 8 / 255), "alpha": (_float, 2 / 255), "steps": (_int, 10),
           "norm": (_str, "linf"), "random_start": (_bool, True), "seed": (_int, 0)}

SCHEMA = {
    "data": {
        "seed": (_int, 0), "n": (_int, 4000), "classes": (_int, 4), "size": (_int, 16),
        "noise": (_float, 0.05), "texture": (_float, 0.02), "shape_fidelity": (_float, 0.8),
        "contrast": (_list(_float), (0.25, 0.5)), "scale": (_list(_float), (0.36, 0.46)),
        "split_ratio": (_float, 0.9), "test_seed": (_int, 1000), "test_n": (_int, 1000),
        "pretrain_seed": (_int, -1), "pretrain_n": (_int, 0),
        "train_path": (_str, ""), "test_path": (_str, ""),
    },
    "scenario": {
        "pretrain_kind": (_str, "P1_none"), "finetune_kind": (_str, "F4_full_adversarial"),
        "tasks": (_list(_str), ()), "ensemble": (_bool, False), "lam": (_float, 0.0),
        "pretrain_epochs": (_int, 8), "finetune_epochs": (_int, 10), "batch_size": (_int, 64),
        "pretrain_lr": (_float, 0.05), "pretrain_lr_min": (_float, 0.0),
        "pretrain_eps_warmup": (_float, 0.5), "finetune_lr": (_float, 0.1),
        "milestones": (_list(_float), (0.3, 0.5)), "lr_factor": (_float, 10.0), "momentum": (_float, 0.9),
        "probe_size": (_int, 200), "smoothing_sigma": (_float, 0.25), "seed": (_int, 0),
        "arch_id": (_str, "desk16"), "jigsaw_k": (_int, 2), "jigsaw_size": (_int, 24),
        "selfie_grid": (_int, 4), "selfie_masked": (_int, 3), "outer_regularizer": (_bool, False),
    },
    "attack": dict(_ATTACK),
    "eval_attack": {**_ATTACK, "steps": (_int, 20), "random_start": (_bool, False)},
    "run": {
        "out_dir": (_str, "runs/default"), "checkpoint": (_str, ""), "models": (_list(_str), ()),
        "matrix_task": (_str, "rotation"), "cells": (_list(_str), ()), "all_examples": (_bool, False),
        "eval_n": (_int, 0),
    },
    "lambda": {"grid": (_list(_float), (0.0, 0.5, 2.0))},
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)      # section -> key -> typed value
    source: str = ""

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def attack(self, section: str = "attack") -> AttackConfig:
        return AttackConfig(**self.values[section])

    def scenario(self, **overrides) -> ScenarioConfig:
        kw = dict(self.values["scenario"])
        kw.update(overrides)
        return ScenarioConfig(attack=self.attack("attack"), eval_attack=self.attack("eval_attack"), **kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in self.values.items():
            cp[section] = {k: _fmt(v) for k, v in keys.items()}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in cp[section].items()]
            lines.append("")
        return "\n".join(lines)

    def write_snapshot(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path


def parse_override(text: str) -> tuple:
    """``section.key=value`` -> (section, key, value)."""
    lhs, sep, value = text.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError([f"override {text!r} is not of the form section.key=value"])
    return section, key, value


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an INI file (optional), apply ``section.key=value`` overrides, validate everything."""
    problems = []
    raw: dict = {s: {} for s in SCHEMA}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError([f"cannot read {path}: {exc}"]) from None
        for section in cp.sections():
            if section not in SCHEMA:
                problems.append(f"unknown section [{section}]")
                continue
            raw[section].update(cp[section])
    for item in overrides:
        section, key, value = item if isinstance(item, tuple) else parse_override(item)
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}] in override")
            continue
        raw[section][key] = value
    values = {}
    for section, schema in SCHEMA.items():
        values[section] = {}
        for key in raw[section]:
            if key not in schema:
                problems.append(f"[{section}] unknown key {key!r}")
        for key, (conv, default) in schema.items():
            if key not in raw[section]:
                values[section][key] = default
                continue
            try:
                values[section][key] = conv(raw[section][key])
            except (ValueError, TypeError) as exc:
                problems.append(f"[{section}] {key}: {exc}")
    if not problems:
        problems += _semantic_problems(values)
    if problems:
        raise ConfigError(problems)
    return RunConfig(values, str(path or ""))


def _semantic_problems(values: dict) -> list:
    out = []
    d = values["data"]
    if d["n"] <= 0 and not d["train_path"]:
        out.append("[data] n must be positive")
    if d["classes"] < 2:
        out.append("[data] classes must be at least 2")
    if d["size"] <= 0 or d["size"] % 4:
        out.append("[data] size must be a positive multiple of 4")
    for key in ("contrast", "scale"):
        lo_hi = d[key]
        if len(lo_hi) != 2 or not 0 <= lo_hi[0] <= lo_hi[1]:
            out.append(f"[data] {key} must be two values lo, hi with 0 <= lo <= hi")
    if d["scale"] and d["scale"][-1] >= 0.5:
        out.append("[data] scale must stay below 0.5 so shapes fit the image")
    if not 0 < d["split_ratio"] < 1:
        out.append("[data] split_ratio must lie in (0, 1)")
    for section in ("attack", "eval_attack"):
        try:
            AttackConfig(**values[section])
        except AttackError as exc:
            out.append(f"[{section}] {exc}")
    try:
        ScenarioConfig(**values["scenario"])
    except TrainingError as exc:
        found = str(exc).removeprefix("invalid scenario: ").split("; ")
        if values["run"]["checkpoint"]:
            # the checkpoint supplies the pretrained encoder
            found = [p for p in found if not p.startswith("partial fine-tuning")]
        out += [f"[scenario] {p}" for p in found]
    if any(v < 0 for v in values["lambda"]["grid"]):
        out.append("[lambda] grid values must be non-negative")
    for cell in values["run"]["cells"]:
        if cell.count(":") != 1:
            out.append(f"[run] cell {cell!r} must look like P3:F4")
    return out
