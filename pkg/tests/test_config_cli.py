import inspect
import json

import pytest

from advpretrain import data_io as dio
from advpretrain.cli import SNAPSHOT, main
from advpretrain.config import ConfigError, load_config, parse_override
from advpretrain.data_io import generate_synthetic_dataset
from advpretrain.training import ScenarioConfig

TINY = ["--n", "60", "--set", "data.test_n=20", "--set", "scenario.batch_size=32",
        "--set", "scenario.probe_size=6"]


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------- configuration

def test_defaults():
    rc = load_config()
    assert rc["attack"]["epsilon"] == 8 / 255 and rc["attack"]["steps"] == 10
    assert rc["eval_attack"]["steps"] == 20 and rc["eval_attack"]["random_start"] is False
    assert rc.scenario().milestones == (0.3, 0.5)


def test_file_defaults_match_library_defaults():
    rc = load_config()
    assert rc.scenario() == ScenarioConfig()
    gen = inspect.signature(generate_synthetic_dataset).parameters
    for key in ("classes", "size", "noise", "texture", "shape_fidelity", "contrast", "scale"):
        assert rc["data"][key] == gen[key].default, key


def test_rational_values_parse_exactly(tmp_path):
    rc = load_config(write(tmp_path, "[attack]\nepsilon = 8/255\nalpha = 2/255\n"))
    assert rc.attack().epsilon == 8 / 255 and rc.attack().alpha == 2 / 255


def test_every_problem_is_reported(tmp_path):
    text = "[data]\nn = many\ncolour = red\n[attack]\nsteps = -1\n[bogus]\nx = 1\n"
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, text))
    problems = info.value.problems
    assert any("colour" in p for p in problems)
    assert any("[data] n" in p for p in problems)
    assert any("bogus" in p for p in problems)


def test_semantic_problems_are_collected():
    with pytest.raises(ConfigError) as info:
        load_config(overrides=["attack.epsilon=-1", "scenario.pretrain_kind=P1", "scenario.finetune_kind=F2",
                               "lambda.grid=0,-1", "data.scale=0.3,0.7"])
    text = str(info.value)
    assert "[data] scale" in text and "[attack]" in text and "partial fine-tuning" in text and "[lambda]" in text


def test_override_syntax():
    assert parse_override("attack.steps=3") == ("attack", "steps", "3")
    with pytest.raises(ConfigError):
        parse_override("steps=3")


def test_snapshot_round_trip(tmp_path):
    rc = load_config(overrides=["attack.epsilon=4/255", "scenario.tasks=rotation,jigsaw",
                                "scenario.pretrain_kind=P3", "scenario.lam=0.5", "scenario.ensemble=true"])
    path = rc.write_snapshot(tmp_path / "snap.ini")
    assert load_config(path).values == rc.values


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


# ---------------------------------------------------------------- command line

def test_gen_data(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), *TINY]) == 0
    train = dio.load_dataset(tmp_path / "train.assp")
    assert len(train) == 60 and len(dio.load_dataset(tmp_path / "test.assp")) == 20
    assert (tmp_path / SNAPSHOT).exists()


def test_flags_override_set_and_file(tmp_path):
    cfg = write(tmp_path, "[data]\nn = 100\n")
    assert main(["gen-data", "--config", str(cfg), "--set", "data.n=70", "--n", "60",
                 "--out", str(tmp_path / "o"), "--set", "data.test_n=10"]) == 0
    snap = load_config(tmp_path / "o" / SNAPSHOT)
    assert snap["data"]["n"] == 60


def test_config_errors_exit_with_code_2(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "data.nonsense=1", "--set", "attack.norm=l7"]) == 2
    err = capsys.readouterr().err
    assert "nonsense" in err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("ft")
    args = ["finetune", "--out", str(out), "--finetune-kind", "F4", "--finetune-epochs", "1",
            "--set", "attack.steps=2", "--set", "eval_attack.steps=3", *TINY]
    assert main(args) == 0
    return out


def test_finetune_outputs(trained):
    assert (trained / "finetune.asck").exists()
    rows = dio.read_metrics(trained / "metrics.jsonl")
    assert {r["metric"] for r in rows} >= {"val_ta", "val_ra", "train_loss"}
    summary = json.loads((trained / "summary.jsonl").read_text())
    assert summary["scenario"] == "P1,F4:none"


def test_rerun_from_snapshot_is_bit_identical(trained, tmp_path):
    assert main(["finetune", "--config", str(trained / SNAPSHOT), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "finetune.asck").read_bytes() == (trained / "finetune.asck").read_bytes()
    assert (tmp_path / "metrics.jsonl").read_text() == (trained / "metrics.jsonl").read_text()


def test_evaluate_with_zero_budget(trained, tmp_path):
    assert main(["evaluate", "--checkpoint", str(trained / "finetune.asck"), "--epsilon", "0",
                 "--out", str(tmp_path), *TINY]) == 0
    rec = json.loads((tmp_path / "eval.jsonl").read_text())
    assert rec["ra"] == rec["ta"]
    assert not dio.load_bitmap(tmp_path / "eval_success.bits").any()


def test_evaluate_unforeseen(trained, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(trained / "finetune.asck"), "--steps", "2", "--unforeseen",
                 "--out", str(tmp_path), *TINY]) == 0
    rec = json.loads((tmp_path / "eval.jsonl").read_text())
    assert set(rec["unforeseen"]) == {"clean", "linf_eps", "linf_2eps", "l2", "gaussian"}


def test_transfer_and_ensemble(trained, tmp_path):
    other = tmp_path / "other"
    assert main(["finetune", "--out", str(other), "--finetune-kind", "F3", "--finetune-epochs", "1",
                 "--seed", "3", *TINY]) == 0
    models = f"{trained / 'finetune.asck'},{other / 'finetune.asck'}"
    assert main(["transfer-matrix", "--models", models, "--steps", "2", "--out", str(tmp_path / "t"), *TINY]) == 0
    rows = [json.loads(l) for l in (tmp_path / "t" / "transfer.jsonl").read_text().splitlines()]
    assert sum("asr" in r for r in rows) == 4
    assert len(list((tmp_path / "t" / "bitmaps").glob("*.bits"))) == 4
    assert main(["ensemble-eval", "--models", models, "--steps", "2", "--out", str(tmp_path / "e"), *TINY]) == 0
    rows = [json.loads(l) for l in (tmp_path / "e" / "ensemble.jsonl").read_text().splitlines()]
    assert [r["model"] for r in rows][-1] == "ensemble"


def test_corrupted_checkpoint_exit_code(trained, tmp_path, capsys):
    raw = bytearray((trained / "finetune.asck").read_bytes())
    raw[-40] ^= 0xFF
    bad = tmp_path / "bad.asck"
    bad.write_bytes(bytes(raw))
    assert main(["evaluate", "--checkpoint", str(bad), "--out", str(tmp_path), *TINY]) == 1
    assert "IntegrityError" in capsys.readouterr().err


def test_pretrain_and_finetune_from_checkpoint(tmp_path):
    pre = tmp_path / "pre"
    assert main(["pretrain", "--out", str(pre), "--pretrain-kind", "P2", "--tasks", "rotation",
                 "--pretrain-epochs", "1", *TINY]) == 0
    ft = tmp_path / "ft"
    assert main(["finetune", "--out", str(ft), "--checkpoint", str(pre / "pretrain.asck"),
                 "--finetune-kind", "F1", "--finetune-epochs", "1", *TINY]) == 0
    summary = json.loads((ft / "summary.jsonl").read_text())
    assert summary["scenario"] == "P2,F1:rotation"


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--cases", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
