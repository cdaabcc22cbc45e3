import re

import pytest

import hiurnet.cli as cli
from hiurnet.cli import main
from hiurnet.config import load_config
from hiurnet.training import TrainingDiverged

SMALL = [
    "--set", "world.n_cities=4",
    "--set", "world.grid_side=3",
    "--set", "world.flow_density=0.2",
    "--set", "model.embed_dim=8",
    "--set", "model.heads=2",
    "--set", "model.layers=1",
    "--set", "model.decoder_hidden=8",
]
ERROR_LINE = re.compile(r'^error code=(\d) kind=(usage|config|data|numerical) message=".*"$')


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(err, code):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    m = ERROR_LINE.match(lines[0])
    assert m and int(m.group(1)) == code


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("run"))
    for argv in (["gen-synth", "--seed", "7", "--out", d], ["build-graph", "--data", d], ["train", "--data", d, "--epochs", "4"]):
        assert main(argv + SMALL) == 0
    return d


def test_train_prints_epoch_lines(tmp_path, capsys):
    d = str(tmp_path)
    assert main(["gen-synth", "--data", d] + SMALL) == 0
    assert main(["build-graph", "--data", d] + SMALL) == 0
    capsys.readouterr()
    code, out, _ = run(capsys, "train", "--data", d, "--epochs", "3", *SMALL)
    assert code == 0
    lines = [l for l in out.splitlines() if l.startswith("epoch=")]
    assert len(lines) == 3
    for n, line in enumerate(lines, 1):
        assert re.fullmatch(rf"epoch={n} loss=\S+ val_rmse=\S+", line)
        float(line.split("loss=")[1].split()[0])


def test_evaluate_has_three_task_blocks(trained_dir, capsys):
    code, out, _ = run(capsys, "evaluate", "--data", trained_dir, *SMALL)
    assert code == 0
    assert re.findall(r"^\[(\w+)\]$", out, re.M) == ["c2m", "m2c", "m2m"]
    for field in ("rmse", "mae", "pcc"):
        assert len(re.findall(rf"^{field} = ", out, re.M)) == 3


def test_explain_lists_at_most_k_edges(trained_dir, capsys):
    code, out, _ = run(capsys, "explain", "--data", trained_dir, "--city", "3", "--k", "2", "--steps", "4", "--workers", "1", *SMALL)
    assert code == 0
    assert 1 <= len(re.findall(r"^\[edge\.\d+\]$", out, re.M)) <= 2


def test_gravity_commands(trained_dir, capsys):
    assert main(["gravity-train", "--data", trained_dir, "--set", "gravity.max_epochs=5", *SMALL]) == 0
    code, out, _ = run(capsys, "gravity-evaluate", "--data", trained_dir, *SMALL)
    assert code == 0
    assert re.findall(r"^\[(\w+)\]$", out, re.M) == ["c2m", "m2c", "m2m"]


def test_unknown_config_key_names_key_and_line(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("seed: 1\nmodel:\n  embed_dim: 16\n  depth: 3\n")
    code, _, err = run(capsys, "build-graph", "--config", str(cfg), "--data", str(tmp_path))
    assert code == 1
    assert_error(err, 1)
    assert "key=model.depth" in err and "line=4" in err


def test_bad_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 1
    assert_error(err, 1)


def test_missing_data_is_data_error(tmp_path, capsys):
    code, _, err = run(capsys, "build-graph", "--data", str(tmp_path / "empty"))
    assert code == 2
    assert_error(err, 2)


def test_numerical_failure_exit_code(trained_dir, capsys, monkeypatch):
    def boom(*a, **k):
        raise TrainingDiverged(2, "loss is nan")

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(capsys, "train", "--data", trained_dir, *SMALL)
    assert code == 3
    assert_error(err, 3)


def test_seed_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 3\n")
    assert load_config(cfg, {}, env={}).seed == 3
    assert load_config(cfg, {}, env={"HIURNET_SEED": "5"}).seed == 5
    assert load_config(cfg, {"seed": 9}, env={"HIURNET_SEED": "5"}).seed == 9


def test_env_seed_changes_generated_data(tmp_path, monkeypatch):
    monkeypatch.setenv("HIURNET_SEED", "1")
    assert main(["gen-synth", "--data", str(tmp_path / "a")] + SMALL) == 0
    monkeypatch.setenv("HIURNET_SEED", "2")
    assert main(["gen-synth", "--data", str(tmp_path / "b")] + SMALL) == 0
    assert (tmp_path / "a/flows.csv").read_bytes() != (tmp_path / "b/flows.csv").read_bytes()


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for needle in ("model.embed_dim", "128", "train.learning_rate", "0.001", "HIURNET_SEED"):
        assert needle in out
