import json

import pytest

from conceptmoe.cli import EXIT_CONFIG, EXIT_MISSING_FILE, EXIT_USAGE, build_parser, main
from conceptmoe.synthdata import read_dataset

TRAIN_FLAGS = ["--num_concepts", "2", "--epochs", "1", "--batch_size", "8", "--seed", "3"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """gen-data -> train-partition -> train-moe on a tiny dataset."""
    root = tmp_path_factory.mktemp("run")
    data = root / "d.cmds"
    assert main(["gen-data", "--spec", "default", "--n", "16", "--out", str(data)]) == 0
    assert main(["train-partition", "--data", str(data), "--out", str(root / "p"), "--learning_rate", "0.01", *TRAIN_FLAGS]) == 0
    assert (
        main(
            [
                "train-moe",
                "--data",
                str(data),
                "--partition",
                str(root / "p" / "partition.ckpt"),
                "--out",
                str(root / "m"),
                *TRAIN_FLAGS,
            ]
        )
        == 0
    )
    return root


def test_gen_data_readable(run):
    ds = read_dataset(run / "d.cmds")
    assert len(ds) == 16
    manifest = json.loads((run / "d.cmds.manifest.json").read_text())
    assert manifest["seed"] == 42 and manifest["artifacts"] == {"dataset": "d.cmds"}


def test_run_dirs_have_one_manifest(run):
    for sub in ("p", "m"):
        manifests = list((run / sub).glob("*manifest*"))
        assert [m.name for m in manifests] == ["manifest.json"]
        data = json.loads(manifests[0].read_text())
        assert {"command_line", "config_hash", "seed", "artifacts", "version"} <= set(data)
        for name in data["artifacts"].values():
            assert (run / sub / name).is_file()


def test_explain_eval_and_ablate(run, capsys):
    ckpt = str(run / "m" / "moe.ckpt")
    data = str(run / "d.cmds")
    assert main(["explain", "--checkpoint", ckpt, "--data", data, "--out", str(run / "e"), "--overlays", "2"]) == 0
    assert (run / "e" / "overlay_1.ppm").read_bytes().startswith(b"P6")
    assert main(["eval", "--checkpoint", ckpt, "--data", data]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert main(["ablate", "--checkpoint", ckpt, "--data", data, "--out", str(run / "a"), "--mode", "remove"]) == 0
    rows = (run / "a" / "ablation_remove.csv").read_text().splitlines()
    assert rows[0] == "parts,accuracy" and len(rows) == 1 + 2 + 1  # header + K + 1 points


def test_identical_runs_identical_csv(run, tmp_path):
    args = ["train-partition", "--data", str(run / "d.cmds"), "--learning_rate", "0.01", *TRAIN_FLAGS]
    assert main([*args, "--out", str(tmp_path / "x")]) == 0
    a = (tmp_path / "x" / "partition_metrics.csv").read_bytes()
    assert a == (run / "p" / "partition_metrics.csv").read_bytes()


def test_config_file_and_flag_precedence(run, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("learning_rate = 0.01\nepochs = 5\nnum_concepts = 2\nbatch_size = 8\nseed = 3\n")
    out = tmp_path / "y"
    assert main(["train-partition", "--data", str(run / "d.cmds"), "--out", str(out), "--config", str(cfg), "--epochs", "1"]) == 0
    assert len((out / "partition_metrics.csv").read_text().splitlines()) == 2


def test_exit_codes(run, tmp_path, capsys):
    assert main(["train-partition", "--bogus"]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(run / "d.cmds")]) == EXIT_MISSING_FILE
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    code = main(["train-partition", "--data", str(run / "d.cmds"), "--out", str(tmp_path / "z"), "--config", str(bad)])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error:")


def test_help_lists_train_flags(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train-moe", "--help"])
    text = capsys.readouterr().out
    for flag in ("--learning_rate", "--momentum", "--weight_decay", "--gamma", "--num_concepts", "--lambda_r", "--seed"):
        assert flag in text


def test_gradcheck_subset(capsys, monkeypatch):
    import conceptmoe.gradcheck as gc

    real = gc.run_suite
    monkeypatch.setattr(gc, "run_suite", lambda seed, instances: real(seed, 2, names=["softmax", "l_g"]))
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "softmax" in out and "l_g" in out and "max_rel_err" in out
