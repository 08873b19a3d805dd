import json

import pytest

from pctl.cli import EXIT_ABORT, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, OUT_DIR_ENV, main

SMALL = [
    "--set", "generator.counts.source.train=64",
    "--set", "generator.counts.target.train=64",
    "--set", "generator.counts.source.val=16",
    "--set", "generator.counts.target.val=32",
    "--set", "generator.counts.source.test=16",
    "--set", "generator.counts.target.test=32",
    "--set", "generator.d_inst=6",
    "--set", "generator.d_vis=6",
]
TINY = [
    "--set", "model.d=6", "--set", "model.hidden=8", "--set", "model.cls_hidden=6",
    "--set", "cluster.k_schedule=[4]", "--set", "loss.r=4", "--set", "loss.r_prime=2",
    "--set", "train.batch_size=16", "--set", "train.epochs=2", "--set", "train.pretrain_epochs=1",
]


@pytest.fixture()
def dataset(tmp_path):
    path = tmp_path / "ds.jsonl"
    assert main(["generate", "--out-dir", str(tmp_path / "gen"), "--out", str(path), *SMALL]) == EXIT_OK
    return path


def test_generate_writes_manifest_and_echoes_config(tmp_path, capsys, dataset):
    manifest = json.loads((tmp_path / "gen" / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["config"]["generator.counts.target.train"] == 64
    assert "tool_version" in manifest and "argv" in manifest
    out = capsys.readouterr().out
    assert "# resolved config" in out and "loss.lambda = 0.03125" in out
    assert "domain-gap probe" in out


def test_seed_changes_dataset(tmp_path, dataset):
    other = tmp_path / "other.jsonl"
    main(["generate", "--out-dir", str(tmp_path / "g2"), "--out", str(other), "--seed", "1", *SMALL])
    assert other.read_bytes() != dataset.read_bytes()
    same = tmp_path / "same.jsonl"
    main(["generate", "--out-dir", str(tmp_path / "g3"), "--out", str(same), *SMALL])
    assert same.read_bytes() == dataset.read_bytes()


def test_unknown_key_exits_2_and_names_it(tmp_path, capsys):
    code = main(["generate", "--out-dir", str(tmp_path), "--set", "loss.lamda=0.1"])
    assert code == EXIT_USAGE
    assert "loss.lamda" in capsys.readouterr().err


def test_bad_arguments_exit_2(tmp_path):
    assert main(["train"]) == EXIT_USAGE
    assert main(["nonsense"]) == EXIT_USAGE
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_train_eval_plot(tmp_path, dataset, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out-dir", str(run), "--mode", "pctl", "--dump-banks", *TINY]) == EXIT_OK
    out = capsys.readouterr().out
    assert "source batches 8, target batches 8" in out
    for name in ("manifest.json", "metrics.csv", "timing.csv", "checkpoint.bin", "config.toml"):
        assert (run / name).is_file()
    assert len(list((run / "banks").glob("*.json"))) == 2
    manifest = json.loads((run / "manifest.json").read_text())
    assert len(manifest["dataset_hash"]) == 64 and manifest["seed"] == 0

    ev = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(dataset), "--out-dir", str(ev)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "TP=" in text and "FP=" in text and "FN=" in text and "TN=" in text
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(dataset), "--out-dir", str(ev), "--json", "--csv", str(ev / "r.csv")]) == EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert result["tp"] + result["fp"] + result["fn"] + result["tn"] == result["n"] == 32
    assert (ev / "r.csv").read_text().startswith("split,domain,n,accuracy")

    assert main(["plot", "--metrics", str(run / "metrics.csv"), "--out-dir", str(tmp_path / "pl")]) == EXIT_OK
    assert (run / "metrics.svg").is_file()
    # plot keeps its own manifest
    assert json.loads((run / "manifest.json").read_text())["command"] == "train"


def test_target_only_mode_uses_no_source(tmp_path, dataset, capsys):
    assert main(["train", "--data", str(dataset), "--out-dir", str(tmp_path / "to"), "--mode", "target-only", *TINY]) == EXIT_OK
    assert "source batches 0" in capsys.readouterr().out


def test_missing_checkpoint_exits_2(tmp_path, dataset, capsys):
    code = main(["eval", "--checkpoint", str(tmp_path / "nope.bin"), "--data", str(dataset), "--out-dir", str(tmp_path)])
    assert code == EXIT_USAGE
    assert "checkpoint not found" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_3(tmp_path, dataset, capsys):
    code = main(["train", "--data", str(dataset), "--out-dir", str(tmp_path / "nan"), "--mode", "target-only", *TINY, "--set", "optim.lr=1e308", "--set", "optim.body_lr=1e308"])
    assert code == EXIT_ABORT
    assert "aborted" in capsys.readouterr().err
    assert (tmp_path / "nan" / "metrics.csv").is_file()


def test_verify_passes_and_catches_a_fault(tmp_path, capsys):
    assert main(["verify", "--only", "temperature", "--only", "ema", "--out-dir", str(tmp_path / "v")]) == EXIT_OK
    assert "[PASS]" in capsys.readouterr().out
    assert main(["verify", "--only", "gradients", "--inject-fault", "info_nce_sign", "--out-dir", str(tmp_path / "f")]) == EXIT_VERIFY
    assert "[FAIL]" in capsys.readouterr().out
    assert main(["verify", "--only", "nothing", "--out-dir", str(tmp_path / "u")]) == EXIT_USAGE


def test_ablation_rejects_small_k(tmp_path, dataset, capsys):
    code = main(["ablation", "--data", str(dataset), "--schedule", "32", "--out-dir", str(tmp_path / "ab")])
    assert code == EXIT_USAGE
    assert "minimum k" in capsys.readouterr().err


def test_compare_and_ablation_write_tables(tmp_path, dataset):
    assert main(["compare", "--data", str(dataset), "--seeds", "0,1", "--out-dir", str(tmp_path / "c"), *TINY]) == EXIT_OK
    rows = (tmp_path / "c" / "compare.csv").read_text().splitlines()
    assert rows[0] == "condition,schedule,mean,std,accuracies" and len(rows) == 4
    assert main(["ablation", "--data", str(dataset), "--seeds", "0", "--schedule", "3", "--schedule", "3,4", "--out-dir", str(tmp_path / "a"), *TINY]) == EXIT_OK
    assert len((tmp_path / "a" / "ablation.csv").read_text().splitlines()) == 3
    assert main(["compare", "--data", str(dataset), "--seeds", "a,b", "--out-dir", str(tmp_path / "c")]) == EXIT_USAGE


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "envout"))
    assert main(["generate", *SMALL]) == EXIT_OK
    assert (tmp_path / "envout" / "generate" / "dataset.jsonl").is_file()
    assert (tmp_path / "envout" / "generate" / "manifest.json").is_file()
