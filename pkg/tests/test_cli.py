import json

import numpy as np
import pytest

from eegsal.cli import main
from eegsal.data_io import PreparedData

DESK = ["--preset", "desk"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    out = tmp_path_factory.mktemp("prep")
    assert main(["prepare", "--synthetic", "n=5,trials=4,seed=7", "--out", str(out), "--quiet"]) == 0
    return out


@pytest.fixture(scope="module")
def trained_run(prepared, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    for phase in ("vae-saliency", "vae-eeg", "gan"):
        code = main(["train", phase, "--data", str(prepared), "--out", str(run), "--epochs", "2", *DESK, "--quiet"])
        assert code == 0, phase
    assert main(["train", "gan", "--out", str(run), "--epochs", "1", "--no-adversarial", *DESK, "--quiet"]) == 0
    return run


def test_prepare_synthetic_shapes(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["prepare", "--synthetic", "n=5,trials=20,seed=7", "--out", str(out)]) == 0
    data = PreparedData.load(out)
    assert data.eeg_images.shape == (100, 401, 32, 32)
    assert data.saliency.shape == (100, 81, 81)
    assert len(set(data.participant_ids)) == 5
    stats = json.loads((out / "norm_stats.json").read_text())
    assert stats["std"] > 0
    capsys.readouterr()
    assert main(["prepare", "--synthetic", "n=5,trials=20,seed=7", "--out", str(out)]) == 0
    assert "up to date" in capsys.readouterr().out


def test_prepare_missing_dataset_is_input_error(tmp_path, capsys):
    assert main(["prepare", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err


def test_prepare_needs_exactly_one_source(tmp_path):
    assert main(["prepare", "--out", str(tmp_path / "o")]) == 2


def test_bad_synthetic_spec_is_usage_error(tmp_path):
    assert main(["prepare", "--synthetic", "n=five", "--out", str(tmp_path / "o")]) == 2


def test_gan_before_vaes_is_prerequisite_error(prepared, tmp_path, capsys):
    code = main(["train", "gan", "--data", str(prepared), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "train VAEs first" in capsys.readouterr().err


def test_unknown_config_key_rejected(prepared, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learning_rate": 0.1}))
    code = main(["train", "vae-saliency", "--data", str(prepared), "--out", str(tmp_path / "r"),
                 "--config", str(cfg)])
    assert code == 2


def test_train_writes_log_and_checkpoint(prepared, tmp_path):
    run = tmp_path / "run"
    code = main(["train", "vae-saliency", "--data", str(prepared), "--out", str(run), "--epochs", "5", *DESK])
    assert code == 0
    rows = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(5))
    assert {r["phase"] for r in rows} == {"saliency_vae"}
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["saliency_vae.ckpt"]
    assert json.loads((run / "config.json").read_text())["epochs_saliency_vae"] == 5


def test_global_flags_accepted_before_subcommand(prepared, tmp_path):
    run = tmp_path / "run"
    assert main(["--seed", "3", "--out", str(run), "train", "vae-saliency", "--data", str(prepared),
                 "--epochs", "1", *DESK]) == 0
    assert json.loads((run / "config.json").read_text())["seed"] == 3


def test_identical_runs_give_identical_logs(prepared, tmp_path):
    logs = []
    for name in ("a", "b"):
        run = tmp_path / name
        for phase in ("vae-saliency", "vae-eeg"):
            assert main(["train", phase, "--data", str(prepared), "--out", str(run), "--epochs", "2",
                         "--seed", "9", *DESK, "--quiet"]) == 0
        logs.append((run / "metrics.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_evaluate_panels_and_reference_rows(trained_run, capsys):
    capsys.readouterr()
    assert main(["evaluate", "--out", str(trained_run), "--trials", "3"]) == 0
    text = capsys.readouterr().out
    assert "Our method (1)" in text and "0.697" in text and "1.9869" in text
    report = json.loads((trained_run / "report.json").read_text())
    assert report["n_trials"] == 4  # last participant held out
    assert {r["approach"] for r in report["references"]} >= {"Our method (1)", "Our method (2)"}
    assert (trained_run / "report_noadv.json").exists()
    for fig in ("panels.png", "comparison.png", "loss_curves.png"):
        assert (trained_run / "figures" / fig).stat().st_size > 0


def test_panel_figure_grid(tmp_path):
    from eegsal.plotting import panel_figure

    maps = np.random.default_rng(0).random((3, 81, 81))
    _, shape = panel_figure(maps, maps, tmp_path / "p.png")
    assert shape == (3, 2)
    _, shape = panel_figure(maps, maps, tmp_path / "q.png", predicted_noadv=maps)
    assert shape == (3, 3)


def test_report_rerenders(trained_run, capsys):
    main(["evaluate", "--out", str(trained_run), "--quiet"])
    (trained_run / "report.txt").unlink()
    assert main(["report", "--out", str(trained_run)]) == 0
    assert "Our method (2)" in (trained_run / "report.txt").read_text()


def test_evaluate_without_run_is_input_error(tmp_path):
    assert main(["evaluate", "--out", str(tmp_path)]) == 2


def test_crossvalidate_needs_five_participants(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["prepare", "--synthetic", "n=4,trials=2,seed=1", "--out", str(data), "--quiet"]) == 0
    code = main(["crossvalidate", "--data", str(data), "--out", str(tmp_path / "cv"), "--epochs", "1", *DESK])
    assert code != 0
    assert "at least 5 participants" in capsys.readouterr().err


def test_crossvalidate_end_to_end(tmp_path):
    data = tmp_path / "d"
    assert main(["prepare", "--synthetic", "n=5,trials=2,seed=1", "--out", str(data), "--quiet"]) == 0
    cv = tmp_path / "cv"
    assert main(["crossvalidate", "--data", str(data), "--out", str(cv), "--epochs", "1", *DESK, "--quiet"]) == 0
    agg = json.loads((cv / "aggregate.json").read_text())
    assert agg["folds"] == [0, 1, 2, 3, 4]
    assert (cv / "figures" / "comparison.png").exists()
    assert all((cv / f"fold_{k}" / "report.txt").exists() for k in range(5))
    assert main(["report", "--out", str(cv)]) == 0
