import json
from argparse import Namespace

import numpy as np
import pytest

from py_oce_seg.core.client import OceClient
from py_oce_seg.core.data_io import tensor_read, tensor_write
from py_oce_seg.core.engine import OceEngine
from py_oce_seg.core.utils.config import load_run_config
from py_oce_seg.core.utils.helpers import Command, ConfigError, ExitCode, PlacementError
from py_oce_seg.interface.cli import main


@pytest.fixture(autouse=True)
def in_tmp_path(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def oce_engine():
    return OceEngine()


@pytest.fixture
def oce_client():
    return OceClient()


@pytest.fixture
def label_folder(tmp_path):
    """A folder holding two label maps under labels/."""
    root = tmp_path / "gt"
    for index in range(2):
        labels = np.zeros((16, 16), dtype=np.int32)
        labels[2:6, 2:6] = 1
        labels[8 + index:14, 8:14] = 2
        tensor_write(str(root / "labels" / f"img_{index}.ocet"), labels)
    return root


def test_engine_supported_commands(oce_engine):
    command = Command()
    assert oce_engine.supported_commands == [
        command.SYNTH, command.TRAIN, command.PREDICT, command.SEGMENT,
        command.EVAL, command.SWEEP, command.PSEUDO, command.THEORY,
    ]


def test_engine_unknown_command(oce_engine):
    response = oce_engine.process_request("bake", Namespace())
    assert not response.ok
    assert response.exit_code == ExitCode().USAGE_ERROR


def test_engine_failure_mapping(oce_engine):
    assert oce_engine.report_failure("train", ConfigError("bad")).exit_code == 1
    assert oce_engine.report_failure("synth", PlacementError("full")).exit_code == 2
    assert oce_engine.report_failure("eval", FileNotFoundError("gone")).exit_code == 2
    with pytest.raises(KeyError):
        oce_engine.report_failure("eval", KeyError("bug"))


def test_engine_logs_once(oce_engine):
    OceEngine()
    handlers = oce_engine.logger.handlers
    assert sum(type(h).__name__ == "StreamHandler" for h in handlers) == 1
    assert sum(type(h).__name__ == "FileHandler" for h in handlers) == 1


def test_client_format_request(oce_client):
    args = Namespace(command="train", data="d", epochs=5, resume=None, per_image=False)
    assert oce_client.format_request("train", args) == "▶ train --data d --epochs 5"


def test_client_positive_response(oce_client):
    args = Namespace(config=None, seed=None, scenes=2, objects=2, boundary=None, out=None)
    formatted = oce_client.send_request("theory", args, True)
    assert formatted.startswith("🟢 theory: 2 scenes")


def test_client_negative_response(oce_client):
    response = oce_client.send_request("bake", Namespace(), False)
    assert response.exit_code == 1
    assert oce_client.format_response(response).startswith("🔴 bake (exit 1): ")


def test_config_defaults_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"train": {"epochs": 3}, "segment": {"bandwidth": 5.0}}), encoding="utf-8")
    config = load_run_config(str(path), seed=4, overrides={"train": {"batch_size": 2, "crop_size": None}})
    assert config.seed == 4
    assert (config.train.epochs, config.train.batch_size, config.train.crop_size) == (3, 2, 252)
    assert config.segment.bandwidth == 5.0
    assert config.loss.kappa == 10.0


@pytest.mark.parametrize("content", ['{"train": {"epoch": 3}}', '{"segment": {"shrink_distance": 9}}', "[1]", "{"])
def test_config_rejects_bad_files(tmp_path, content):
    path = tmp_path / "run.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_run_config(str(path))


def test_cli_requires_command():
    assert main([]) == 1


def test_cli_unknown_command_and_flag(capsys):
    assert main(["bake"]) == 1
    assert main(["theory", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_help(capsys):
    assert main(["?"]) == 0
    assert "synth" in capsys.readouterr().out


def test_cli_rejects_threshold_out_of_range(label_folder):
    assert main(["eval", "--gt", str(label_folder), "--pred", str(label_folder), "--thresholds", "1.5"]) == 1


def test_cli_bad_config_is_usage_error(tmp_path, label_folder):
    path = tmp_path / "run.json"
    path.write_text('{"unknown": {}}', encoding="utf-8")
    assert main(["theory", "--config", str(path), "--scenes", "1"]) == 1


def test_cli_eval_identical_masks(capsys, label_folder):
    assert main(["eval", "--gt", str(label_folder), "--pred", str(label_folder), "--thresholds", "0.5"]) == 0
    captured = capsys.readouterr()
    lines = captured.out.splitlines()
    assert lines[0] == "metric\tthreshold\tvalue"
    assert "f1\t0.5\t1.000000" in lines
    assert "seg\t-\t1.000000" in lines
    assert "🟢 eval" in captured.err


def test_cli_eval_per_image_report(tmp_path, capsys, label_folder):
    out = tmp_path / "report" / "scores.tsv"
    assert main(["eval", "--gt", str(label_folder), "--pred", str(label_folder), "--per-image",
                 "--out", str(out)]) == 0
    assert out.read_text(encoding="utf-8").startswith("metric\tthreshold\tvalue\n")
    percentiles = (tmp_path / "report" / "scores_percentiles.tsv").read_text(encoding="utf-8").splitlines()
    assert percentiles[0] == "percentile\tstem\tf1"
    assert len(percentiles) == 6
    assert "percentile\tstem\tf1" in capsys.readouterr().out


def test_cli_eval_missing_prediction(tmp_path, label_folder):
    assert main(["eval", "--gt", str(label_folder), "--pred", str(tmp_path / "nothing")]) == 2


def test_cli_synth_is_deterministic(tmp_path):
    flags = ["--images", "3", "--canvas", "64", "--objects", "2", "--seed", "7"]
    assert main(["synth", "--out", str(tmp_path / "a"), *flags]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *flags]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert len([p for p in files_a if p.suffix == ".ocet"]) == 6
    for relative in files_a:
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()
    config = json.loads((tmp_path / "a" / "run_config.json").read_text(encoding="utf-8"))
    assert config["seed"] == 7
    assert config["data"]["canvas_size"] == 64


def test_cli_synth_placement_failure(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--images", "1", "--canvas", "24", "--objects", "50"]) == 2


def test_cli_pseudo(tmp_path):
    data = tmp_path / "data"
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"data": {"radius_min": 4.0, "radius_max": 6.0, "eval_fraction": 0.5}}),
                      encoding="utf-8")
    assert main(["synth", "--config", str(config), "--out", str(data), "--images", "2", "--canvas", "64",
                 "--objects", "4"]) == 0
    eval_split = str(data / "eval")
    assert main(["pseudo", "--pred", eval_split, "--gt", eval_split, "--out", str(tmp_path / "p"),
                 "--fraction", "0.5"]) == 0
    pseudo = tensor_read(str(tmp_path / "p" / "pseudo" / "labels" / "synth_0001.ocet"))
    sparse = tensor_read(str(tmp_path / "p" / "sparse" / "labels" / "synth_0001.ocet"))
    truth = tensor_read(str(data / "eval" / "labels" / "synth_0001.ocet"))
    assert np.array_equal(pseudo > 0, truth > 0)
    assert sparse.max() == 2
    assert (tmp_path / "p" / "pseudo" / "images" / "synth_0001.ocet").exists()
    assert (tmp_path / "p" / "sparse" / "known_background" / "synth_0001.ocet").exists()


def test_cli_theory(tmp_path, capsys):
    out = tmp_path / "theory" / "report.tsv"
    assert main(["theory", "--scenes", "3", "--objects", "4", "--boundary", "bounded", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed == out.read_text(encoding="utf-8")
    assert printed.splitlines()[0].startswith("patch_a\tpatch_b\tterm")
    assert (tmp_path / "theory" / "run_config.json").exists()


def test_cli_pseudo_shape_mismatch_is_data_error(tmp_path, label_folder):
    for index in range(2):
        tensor_write(str(tmp_path / "pred" / "masks" / f"img_{index}.ocet"), np.ones((12, 12), dtype=np.int32))
    assert main(["pseudo", "--pred", str(tmp_path / "pred"), "--gt", str(label_folder), "--out",
                 str(tmp_path / "p"), "--fraction", "1.0"]) == 2


def test_exit_codes():
    assert vars(ExitCode()) == {"SUCCESS": 0, "USAGE_ERROR": 1, "DATA_ERROR": 2}


def test_every_handler_documents_its_request(oce_engine):
    for handler in oce_engine.command_map.values():
        assert handler.process_request.__doc__.strip().startswith("Processes")
