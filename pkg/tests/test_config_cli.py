import json
from pathlib import Path

import numpy as np
import pytest

from splitnn import report
from splitnn.cli import main
from splitnn.config import OUTPUT_ENV, load_config, parse_config
from splitnn.errors import ConfigError
from splitnn.protocol import HEADER, FrameType, decode

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

VANILLA = """
[experiment]
method = splitnn
topology = vanilla
cut_points = 2
seed = 3
name = van

[network]
layers =
    dense 6 12
    relu
    dense 12 2
    softmax_ce 2

[dataset]
source = synthetic
n = 120
dims = 6
classes = 2
seed = 1

[partition]
num_clients = 2

[hyperparams]
batch = 16
lr = 0.1
epochs = 2
"""


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_parse_defaults_and_layers():
    cfg = parse_config(VANILLA)
    assert cfg.cut_points == [2] and len(cfg.network) == 4
    assert cfg.batch == 16 and cfg.epochs == 2 and cfg.transport == "inprocess"


def test_vertical_partition_with_vanilla_is_rejected():
    text = VANILLA.replace("[partition]\nnum_clients = 2", "[partition]\nkind = vertical\nfeature_widths = 3, 3")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert any("vertical partition" in v for v in info.value.violations)


def test_all_violations_are_listed():
    text = VANILLA.replace("lr = 0.1", "lr = -1").replace("batch = 16", "batch = 0")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert len(info.value.violations) >= 2


def test_output_dir_precedence(tmp_path, monkeypatch):
    path = write(tmp_path, VANILLA)
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert load_config(path).output_dir == str(tmp_path / "env")
    assert load_config(path, {"output_dir": "cli"}).output_dir == "cli"


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.ini")))
def test_shipped_configs_validate(name, capsys):
    assert main(["validate", str(CONFIGS / name)]) == 0


def test_validate_reports_errors(tmp_path, capsys):
    path = write(tmp_path, VANILLA.replace("topology = vanilla", "topology = ring"))
    assert main(["validate", str(path)]) == 2
    assert "ring" in capsys.readouterr().err


def test_run_writes_artifacts(tmp_path, capsys):
    path = write(tmp_path, VANILLA)
    assert main(["run", str(path), "--output-dir", str(tmp_path / "out")]) == 0
    out = tmp_path / "out" / "van"
    rows = report.read_metrics(out / "metrics.csv")
    steps = [r for r in rows if r.row_type == "step"]
    evals = [r for r in rows if r.row_type == "eval"]
    assert len(steps) == 2 * 8 and len(evals) == 2 and len(rows) == len(steps) + len(evals)
    means = [np.mean([r.loss for r in steps if r.epoch == e]) for e in range(2)]
    assert means[1] <= means[0]
    assert "accounting: measured == predicted" in (out / "summary.txt").read_text()
    meta = json.loads((out / "meta.json").read_text())
    assert meta["client_roles"] == ["client0", "client1"]

    data = (out / "weights.spln").read_bytes()
    frames, pos = [], 0
    while pos < len(data):
        length = HEADER.unpack_from(data, pos)[5]
        frames.append(decode(data[pos:pos + 16 + length]))
        pos += 16 + length
    assert all(f.frame_type == FrameType.WEIGHTS for f in frames)
    assert sum(len(f.tensors) for f in frames) == 2 * 2 + 2  # two client copies of one dense, server dense


def test_run_is_deterministic_across_transports(tmp_path):
    path = write(tmp_path, VANILLA)
    main(["run", str(path), "--output-dir", str(tmp_path / "a")])
    main(["run", str(path), "--output-dir", str(tmp_path / "b")])
    main(["run", str(path), "--output-dir", str(tmp_path / "c"), "--transport", "tcp"])
    texts = {(tmp_path / d / "van" / "metrics.csv").read_bytes() for d in "abc"}
    assert len(texts) == 1


def test_seed_override_changes_run(tmp_path):
    path = write(tmp_path, VANILLA.replace("name = van\n", ""))
    main(["run", str(path), "--output-dir", str(tmp_path), "--seed", "11"])
    assert (tmp_path / "splitnn-vanilla-seed11" / "metrics.csv").exists()


def test_summary_includes_comparison_with_prior_runs(tmp_path):
    path = write(tmp_path, VANILLA)
    fed = write(tmp_path, VANILLA.replace("method = splitnn", "method = federated").replace("name = van", "name = fed"),
                "f.ini")
    main(["run", str(path), "--output-dir", str(tmp_path / "out")])
    main(["run", str(fed), "--output-dir", str(tmp_path / "out")])
    text = (tmp_path / "out" / "fed" / "summary.txt").read_text()
    assert "Desk-scale measurements" in text and "0.1548" in text


def test_missing_dataset_file_exits_nonzero(tmp_path, capsys):
    text = VANILLA.replace("source = synthetic\nn = 120\ndims = 6\nclasses = 2\nseed = 1",
                           "source = csv\npath = nowhere.csv")
    assert main(["run", str(write(tmp_path, text)), "--output-dir", str(tmp_path)]) == 2
    assert "nowhere.csv" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["ushaped_synthetic.ini", "vertical_synthetic.ini", "multitask_synthetic.ini",
                                  "federated_synthetic.ini", "largebatch_synthetic.ini"])
def test_shipped_configs_run_with_exact_accounting(name, tmp_path):
    assert main(["run", str(CONFIGS / name), "--output-dir", str(tmp_path)]) == 0
    (run,) = report.find_runs(tmp_path)
    assert "accounting: measured == predicted" in (run / "summary.txt").read_text()


def test_cnn_config_runs_on_idx_files(mnist_idx, tmp_path):
    images, labels = mnist_idx
    text = (CONFIGS / "mnist_cnn.ini").read_text()
    text = text.replace("data/train-images-idx3-ubyte", str(images)).replace("data/train-labels-idx1-ubyte", str(labels))
    text = text.replace("limit = 2000", "limit = 200").replace("epochs = 3", "epochs = 1")
    assert main(["run", str(write(tmp_path, text)), "--output-dir", str(tmp_path / "out")]) == 0
    (run,) = report.find_runs(tmp_path / "out")
    assert "accounting: measured == predicted" in (run / "summary.txt").read_text()
