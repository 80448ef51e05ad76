import subprocess
import sys

import pytest

from msam.cli import main
from msam.volume_io import read_manifest


def test_gen_phantoms(tmp_path, capsys):
    assert main(["gen-phantoms", "--count", "2", "--size", "16", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert len(read_manifest(tmp_path)) == 2
    assert len(capsys.readouterr().out.strip().splitlines()) == 2


def test_train_eval_count(tmp_path, capsys):
    main(["gen-phantoms", "--count", "2", "--size", "16", "--out", str(tmp_path / "data")])
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "volume_size: 16\nembed_dim: 16\nencoder_depth: 1\nencoder_heads: 2\ndecoder_depth: 1\n"
        "decoder_heads: 2\nmask_channels: 4,8\nlora_rank: 2\nepochs: 2\nn_stages: 2\n"
        f"data: data\ncheckpoint_dir: {tmp_path / 'ck'}\n"
    )
    capsys.readouterr()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "rep")]) == 0
    out = capsys.readouterr().out
    assert "final_dsc:" in out and "checkpoint:" in out
    assert (tmp_path / "rep" / "stages.png").is_file()

    assert main(["eval", "--checkpoint", str(tmp_path / "ck"), "--data", str(tmp_path / "data"), "--stages", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "stage\tmean_dsc\tmean_iou"
    assert len(lines) == 4

    assert main(["count-params", "--config", str(cfg)]) == 0
    fields = dict(line.split(": ") for line in capsys.readouterr().out.strip().splitlines())
    assert fields["finetune"] == "adapter"
    assert 0 < float(fields["fraction"]) < 1


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(tmp_path)]) == 2
    assert "MissingFile" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("embed_dim: 30\n")
    assert main(["count-params", "--config", str(cfg)]) == 4


def test_train_without_data(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs: 1\n")
    assert main(["train", "--config", str(cfg)]) == 2


@pytest.mark.parametrize("argv", [["--help"], ["gen-phantoms", "--help"]])
def test_help(argv):
    proc = subprocess.run([sys.executable, "-m", "msam.cli", *argv], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "usage" in proc.stdout
