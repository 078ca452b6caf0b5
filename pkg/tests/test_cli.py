import json
import os
import subprocess
import sys

import numpy as np

from stasim.cli import EXIT_DIAG, EXIT_OK, EXIT_PATTERN, main
from stasim.nmformat import decompress, read_nmsp


def _json_head(text):
    """The leading JSON document of the command's stdout."""
    return json.JSONDecoder().raw_decode(text)[0]


def test_compress_synthetic(tmp_path, capsys):
    assert main(["compress", "--synthetic", "64x32", "--nm", "2:4", "--out", str(tmp_path)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["compression_ratio"] == 1.778
    assert out["roundtrip"] is True
    c = read_nmsp(tmp_path / "weights.nmsp")
    assert (c.rows, c.cols) == (64, 32)


def test_compress_from_npy_and_prune(tmp_path, capsys):
    rng = np.random.default_rng(0)
    path = tmp_path / "w.npy"
    np.save(path, rng.normal(size=(16, 4)))
    assert main(["compress", "--in", str(path), "--nm", "1:8", "--prune", "--out", str(tmp_path / "w.nmsp")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["compression_ratio"] == 5.333
    dense = decompress(read_nmsp(tmp_path / "w.nmsp"))
    assert ((dense != 0).reshape(2, 8, 4).sum(axis=1) <= 1).all()


def test_compress_pattern_violation(tmp_path, capsys):
    path = tmp_path / "w.csv"
    np.savetxt(path, np.ones((8, 2)), delimiter=",")
    assert main(["compress", "--in", str(path), "--nm", "2:4", "--out", str(tmp_path)]) == EXIT_PATTERN
    assert "pattern violation" in capsys.readouterr().err


def test_bad_config_is_diagnostic(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"num_encoders": 1}))
    assert main(["simulate", "--config", str(bad)]) == EXIT_DIAG
    assert "missing" in capsys.readouterr().err
    assert main(["simulate", "--config", "shallow_transformer", "--geometry", "3x4x4"]) == EXIT_DIAG
    assert main(["compress", "--synthetic", "8x8", "--nm", "5:4"]) == EXIT_DIAG


def test_simulate_outputs(tmp_path, capsys):
    args = ["simulate", "--config", "shallow_transformer", "--nm", "2:8", "--cycles-only", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    text = capsys.readouterr().out
    report = _json_head(text)
    assert 1.0 < report["speedup"] <= 4.0
    assert "block,kind,cycles" in text
    for name in ("report.json", "blocks.csv", "program.jsonl", "program.bin"):
        assert (tmp_path / name).exists()
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["total_cycles"] == report["total_cycles"]


def test_simulate_dense_mode(capsys):
    assert main(["simulate", "--config", "shallow_transformer", "--mode", "dense", "--cycles-only"]) == 0
    report = _json_head(capsys.readouterr().out)
    assert report["speedup"] == 1.0


def test_idp_demo(tmp_path, capsys):
    args = ["idp-demo", "--m", "4", "--n-end", "1", "--epochs", "5", "--rows", "8", "--cols", "4",
            "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert [w["n"] for w in out["winners"]] == [3, 2, 1]


def test_figures(tmp_path, capsys):
    assert main(["figures", "--out", str(tmp_path)]) == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)["files"]) == 5


def test_console_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stasim.cli", "compress", "--synthetic", "8x8",
                           "--out", str(tmp_path)], capture_output=True, text=True, env={**os.environ, "STA_LOG": "debug"})
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["roundtrip"]
