import json
import subprocess
import sys

import numpy as np
import pytest

from plmatch.cli import main

TINY_SET = [
    "--set", "steps=4", "--set", "batch_size=2", "--set", "g=2", "--set", "out_size=8",
    "--set", "d_backbone=8", "--set", "d=4", "--set", "d_g=4", "--set", "n_images=4",
    "--set", "image_size=16", "--set", "queue_size=8", "--set", "dense_queue_size=8",
    "--set", "probe_images=8", "--set", "fidelity_pairs=20", "--set", "sweep_steps=2",
]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestInspect:
    def test_demo_preset(self, capsys):
        code, out, _ = run(capsys, "inspect", "--preset", "demo")
        assert code == 0
        doc = json.loads(out)
        m = np.array(doc["M"])
        assert set(np.flatnonzero(m[0]) + 1) == {5, 6, 8, 9}
        assert m[4].tolist() == [0, 0, 0, 0, 0, 0, 0, 0, 256.0]
        assert sum(m[8]) == 0

    def test_custom_crops(self, capsys):
        code, out, _ = run(capsys, "inspect", "--query", "0,0,30,30", "--key", "0,0,30,30", "--grid", "3")
        doc = json.loads(out)
        assert code == 0 and doc["grid"] == 3
        np.testing.assert_allclose(doc["M"], np.diag(np.full(9, 100.0)))
        assert doc["wq"] == [1.0] * 9

    def test_loc_matcher_assignment(self, capsys):
        code, out, _ = run(capsys, "inspect", "--query", "0,0,30,30", "--key", "0,0,30,30", "--matcher", "loc")
        assert json.loads(out)["assignment"] == list(range(9))

    def test_ft_matcher(self, capsys):
        code, out, _ = run(
            capsys, "inspect", "--query", "0,0,32,32", "--key", "8,8,32,32", "--grid", "2",
            "--out-size", "8", "--image-size", "48", "--matcher", "ft",
        )
        assert code == 0 and len(json.loads(out)["assignment"]) == 4

    @pytest.mark.parametrize(
        "argv",
        [
            ["inspect", "--query", "0,0,0,10", "--key", "0,0,10,10"],
            ["inspect", "--query", "0,0,10", "--key", "0,0,10,10"],
            ["inspect", "--query", "0,0,10,10"],
            ["inspect", "--query", "0,0,50,50", "--key", "0,0,10,10", "--image-size", "32"],
            ["inspect", "--query", "0,0,10,10", "--key", "0,0,10,10", "--grid", "0"],
        ],
    )
    def test_usage_errors(self, capsys, argv):
        code, _, err = run(capsys, *argv)
        assert code == 2 and "error" in err


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "0", "1")
    assert code == 0 and "passed" in out


def test_gradcheck_fails_with_tiny_tolerance(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seed", "0", "--tol", "1e-15")
    assert code == 1 and "FAILED" in out


def test_bench(capsys):
    code, out, _ = run(capsys, "bench", "--pairs", "20")
    lines = out.splitlines()
    assert code == 0
    assert lines[0].startswith("bench g=7 n=49")
    assert any(line.startswith("pairs/sec") for line in lines)
    checksum = [line for line in lines if line.startswith("M checksum")]
    code2, out2, _ = run(capsys, "bench", "--pairs", "20")
    assert checksum == [line for line in out2.splitlines() if line.startswith("M checksum")]


def test_bench_rejects_zero_pairs(capsys):
    assert run(capsys, "bench", "--pairs", "0")[0] == 2


def test_train_then_eval(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--out", str(tmp_path / "run"), *TINY_SET)
    assert code == 0 and "trained 4 steps" in out
    assert (tmp_path / "run" / "final.plm").is_file()
    code, out, _ = run(
        capsys, "eval", "--checkpoint", str(tmp_path / "run" / "final.plm"), "--out", str(tmp_path / "ev"), *TINY_SET
    )
    assert code == 0
    doc = json.loads(out)
    assert doc["fidelity"]["n_pairs"] == 20
    assert "trained" in doc["probe"]["matchers"]


def test_lambda_sweep(tmp_path, capsys):
    code, out, _ = run(capsys, "lambda-sweep", "--lambdas", "0,1", "--out", str(tmp_path), *TINY_SET)
    assert code == 0
    assert (tmp_path / "lambda_sweep.csv").read_text().splitlines()[0] == "lambda,matcher,steps,probe_mae"


def test_bad_config_key(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--out", str(tmp_path), "--set", "nonsense=1")
    assert code == 2 and "unknown config key" in err


def test_bad_lambda_list(tmp_path, capsys):
    assert run(capsys, "lambda-sweep", "--lambdas", "0,2", "--out", str(tmp_path), *TINY_SET)[0] == 2


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "plmatch.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "inspect" in proc.stdout


def test_missing_subcommand(capsys):
    assert main([]) == 2
