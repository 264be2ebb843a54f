import json

import pytest

from bpfpn_lab.cli import main


def records(capsys):
    return [json.loads(line) for line in capsys.readouterr().out.splitlines()]


def test_decompose_variant2(capsys):
    assert main(["decompose", "--arch", "variant2", "--seed", "0"]) == 0
    recs = records(capsys)
    assert recs and all(r["pass"] and r["residual"] < 1e-12 for r in recs)


def test_decompose_rejects_single_fusion(capsys):
    assert main(["decompose", "--arch", "vanilla"]) == 2


def test_flops_delta(capsys):
    assert main(["flops", "--arch", "variant2"]) == 0
    (rec,) = records(capsys)
    assert rec["flops_delta"] == rec["flops_delta_closed_form"]
    assert rec["params_delta"] == 528
    assert main(["flops", "--arch", "vanilla"]) == 0
    (van,) = records(capsys)
    assert rec["flops"] - van["flops"] == rec["flops_delta"]


def test_usage_errors(capsys):
    assert main(["nope"]) == 2
    assert main(["flops", "--bogus"]) == 2
    assert main([]) == 2


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps=0\n")
    assert main(["train", "--config", str(cfg)]) == 2
    cfg.write_text("colour=blue\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2


def test_train_to_file_is_reproducible(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("size=32\nn_train=8\nn_eval=4\nmax_targets=2\ntarget_sigma=1.0\neval_interval=3\n")
    outs = []
    for i in range(2):
        out = tmp_path / f"r{i}.jsonl"
        assert main(["train", "--config", str(cfg), "--steps", "3", "--arch", "variant1", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    rec = json.loads(outs[0])
    assert rec["arch"] == "variant1" and len(rec["losses"]) == 3
    assert "seconds_per_step" not in rec


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--count", "3", "--out", str(tmp_path / "ds")]) == 0
    assert (tmp_path / "ds" / "manifest.csv").read_text().count("\n") == 4
    assert main(["gen-data"]) == 2


def test_gradcheck_single_arch(capsys):
    assert main(["gradcheck", "--seed", "7", "--num-seeds", "1", "--arch", "variant2"]) == 0
    recs = records(capsys)
    assert recs[0]["name"] == "gradcheck:oracle"
    assert all(r["pass"] for r in recs)


def test_isolate_small(capsys):
    assert main(["isolate-test", "--num-seeds", "1", "--sizes", "32"]) == 0
    assert len(records(capsys)) == 2


def test_dump(capsys):
    assert main(["dump", "--arch", "vanilla"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("node 0 input")
