import json
import os

import pytest

from qatbnn.cli import DATA_ENV, main, sha256_file

TINY = ["--train-per-class", "4", "--val-per-class", "2", "--test-per-class", "2",
        "--unseen-per-class", "2", "--length", "32"]


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """gen-data -> train -> qat -> eval on a tiny dataset."""
    d = tmp_path_factory.mktemp("chain")
    data, ckpt, q8, rep = d / "data", d / "m.ckpt", d / "q8.ckpt", d / "r.json"
    assert main(["gen-data", "--out", str(data), "--seed", "3", *TINY]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "2"]) == 0
    assert main(["qat", "--in", str(ckpt), "--bits", "8", "--data", str(data),
                 "--out", str(q8), "--epochs", "1"]) == 0
    assert main(["eval", "--model", str(q8), "--data", str(data), "--out", str(rep),
                 "--mc", "4", "--pairs-csv", str(d / "pairs.csv")]) == 0
    return d


def _manifest(path):
    return json.loads(path.read_text())


def test_pipeline_writes_four_manifests(chain):
    manifests = [chain / "data" / "run_manifest.json", chain / "m.ckpt.manifest.json",
                 chain / "q8.ckpt.manifest.json", chain / "r.json.manifest.json"]
    for m in manifests:
        body = _manifest(m)
        assert body["version"] and body["started_at"] and body["outputs"]
    train_out = _manifest(manifests[1])["outputs"][0]["sha256"]
    qat_in = {e["path"]: e["sha256"] for e in _manifest(manifests[2])["inputs"]}
    assert qat_in[str(chain / "m.ckpt")] == train_out
    eval_in = {e["path"]: e["sha256"] for e in _manifest(manifests[3])["inputs"]}
    assert eval_in[str(chain / "q8.ckpt")] == sha256_file(chain / "q8.ckpt")
    ckpt = json.loads((chain / "q8.ckpt").read_text())
    assert ckpt["format"] == "qatbnn-ckpt/1" and ckpt["bits"] == 8 and ckpt["quant_plan"]
    report = json.loads((chain / "r.json").read_text())
    assert {"accuracy", "ece", "test_seen", "test_unseen", "confidence_quantiles",
            "coverage"} <= set(report)
    assert (chain / "pairs.csv").read_text().startswith("confidence,correct\n")


def test_verify_replay(chain, capsys):
    assert main(["--verify", str(chain / "q8.ckpt.manifest.json")]) == 0
    assert main(["--verify", str(chain / "data" / "run_manifest.json")]) == 0
    assert "verified" in capsys.readouterr().out


def test_verify_detects_changed_input(chain, tmp_path):
    data = tmp_path / "data"
    ckpt = tmp_path / "m.ckpt"
    assert main(["gen-data", "--out", str(data), *TINY]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "1"]) == 0
    with open(data / "train.csv", "a") as fh:
        fh.write("\n")
    assert main(["--verify", str(ckpt) + ".manifest.json"]) == 5


def test_inputs_not_mutated(chain, tmp_path):
    before = sha256_file(chain / "m.ckpt")
    assert main(["ptq", "--in", str(chain / "m.ckpt"), "--bits", "4", "--data",
                 str(chain / "data"), "--out", str(tmp_path / "p4.ckpt")]) == 0
    assert sha256_file(chain / "m.ckpt") == before


def test_fidelity_command(chain, tmp_path, capsys):
    out = tmp_path / "eps.json"
    assert main(["fidelity", "--ref", str(chain / "m.ckpt"), "--quant", str(chain / "m.ckpt"),
                 "--data", str(chain / "data"), "--out", str(out), "--mc-samples", "2"]) == 0
    assert json.loads(out.read_text())["epsilon"] == 0.0


def test_data_dir_from_environment(chain, tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_ENV, str(chain / "data"))
    out = tmp_path / "r.json"
    assert main(["eval", "--in", str(chain / "m.ckpt"), "--out", str(out), "--mc-samples", "2"]) == 0
    monkeypatch.delenv(DATA_ENV)
    assert main(["eval", "--in", str(chain / "m.ckpt"), "--out", str(out), "--mc-samples", "2"]) == 3


def test_sweep_and_select(chain, tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--in", str(chain / "m.ckpt"), "--data", str(chain / "data"),
                 "--bits", "4,8", "--out", str(out), "--mc-samples", "2"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "b,accuracy,ece,cost,memory_payload_bytes,memory_total_bytes,epsilon,seed"
    assert [row.split(",")[0] for row in lines[1:]] == ["4", "8", "32"]
    sel = tmp_path / "sel.json"
    assert main(["select", "--sweep", str(out), "--a-min", "0", "--u-max", "1",
                 "--out", str(sel)]) == 0
    assert json.loads(sel.read_text())["b"] == 4
    assert "b* = 4" in capsys.readouterr().out


def test_select_infeasible_is_not_an_error(tmp_path, capsys):
    sweep = tmp_path / "s.csv"
    sweep.write_text("b,accuracy,ece,cost,memory_payload_bytes,memory_total_bytes,epsilon,seed\n"
                     "8,0.9,0.1,2.0,10,12,0.0,0\n")
    assert main(["select", "--sweep", str(sweep), "--a-min", "0.99", "--u-max", "0.5"]) == 0
    assert "infeasible" in capsys.readouterr().out


def test_unknown_flag_writes_nothing(tmp_path):
    before = set(os.listdir(tmp_path))
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--bogus", "1"]) == 2
    assert set(os.listdir(tmp_path)) == before


@pytest.mark.parametrize("argv", [["frobnicate"], [], ["reproduce", "--experiment", "fig9"]])
def test_usage_errors(argv, tmp_path):
    if argv[:1] == ["reproduce"]:
        argv = argv + ["--out-dir", str(tmp_path / "r")]
    assert main(argv) == 2
    assert not (tmp_path / "r").exists()


def test_config_and_io_errors(chain, tmp_path):
    data = str(chain / "data")
    assert main(["qat", "--in", str(chain / "m.ckpt"), "--bits", "7", "--data", data,
                 "--out", str(tmp_path / "x")]) == 3
    assert main(["qat", "--in", str(tmp_path / "missing"), "--bits", "8", "--data", data,
                 "--out", str(tmp_path / "x")]) == 5
    assert main(["select", "--sweep", str(tmp_path / "missing.csv"), "--a-min", "2",
                 "--u-max", "0.1"]) == 3
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--length", "4"]) == 3
    assert not (tmp_path / "x").exists() and not (tmp_path / "d").exists()


def test_numeric_failure_exit_code(chain, tmp_path):
    assert main(["train", "--data", str(chain / "data"), "--out", str(tmp_path / "m.ckpt"),
                 "--epochs", "2", "--lr", "1e300"]) == 4
    assert not (tmp_path / "m.ckpt").exists()


def test_reproduce_fig5_deterministic(tmp_path):
    assert main(["reproduce", "--experiment", "fig5", "--seed", "1", "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["reproduce", "--experiment", "fig5", "--seed", "1", "--out-dir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "fig5.csv").read_bytes()
    assert a == (tmp_path / "b" / "fig5.csv").read_bytes()
    assert a.startswith(b"arch,b_weights,b_acts,macs,cost,memory_payload_bytes\n")
    assert (tmp_path / "a" / "run_manifest.json").exists()
