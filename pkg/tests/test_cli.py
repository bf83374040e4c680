"""End-to-end CLI workflows and exit codes."""

import numpy as np
import pytest

from fedtree import save_csv
from fedtree.cli import main

from conftest import synth_site


@pytest.fixture
def site_csvs(tmp_path):
    paths = {}
    for k in (1, 2, 3):
        p = str(tmp_path / f"site{k}.csv")
        save_csv(synth_site(k, 120, seed=200 + k, shift=0.2 * k), p)
        paths[k] = p
    return paths


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out.strip(), out.err.strip()


def test_full_exchange_workflow(tmp_path, site_csvs, capsys):
    inbox = tmp_path / "inbox"
    inbox.mkdir()
    for k in (2, 3):
        code, out, err = run(
            capsys,
            "fit-local",
            "--data", site_csvs[k],
            "--out", str(inbox / f"site{k}.fedmodel"),
            "--site-id", str(k),
            "--seed", str(k),
        )
        assert code == 0 and err == ""
        assert f"site {k}" in out and "n=120" in out

    combined = str(tmp_path / "combined.fedmodel")
    code, out, err = run(
        capsys,
        "ensemble",
        "--target", site_csvs[1],
        "--models", str(inbox),
        "--method", "ef",
        "--b", "8",
        "--out", combined,
        "--seed", "3",
    )
    assert code == 0, err
    assert "3 sites" in out and "60 estimation subjects" in out

    code, out, _ = run(capsys, "predict", "--model", combined, "--x", "0.5,0,0")
    assert code == 0
    float(out)  # a single real

    code, out, _ = run(capsys, "weights", "--model", combined, "--x", "0.5,0,0")
    assert code == 0
    w = np.array([float(t) for t in out.split()])
    assert w.shape == (3,) and np.all(w >= 0)
    assert abs(w.sum() - 1.0) <= 1e-10

    code, out, _ = run(
        capsys, "evaluate-policy", "--data", site_csvs[1], "--model", combined
    )
    assert code == 0
    float(out)


def test_fit_local_predict_roundtrip(tmp_path, site_csvs, capsys):
    model = str(tmp_path / "m.fedmodel")
    code, _, _ = run(
        capsys, "fit-local", "--data", site_csvs[1], "--out", model,
        "--propensity", "logit", "--seed", "4",
    )
    assert code == 0
    code, out, _ = run(capsys, "predict", "--model", model, "--x", "1.0,0.5,-0.2")
    assert code == 0
    float(out)

    code, _, err = run(capsys, "weights", "--model", model, "--x", "1,0,0")
    assert code == 2
    assert "ensemble model" in err


def test_et_method_and_site_weights(tmp_path, site_csvs, capsys):
    inbox = tmp_path / "inbox"
    inbox.mkdir()
    for k in (2, 3):
        run(capsys, "fit-local", "--data", site_csvs[k],
            "--out", str(inbox / f"s{k}.fedmodel"), "--site-id", str(k))
    combined = str(tmp_path / "et.fedmodel")
    code, out, err = run(
        capsys, "ensemble", "--target", site_csvs[1], "--models", str(inbox),
        "--method", "et", "--site-weights", "on", "--out", combined,
    )
    assert code == 0, err
    code, out, _ = run(capsys, "weights", "--model", combined, "--x", "0,0,0")
    assert code == 0 and len(out.split()) == 3


def test_exit_code_2_on_bad_input(tmp_path, site_csvs, capsys):
    code, _, err = run(
        capsys, "fit-local", "--data", str(tmp_path / "nope.csv"), "--out", "x"
    )
    assert code == 2 and "nope.csv" in err

    code, _, err = run(capsys, "predict", "--model", site_csvs[1], "--x", "0,0,0")
    assert code == 2  # a site CSV is not a model envelope

    model = str(tmp_path / "m.fedmodel")
    run(capsys, "fit-local", "--data", site_csvs[1], "--out", model)
    code, _, err = run(capsys, "predict", "--model", model, "--x", "zero,0,0")
    assert code == 2 and "query point" in err

    code, _, err = run(
        capsys, "ensemble", "--target", site_csvs[1],
        "--models", str(tmp_path / "nodir"), "--out", "x",
    )
    assert code == 2 and "directory" in err

    inbox = tmp_path / "inbox1"
    inbox.mkdir()
    run(capsys, "fit-local", "--data", site_csvs[1], "--out",
        str(inbox / "s1.fedmodel"), "--site-id", "1")
    code, _, err = run(
        capsys, "ensemble", "--target", site_csvs[1], "--models", str(inbox),
        "--out", str(tmp_path / "x.fedmodel"),
    )
    assert code == 2 and "site-1" in err


def test_exit_code_3_on_fit_failure(tmp_path, capsys):
    tiny = synth_site(1, 16, seed=9)
    p = str(tmp_path / "tiny.csv")
    save_csv(tiny, p)
    code, _, err = run(
        capsys, "fit-local", "--data", p, "--learner", "cf", "--b", "4",
        "--out", str(tmp_path / "t.fedmodel"),
    )
    assert code == 3
    assert "fedtree:" in err


def test_exit_code_4_on_tampered_model(tmp_path, site_csvs, capsys):
    model = str(tmp_path / "m.fedmodel")
    run(capsys, "fit-local", "--data", site_csvs[1], "--out", model)
    blob = bytearray(open(model, "rb").read())
    blob[-20] = blob[-20] ^ 1
    open(model, "wb").write(bytes(blob))
    code, _, err = run(capsys, "predict", "--model", model, "--x", "0,0,0")
    assert code == 4
    assert "tampered" in err or "corrupted" in err


def test_simulate_writes_results(tmp_path, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        "K = 4\nn_k = 60\nD = 4\nc = 1.0\nreplicates = 2\nB = 8\n"
        "local_b = 8\nn_te = 50\nseed = 5\n"
    )
    out1 = str(tmp_path / "r1.csv")
    code, msg, err = run(
        capsys, "simulate", "--config", str(cfg), "--out", out1,
        "--summary-out", str(tmp_path / "s1.csv"),
    )
    assert code == 0, err
    assert "2 replicates, 0 failed" in msg
    header = open(out1).readline().strip()
    assert header == "estimator,c,grouping,n,replicate,mse,ratio"
    assert open(str(tmp_path / "s1.csv")).readline().startswith("estimator,")

    # same config and seed give byte-identical results at any job count
    out2 = str(tmp_path / "r2.csv")
    code, _, _ = run(capsys, "simulate", "--config", str(cfg), "--out", out2, "--jobs", "2")
    assert code == 0
    assert open(out1, "rb").read() == open(out2, "rb").read()

    # seed override changes the draw
    out3 = str(tmp_path / "r3.csv")
    code, _, _ = run(capsys, "simulate", "--config", str(cfg), "--out", out3, "--seed", "6")
    assert code == 0
    assert open(out1, "rb").read() != open(out3, "rb").read()


def test_simulate_rejects_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("K = 4\nwhatever = 1\n")
    code, _, err = run(
        capsys, "simulate", "--config", str(cfg), "--out", str(tmp_path / "r.csv")
    )
    assert code == 2 and "whatever" in err


def test_evaluate_policy_with_local_model(tmp_path, site_csvs, capsys):
    model = str(tmp_path / "m.fedmodel")
    run(capsys, "fit-local", "--data", site_csvs[1], "--out", model)
    code, out, _ = run(
        capsys, "evaluate-policy", "--data", site_csvs[1], "--model", model,
        "--propensity", "logit",
    )
    assert code == 0
    float(out)
