import csv
import json

import numpy as np
import pytest

from gksn.cli import build_parser, flag, main
from gksn.datasets import FrameSet, load_frames, save_frames
from gksn.network import load_checkpoint

from .helpers import orthogonal


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "lj.frames"
    assert main(["gen", "--kind", "lj", "--m", "4", "--n", "3", "--samples", "60", "--seed", "3",
                 "--em-iters", "40", "--out", str(path)]) == 0
    return path


def _train(data, out, *extra):
    args = ["train", "--data", str(data), "--epochs", "3", "--batch", "16", "--seed", "1", "--out", str(out), *extra]
    assert main(args) == 0
    return out


def _eval(capsys, ckpt, data, *extra):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), *extra]) == 0
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def _history(ckpt):
    with open(ckpt.with_suffix(".history.csv")) as fh:
        return list(csv.DictReader(fh))


@pytest.mark.parametrize("text,value", [("on", True), ("off", False), ("True", True), ("false", False),
                                        ("yes", True), ("0", False)])
def test_flag_parsing(text, value):
    assert flag(text) is value


def test_unknown_flag_is_an_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", "x", "--colour", "red"])
    assert exc.value.code == 2
    assert "unrecognized arguments" in capsys.readouterr().err


def test_bad_flag_value(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--data", "x", "--perm", "maybe"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["gen", "--out", "x", "--m", "0"])


def test_gen_byte_identical(tmp_path, small_data):
    again = tmp_path / "again.frames"
    main(["gen", "--kind", "lj", "--m", "4", "--n", "3", "--samples", "60", "--seed", "3", "--em-iters", "40",
          "--out", str(again)])
    assert again.read_bytes() == small_data.read_bytes()
    manifest = json.loads(again.with_name(again.name + ".manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seed"] == 3
    assert len(load_frames(again)) == 60


def test_gen_polymer(tmp_path, capsys):
    out = tmp_path / "poly.frames"
    assert main(["gen", "--kind", "polymer", "--m", "5", "--n", "3", "--dhat", "1.0", "--samples", "4",
                 "--em-iters", "10", "--osc", "zero", "--out", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["frames"] == 4


def test_train_outputs(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "m.json", "--model", "kan", "--perm", "off", "--node-index", "false",
                  "--linear", "true")
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["model"] == "O(n) KAN(F,T)" and summary["epochs"] == 3
    rows = _history(ckpt)
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert all(r["seconds"] == "" for r in rows)
    _, extra = load_checkpoint(ckpt)
    assert extra["n_train"] == 48 and extra["n_test"] == 12
    assert ckpt.with_name(ckpt.name + ".manifest.json").exists()


def test_train_zero_epochs(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "z.json", "--epochs", "0")
    assert _history(ckpt) == []
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["epochs"] == 0 and summary["test_huber"] > 0


def test_train_perm_mlp_name(tmp_path, small_data, capsys):
    _train(small_data, tmp_path / "p.json", "--model", "mlp", "--perm", "on")
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["model"] == "π O(n) MLP(F,T)"


def test_train_rejects_perm_with_node_index(tmp_path, small_data):
    with pytest.raises(SystemExit, match="node-index"):
        _train(small_data, tmp_path / "bad.json", "--perm", "on", "--node-index", "on")


def test_train_malformed_frames(tmp_path):
    bad = tmp_path / "bad.frames"
    bad.write_text("2 2\nE 1\n0 1.0\n")
    with pytest.raises(SystemExit, match="malformed frames file"):
        _train(bad, tmp_path / "m.json")


def test_eval_matches_history(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "m.json", "--features", "n1,inner")
    last = _history(ckpt)[-1]
    res = _eval(capsys, ckpt, small_data)
    assert res["mean_huber"] == float(last["test_huber"])
    assert res["nll"] == float(last["test_nll"])
    assert res["n_test"] == 12 and res["scaler_mismatch"] is False


def _transformed_copy(src, dst, fn):
    ds = load_frames(src)
    save_frames(FrameSet(fn(ds.coords), ds.types, ds.energies), dst)
    return dst


def test_eval_rotated_frames(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "m.json")
    Q = orthogonal(np.random.default_rng(0), 3)
    rotated = _transformed_copy(small_data, tmp_path / "rot.frames", lambda X: X @ Q.T + 0.7)
    a = _eval(capsys, ckpt, small_data)
    b = _eval(capsys, ckpt, rotated)
    assert abs(a["nll"] - b["nll"]) <= 1e-6


def test_eval_permuted_frames_perm_model(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "p.json", "--perm", "on")
    permuted = _transformed_copy(small_data, tmp_path / "perm.frames", lambda X: X[:, [2, 0, 3, 1]])
    assert _eval(capsys, ckpt, small_data)["nll"] == _eval(capsys, ckpt, permuted)["nll"]


def test_eval_scaler_mismatch_flagged(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "m.json")
    shifted = tmp_path / "shift.frames"
    ds = load_frames(small_data)
    save_frames(FrameSet(ds.coords, ds.types, ds.energies + 1.0), shifted)
    capsys.readouterr()
    main(["eval", "--checkpoint", str(ckpt), "--data", str(shifted)])
    out = capsys.readouterr()
    assert "scaler mismatch" in out.err
    assert json.loads(out.out)["scaler_mismatch"] is True


def test_eval_all_frames_and_out(tmp_path, small_data, capsys):
    ckpt = _train(small_data, tmp_path / "m.json")
    out = tmp_path / "metrics.json"
    res = _eval(capsys, ckpt, small_data, "--frames", "all", "--out", str(out))
    assert res["n_test"] == 60
    assert json.loads(out.read_text()) == res


def test_verify_single_check(capsys):
    assert main(["verify", "--check", "lemma-a14", "--m", "15", "--n", "3", "--k", "5"]) == 0
    reports = json.loads(capsys.readouterr().out)
    assert len(reports) == 1
    assert reports[0]["dims"] == {"m": 15, "n": 3, "k": 5} and reports[0]["passed"]


def test_verify_negative_controls_exit_zero(capsys):
    assert main(["verify", "--negative-controls", "--seeds", "3"]) == 0
    reports = json.loads(capsys.readouterr().out)
    assert reports and all(not r["passed"] for r in reports)


def test_verify_all_writes_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    assert main(["verify", "--all", "--seeds", "2", "--out", str(out)]) == 0
    reports = json.loads(out.read_text())
    assert len({r["check"] for r in reports if r["expect_pass"]}) >= 7


def test_verify_exit_code_on_unexpected(monkeypatch, capsys):
    import gksn.cli as cli
    from gksn.verify import VerifyReport

    monkeypatch.setattr(cli, "run_check", lambda *a, **k: VerifyReport.make("lemma-a14", 1.0, 1e-8, 0, {}))
    assert main(["verify", "--check", "lemma-a14"]) == 1


def test_verify_needs_a_mode():
    with pytest.raises(SystemExit, match="choose"):
        main(["verify"])
