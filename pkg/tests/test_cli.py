import csv

import pytest

from snnq.cli import CliConfig, build_parser, dispatch, read_config_file, resolve_config

SMALL = ["--samples-per-class", "8", "--events-per-sample", "400", "--epochs", "2", "-q"]


def run(argv, capsys):
    code = dispatch(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_writes_event_files(tmp_path, capsys):
    code, out, _ = run(["synth", "--classes", "3", "--samples-per-class", "4", "--out", str(tmp_path / "d")], capsys)
    assert code == 0
    assert len(list((tmp_path / "d").glob("*.aer"))) == 12
    assert "3 classes" in out


def test_train_twice_is_identical(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        argv = ["-q", "train", "--preset", "desk-tiny", "--bits", "1", "--seed", "7",
                "--out", str(tmp_path / name)] + SMALL[:-1]
        assert run(argv, capsys)[0] == 0
        outs.append(tmp_path / name)
    for f in ("metrics.csv", "model.snnc"):  # config.txt records the differing --out
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    header = (outs[0] / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,temperature,train_loss,train_acc,test_acc"


def test_export_then_import_eval(tmp_path, capsys):
    run(["-q", "train", "--bits", "2", "--out", str(tmp_path / "r")] + SMALL[:-1], capsys)
    ckpt = str(tmp_path / "r" / "model.snnc")
    code, out, _ = run(["-q", "export", "--model", ckpt, "--out", str(tmp_path / "m.snnq")], capsys)
    assert code == 0 and "compression_ratio=" in out
    acc_q = run(["-q", "import-eval", "--model", str(tmp_path / "m.snnq")] + SMALL[:-1], capsys)[1]
    acc_c = run(["-q", "eval", "--model", ckpt] + SMALL[:-1], capsys)[1]
    assert acc_q.startswith("accuracy=") and acc_q == acc_c


def test_sweep_bits_schema(tmp_path, capsys):
    code, out, _ = run(["-q", "sweep-bits", "--epochs", "1", "--samples-per-class", "5",
                        "--events-per-sample", "300", "--out", str(tmp_path)], capsys)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
    assert [int(r["bits"]) for r in rows] == [32, 8, 4, 2, 1]
    assert float(rows[0]["compression_ratio"]) == 1.0
    assert float(rows[-1]["compression_ratio"]) > float(rows[1]["compression_ratio"]) > 1
    assert out == (tmp_path / "sweep.csv").read_text()


def test_gradcheck_command(capsys):
    code, out, _ = run(["-q", "gradcheck", "--bits", "2"], capsys)
    assert code == 0 and out.startswith("PASS")


def test_config_file_and_override(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nbits = 4\nepochs=3\nlr0 = 0.01\n")
    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--epochs", "5"])
    cfg = resolve_config(args)
    assert (cfg.bits, cfg.epochs, cfg.lr0) == (4, 5, 0.01)
    assert cfg.train_config().bits == 4


def test_config_file_rejects_unknown_key(tmp_path, capsys):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("colour = blue\n")
    with pytest.raises(ValueError, match="unknown config key"):
        read_config_file(cfg_file)
    code, _, err = run(["-q", "train", "--config", str(cfg_file)], capsys)
    assert code == 2 and "unknown config key" in err


def test_usage_errors_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["train", "--no-such-flag", "1"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        dispatch(["frobnicate"])
    assert exc.value.code == 2


def test_runtime_error_exits_one(tmp_path, capsys):
    code, _, err = run(["-q", "eval", "--model", str(tmp_path / "missing.snnc")], capsys)
    assert code == 1 and err.count("\n") == 1


def test_defaults_mirror_training_config():
    cfg = CliConfig().train_config()
    assert (cfg.epochs, cfg.lr0, cfg.t_max, cfg.batch_size) == (500, 1e-3, 64, 16)
