import numpy as np
import pytest

from pbbn import kernels
from pbbn.checkpoint import load_checkpoint
from pbbn.cli import run
from pbbn.resample import Image, read_pnm, write_pnm


def kv_lines(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture
def call(capsys):
    def go(*argv):
        code = run(list(argv))
        out, err = capsys.readouterr()
        return code, out, err
    prev = kernels.BACKEND
    yield go
    kernels.use_backend(prev)


def test_summary_total(call):
    code, out, _ = call("summary", "--pyramids", "2", "--branches", "2")
    assert code == 0
    assert "437442" in out
    assert "Input" in out and "3×3×3×3×64" in out


def test_summary_kv(call):
    code, out, _ = call("summary", "--pyramids", "3", "--branches", "3", "--dws", "--kv")
    kv = kv_lines(out)
    assert code == 0
    assert kv["total_params"] == "455170" and kv["name"] == "DWS-P3B3"
    assert kv["row.0"] == "Input|3DConv|3×3×3×3×64|1×1×2|96x96x7x64|5248"


def test_resolved_config_printed_first(call):
    _, out, _ = call("summary", "--kv")
    lines = out.splitlines()
    n_config = sum(1 for line in lines if line.startswith("config."))
    assert n_config > 5
    assert all(line.startswith("config.") for line in lines[:n_config])
    assert "config.pyramids=2" in lines and "config.input_size=96x96" in lines


def test_verify_params(call):
    code, out, _ = call("verify-params", "--kv")
    assert code == 0
    assert kv_lines(out)["passed"] == "8/8"


def test_verify_params_fails_on_mismatch(call, monkeypatch):
    from pbbn import cli
    monkeypatch.setitem(cli.PUBLISHED_PARAMS, "P2B2", 437443)
    code, out, _ = call("verify-params")
    assert code == 1 and "MISMATCH" in out


@pytest.mark.parametrize("argv", [
    ("synth", "--n", "0", "--out", "unused"),
    ("summary", "--bogus"),
    ("summary", "--pyr", "2"),  # abbreviations are not accepted
    ("frobnicate",),
    ("summary", "--pyramids", "0"),
    ("summary", "--pyramids", "3", "--input-size", "16"),
])
def test_usage_errors_exit_2(call, argv):
    code, _, _ = call(*argv)
    assert code == 2


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--n", "6", "--out", str(root / "d"), "--frames", "5", "--seed", "3"]) == 0
    return root


def test_synth_report(call, tmp_path):
    code, out, _ = call("synth", "--n", "5", "--out", str(tmp_path), "--frames", "3", "--kv")
    kv = kv_lines(out)
    assert code == 0 and kv["samples"] == "5"
    assert int(kv["count.left.blink"]) + int(kv["count.right.blink"]) == 3
    assert (tmp_path / "seq_0004" / "frame_02.pgm").exists()


def test_preprocess_tree(call, tmp_path):
    src = tmp_path / "src"
    (src / "a").mkdir(parents=True)
    write_pnm(src / "a" / "small.pgm", Image(np.full((4, 4, 1), 50, np.uint8)))
    write_pnm(src / "big.ppm", Image(np.full((12, 12, 3), 90, np.uint8)))
    (src / "notes.txt").write_text("keep me")
    code, out, _ = call("preprocess", "--data", str(src), "--out", str(tmp_path / "dst"), "--kv")
    kv = kv_lines(out)
    assert code == 0 and kv["target"] == "8x8"
    assert (kv["resized_up"], kv["resized_down"]) == ("1", "1")
    small = read_pnm(tmp_path / "dst" / "a" / "small.pgm")
    assert small.pixels.shape == (8, 8, 1) and np.all(small.pixels == 50)
    assert (tmp_path / "dst" / "notes.txt").read_text() == "keep me"


def test_preprocess_missing_dir(call, tmp_path):
    assert call("preprocess", "--data", str(tmp_path / "nope"), "--out", str(tmp_path))[0] == 2


TRAIN = ("--pyramids", "1", "--branches", "2", "--base-channels", "4", "--input-size", "12",
         "--frames", "5", "--folds", "2", "--epochs", "2", "--patience", "1", "--batch", "3")


def test_train_then_eval(call, dataset, tmp_path):
    code, out, _ = call("train", "--data", str(dataset / "d"), "--out", str(tmp_path), "--kv", *TRAIN)
    kv = kv_lines(out)
    assert code == 0
    assert {"fold.1.f1", "fold.2.f1", "mean.f1", "std.f1", "mean.precision", "std.recall"} <= kv.keys()
    assert kv["config.channels"] == "3"  # resolved before the data revealed grey frames
    model, policy = load_checkpoint(tmp_path / "model.pbbn")
    assert model.config.channels == 1 and (policy.target_h, policy.target_w) == (12, 12)
    assert (tmp_path / "history_fold02.csv").read_text().startswith("epoch,train_loss")

    code, out, _ = call("eval", "--checkpoint", str(tmp_path / "model.pbbn"),
                        "--data", str(dataset / "d" / "manifest.csv"), "--kv")
    kv = kv_lines(out)
    assert code == 0 and kv["samples"] == "6"
    assert sum(int(t.split("=")[1]) for t in kv["confusion"].split()) == 6


def test_train_is_deterministic(call, dataset):
    outs = [call("train", "--data", str(dataset / "d"), "--kv", "--seed", "4", *TRAIN)[1] for _ in range(2)]
    assert outs[0] == outs[1]


def test_train_text_report(call, dataset):
    code, out, _ = call("train", "--data", str(dataset / "d"), *TRAIN)
    assert code == 0
    assert "fold 1" in out and "mean ± std" in out


def test_train_target_must_match_input(call, dataset):
    code, _, err = call("train", "--data", str(dataset / "d"), "--target", "16", *TRAIN)
    assert code == 2 and "--target" in err


def test_train_bad_manifest(call, tmp_path):
    (tmp_path / "m.csv").write_text("x,blink,left\n")
    code, _, err = call("train", "--data", str(tmp_path / "m.csv"), *TRAIN)
    assert code == 2 and "m.csv:1" in err


def test_eval_bad_checkpoint(call, tmp_path, dataset):
    (tmp_path / "junk.pbbn").write_bytes(b"XXXXjunk")
    code, _, err = call("eval", "--checkpoint", str(tmp_path / "junk.pbbn"), "--data", str(dataset / "d"))
    assert code == 2 and "magic" in err


def test_gradcheck(call):
    code, out, _ = call("gradcheck", "--kv")
    kv = kv_lines(out)
    assert code == 0 and kv["passed"] == "12/12"
    assert kv["check.DWConv"].endswith("ok")


def test_bench(call):
    argv = ("bench", "--kv", "--pyramids", "1", "--branches", "2", "--base-channels", "4",
            "--input-size", "12", "--frames", "5", "--channels", "1", "--repeats", "3", "--warmup", "1")
    code, out, _ = call(*argv)
    kv = kv_lines(out)
    assert code == 0
    assert float(kv["param_ratio"]) == pytest.approx(int(kv["dws.params"]) / int(kv["standard.params"]),
                                                     abs=1e-4)
    assert {"standard.mean_ms", "standard.median_ms", "standard.p95_ms", "dws.p95_ms"} <= kv.keys()
    # computed outputs are deterministic even though timings are not
    again = kv_lines(call(*argv)[1])
    assert again["standard.checksum"] == kv["standard.checksum"]
    assert again["dws.checksum"] == kv["dws.checksum"]


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_backend_flag(call, backend):
    code, out, _ = call("summary", "--backend", backend, "--kv")
    assert code == 0 and f"config.backend={backend}" in out
    assert kernels.BACKEND == backend
