import numpy as np
import pytest
from PIL import Image

from kalmanfield.cli import main


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, run = root / "data", root / "run"
    assert main(["gen-scene", "--out", str(data), "--frames", "4", "--size", "12"]) == 0
    cfg = root / "train.cfg"
    cfg.write_text(
        "batch_size = 16\ntotal_steps = 3\nrelease_steps = 2\nn_proposal = 8\nn_samples = 8\n"
        "plane_resolutions = 4 8\nproposal_resolution = 4\n"
    )
    args = ["train", "--config", str(cfg), "--dataset", str(data), "--out", str(run)]
    assert main(args) == 0
    return data, run


def test_train_outputs(trained):
    _, run = trained
    assert (run / "checkpoint.bin").is_file()
    assert len((run / "loss_log.jsonl").read_text().splitlines()) == 3
    assert "total_steps = 3" in (run / "config.txt").read_text()


def test_eval_is_byte_stable(trained, tmp_path, capsys):
    data, run = trained
    args = ["eval", "--checkpoint", str(run / "checkpoint.bin"), "--dataset", str(data)]
    assert main(args + ["--out", str(tmp_path / "a.txt")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.txt")]) == 0
    a = (tmp_path / "a.txt").read_bytes()
    assert a == (tmp_path / "b.txt").read_bytes()
    text = a.decode()
    assert text.splitlines()[0].startswith("image") and "\nmean\t" in text
    assert "deformation_rmse" in text


def test_render_sweep_is_deterministic(trained, tmp_path):
    _, run = trained
    ck = str(run / "checkpoint.bin")
    for name in ("a", "b"):
        assert main(["render", "--checkpoint", ck, "--out", str(tmp_path / name),
                     "--times", "0", "0.5", "--views", "2"]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["t000_v000.png", "t000_v001.png", "t001_v000.png", "t001_v001.png"]
    for f in files:
        a = np.array(Image.open(tmp_path / "a" / f))
        np.testing.assert_array_equal(a, np.array(Image.open(tmp_path / "b" / f)))


def test_ablation_flags_reach_the_config(trained, tmp_path):
    data, _ = trained
    cfg = tmp_path / "c.cfg"
    cfg.write_text("batch_size = 8\ntotal_steps = 1\nrelease_steps = 1\nn_proposal = 4\n"
                   "n_samples = 4\nplane_resolutions = 4\nproposal_resolution = 4\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(out),
                 "--no-l-kf", "--no-l-co", "--no-prediction", "--no-stopgrad-prediction",
                 "--seed", "9"]) == 0
    text = (out / "config.txt").read_text()
    for line in ("enable_l_kf = false", "enable_l_co = false",
                 "enable_prediction_branch = false", "stopgrad_prediction = false", "seed = 9"):
        assert line in text


def test_kalman_demo(capsys):
    assert main(["kalman-demo", "--steps", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 6
    gains = [float(l.split("\t")[4]) for l in lines[1:]]
    assert all(0 < g < 1 for g in gains)


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_errors_exit_nonzero_with_one_line(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.bin"), "--dataset", "x"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1
    assert main(["train", "--dataset", str(tmp_path)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("wings = 2\n")
    assert main(["train", "--config", str(bad), "--dataset", "d", "--out", "o"]) == 1
    assert "unknown key" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["train", "--bogus"])
    assert info.value.code != 0
