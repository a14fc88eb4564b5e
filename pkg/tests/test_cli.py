import numpy as np
import pytest

from eeds.cli import main
from eeds.images import load_png, save_png
from eeds.models import build_model
from eeds.train import Checkpoint, init_params, save_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def hr_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("hr")
    for i in range(91):
        img = np.random.default_rng(i).uniform(0, 255, (18, 18))
        save_png([img], d / f"img{i:02d}.png")
    save_png([np.zeros((6, 6))], d / "tiny.png")
    return d


def test_prepare_counts_and_determinism(capsys, hr_dir, tmp_path):
    args = ["prepare", "--hr-dir", hr_dir, "--scale", 3, "--patch", 12, "--count", 40, "--seed", 1]
    code, out, err = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0 and "91 images -> 728 augmented" in out and "skipped 1" in err
    run(capsys, *args, "--out", tmp_path / "b")
    assert (tmp_path / "a/manifest.txt").read_text() == (tmp_path / "b/manifest.txt").read_text()
    assert (tmp_path / "a/train.npz").read_bytes() == (tmp_path / "b/train.npz").read_bytes()


def test_unsupported_scale_is_usage_error(capsys, hr_dir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["prepare", "--hr-dir", str(hr_dir), "--scale", "5", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "supported: 2, 3, 4" in capsys.readouterr().err


def test_missing_dir(capsys, tmp_path):
    code, _, err = run(capsys, "prepare", "--hr-dir", tmp_path / "nope", "--scale", 2, "--out", tmp_path, "--seed", 0)
    assert code == 2 and "missing" in err


def test_random_seed_is_printed(capsys):
    code, out, _ = run(capsys, "gradcheck", "--op", "relu")
    assert code == 0 and out.startswith("seed: ")


@pytest.fixture(scope="module")
def prepared(hr_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    main(["prepare", "--hr-dir", str(hr_dir), "--scale", "3", "--patch", "12", "--count", "16",
          "--seed", "0", "--out", str(d)])
    return d


def write_cfg(path, text):
    path.write_text(text)
    return path


def test_train_writes_outputs(capsys, prepared, tmp_path):
    cfg = write_cfg(tmp_path / "run.cfg", "batch_size = 8\nlr_initial = 1e-6\nmicro_batch = 8\n")
    code, out, _ = run(capsys, "train", "--config", cfg, "--variant", "EEDS", "--scale", 3, "--data", prepared,
                       "--out", tmp_path / "run", "--epochs", 1, "--seed", 0)
    assert code == 0, out
    assert "deep 13 layers, shallow 3 layers" in out and "lr_initial=1e-06" in out
    assert (tmp_path / "run/best.eeds").exists()
    header = (tmp_path / "run/train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,lr,train_loss,val_loss,wall_seconds"


def test_train_eed_has_no_shallow(capsys, prepared, tmp_path):
    code, out, _ = run(capsys, "train", "--variant", "EED", "--scale", 3, "--data", prepared,
                       "--out", tmp_path, "--max-steps", 1, "--epochs", 1, "--seed", 0)
    assert code == 0 and "deep 13 layers" in out and "shallow" not in out.split("model:")[1].splitlines()[0]


def test_unknown_config_key(capsys, prepared, tmp_path):
    cfg = write_cfg(tmp_path / "bad.cfg", "learning_rate = 1\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--data", prepared, "--out", tmp_path, "--seed", 0)
    assert code == 2 and "learning_rate" in err


def test_resume_scale_mismatch(capsys, prepared, tmp_path):
    save_checkpoint(Checkpoint.capture(build_model("EEDS", 2)), tmp_path / "s2.eeds")
    code, _, err = run(capsys, "train", "--scale", 3, "--data", prepared, "--out", tmp_path,
                       "--resume", tmp_path / "s2.eeds", "--seed", 0)
    assert code == 1 and "x2" in err


@pytest.fixture
def ckpt(tmp_path):
    m = build_model("EEDS", 3)
    init_params(m, seed=0)
    save_checkpoint(Checkpoint.capture(m), tmp_path / "m.eeds")
    return tmp_path / "m.eeds"


def test_infer_color_png(capsys, ckpt, tmp_path):
    rgb = [np.random.default_rng(i).uniform(0, 255, (80, 100)) for i in range(3)]
    save_png(rgb, tmp_path / "in.png")
    code, out, _ = run(capsys, "infer", "--ckpt", ckpt, "--input", tmp_path / "in.png",
                       "--output", tmp_path / "out.png", "--seed", 0)
    planes = load_png(tmp_path / "out.png")
    assert code == 0 and len(planes) == 3 and planes[0].shape == (240, 300)


def test_eval_bicubic_and_model(capsys, ckpt, tmp_path):
    d = tmp_path / "test"
    for i in range(2):
        save_png([np.random.default_rng(i).uniform(0, 255, (30, 33))], d / f"t{i}.png")
    code, out, _ = run(capsys, "eval", "--method", "bicubic", "--test-dir", d, "--scale", 3,
                       "--out", tmp_path / "rep", "--seed", 0)
    assert code == 0 and "shave=3" in out and (tmp_path / "rep/bicubic_x3.csv").exists()
    code, out, _ = run(capsys, "eval", "--ckpt", ckpt, "--test-dir", d, "--scale", 3, "--seed", 0)
    assert code == 0 and "average" in out
    code, _, err = run(capsys, "eval", "--ckpt", ckpt, "--test-dir", d, "--scale", 2, "--seed", 0)
    assert code == 1


def test_eval_empty_dir(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--method", "bicubic", "--test-dir", tmp_path, "--scale", 3, "--seed", 0)
    assert code == 1 and "no test images" in err


def test_gradcheck_needs_a_target(capsys):
    code, _, err = run(capsys, "gradcheck", "--seed", 0)
    assert code == 2


@pytest.mark.parametrize("cmd", ["prepare", "train", "infer", "eval", "gradcheck"])
def test_help(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0 and "--seed" in capsys.readouterr().out
