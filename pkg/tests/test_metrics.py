import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eeds.images import save_png
from eeds.metrics import MetricReport, psnr, run_benchmark, ssim
from eeds.models import build_model
from oracles import ssim_naive


def rand_img(seed, shape=(24, 24)):
    return np.random.default_rng(seed).uniform(0, 255, shape)


def test_identical_is_inf():
    a = rand_img(0)
    assert psnr(a, a) == math.inf


def test_one_level_difference():
    a = rand_img(1)
    assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-4)
    assert psnr(a, a + 1) == pytest.approx(48.1308, abs=1e-4)


def test_shave_ignores_border():
    a = rand_img(2)
    b = a.copy()
    b[:3] += 50
    assert psnr(a, b, shave=3) == math.inf


def test_dims_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


@given(st.integers(0, 2**16))
@settings(max_examples=20, deadline=None)
def test_psnr_symmetric(seed):
    a, b = rand_img(seed), rand_img(seed + 1)
    assert psnr(a, b) == psnr(b, a)


def test_psnr_decreases_with_noise():
    a = rand_img(3, (32, 32))
    noise = np.random.default_rng(4).standard_normal(a.shape)
    vals = [psnr(a, a + amp * noise) for amp in (0.5, 1, 2, 4, 8, 16)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_self_is_one():
    a = rand_img(5)
    assert ssim(a, a) == 1.0


def test_ssim_offset_below_one():
    a = np.full((16, 16), 40.0)
    assert ssim(a, a + 150) < 1


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_sliding_window(seed):
    a, b = rand_img(seed, (20, 23)), rand_img(seed + 10, (20, 23))
    assert abs(ssim(a, b) - ssim_naive(a, b)) <= 1e-6


def test_ssim_symmetric_and_bounded():
    a, b = rand_img(6), rand_img(7)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_report_excludes_inf_from_average():
    r = MetricReport("m", 3, 3)
    r.add("a", math.inf, 1.0)
    r.add("b", 30.0, 0.9)
    r.add("c", 32.0, 0.8)
    assert r.mean_psnr == pytest.approx(31.0) and r.n_infinite == 1
    assert "inf" in r.to_csv() and "excluded" in r.table()


@pytest.fixture
def test_dir(tmp_path):
    for i in range(3):
        yy, xx = np.mgrid[0:40, 0:43]
        img = 120 + 50 * np.sin(xx / (3 + i)) + 30 * np.cos(yy / 5) + rand_img(i, (40, 43)) * 0.1
        save_png([img, img * 0.9, img * 0.8], tmp_path / f"im{i}.png")
    return tmp_path


def test_benchmark_bicubic(test_dir):
    rep = run_benchmark(None, test_dir, 3)
    assert rep.images == ["im0.png", "im1.png", "im2.png"] and rep.shave == 3
    assert all(15 < p < 60 for p in rep.psnr)


def test_benchmark_is_deterministic(test_dir):
    assert run_benchmark(None, test_dir, 2).to_csv() == run_benchmark(None, test_dir, 2).to_csv()


def test_zero_model_compares_against_black(test_dir):
    rep = run_benchmark(build_model("EEDS", 3), test_dir, 3)
    assert all(math.isfinite(p) and p < 12 for p in rep.psnr)


def test_empty_dir_is_an_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_benchmark(None, tmp_path, 3)


def test_model_scale_must_match(test_dir):
    with pytest.raises(ValueError):
        run_benchmark(build_model("EES", 2), test_dir, 3)
