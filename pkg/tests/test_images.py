import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from eeds import images as im
from oracles import cubic_1d_resize


def test_kernel_values():
    assert im.cubic(np.array([0.0, 1.0, 2.0, 2.5])).tolist() == [1.0, 0.0, 0.0, 0.0]
    assert im.cubic(np.array([0.5]))[0] == pytest.approx(0.5625)


def test_partition_of_unity():
    x = np.linspace(0, 1, 1001)
    total = sum(im.cubic(x - k) for k in range(-3, 4))
    assert np.max(np.abs(total - 1)) <= 1e-6


@pytest.mark.parametrize("n,out", [(12, 4), (12, 36), (9, 3), (10, 20), (7, 28)])
def test_resize_matches_per_sample_oracle(n, out):
    v = np.random.default_rng(n).uniform(0, 255, n)
    m = im.resize_matrix(n, out, out / n)
    np.testing.assert_allclose(m @ v, cubic_1d_resize(v, out), atol=1e-9)


def test_resize_rows_sum_to_one():
    for scale in (1 / 4, 1 / 3, 1 / 2, 2, 3, 4):
        n = 24
        m = im.resize_matrix(n, int(n * scale), scale)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_constant_is_preserved():
    out = im.bicubic_resize(np.full((9, 12), 77.0), scale=3)
    assert out.shape == (27, 36) and np.allclose(out, 77.0, atol=1e-4)


def test_separability():
    x = np.random.default_rng(0).uniform(0, 255, (15, 21))
    rows = im.resize_matrix(15, 5, 1 / 3)
    cols = im.resize_matrix(21, 7, 1 / 3)
    a = (rows @ x) @ cols.T
    b = rows @ (x @ cols.T)
    np.testing.assert_allclose(im.bicubic_resize(x, scale=1 / 3), a, atol=1e-4)
    assert np.max(np.abs(a - b)) <= 1e-5


def test_close_to_pillow_bicubic_on_upscale():
    # Pillow uses a = -0.5 and half-pixel centres too; borders differ slightly.
    x = np.random.default_rng(1).uniform(0, 255, (16, 16)).astype(np.float32)
    ours = im.bicubic_resize(x, scale=2)
    pil = np.asarray(Image.fromarray(x, mode="F").resize((32, 32), Image.BICUBIC))
    assert np.max(np.abs(ours[4:-4, 4:-4] - pil[4:-4, 4:-4])) < 1e-3


def test_smooth_survives_round_trip_better_than_noise():
    from eeds.metrics import psnr

    yy, xx = np.mgrid[0:96, 0:96]
    smooth = 128 + 60 * np.sin(xx / 9.0) * np.cos(yy / 11.0)
    noise = np.random.default_rng(2).uniform(0, 255, (96, 96))
    rt = lambda z: im.bicubic_resize(im.bicubic_resize(z, scale=1 / 3), scale=3)
    p_smooth = psnr(rt(smooth), smooth)
    assert p_smooth >= 35 and p_smooth > psnr(rt(noise), noise) + 10


def test_target_dims():
    assert im.bicubic_resize(np.zeros((10, 10)), size=(7, 13)).shape == (7, 13)


@pytest.mark.parametrize("rgb,ycc", [((255, 255, 255), (235, 128, 128)), ((0, 0, 0), (16, 128, 128))])
def test_ycbcr_reference_values(rgb, ycc):
    out = im.rgb_to_ycbcr(*(np.array([float(c)]) for c in rgb))
    assert [float(c[0]) for c in out] == pytest.approx(ycc, abs=1e-4)


@given(st.integers(0, 2**16))
@settings(max_examples=20, deadline=None)
def test_ycbcr_round_trip(seed):
    rgb = np.random.default_rng(seed).integers(0, 256, (3, 8, 8)).astype(np.float32)
    back = np.stack(im.ycbcr_to_rgb(*im.rgb_to_ycbcr(*rgb)))
    assert np.max(np.abs(back - rgb)) <= 0.5
    assert np.max(np.abs(im.quantize(back).astype(int) - rgb)) <= 1


def test_modcrop():
    assert im.modcrop(np.zeros((100, 82)), 3).shape == (99, 81)


def test_eight_augmentations_of_uniform_are_identical():
    variants = im.augmentations(np.full((6, 6), 3.0))
    assert len(variants) == 8 and all(np.array_equal(v, variants[0]) for v in variants)


def test_augmentations_are_distinct_for_generic_image():
    variants = im.augmentations(np.arange(36.0).reshape(6, 6))
    assert len({v.tobytes() for v in variants}) == 8


def test_91_images_give_728():
    assert len(im.augment_all([np.zeros((4, 4))] * 91)) == 728


@pytest.mark.parametrize("scale,lr", [(2, 48), (3, 32), (4, 24)])
def test_patch_sizes(scale, lr):
    img = np.random.default_rng(0).uniform(0, 255, (120, 130))
    pairs = im.make_dataset([img], scale, count=3, seed=1)
    assert all(p.lr.shape == (lr, lr) and p.hr.shape == (96, 96) for p in pairs)


def test_crops_at_multiples_of_scale():
    img = np.arange(120 * 120, dtype=np.float64).reshape(120, 120)
    for p in im.make_dataset([img], 3, patch=48, count=10, seed=2, augment=False):
        top, left = divmod(int(p.hr[0, 0]), 120)
        assert top % 3 == 0 and left % 3 == 0


def test_dataset_is_seeded():
    img = np.random.default_rng(0).uniform(0, 255, (100, 100))
    a = im.make_dataset([img], 2, patch=48, count=5, seed=3)
    b = im.make_dataset([img], 2, patch=48, count=5, seed=3)
    assert all(np.array_equal(x.hr, y.hr) and np.array_equal(x.lr, y.lr) for x, y in zip(a, b))


def test_too_small_image_rejected():
    with pytest.raises(ValueError):
        im.make_dataset([np.zeros((50, 50))], 2, patch=96, count=1)


def test_sample_pair_shape_invariant():
    with pytest.raises(ValueError):
        im.SamplePair(np.zeros((4, 4)), np.zeros((9, 9)), 2)


def test_holdout_split():
    train, hold = im.split_holdout(list(range(728)), 200, seed=0)
    assert len(train) == 528 and len(hold) == 200 and not set(train) & set(hold)


def test_png_round_trip(tmp_path):
    rgb = [np.random.default_rng(i).integers(0, 256, (5, 7)).astype(np.float32) for i in range(3)]
    im.save_png(rgb, tmp_path / "c.png")
    back = im.load_png(tmp_path / "c.png")
    assert all(np.array_equal(a, b) for a, b in zip(rgb, back))
    im.save_png([rgb[0]], tmp_path / "g.png")
    assert len(im.load_png(tmp_path / "g.png")) == 1


def test_16bit_png_rejected(tmp_path):
    Image.fromarray(np.full((4, 4), 1000, np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(im.UnsupportedImage):
        im.load_png(tmp_path / "d.png")


def test_garbage_file_rejected(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(im.UnsupportedImage):
        im.load_png(tmp_path / "x.png")


def test_plane_range_tag():
    with pytest.raises(ValueError):
        im.ImagePlane(np.zeros((2, 2)), "percent")
    assert im.ImagePlane(np.full((2, 2), 300.0)).clamped().values.max() == 255
