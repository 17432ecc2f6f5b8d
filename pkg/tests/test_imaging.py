import numpy as np
import pytest
from hypothesis import given, strategies as st

from softseg.fusion import SoftLabelMap
from softseg.imaging import (AugmentDraw, RasterImage, apply_augmentation, augment_light, binary_close,
                             binary_open, central_patch, disk, foreground_mask, otsu_threshold,
                             read_png, resample_bicubic, sample_patch, write_png)


def otsu_oracle(hist):
    """Exhaustive search over every threshold, scored in plain rationals via integer math."""
    hist = [int(v) for v in hist]
    total = sum(hist)
    occupied = [i for i, v in enumerate(hist) if v]
    best_t, best = occupied[0], None
    for t in range(occupied[0], occupied[-1] + 1):
        n0 = sum(hist[: t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            score = (0, 1)
        else:
            s0 = sum(i * hist[i] for i in range(t + 1))
            s1 = sum(i * hist[i] for i in range(t + 1, len(hist)))
            # (mu0 - mu1)^2 * n0 * n1 = (s0*n1 - s1*n0)^2 / (n0*n1)
            score = ((s0 * n1 - s1 * n0) ** 2, n0 * n1)
        if best is None or score[0] * best[1] > best[0] * score[1]:
            best, best_t = score, t
    return best_t


def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for k in range(100):
        hist = np.zeros(256, int)
        if k % 3 == 0:
            idx = rng.choice(256, size=int(rng.integers(1, 6)), replace=False)
            hist[idx] = rng.integers(1, 50, idx.size)
        else:
            hist = rng.integers(0, 30, 256) * (rng.random(256) < 0.4)
            hist[int(rng.integers(0, 256))] += 1
        assert otsu_threshold(hist) == otsu_oracle(hist)


def test_otsu_examples():
    hist = np.zeros(256, int)
    hist[0] = hist[255] = 50
    assert otsu_threshold(hist) == 0
    single = np.zeros(256, int)
    single[77] = 9
    assert otsu_threshold(single) == 77
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros(256))
    with pytest.raises(ValueError):
        otsu_threshold([-1, 3])


def naive_dilate(mask, se):
    r = se.shape[0] // 2
    h, w = mask.shape
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    if se[di + r, dj + r] and 0 <= ii < h and 0 <= jj < w and mask[ii, jj]:
                        out[i, j] = True
    return out


def naive_erode(mask, se):
    # outside pixels do not veto erosion
    r = se.shape[0] // 2
    h, w = mask.shape
    out = np.ones_like(mask)
    for i in range(h):
        for j in range(w):
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    if se[di + r, dj + r] and 0 <= ii < h and 0 <= jj < w and not mask[ii, jj]:
                        out[i, j] = False
    return out


def test_morphology_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for k in range(20):
        mask = rng.random((14, 17)) < (0.3 + 0.03 * k)
        r = 1 + k % 3
        se = disk(r)
        assert (binary_close(mask, r) == naive_erode(naive_dilate(mask, se), se)).all()
        assert (binary_open(mask, r) == naive_dilate(naive_erode(mask, se), se)).all()


def test_disk_shape():
    assert disk(0).tolist() == [[True]]
    assert disk(1).astype(int).tolist() == [[0, 1, 0], [1, 1, 1], [0, 1, 0]]


@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_open_close_idempotent(seed, r):
    mask = np.random.default_rng(seed).random((16, 16)) < 0.5
    o = binary_open(mask, r)
    c = binary_close(mask, r)
    assert (binary_open(o, r) == o).all()
    assert (binary_close(c, r) == c).all()


def test_foreground_white_and_disk():
    white = np.ones((20, 20, 3))
    assert not foreground_mask(white).mask.any()
    img = np.ones((40, 40, 3))
    yy, xx = np.mgrid[:40, :40]
    tissue = (yy - 20) ** 2 + (xx - 20) ** 2 < 144
    img[tissue] = [0.6, 0.3, 0.5]
    fg = foreground_mask(RasterImage(img), radius=2)
    assert (fg.mask == tissue).mean() > 0.98


def test_png_round_trip(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_png(tmp_path / "a.png", arr)
    img = read_png(tmp_path / "a.png", spacing=0.5)
    assert img.pixel_spacing == 0.5
    assert (np.rint(img.pixels * 255).astype(np.uint8) == arr).all()


def test_resample_identity_constant_and_partition():
    rng = np.random.default_rng(3)
    img = RasterImage(rng.random((9, 11, 3)), 1.392)
    assert (resample_bicubic(img, 1.392).pixels == img.pixels).all()
    const = RasterImage(np.full((8, 10, 3), 0.37), 0.7)
    out = resample_bicubic(const, 1.4)
    assert out.pixels.shape == (4, 5, 3)
    assert np.allclose(out.pixels, 0.37, atol=1e-12)
    up = resample_bicubic(const, 0.35)
    assert up.pixels.shape == (16, 20, 3) and np.allclose(up.pixels, 0.37, atol=1e-12)
    with pytest.raises(ValueError):
        resample_bicubic(img, 0)


def test_resample_scalar_oracle():
    """Upsample by 2: each output is a Catmull-Rom blend of 4 clamped neighbours."""
    rng = np.random.default_rng(4)
    row = rng.random(6) * 0.5 + 0.25
    img = RasterImage(np.repeat(np.repeat(row[None, :, None], 3, axis=2), 1, axis=0), 1.0)
    out = resample_bicubic(img, 0.5).pixels[0, :, 0]

    def kern(x, a=-0.5):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0

    for j, v in enumerate(out):
        c = (j + 0.5) / 2 - 0.5
        b = int(np.floor(c))
        ws = [kern(c - (b + t)) for t in range(-1, 3)]
        vals = [row[min(max(b + t, 0), 5)] for t in range(-1, 3)]
        assert v == pytest.approx(sum(w * x for w, x in zip(ws, vals)) / sum(ws), abs=1e-12)


def _soft(h, w, c=3, seed=0, fg=None):
    rng = np.random.default_rng(seed)
    p = rng.random((h, w, c))
    p /= p.sum(-1, keepdims=True)
    fg = np.ones((h, w), bool) if fg is None else fg
    return SoftLabelMap(p, fg, np.zeros((h, w), bool), "explanation", 3)


def test_central_patch_examples():
    img = np.arange(6 * 8 * 3, dtype=float).reshape(6, 8, 3)
    patch = central_patch(img, 4)
    assert (patch == img[1:5, 2:6]).all()
    odd = central_patch(np.arange(5 * 5 * 3, dtype=float).reshape(5, 5, 3), 2)
    assert (odd == np.arange(75.0).reshape(5, 5, 3)[1:3, 1:3]).all()
    small = central_patch(np.ones((3, 3, 3)), 6)
    assert small.shape == (6, 6, 3)
    lab = _soft(6, 8)
    p, l = central_patch(img, 4, lab)
    assert (l.probs == lab.probs[1:5, 2:6]).all()


def test_sample_patch_prefers_foreground():
    fg = np.zeros((30, 30), bool)
    fg[20:, 20:] = True
    lab = _soft(30, 30, fg=fg)
    img = np.random.default_rng(0).random((30, 30, 3))
    rng = np.random.default_rng(5)
    for _ in range(10):
        patch, l = sample_patch(img, lab, 8, rng)
        assert patch.shape == (8, 8, 3) and l.foreground.any()
    a = sample_patch(img, lab, 8, np.random.default_rng(9))
    b = sample_patch(img, lab, 8, np.random.default_rng(9))
    assert (a[0] == b[0]).all()


@given(st.integers(0, 2**32 - 1))
def test_augmentation_invariants(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((6, 6, 3))
    lab = _soft(6, 6, seed=seed)
    out, l = augment_light(img, lab, rng)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
    assert np.allclose(l.probs.sum(-1), 1)
    # label multiset is preserved by flips and rotations
    assert np.allclose(np.sort(l.probs.reshape(-1)), np.sort(lab.probs.reshape(-1)))


def test_augmentation_geometry_matches_labels():
    img = np.zeros((4, 4, 3))
    img[0, 1] = 1.0
    lab = _soft(4, 4)
    draw = AugmentDraw(hflip=True, vflip=False, rot90=1)
    out, l = apply_augmentation(img, lab, draw)
    i, j = np.argwhere(out[..., 0] == 1.0)[0]
    assert (l.probs[i, j] == lab.probs[0, 1]).all()
    ident, _ = apply_augmentation(img, None, AugmentDraw())
    assert (ident == img).all()
