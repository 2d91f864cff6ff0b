import numpy as np
import numpy.testing as npt
import pytest

from specreid import autodiff as ad
from specreid import backbone
from specreid.errors import ConfigError, ShapeError
from specreid.gradcheck import check_gradients

MICRO = backbone.ModelConfig(
    image_hw=(16, 32), patch=8, channels=3, embed_dim=16, depth=2, heads=2, mlp_ratio=2.0
)


def _wrap(raw):
    return {k: ad.Tensor(v, requires_grad=True) for k, v in raw.items()}


# ---------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------

def test_patchify_shape_and_count():
    rng = np.random.default_rng(0)
    imgs = rng.random((2, 3, 16, 32))
    rows = backbone.patchify(imgs, MICRO)
    assert rows.shape == (2, MICRO.n_patches, MICRO.patch_dim)
    assert MICRO.n_patches == 8


def test_patchify_recovers_known_patch():
    # paint one patch with a marker and confirm it lands in the right row
    cfg = MICRO
    imgs = np.zeros((1, 3, 16, 32))
    # grid is 2x4 (row-major); patch (row 1, col 2) has index 6
    imgs[0, :, 8:16, 16:24] = 7.0
    rows = backbone.patchify(imgs, cfg)
    npt.assert_array_equal(rows[0, 6], np.full(cfg.patch_dim, 7.0))
    others = np.delete(rows[0], 6, axis=0)
    npt.assert_array_equal(others, np.zeros_like(others))


def test_patchify_channel_major_layout():
    cfg = backbone.ModelConfig(image_hw=(8, 8), patch=8, channels=2, embed_dim=16,
                               depth=2, heads=2)
    imgs = np.zeros((1, 2, 8, 8))
    imgs[0, 0] = 1.0
    imgs[0, 1] = 2.0
    rows = backbone.patchify(imgs, cfg)
    npt.assert_array_equal(rows[0, 0, :64], np.ones(64))
    npt.assert_array_equal(rows[0, 0, 64:], np.full(64, 2.0))


def test_patchify_rejects_wrong_shape():
    with pytest.raises(ShapeError):
        backbone.patchify(np.zeros((2, 3, 16, 30)), MICRO)


def test_patchify_round_trip_pixels():
    rng = np.random.default_rng(1)
    imgs = rng.random((3, 3, 16, 32))
    rows = backbone.patchify(imgs, MICRO)
    # every pixel appears exactly once
    npt.assert_allclose(np.sort(rows.ravel()), np.sort(imgs.ravel()), atol=0)


# ---------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------

def test_config_rejects_indivisible_image():
    with pytest.raises(ConfigError, match="patches"):
        backbone.ModelConfig(image_hw=(30, 64)).validate()


def test_config_rejects_head_mismatch():
    with pytest.raises(ConfigError, match="heads"):
        backbone.ModelConfig(embed_dim=62, heads=4).validate()


def test_config_rejects_shallow_depth():
    with pytest.raises(ConfigError, match="depth"):
        backbone.ModelConfig(depth=1).validate()


# ---------------------------------------------------------------------
# parameter table
# ---------------------------------------------------------------------

def test_param_inventory():
    raw = backbone.init_vit_params(MICRO, np.random.default_rng(2))
    assert raw["vit.patch.w"].shape == (MICRO.patch_dim, 16)
    assert raw["vit.pos"].shape == (9, 16)
    assert raw["vit.cls"].shape == (16,)
    # depth 2: one trunk block plus three per-spectrum finals
    assert "vit.block0.attn.wqkv" in raw
    assert "vit.block1.attn.wqkv" not in raw
    for s in ("rgb", "nir", "tir"):
        assert raw[f"vit.final.{s}.mlp.w1"].shape == (16, 32)
    gains = [v for k, v in raw.items() if k.endswith(".gain")]
    for g in gains:
        npt.assert_array_equal(g, np.ones_like(g))


def test_init_is_seeded():
    a = backbone.init_vit_params(MICRO, np.random.default_rng(3))
    b = backbone.init_vit_params(MICRO, np.random.default_rng(3))
    for k in a:
        npt.assert_array_equal(a[k], b[k])


def test_trunc_normal_bounded():
    from specreid.initializers import trunc_normal

    draws = trunc_normal(np.random.default_rng(4), (20000,), std=0.02)
    assert np.abs(draws).max() <= 0.04 + 1e-12
    # truncation at 2 sigma shrinks the std by sqrt(1 - 4 pdf(2) / (cdf(2) - cdf(-2)))
    from scipy.stats import norm

    want = 0.02 * np.sqrt(1.0 - 4.0 * norm.pdf(2.0) / (norm.cdf(2.0) - norm.cdf(-2.0)))
    assert abs(draws.std() - want) < 0.0005


# ---------------------------------------------------------------------
# forward behavior
# ---------------------------------------------------------------------

def test_encode_shapes_and_spectrum_splits():
    rng = np.random.default_rng(5)
    params = _wrap(backbone.init_vit_params(MICRO, rng))
    imgs = [rng.random((4, 3, 16, 32)) for _ in range(3)]
    toks = backbone.encode_shared(params, MICRO, imgs)
    assert len(toks) == 3
    for t in toks:
        assert t.shape == (4, 9, 16)


def test_identical_images_share_trunk_output():
    # spectra share every trunk parameter, so equal inputs give equal tokens
    rng = np.random.default_rng(6)
    params = _wrap(backbone.init_vit_params(MICRO, rng))
    img = rng.random((2, 3, 16, 32))
    toks = backbone.encode_shared(params, MICRO, [img, img.copy(), img.copy()])
    npt.assert_array_equal(toks[0].data, toks[1].data)
    npt.assert_array_equal(toks[0].data, toks[2].data)


def test_per_sample_independence():
    # a sample's tokens must not depend on who shares the batch
    rng = np.random.default_rng(7)
    params = _wrap(backbone.init_vit_params(MICRO, rng))
    imgs_a = [rng.random((3, 3, 16, 32)) for _ in range(3)]
    imgs_b = [np.concatenate([im[:2], rng.random((1, 3, 16, 32))]) for im in imgs_a]
    ta = backbone.encode_shared(params, MICRO, imgs_a)
    tb = backbone.encode_shared(params, MICRO, imgs_b)
    for a, b in zip(ta, tb):
        npt.assert_allclose(a.data[:2], b.data[:2], atol=1e-12)


def test_finalize_differs_by_spectrum():
    rng = np.random.default_rng(8)
    raw = backbone.init_vit_params(MICRO, rng)
    params = _wrap(raw)
    patch = ad.Tensor(rng.normal(size=(2, 8, 16)))
    cls = ad.Tensor(rng.normal(size=(2, 16)))
    out_rgb = backbone.finalize_spectrum(params, MICRO, "rgb", patch, cls)
    out_nir = backbone.finalize_spectrum(params, MICRO, "nir", patch, cls)
    assert out_rgb.shape == (2, 16)
    assert np.abs(out_rgb.data - out_nir.data).max() > 1e-6


def test_finalize_rejects_unknown_spectrum():
    params = _wrap(backbone.init_vit_params(MICRO, np.random.default_rng(9)))
    with pytest.raises(ConfigError):
        backbone.finalize_spectrum(params, MICRO, "uv", ad.Tensor(np.ones((1, 8, 16))),
                                   ad.Tensor(np.ones((1, 16))))


def test_block_gradcheck():
    rng = np.random.default_rng(10)
    cfg = backbone.ModelConfig(image_hw=(16, 16), patch=8, embed_dim=8, depth=2, heads=2,
                               mlp_ratio=1.0)
    raw = backbone.init_vit_params(cfg, rng)
    block_names = [k for k in raw if k.startswith("vit.block0.")]
    x = rng.normal(size=(2, 4, 8))

    def build(xt, *ptensors):
        params = dict(zip(block_names, ptensors))
        out = backbone.block_forward(params, "vit.block0", xt, cfg)
        return ad.mul(out, out).sum()

    errors = check_gradients(build, [x] + [raw[k] for k in block_names])
    assert max(errors) < 1e-4


def test_encode_deterministic():
    rng = np.random.default_rng(11)
    params = _wrap(backbone.init_vit_params(MICRO, np.random.default_rng(0)))
    imgs = [rng.random((2, 3, 16, 32)) for _ in range(3)]
    a = backbone.encode_shared(params, MICRO, imgs)
    b = backbone.encode_shared(params, MICRO, imgs)
    for x, y in zip(a, b):
        npt.assert_array_equal(x.data, y.data)
