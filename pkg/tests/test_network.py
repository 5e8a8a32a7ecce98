"""Transformer tests: attention oracle, shift mask, complexity counter,
full-network gradient check, and checkpoint round-trips."""

import numpy as np
import pytest

import poredit.ndtensor as nd
from poredit import network, rng
from poredit.network import ModelConfig, PoreDiTModel

TOY = ModelConfig(input_size=8, patch=4, embed_dim=16, depth=2, heads=2, window=2, dtype="float64")


def toy_model(seed=0, cfg=TOY) -> PoreDiTModel:
    m = PoreDiTModel.init(cfg, seed=seed)
    g = np.random.default_rng(seed + 1000)
    # break the zero-init symmetry of the decoder so gradients reach every tensor
    for name in ("final.ada.w", "final.out.w", "final.out.b", "null_cond"):
        p = m.params[name]
        p.data = p.data + g.normal(scale=0.05, size=p.shape).astype(p.data.dtype)
    return m


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(input_size=10, patch=4)  # size not divisible by patch
    with pytest.raises(ValueError):
        ModelConfig(input_size=16, patch=4, window=3)  # latent not divisible by window
    with pytest.raises(ValueError):
        ModelConfig(input_size=16, patch=4, embed_dim=15, heads=2)  # dim not divisible by heads
    with pytest.raises(ValueError):
        ModelConfig(depth=3)  # alternating W/SW blocks need even depth


def test_patchify_unpatchify_inverse():
    x = np.random.default_rng(0).normal(size=(8, 8, 8))
    m = toy_model()
    flat = network.patchify(x, 4)
    assert flat.shape == (8, 64)
    back = m.unpatchify(nd.as_tensor(flat)).data
    np.testing.assert_allclose(back, x, atol=1e-15)


def test_frequency_embedding_structure():
    emb = network.embed_scalar(11.0, 16)
    assert emb.shape == (16,)
    # interleaved sin/cos of the same frequencies
    freqs = 11.0 / (10000.0 ** (2 * np.arange(8) / 16))
    np.testing.assert_allclose(emb[0::2], np.sin(freqs), atol=1e-12)
    np.testing.assert_allclose(emb[1::2], np.cos(freqs), atol=1e-12)


# ---------------------------------------------------------------------------
# attention oracle


def dense_attention_oracle(model: PoreDiTModel, grid: np.ndarray, block: int) -> np.ndarray:
    """Global multi-head attention over all tokens in plain numpy, including
    the relative position bias, for configs where window == latent edge."""
    cfg = model.config
    p = {k: v.data for k, v in model.params.items()}
    pre = f"block{block}."
    n = cfg.tokens
    h, d = cfg.heads, cfg.head_dim
    x = grid.reshape(n, cfg.embed_dim)
    qkv = x @ p[pre + "qkv.w"] + p[pre + "qkv.b"]
    q, k, v = np.split(qkv, 3, axis=-1)
    q = q.reshape(n, h, d).transpose(1, 0, 2)
    k = k.reshape(n, h, d).transpose(1, 0, 2)
    v = v.reshape(n, h, d).transpose(1, 0, 2)
    attn = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    bias = p[pre + "bias_table"][model._rel_idx].transpose(2, 0, 1)
    attn = attn + bias
    attn = np.exp(attn - attn.max(axis=-1, keepdims=True))
    attn = attn / attn.sum(axis=-1, keepdims=True)
    out = (attn @ v).transpose(1, 0, 2).reshape(n, cfg.embed_dim)
    out = out @ p[pre + "attn_out.w"] + p[pre + "attn_out.b"]
    return out.reshape(grid.shape)


def test_window_attention_equals_dense_when_window_covers_latent():
    m = toy_model()  # latent edge 2 == window 2 -> one window, no shift
    g = np.random.default_rng(2)
    m.params["block0.bias_table"].data = g.normal(scale=0.3, size=m.params["block0.bias_table"].shape)
    grid = g.normal(size=(2, 2, 2, 16))
    got = m.window_attention(nd.as_tensor(grid), 0, shifted=False).data
    ref = dense_attention_oracle(m, grid, 0)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_shift_disabled_when_window_equals_latent():
    assert TOY.shift == 0
    cfg = ModelConfig(input_size=16, patch=4, embed_dim=16, depth=2, heads=2, window=2)
    assert cfg.shift == 1


def test_shifted_mask_blocks_nonadjacent_pairs():
    """Post-softmax weight on logically non-adjacent pairs is < 1e-8."""
    cfg = ModelConfig(input_size=32, patch=4, embed_dim=8, depth=2, heads=1, window=4)
    mask = network._attn_mask(cfg.latent_edge, cfg.window, cfg.shift)
    assert mask is not None
    logits = np.random.default_rng(0).normal(scale=3, size=mask.shape) + mask
    w = nd.softmax(nd.as_tensor(logits)).data
    assert w[mask < 0].max() < 1e-8
    # every row still attends to its own region with full weight
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_mask_region_counts_1d_structure():
    """The per-axis region coding splits the rolled axis into 3 zones."""
    codes = network._window_codes(8, 4, 2)
    np.testing.assert_array_equal(codes, [0, 0, 0, 0, 1, 1, 2, 2])
    np.testing.assert_array_equal(network._window_codes(8, 4, 0), np.zeros(8))


def test_multiply_count_formula():
    """One W-MSA layer costs exactly 4NC^2 + 2NM^3C multiplies."""
    cfg = ModelConfig(input_size=32, patch=4, embed_dim=24, depth=2, heads=4, window=4)
    m = PoreDiTModel.init(cfg, seed=0)
    grid = np.random.default_rng(0).normal(size=(cfg.latent_edge,) * 3 + (cfg.embed_dim,))
    with nd.no_grad():
        nd.reset_multiply_count()
        m.window_attention(nd.as_tensor(grid), 0, shifted=False)
        count = nd.multiply_count()
    n, c, m3 = cfg.tokens, cfg.embed_dim, cfg.window**3
    assert count == 4 * n * c**2 + 2 * n * m3 * c


def test_window_attention_permutation_equivariance_across_windows():
    """Swapping two window contents swaps the two window outputs."""
    cfg = ModelConfig(input_size=16, patch=4, embed_dim=16, depth=2, heads=2, window=2)
    m = PoreDiTModel.init(cfg, seed=3)
    g = np.random.default_rng(4)
    grid = g.normal(size=(4, 4, 4, 16))
    out1 = m.window_attention(nd.as_tensor(grid), 0, shifted=False).data
    swapped = grid.copy()
    swapped[0:2, 0:2, 0:2], swapped[2:4, 0:2, 0:2] = (
        grid[2:4, 0:2, 0:2].copy(), grid[0:2, 0:2, 0:2].copy(),
    )
    out2 = m.window_attention(nd.as_tensor(swapped), 0, shifted=False).data
    np.testing.assert_allclose(out2[0:2, 0:2, 0:2], out1[2:4, 0:2, 0:2], atol=1e-12)
    np.testing.assert_allclose(out2[2:4, 2:4, 2:4], out1[2:4, 2:4, 2:4], atol=1e-12)


# ---------------------------------------------------------------------------
# gradients through the full network


def test_full_network_gradcheck_subset():
    """Analytic gradient vs central differences on a few coordinates of
    every parameter tensor (float64)."""
    m = toy_model(seed=7)
    g = np.random.default_rng(8)
    x = g.normal(size=(8, 8, 8))
    proj = g.normal(size=(8, 8, 8))
    t, phi = 3, 0.35

    def loss_value() -> float:
        # dropped + conditioned branches together touch every parameter
        with nd.no_grad():
            full = m.forward_logits(x, t, phi).data
            dropped = m.forward_logits(x, t, phi, drop_condition=True).data
            return float(((full + 0.5 * dropped) * proj).sum())

    loss = nd.tsum(
        (m.forward_logits(x, t, phi) + 0.5 * m.forward_logits(x, t, phi, drop_condition=True)) * proj
    )
    nd.backward(loss)
    eps = 1e-5
    worst = 0.0
    for name, p in m.params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = g.choice(flat.size, size=min(3, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            denom = max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(fd - gflat[i]) / denom)
    assert worst < 1e-4


def test_condition_dropout_replaces_physical_branch():
    m = toy_model()
    c_drop = m.build_condition(5, 0.3, drop=True).data
    c_none = m.build_condition(5, None).data
    c_full = m.build_condition(5, 0.3).data
    np.testing.assert_array_equal(c_drop, c_none)
    assert not np.array_equal(c_drop, c_full)


def test_dropout_draw_frequency():
    """The training-loop condition-dropout draw hits p=0.1 within 0.005
    over 1e5 keyed draws."""
    hits = sum(rng.stream(0, "cond-drop", step).random() < 0.1 for step in range(100_000))
    assert abs(hits / 100_000 - 0.1) < 0.005


def test_parameter_count_closed_form():
    for cfg in (TOY, ModelConfig(), ModelConfig(s2_cond_dim=6)):
        m = PoreDiTModel.init(cfg, seed=0)
        assert network.parameter_count(cfg) == m.count_parameters()


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    cfg = ModelConfig(input_size=8, patch=4, embed_dim=16, depth=2, heads=2, window=2)
    m = PoreDiTModel.init(cfg, seed=5)
    m.phi_mean, m.phi_std = 0.31, 0.02
    m.meta["timesteps"] = 250
    path = tmp_path / "m.pdtc"
    m.save(path)
    back = PoreDiTModel.load(path)
    assert back.config == cfg
    assert back.phi_mean == m.phi_mean and back.phi_std == m.phi_std
    assert back.meta == m.meta
    for k, p in m.params.items():
        np.testing.assert_array_equal(back.params[k].data, p.data)
    x = np.random.default_rng(0).normal(size=(8, 8, 8))
    np.testing.assert_array_equal(m.forward(x, 4, 0.3), back.forward(x, 4, 0.3))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.pdtc"
    path.write_bytes(b"XXXX" + bytes(64))
    with pytest.raises(ValueError, match="magic"):
        PoreDiTModel.load(path)


def test_forward_shape_mismatch():
    m = toy_model()
    with pytest.raises(ValueError):
        m.forward(np.zeros((9, 8, 8)), 1, 0.3)
