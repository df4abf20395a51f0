import numpy as np
import pytest

from csmlab.config import MaskConfig, ModelConfig
from csmlab.errors import ConfigurationError, UsageError
from csmlab.masking import MaskPlan, full_visibility_plan, sample_mask_plan
from csmlab.model import (decode, embed_visible, encode, encoder_names, forward_loss,
                          init_params, reconstruction_loss)
from csmlab.numerics import Tape, Tensor, backward, grad_check
from csmlab.volumes import MultiSeriesVolume, TokenGrid, patchify

from golden_util import check_golden


def tiny_grid(rng, s=2, dims=(2, 2, 2), p=2):
    vol = MultiSeriesVolume(rng.normal(size=(s, *(d * p for d in dims))), (True,) * s)
    return patchify(vol, p)


def forced_plan(s, N, masked_series=(), ratio=0.5, rng=None):
    """Plan with the given series fully masked and the rest at ``ratio``."""
    rng = rng or np.random.default_rng(0)
    masked = []
    for j in range(s):
        if j in masked_series:
            masked.append(np.arange(N))
        else:
            masked.append(np.sort(rng.permutation(N)[:int(ratio * N)]))
    unmasked = [np.setdiff1d(np.arange(N), m) for m in masked]
    return MaskPlan(tuple(masked), tuple(unmasked), tuple(masked_series), N)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


def test_embed_length_54():
    cfg = ModelConfig(d_enc=8, d_dec=8, enc_heads=2, dec_heads=2, patch_edge=2, n_max=216,
                      s_max=3, enc_depth=1, dec_depth=1)
    rng = np.random.default_rng(0)
    grid = tiny_grid(rng, s=3, dims=(6, 6, 6))
    plan = forced_plan(3, 216, masked_series=(1,), ratio=0.875)
    emb = embed_visible(grid, plan, init_params(cfg, rng), cfg)
    assert emb.shape == (54, 8)


def test_embed_zero_params_gives_zeros(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    for name in ("patch_embed.w", "patch_embed.b", "pos_embed", "series_embed"):
        params[name].data[...] = 0.0
    grid = tiny_grid(rng)
    emb = embed_visible(grid, full_visibility_plan(2, 8), params, tiny_model_cfg)
    assert emb.shape == (16, 8) and not emb.data.any()


def test_embed_position_distinguishes_equal_tokens(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    tokens = np.tile(rng.normal(size=(1, 1, 8)), (1, 8, 1))
    grid = TokenGrid(tokens, (2, 2, 2), 2)
    emb = embed_visible(grid, full_visibility_plan(1, 8), params, tiny_model_cfg).data
    assert len({tuple(r) for r in np.round(emb, 12)}) == 8


def test_embed_order_series_major(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8, ratio=0.5)
    emb = embed_visible(grid, plan, params, tiny_model_cfg).data
    j, i = 1, int(plan.unmasked[1][0])
    expect = (grid.tokens[j, i] @ params["patch_embed.w"].data + params["patch_embed.b"].data
              + params["pos_embed"].data[i] + params["series_embed"].data[j])
    np.testing.assert_allclose(emb[plan.unmasked[0].size], expect, rtol=1e-12)


def test_plan_grid_mismatch(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    with pytest.raises(UsageError):
        embed_visible(tiny_grid(rng), full_visibility_plan(2, 4), params, tiny_model_cfg)


def test_too_many_series(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    with pytest.raises(ConfigurationError):
        embed_visible(tiny_grid(rng, s=3), full_visibility_plan(3, 8), params, tiny_model_cfg)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def test_depth_zero_encoder_is_identity(rng, tiny_model_cfg):
    cfg = tiny_model_cfg.model_copy(update={"enc_depth": 0})
    params = init_params(cfg, rng)
    x = Tensor(rng.normal(size=(6, 8)))
    np.testing.assert_array_equal(encode(x, params, cfg).data, x.data)


def test_encoder_permutation_equivariant(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    x = rng.normal(size=(9, 8))
    perm = rng.permutation(9)
    a = encode(Tensor(x), params, tiny_model_cfg).data
    b = encode(Tensor(x[perm]), params, tiny_model_cfg).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-11, atol=1e-12)


def test_encoder_golden(tiny_model_cfg):
    rng = np.random.default_rng(77)
    params = init_params(tiny_model_cfg, rng)
    x = Tensor(rng.normal(size=(6, 8)))
    check_golden("encoder_tiny", encode(x, params, tiny_model_cfg).data)


def test_encoder_rejects_empty(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    with pytest.raises(UsageError):
        encode(Tensor(np.zeros((0, 8))), params, tiny_model_cfg)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def run(grid, plan, params, cfg):
    return decode(encode(embed_visible(grid, plan, params, cfg), params, cfg), plan, params, cfg)


def test_decode_shape_any_plan(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    grid = tiny_grid(rng)
    for seed in range(10):
        plan = sample_mask_plan(2, 8, MaskConfig(intra_ratio=0.5),
                                np.random.default_rng(seed))
        assert run(grid, plan, params, tiny_model_cfg).shape == (2, 8, 8)


def test_fully_masked_series_get_different_predictions(rng):
    cfg = ModelConfig(d_enc=8, d_dec=8, enc_depth=1, dec_depth=1, enc_heads=2, dec_heads=2,
                      patch_edge=2, s_max=3, n_max=8, precision="f64", init_std=0.5)
    params = init_params(cfg, rng)
    grid = tiny_grid(rng, s=3)
    plan = forced_plan(3, 8, masked_series=(0, 2))
    out = run(grid, plan, params, cfg).data
    assert not np.allclose(out[0], out[2])


def test_masked_slot_prediction_depth_zero(rng, tiny_model_cfg):
    cfg = tiny_model_cfg.model_copy(update={"dec_depth": 0})
    params = init_params(cfg, rng)
    params["dec.head.b"].data[...] = 0.0
    params["dec.mask_token"].data[...] = 0.0
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8, masked_series=(1,))
    out = run(grid, plan, params, cfg).data
    W = params["dec.head.w"].data
    for i in range(8):
        expect = (params["dec.pos_embed"].data[i] + params["dec.series_embed"].data[1]) @ W
        np.testing.assert_allclose(out[1, i], expect, rtol=1e-12, atol=1e-14)


def test_visible_slot_receives_adapted_latent(rng, tiny_model_cfg):
    cfg = tiny_model_cfg.model_copy(update={"dec_depth": 0})
    params = init_params(cfg, rng)
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8)
    latent = encode(embed_visible(grid, plan, params, cfg), params, cfg)
    out = decode(latent, plan, params, cfg).data
    j, i = 0, int(plan.unmasked[0][1])
    adapted = latent.data[1] @ params["dec.adapter.w"].data + params["dec.adapter.b"].data
    expect = adapted @ params["dec.head.w"].data + params["dec.head.b"].data
    np.testing.assert_allclose(out[j, i], expect, rtol=1e-12)


def test_series_count_flexibility(rng):
    cfg = ModelConfig(d_enc=8, d_dec=8, enc_depth=1, dec_depth=1, enc_heads=2, dec_heads=2,
                      patch_edge=2, s_max=3, n_max=8, precision="f64")
    params = init_params(cfg, rng)
    for s in (2, 3):
        grid = tiny_grid(rng, s=s)
        plan = sample_mask_plan(s, 8, MaskConfig(intra_ratio=0.5), rng)
        loss = forward_loss(grid, plan, params, cfg, MaskConfig())
        assert np.isfinite(loss.data)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_loss_zero_and_offset(rng):
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8, masked_series=(1,))
    cfg = MaskConfig()
    exact = Tensor(grid.tokens.copy())
    assert float(reconstruction_loss(exact, grid, plan, cfg).data) == 0.0
    delta = 0.3
    shifted = Tensor(grid.tokens + delta)
    assert float(reconstruction_loss(shifted, grid, plan, cfg).data) == pytest.approx(delta ** 2,
                                                                                     rel=1e-12)


def test_loss_mean_over_eligible_voxels(rng):
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8, ratio=0.5)
    recon = rng.normal(size=grid.tokens.shape)
    elig = plan.eligible(True)
    resid = (recon - grid.tokens)[elig]
    expect = np.sum(resid ** 2) / resid.size
    got = float(reconstruction_loss(Tensor(recon), grid, plan, MaskConfig()).data)
    assert got == pytest.approx(expect, rel=1e-12)
    doubled = Tensor(grid.tokens + 2 * (recon - grid.tokens))
    assert float(reconstruction_loss(doubled, grid, plan, MaskConfig()).data) == \
        pytest.approx(4 * got, rel=1e-12)


def test_loss_locality_100_plans():
    rng = np.random.default_rng(123)
    cfgs = [MaskConfig(intra_ratio=0.5, inter_prob=0.7),
            MaskConfig(intra_ratio=0.5, inter_prob=0.7, reconstruct_masked_series=False)]
    for t in range(100):
        mc = cfgs[t % 2]
        grid = tiny_grid(rng, s=3)
        plan = sample_mask_plan(3, 8, mc, rng)
        if not plan.eligible(mc.reconstruct_masked_series).any():
            continue
        recon = Tensor(rng.normal(size=grid.tokens.shape), requires_grad=True)
        with Tape() as tape:
            loss = reconstruction_loss(recon, grid, plan, mc)
        (g,) = backward(loss, tape, [recon])
        off = ~plan.eligible(mc.reconstruct_masked_series)
        assert np.all(g[off] == 0.0)
        # editing targets at non-eligible slots leaves the loss bit-identical
        edited = grid.tokens.copy()
        edited[off] = rng.normal(size=edited[off].shape)
        grid2 = TokenGrid(edited, grid.grid_dims, grid.patch_edge)
        loss2 = reconstruction_loss(Tensor(recon.data), grid2, plan, mc)
        assert float(loss2.data) == float(loss.data)


def test_loss_empty_eligible_set(rng):
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8, masked_series=(1,), ratio=0.0)
    with pytest.raises(ConfigurationError):
        reconstruction_loss(Tensor(grid.tokens), grid, plan,
                            MaskConfig(reconstruct_masked_series=False))


# ---------------------------------------------------------------------------
# end-to-end gradients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("masked_series", [(), (1,)])
def test_full_objective_gradcheck(tiny_model_cfg, masked_series):
    rng = np.random.default_rng(4)
    params = init_params(tiny_model_cfg, rng)
    grid = tiny_grid(rng)
    plan = forced_plan(2, 8, masked_series=masked_series, ratio=0.5, rng=rng)
    mc = MaskConfig()
    report = grad_check(lambda p: forward_loss(grid, plan, p, tiny_model_cfg, mc), params)
    assert report.max_rel_err < 1e-4, report.to_dict()


def test_encoder_names(rng, tiny_model_cfg):
    params = init_params(tiny_model_cfg, rng)
    names = encoder_names(params)
    assert "patch_embed.w" in names and "enc.norm.g" in names
    assert not any(n.startswith("dec.") for n in names)
    assert set(init_params(tiny_model_cfg, rng, decoder=False)) == set(names)
