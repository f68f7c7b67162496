import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedal import data as D
from fedal import tensor as T
from fedal.errors import ConfigError, DimensionError
from fedal.model import (BackboneConfig, BiasState, ClientModel, decompose, ema_update, encode, extract_bias,
                         forward_backbone, init_params, local_loss, local_train)
from fedal.params import ParamSet
from fedal.tensor import Tensor

CFG = BackboneConfig(n_layers=2, d_model=8, n_heads=2, patch_len=4, n_tokens=6)


def batch_of(rng, b, cfg=CFG, ratio=0.5, seed=0):
    return D.mask_tokens(rng.normal(size=(b, cfg.n_tokens, cfg.patch_len)), ratio, seed)


def shard_of(rng, n, cfg=CFG):
    z, stats = D.normalize(rng.normal(size=(n, cfg.seq_len)).cumsum(axis=1))
    return D.SeriesShard(0, z, ["x"] * n, [f"x/{i}" for i in range(n)], stats)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        BackboneConfig(n_layers=0)


# ---------------------------------------------------------------------------
# backbone


def test_forward_shape(rng):
    cfg = BackboneConfig(n_layers=1, d_model=8, n_heads=2, patch_len=4, n_tokens=32)
    m = ClientModel.create(cfg, 0)
    assert forward_backbone(m, batch_of(rng, 3, cfg)).shape == (3, 32, 8)


def test_forward_wrong_width(rng):
    m = ClientModel.create(CFG, 0)
    bad = D.mask_tokens(rng.normal(size=(2, 6, 5)), 0.5, 0)
    with pytest.raises(DimensionError):
        forward_backbone(m, bad)


def test_batch_permutation_equivariance(rng):
    m = ClientModel.create(CFG, 1)
    b = batch_of(rng, 5)
    perm = np.array([3, 0, 4, 1, 2])
    pb = D.MaskedBatch(b.tokens[perm], b.mask[perm], b.originals[perm])
    np.testing.assert_allclose(forward_backbone(m, pb).values, forward_backbone(m, b).values[perm],
                               rtol=0, atol=1e-13)


def test_zeroed_residual_branches_leave_embedding_stream(rng):
    p = init_params(CFG, 2)
    arrays = {k: t.values.copy() for k, t in p.items()}
    for i in range(CFG.n_layers):
        for name in ("attn.wo", "attn.bo", "ff.w2", "ff.b2"):
            arrays[f"backbone.layers.{i}.{name}"][...] = 0.0
    arrays["backbone.ln_f.g"] = rng.normal(size=CFG.d_model)
    arrays["backbone.ln_f.b"] = rng.normal(size=CFG.d_model)
    b = batch_of(rng, 3)
    out = encode(ParamSet.from_arrays(arrays), CFG, b.tokens, b.mask).values
    # direct computation of the residual stream: embedding + mask embedding + position, then final norm
    x = b.tokens @ arrays["backbone.embed.w"] + arrays["backbone.embed.b"]
    x = x + b.mask[..., None] * arrays["backbone.mask_emb"] + arrays["backbone.pos"]
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * arrays["backbone.ln_f.g"] + arrays["backbone.ln_f.b"]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@given(st.integers(0, CFG.n_tokens - 1), st.integers(0, 2**32 - 1))
def test_causality(j, seed):
    rng = np.random.default_rng(seed)
    m = ClientModel.create(CFG, 3)
    b = batch_of(rng, 2)
    z0 = forward_backbone(m, b).values
    tok = b.tokens.copy()
    tok[:, j] += rng.normal(size=tok[:, j].shape)
    z1 = forward_backbone(m, D.MaskedBatch(tok, b.mask, b.originals)).values
    assert z1[:, :j].tobytes() == z0[:, :j].tobytes()
    assert not np.array_equal(z1[:, j:], z0[:, j:])


def test_init_deterministic_and_congruent():
    a, b = init_params(CFG, 5), init_params(CFG, 5)
    assert a.equal(b) and a.congruent(init_params(CFG, 6))
    assert not a.equal(init_params(CFG, 6))


# ---------------------------------------------------------------------------
# bias block


def test_decompose_constant():
    t, s = decompose(np.full((2, 5, 3), 1.25), 3)
    np.testing.assert_array_equal(t, 1.25)
    np.testing.assert_array_equal(s, 0.0)


def test_decompose_ramp():
    t, s = decompose(np.array([1.0, 2, 3, 4, 5]).reshape(5, 1), 3)
    np.testing.assert_allclose(t.ravel(), [4 / 3, 2, 3, 4, 14 / 3], rtol=0, atol=1e-15)


def test_decompose_tau_bounds():
    from fedal.errors import ContractError
    with pytest.raises(ContractError):
        decompose(np.zeros((4, 2)), 5)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_decompose_identity_to_subtraction_rounding(seed, tau):
    h = np.random.default_rng(seed).normal(size=(2, 8, 4))
    t, s = decompose(h, tau)
    # season is the subtraction; adding it back is off by at most that subtraction's rounding
    bound = np.spacing(np.maximum(np.abs(t), np.abs(s)))
    assert np.all(np.abs((t + s) - h) <= bound)
    # where |trend| <= |latent| the float identity holds bit for bit
    small = np.abs(t) <= np.abs(h)
    assert np.array_equal((t + s)[small], h[small])


def test_decompose_tensor_route_matches_array_route(rng):
    h = rng.normal(size=(2, 6, 3))
    tt, st_ = decompose(Tensor(h), 3)
    ta, _ = decompose(h, 3)
    np.testing.assert_allclose(tt.values, ta, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(st_.values, h - tt.values)


def test_extract_bias_examples(rng):
    t = rng.normal(size=(3, 4, 2))
    _, bs = extract_bias(t, np.zeros_like(t))
    np.testing.assert_array_equal(bs, [0.0, 0.0])
    row = np.array([[[0.3, -1.7]]])
    bt, _ = extract_bias(row, row)
    np.testing.assert_array_equal(bt, [0.3, -1.7])
    v = rng.normal(size=(1, 1, 2))
    bt, _ = extract_bias(np.concatenate([v, -v]), np.concatenate([v, -v]))
    np.testing.assert_allclose(bt, 0.0, atol=1e-16)


@pytest.mark.parametrize("mu, expect", [(1.0, 2.0), (0.0, 0.0), (0.5, 1.0)])
def test_ema_endpoints(mu, expect):
    b = BiasState(3, mu)
    ema_update(b, np.full(3, 2.0), np.full(3, 2.0))
    assert b.b_trend.tolist() == [expect] * 3 and b.b_season.tolist() == [expect] * 3
    assert b.b_hat.values.tolist() == [2 * expect] * 3


@given(st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_ema_fixed_point_geometric(mu, seed):
    rng = np.random.default_rng(seed)
    target_t, target_s = rng.normal(size=4), rng.normal(size=4)
    b = BiasState(4, mu)
    gap0 = np.abs(b.b_trend - target_t)
    for k in range(1, 6):
        ema_update(b, target_t, target_s)
        np.testing.assert_allclose(np.abs(b.b_trend - target_t), gap0 * (1 - mu) ** k, rtol=1e-9, atol=1e-14)
        np.testing.assert_array_equal(b.b_hat.values, b.b_trend + b.b_season)


def test_ema_tensor_route_is_graph_connected():
    b = BiasState(2, 0.5)
    b.b_trend = np.array([1.0, 1.0])
    x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    out = ema_update(b, x, T.scale(x, 0.0))
    np.testing.assert_array_equal(out.values, [2.0, 0.0])  # 0.5*1 + 0.5*3, 0.5*1 + 0.5*(-1)
    T.backward(T.sum_(out))
    np.testing.assert_array_equal(x.grad, [0.5, 0.5])


def test_ema_mu_validation():
    with pytest.raises(ConfigError):
        BiasState(2, 1.5)


# ---------------------------------------------------------------------------
# local loss


def toy_model():
    cfg = BackboneConfig(n_layers=1, d_model=2, n_heads=1, patch_len=2, n_tokens=1)
    m = ClientModel.create(cfg, 0)
    m.params["head.w"].values[...] = [[1.0, 0.0], [0.0, 2.0]]
    m.params["head.b"].values[...] = [0.1, -0.1]
    m.bias.b_global = np.array([0.0, 1.0])
    batch = D.mask_tokens(np.array([[[1.0, -1.0]]]), 1.0, 0)
    return m, batch, Tensor(np.array([[[1.0, -1.0]]]))


def test_toy_local_loss_oracle():
    # z + b = [1.5, -0.5]; pred = [1.6, -1.1]; err = [0.6, -0.1]; mse = 0.37 / 2 = 0.185
    # gap = [0.5, -0.5]; lam * ||gap||^2 = 0.1 * 0.5 = 0.05
    m, batch, z = toy_model()
    b = Tensor(np.array([0.5, 0.5]), requires_grad=True)
    loss = local_loss(m, batch, 0.1, latents=z, b_hat=b)
    assert float(loss.values) == pytest.approx(0.235, abs=1e-12)
    assert float(local_loss(m, batch, 0.0, latents=z, b_hat=b).values) == pytest.approx(0.185, abs=1e-12)


def test_bias_equal_to_global_adds_nothing():
    m, batch, z = toy_model()
    b = Tensor(m.bias.b_global.copy(), requires_grad=True)
    assert float(local_loss(m, batch, 0.7, latents=z, b_hat=b).values) == \
        float(local_loss(m, batch, 0.0, latents=z, b_hat=b).values)


def test_bias_gradient_flow():
    m, batch, z = toy_model()
    b = Tensor(np.array([0.5, 0.5]), requires_grad=True)
    T.backward(local_loss(m, batch, 0.1, latents=z, b_hat=b))
    assert np.any(b.grad != 0)
    unmasked = D.mask_tokens(batch.originals, 0.0, 0)
    b2 = Tensor(np.array([0.5, 0.5]), requires_grad=True)
    T.backward(local_loss(m, unmasked, 0.0, latents=z, b_hat=b2))
    assert b2.grad is None or not b2.grad.any()


# ---------------------------------------------------------------------------
# local training


def test_zero_epochs_changes_nothing(rng):
    m = ClientModel.create(CFG, 0, mu=0.5)
    before = m.params.copy()
    stats = local_train(m, shard_of(rng, 4), 0, 0.1, 0.1, 0.5, 2, 0)
    assert m.params.equal(before) and stats.epoch_losses == []


def test_zero_lr_still_advances_ema(rng):
    m = ClientModel.create(CFG, 0, mu=0.5)
    m.bias.b_global = np.zeros(CFG.d_model)
    before = m.params.copy()
    local_train(m, shard_of(rng, 4), 1, 0.0, 0.1, 0.5, 2, 0, batch_size=2)
    assert m.params.equal(before)
    assert np.any(m.bias.b_trend != 0) and np.any(m.bias.b_season != 0)


def test_local_train_deterministic(rng):
    shard = shard_of(rng, 6)
    runs = []
    for _ in range(2):
        m = ClientModel.create(CFG, 0, mu=0.5)
        m.bias.b_global = np.zeros(CFG.d_model)
        s = local_train(m, shard, 2, 0.05, 0.1, 0.5, 2, [4, 1, 0], batch_size=2)
        runs.append((s.epoch_losses, m.params))
    assert runs[0][0] == runs[1][0] and runs[0][1].equal(runs[1][1])


def test_two_epochs_descend_in_most_seeds():
    from fedal.config import RunConfig
    from fedal.orchestrator import make_shards

    wins = 0
    for seed in range(10):
        rc = RunConfig(seed=seed)
        full = make_shards(rc)[0]
        shard = D.SeriesShard(0, full.sequences[:4], full.domain_tags[:4], full.seq_ids[:4], full.stats[:4])
        m = ClientModel.create(rc.backbone, seed, mu=0.5)
        # start the way a round does: global bias from a frozen warm-up pass, local bias reset
        warm = local_train(m, shard, 1, 0.0, 0.0, 0.75, 4, [seed, 9], batch_size=1)
        m.bias.reset()
        m.bias.b_global = warm.b_hat
        s = local_train(m, shard, 2, 0.02, 0.1, 0.75, 4, seed, batch_size=1)
        wins += s.epoch_losses[1] <= s.epoch_losses[0]
    assert wins >= 8


def test_lambda_pulls_bias_toward_global(rng):
    shard = shard_of(rng, 8)
    gaps = {}
    for lam in (0.0, 5.0):
        m = ClientModel.create(CFG, 0, mu=0.5)
        m.bias.b_global = np.zeros(CFG.d_model)
        s = local_train(m, shard, 3, 0.05, lam, 0.5, 2, 0, batch_size=4)
        gaps[lam] = s.bias_gap(m.bias.b_global)
    assert gaps[5.0] < gaps[0.0]
