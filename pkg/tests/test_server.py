import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedal import data as D
from fedal.coreset import CoreSet
from fedal.errors import ConfigError, ContractError
from fedal.model import BackboneConfig, init_params
from fedal.params import ParamSet
from fedal.server import (ServerState, coreset_finetune, correct_global, fuse, update_global_bias,
                          update_state, weighted_average)

CFG = BackboneConfig(n_layers=1, d_model=8, n_heads=2, patch_len=4, n_tokens=8)


def scalar(v):
    return ParamSet.from_arrays({"w": np.array(float(v))})


def state_for(theta, beta=0.1, s=None):
    st_ = ServerState.start(theta, 2, beta=beta)
    if s is not None:
        st_.s = s
    return st_


def random_params(rng, n=1):
    return [ParamSet.from_arrays({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}) for _ in range(n)]


# ---------------------------------------------------------------------------
# state validation


def test_server_state_invariants():
    theta = scalar(1.0)
    with pytest.raises(ContractError):
        ServerState(theta, ParamSet.from_arrays({"w": np.zeros(2)}), np.zeros(2))
    with pytest.raises(ConfigError):
        ServerState(theta, scalar(0.0), np.zeros(2), beta=0.0)
    with pytest.raises(ConfigError):
        ServerState(theta, scalar(0.0), np.zeros(2), alpha=1.5)
    assert ServerState.start(theta, 3).s.equal(scalar(0.0))


# ---------------------------------------------------------------------------
# weighted_average


def test_weighted_average_examples(rng):
    (p,) = random_params(rng)
    assert weighted_average([p], [7]).equal(p)
    a, b = random_params(rng, 2)
    mid = weighted_average([a, b], [5, 5])
    for k in a:
        np.testing.assert_array_equal(mid[k].values, (a[k].values + b[k].values) / 2)
    assert float(weighted_average([scalar(0.0), scalar(4.0)], [1, 3])["w"].values) == 3.0


def test_weighted_average_errors(rng):
    with pytest.raises(ContractError):
        weighted_average([scalar(0.0), ParamSet.from_arrays({"w": np.zeros(2)})], [1, 1])
    with pytest.raises(ContractError):
        weighted_average([], [])
    with pytest.raises(ContractError):
        weighted_average([scalar(0.0)], [0])


# ---------------------------------------------------------------------------
# update_state / correct_global


def test_update_state_examples(rng):
    (prev,) = random_params(rng)
    st_ = state_for(prev)
    update_state(st_, [prev.copy(), prev.copy()], prev)
    assert st_.s.equal(ParamSet.zeros_like(prev))

    one = state_for(scalar(1.0))
    update_state(one, [scalar(3.0)], scalar(1.0))  # drift v = 2
    assert float(one.s["w"].values) == pytest.approx(-0.2, abs=1e-15)

    two = state_for(scalar(1.0))
    update_state(two, [scalar(1.5), scalar(0.5)], scalar(1.0))
    assert float(two.s["w"].values) == 0.0


def test_update_state_scale():
    st_ = state_for(scalar(0.0))
    update_state(st_, [scalar(2.0), scalar(2.0)], scalar(0.0), scale=0.5)
    assert float(st_.s["w"].values) == pytest.approx(-0.2, abs=1e-15)


def test_update_state_incongruent():
    st_ = state_for(scalar(0.0))
    with pytest.raises(ContractError):
        update_state(st_, [ParamSet.from_arrays({"w": np.zeros(3)})], scalar(0.0))


def test_correct_global_examples(rng):
    (p,) = random_params(rng)
    assert correct_global(p, state_for(p)).equal(p)
    st1 = state_for(p, beta=1.0, s=p.copy())
    assert correct_global(p, st1).equal(ParamSet.zeros_like(p))
    st2 = state_for(scalar(2.0), beta=0.1, s=scalar(0.5))
    assert float(correct_global(scalar(2.0), st2)["w"].values) == -3.0


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.floats(0.01, 2.0))
def test_state_linearity(seed, n1, n2, beta):
    rng = np.random.default_rng(seed)
    (prev,) = random_params(rng)
    d1, d2 = random_params(rng, n1), random_params(rng, n2)
    split, joint = state_for(prev, beta), state_for(prev, beta)
    update_state(split, d1, prev)
    update_state(split, d2, prev)
    update_state(joint, d1 + d2, prev)
    for k in prev:
        np.testing.assert_allclose(split.s[k].values, joint.s[k].values, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# fuse


def test_fuse_examples(rng):
    a, b = random_params(rng, 2)
    assert fuse(a, b, 1.0).equal(a)
    assert fuse(a, b, 0.0).equal(b)
    assert float(fuse(scalar(1.0), scalar(0.0), 0.7)["w"].values) == pytest.approx(0.7, abs=1e-16)
    with pytest.raises(ConfigError):
        fuse(a, b, 1.2)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(1e-3, 1e6))
def test_fuse_convexity(seed, alpha, magnitude):
    rng = np.random.default_rng(seed)
    a, b = (ParamSet.from_arrays({"x": rng.normal(size=50) * magnitude}) for _ in range(2))
    out = fuse(a, b, alpha)["x"].values
    lo, hi = np.minimum(a["x"].values, b["x"].values), np.maximum(a["x"].values, b["x"].values)
    assert np.all(out >= lo) and np.all(out <= hi)


# ---------------------------------------------------------------------------
# global bias


def test_global_bias_examples():
    st_ = ServerState.start(scalar(0.0), 2)
    update_global_bias(st_, [np.array([1.0, -2.0])], [4], "round")
    assert st_.b_global.tolist() == [1.0, -2.0]
    v = np.array([0.3, 1.1])
    update_global_bias(st_, [v, -v], None, "round")
    assert st_.b_global.tolist() == [0.0, 0.0]
    update_global_bias(st_, [np.zeros(2), np.full(2, 4.0)], [1, 3], "init")
    assert st_.b_global.tolist() == [3.0, 3.0]
    with pytest.raises(ContractError):
        update_global_bias(st_, [], [], "round")


# ---------------------------------------------------------------------------
# fine-tuning


def aligned(seed, k=8):
    _, specs, _ = D.preset_domains("di2")
    shard = D.partition(specs[:1], "DI", 1, k, seed, CFG.seq_len)[0]
    return CoreSet("aligned", shard.sequences, 0)


def test_finetune_trivial_cases():
    theta = init_params(CFG, 0)
    core = [aligned(0)]
    for epochs, lr in ((0, 0.1), (2, 0.0)):
        tuned, _ = coreset_finetune(theta, core, epochs, lr, 0.75, 0, CFG)
        assert tuned.equal(theta)
    assert theta.equal(init_params(CFG, 0))  # input untouched


def test_finetune_empty_skips_with_warning(caplog):
    theta = init_params(CFG, 0)
    tuned, stats = coreset_finetune(theta, [], 2, 0.1, 0.75, 0, CFG)
    assert tuned.equal(theta) and tuned is not theta
    assert "skipping" in caplog.text and np.isnan(stats["pooled_before"])


def test_finetune_requires_aligned_stage():
    with pytest.raises(ContractError):
        coreset_finetune(init_params(CFG, 0), [CoreSet("perturbed", np.zeros((1, 32)), 0)], 1, 0.1, 0.75, 0, CFG)


def test_finetune_descends_in_most_seeds():
    ok = 0
    for seed in range(10):
        _, stats = coreset_finetune(init_params(CFG, seed), [aligned(seed), aligned(seed + 100)],
                                    2, 0.05, 0.75, seed, CFG, batch_size=4)
        ok += stats["pooled_after"] <= stats["pooled_before"]
    assert ok >= 8
