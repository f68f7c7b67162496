"""Server-side aggregation: weighted averaging, drift-state correction,
core-set fine-tuning, convex fusion, and the global bias."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedal import data as D
from fedal.coreset import CoreSet
from fedal.errors import ConfigError, ContractError
from fedal.model import BackboneConfig, BiasState, ClientModel, encode, head, local_train, masked_mse
from fedal.params import ParamSet

log = logging.getLogger(__name__)


@dataclass
class ServerState:
    theta_g: ParamSet
    s: ParamSet
    b_global: np.ndarray
    round: int = 0
    beta: float = 0.1
    alpha: float = 0.7

    def __post_init__(self):
        if not self.s.congruent(self.theta_g):
            raise ContractError("server state vector must be congruent with the global model")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")

    @classmethod
    def start(cls, theta0: ParamSet, d_model: int, beta: float = 0.1, alpha: float = 0.7) -> "ServerState":
        return cls(theta0.copy(), ParamSet.zeros_like(theta0), np.zeros(d_model), 0, beta, alpha)


def _params_of(m) -> ParamSet:
    return m.params if isinstance(m, ClientModel) else m


def weighted_average(models: Sequence, sizes: Sequence[float]) -> ParamSet:
    """Per-path convex combination with weights ``n_i / sum(n)``."""
    params = [_params_of(m) for m in models]
    if not params:
        raise ContractError("weighted_average needs at least one model")
    if len(sizes) != len(params) or any(n <= 0 for n in sizes):
        raise ContractError("weighted_average needs one positive size per model")
    for p in params[1:]:
        if not p.congruent(params[0]):
            raise ContractError("weighted_average: client ParamSets are not congruent")
    total = float(sum(sizes))
    weights = [n / total for n in sizes]
    out = {}
    for path in params[0]:
        acc = np.zeros(params[0][path].shape)
        for w, p in zip(weights, params):
            acc = acc + w * p[path].values
        out[path] = acc
    return ParamSet.from_arrays(out)


def update_state(state: ServerState, client_params: Sequence, theta_prev: ParamSet,
                 scale: float = 1.0) -> None:
    """``s <- s - beta * scale * sum_i (theta_i - theta_prev)``.

    ``scale = 1`` is the plain rule; ``1 / N`` averages the drift over the
    client population, which keeps the accumulated correction bounded.
    """
    params = [_params_of(m) for m in client_params]
    for p in params:
        if not p.congruent(state.s) or not theta_prev.congruent(state.s):
            raise ContractError("update_state: parameters are not congruent with the server state")
    out = {}
    for path, s in state.s.arrays().items():
        drift = np.zeros(s.shape)
        for p in params:
            drift = drift + (p[path].values - theta_prev[path].values)
        out[path] = s - (state.beta * scale) * drift
    state.s = ParamSet.from_arrays(out)


def correct_global(theta_prime: ParamSet, state: ServerState) -> ParamSet:
    """``theta'' = theta' - s / beta``."""
    if state.beta <= 0:
        raise ConfigError("beta must be > 0")
    if not theta_prime.congruent(state.s):
        raise ContractError("correct_global: parameters are not congruent with the server state")
    inv = 1.0 / state.beta
    return ParamSet.from_arrays(
        {k: v - inv * state.s[k].values for k, v in theta_prime.arrays().items()}
    )


def pooled_loss(theta: ParamSet, config: BackboneConfig, sequences: np.ndarray,
                mask_ratio: float, seed: int) -> float:
    batch = D.mask_tokens(D.patchify(sequences, config.patch_len), mask_ratio, seed)
    z = encode(theta, config, batch.tokens, batch.mask)
    return float(masked_mse(head(theta, z), batch.originals, batch.mask).values)


def coreset_finetune(theta: ParamSet, coresets: Sequence[CoreSet], epochs: int, lr: float,
                     mask_ratio: float, seed, config: BackboneConfig,
                     batch_size: int = 8) -> tuple[ParamSet, dict]:
    """Masked-reconstruction SGD on the pooled core-sets; returns a tuned copy.

    No bias injection: the server holds no client bias state.
    """
    for c in coresets:
        if c.stage != "aligned":
            raise ContractError(f"coreset_finetune needs aligned core-sets, got {c.stage!r}")
    if not coresets or sum(c.K for c in coresets) == 0:
        log.warning("coreset_finetune: no core-set sequences received; skipping")
        return theta.copy(), {"pooled_before": float("nan"), "pooled_after": float("nan")}
    pooled = np.concatenate([c.sequences for c in coresets], axis=0)
    eval_seed = int(np.random.default_rng(seed).integers(2**31))
    before = pooled_loss(theta, config, pooled, mask_ratio, eval_seed)
    model = ClientModel(config, theta.copy(), BiasState(config.d_model), client_id=-1)
    shard = D.SeriesShard(-1, pooled, ["core-set"] * len(pooled), [str(i) for i in range(len(pooled))],
                          np.zeros((len(pooled), 2)))
    local_train(model, shard, epochs, lr, 0.0, mask_ratio, 1, seed, batch_size=batch_size, dbe=False)
    after = pooled_loss(model.params, config, pooled, mask_ratio, eval_seed)
    return model.params, {"pooled_before": before, "pooled_after": after}


def fuse(theta_corrected: ParamSet, theta_tuned: ParamSet, alpha: float) -> ParamSet:
    """``alpha * theta_corrected + (1 - alpha) * theta_tuned``, element-wise."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"fusion alpha {alpha} outside [0, 1]")
    if not theta_corrected.congruent(theta_tuned):
        raise ContractError("fuse: ParamSets are not congruent")
    out = {}
    for k, a in theta_corrected.arrays().items():
        b = theta_tuned[k].values
        # clip only absorbs rounding at the envelope
        out[k] = np.clip(alpha * a + (1.0 - alpha) * b, np.minimum(a, b), np.maximum(a, b))
    return ParamSet.from_arrays(out)


def update_global_bias(state: ServerState, biases: Sequence[np.ndarray], sizes: Sequence[float] | None,
                       phase: str) -> None:
    """Init phase: size-weighted average. Round phase: plain mean over participants."""
    if len(biases) == 0:
        raise ContractError("update_global_bias needs at least one client bias")
    if phase == "init":
        if sizes is None or len(sizes) != len(biases):
            raise ContractError("init phase needs one size per bias")
        total = float(sum(sizes))
        acc = np.zeros_like(np.asarray(biases[0], dtype=np.float64))
        for n, b in zip(sizes, biases):
            acc = acc + (n / total) * np.asarray(b)
        state.b_global = acc
    elif phase == "round":
        acc = np.zeros_like(np.asarray(biases[0], dtype=np.float64))
        for b in biases:
            acc = acc + np.asarray(b)
        state.b_global = acc / len(biases)
    else:
        raise ContractError(f"unknown bias phase {phase!r}")
