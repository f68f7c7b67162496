"""Decoder-only patch transformer with a reconstruction head and the client bias block.

The backbone maps patch tokens ``[B, T, P]`` to latents ``[B, T, d_model]``
under causal attention; masked positions are zero-filled and receive a
learnable mask embedding. The head is a single linear map back to patch
values.

The bias block splits latents into a moving-average trend and the residual
season, averages each over batch and token axes, tracks the averages with an
EMA, and injects their sum into the latents before the head.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from fedal import data as D
from fedal import tensor as T
from fedal.errors import ConfigError, ContractError, DimensionError
from fedal.params import ParamSet, sgd_step
from fedal.tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    patch_len: int = 16
    n_tokens: int = 16
    dropout: float = 0.0
    ff_mult: int = 4

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "patch_len", "n_tokens", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"BackboneConfig.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def seq_len(self) -> int:
        return self.n_tokens * self.patch_len


def init_params(cfg: BackboneConfig, seed: int) -> ParamSet:
    """Deterministic initialisation: fan-in scaled normals, residual outputs shrunk by depth."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xBAC])
    d, p, f = cfg.d_model, cfg.patch_len, cfg.ff_mult * cfg.d_model
    res = 1.0 / np.sqrt(2 * cfg.n_layers)

    def w(n_in, n_out, gain=1.0):
        return rng.normal(0.0, gain / np.sqrt(n_in), (n_in, n_out))

    a = {
        "backbone.embed.w": w(p, d),
        "backbone.embed.b": np.zeros(d),
        "backbone.mask_emb": rng.normal(0.0, 0.1, d),
        "backbone.pos": rng.normal(0.0, 0.1, (cfg.n_tokens, d)),
    }
    for i in range(cfg.n_layers):
        pre = f"backbone.layers.{i}."
        a[pre + "ln1.g"] = np.ones(d)
        a[pre + "ln1.b"] = np.zeros(d)
        a[pre + "attn.wq"] = w(d, d)
        a[pre + "attn.wk"] = w(d, d)
        a[pre + "attn.wv"] = w(d, d)
        a[pre + "attn.wo"] = w(d, d, res)
        a[pre + "attn.bo"] = np.zeros(d)
        a[pre + "ln2.g"] = np.ones(d)
        a[pre + "ln2.b"] = np.zeros(d)
        a[pre + "ff.w1"] = w(d, f)
        a[pre + "ff.b1"] = np.zeros(f)
        a[pre + "ff.w2"] = w(f, d, res)
        a[pre + "ff.b2"] = np.zeros(d)
    a["backbone.ln_f.g"] = np.ones(d)
    a["backbone.ln_f.b"] = np.zeros(d)
    a["head.w"] = w(d, p, 0.1)  # small head: start near the zero predictor
    a["head.b"] = np.zeros(p)
    return ParamSet.from_arrays(a)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return T.mul(x, keep)


def encode(params: ParamSet, cfg: BackboneConfig, tokens, mask: np.ndarray, rng=None) -> Tensor:
    """Backbone forward pass: ``[B, T, P]`` tokens -> ``[B, T, d_model]`` latents."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tokens.ndim != 3 or tokens.shape[1:] != (cfg.n_tokens, cfg.patch_len):
        raise DimensionError(
            f"backbone: expected tokens [B, {cfg.n_tokens}, {cfg.patch_len}], got {tokens.shape}"
        )
    b, n, _ = tokens.shape
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    p = params
    x = tokens @ p["backbone.embed.w"] + p["backbone.embed.b"]
    x = x + T.mul(np.asarray(mask, dtype=np.float64)[..., None], p["backbone.mask_emb"])
    x = x + p["backbone.pos"]
    for i in range(cfg.n_layers):
        pre = f"backbone.layers.{i}."
        y = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = T.transpose(T.reshape(y @ p[pre + "attn.wq"], (b, n, h, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(y @ p[pre + "attn.wk"], (b, n, h, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(y @ p[pre + "attn.wv"], (b, n, h, dh)), (0, 2, 1, 3))
        att = T.softmax(T.causal_mask(T.scale(q @ k, 1.0 / np.sqrt(dh))))
        o = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (b, n, cfg.d_model))
        x = x + _dropout(o @ p[pre + "attn.wo"] + p[pre + "attn.bo"], cfg.dropout, rng)
        y = T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = T.gelu(y @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        x = x + _dropout(ff, cfg.dropout, rng)
    return T.layernorm(x, p["backbone.ln_f.g"], p["backbone.ln_f.b"])


def head(params: ParamSet, latents) -> Tensor:
    return latents @ params["head.w"] + params["head.b"]


def masked_mse(pred: Tensor, target, mask: np.ndarray, all_tokens: bool = False) -> Tensor:
    """Mean squared error over masked token positions (or every position)."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if all_tokens:
        return T.mse(pred, target)
    n = int(mask.sum()) * pred.shape[-1]
    if n == 0:
        return Tensor(0.0)
    diff = (pred - target) * mask.astype(np.float64)[..., None]
    return T.scale(T.sum_(diff * diff), 1.0 / n)


# ---------------------------------------------------------------------------


@dataclass
class BiasState:
    d_model: int
    mu: float = 0.1
    b_trend: np.ndarray = None
    b_season: np.ndarray = None
    b_hat: Tensor = None
    b_global: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError("EMA coefficient mu must lie in [0, 1]")
        if self.b_trend is None:
            self.b_trend = np.zeros(self.d_model)
        if self.b_season is None:
            self.b_season = np.zeros(self.d_model)
        if self.b_hat is None:
            self.b_hat = Tensor(self.b_trend + self.b_season, requires_grad=True)

    def reset(self) -> None:
        self.b_trend = np.zeros(self.d_model)
        self.b_season = np.zeros(self.d_model)
        self.b_hat = Tensor(np.zeros(self.d_model), requires_grad=True)


@dataclass
class ClientModel:
    config: BackboneConfig
    params: ParamSet  # backbone.* and head.* paths
    bias: BiasState
    client_id: int = 0

    @classmethod
    def create(cls, config: BackboneConfig, seed: int, client_id: int = 0, mu: float = 0.1) -> "ClientModel":
        return cls(config, init_params(config, seed), BiasState(config.d_model, mu), client_id)

    @property
    def backbone(self) -> ParamSet:
        return self.params.subset("backbone.")

    @property
    def head(self) -> ParamSet:
        return self.params.subset("head.")

    def encode(self, tokens, mask, rng=None) -> Tensor:
        return encode(self.params, self.config, tokens, mask, rng)

    @property
    def head_weight(self) -> np.ndarray:
        return self.params["head.w"].values

    @property
    def head_bias(self) -> np.ndarray:
        return self.params["head.b"].values

    def load(self, theta: ParamSet) -> None:
        """Overwrite backbone and head with a broadcast copy."""
        if not self.params.congruent(theta):
            raise ContractError("broadcast parameters are not congruent with the client model")
        self.params = theta.copy()

    def clone(self) -> "ClientModel":
        return copy.deepcopy(self)

    def frozen(self) -> "ClientModel":
        """Copy whose parameters are constants, so backward never writes to them."""
        params = ParamSet({k: Tensor(t.values) for k, t in self.params.items()})
        return ClientModel(self.config, params, self.bias, self.client_id)


def forward_backbone(model: ClientModel, batch: D.MaskedBatch, rng=None) -> Tensor:
    if batch.tokens.shape[-1] != model.config.patch_len:
        raise DimensionError(
            f"backbone: token width {batch.tokens.shape[-1]} != patch_len {model.config.patch_len}"
        )
    return model.encode(batch.tokens, batch.mask, rng)


# ---------------------------------------------------------------------------
# bias block


def decompose(latent, tau: int):
    """Split ``[..., T, D]`` latents into (trend, season) along the token axis.

    Trend is a centred width-``tau`` moving average with edge replication;
    season is the remainder. For arrays, each trend element is nudged by at
    most one rounding step so that ``trend + season`` reproduces the input
    bit for bit wherever a float64 pair can.
    """
    if isinstance(latent, Tensor):
        trend = T.moving_average(latent, tau)
        return trend, latent - trend
    h = np.asarray(latent, dtype=np.float64)
    n = h.shape[-2]
    if not 1 <= tau <= n:
        raise ContractError(f"decompose: tau={tau} outside [1, {n}]")
    t1 = T.moving_average(Tensor(h), tau).values
    season = h - t1
    t2 = h - season
    trend = np.where((t1 + season) == h, t1, np.where((t2 + season) == h, t2, t1))
    return trend, season


def extract_bias(trend, season):
    """Mean over every axis except the last (feature) axis."""
    if isinstance(trend, Tensor):
        axes = tuple(range(trend.ndim - 1))
        return T.mean(trend, axis=axes), T.mean(season, axis=axes)
    trend, season = np.asarray(trend), np.asarray(season)
    axes = tuple(range(trend.ndim - 1))
    return trend.mean(axis=axes), season.mean(axis=axes)


def ema_update(bias: BiasState, b_trend_new, b_season_new):
    """Blend fresh estimates into the tracked components; return the new local bias.

    With Tensor estimates the returned bias stays connected to them, so
    gradients reach whatever produced the estimates.
    """
    mu = bias.mu
    if isinstance(b_trend_new, Tensor):
        bt = T.scale(b_trend_new, mu) + (1.0 - mu) * bias.b_trend
        bs = T.scale(b_season_new, mu) + (1.0 - mu) * bias.b_season
        out = bt + bs
        bias.b_trend, bias.b_season = bt.values, bs.values
    else:
        bias.b_trend = (1.0 - mu) * bias.b_trend + mu * np.asarray(b_trend_new)
        bias.b_season = (1.0 - mu) * bias.b_season + mu * np.asarray(b_season_new)
        out = None
    bias.b_hat = Tensor(bias.b_trend + bias.b_season, requires_grad=True)
    return out if out is not None else bias.b_hat


def local_loss(model: ClientModel, batch: D.MaskedBatch, lam: float, *, latents: Tensor | None = None,
               b_hat: Tensor | None = None, inject_bias: bool = True,
               loss_on_all_tokens: bool = False) -> Tensor:
    """Masked reconstruction error with the local bias injected, plus ``lam * ||b_hat - b_global||^2``."""
    z = forward_backbone(model, batch) if latents is None else latents
    b_hat = model.bias.b_hat if b_hat is None else b_hat
    if inject_bias:
        z = z + b_hat
    loss = masked_mse(head(model.params, z), batch.originals, batch.mask, loss_on_all_tokens)
    if lam != 0.0 and inject_bias:
        if model.bias.b_global is None:
            raise ContractError("local_loss: global bias has not been initialised")
        gap = b_hat - model.bias.b_global
        loss = loss + T.scale(T.sum_(gap * gap), lam)
    return loss


@dataclass
class TrainStats:
    epoch_losses: list[float] = field(default_factory=list)
    b_hat: np.ndarray | None = None
    n_steps: int = 0

    def bias_gap(self, b_global: np.ndarray | None) -> float:
        if self.b_hat is None or b_global is None:
            return float("nan")
        return float(np.linalg.norm(self.b_hat - b_global))


def local_train(model: ClientModel, shard: D.SeriesShard, epochs: int, lr: float, lam: float,
                mask_ratio: float, tau: int, seed, batch_size: int = 8, dbe: bool = True,
                loss_on_all_tokens: bool = False) -> TrainStats:
    """Run ``epochs`` passes of minibatch SGD over the shard.

    Per batch: encode, decompose, bias estimate, EMA, loss, backward, SGD.
    The SGD update of the injected bias is split evenly between the trend
    and season accumulators so the next EMA step starts from it.
    ``seed`` may be an int or a sequence of ints (e.g. seed, round, client).
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    stats = TrainStats()
    tokens_all = D.patchify(shard.sequences, cfg.patch_len)
    n = len(tokens_all)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = D.mask_tokens(tokens_all[idx], mask_ratio, int(rng.integers(2**31)))
            drop_rng = np.random.default_rng(int(rng.integers(2**31))) if cfg.dropout else None
            z = forward_backbone(model, batch, drop_rng)
            if dbe:
                trend, season = decompose(z, tau)
                b_hat = ema_update(model.bias, *extract_bias(trend, season))
                loss = local_loss(model, batch, lam if model.bias.b_global is not None else 0.0,
                                  latents=z, b_hat=b_hat, loss_on_all_tokens=loss_on_all_tokens)
            else:
                loss = local_loss(model, batch, 0.0, latents=z, inject_bias=False,
                                  loss_on_all_tokens=loss_on_all_tokens)
            T.backward(loss)
            losses.append(float(loss.values))
            for t in model.params.values():
                if t.grad is None:  # parameter outside the graph (e.g. zero masked positions)
                    t.grad = np.zeros(t.shape)
            sgd_step(model.params, lr)
            if dbe:
                g = b_hat.grad if b_hat.grad is not None else np.zeros(cfg.d_model)
                model.bias.b_trend = model.bias.b_trend - 0.5 * lr * g
                model.bias.b_season = model.bias.b_season - 0.5 * lr * g
                model.bias.b_hat = Tensor(model.bias.b_trend + model.bias.b_season, requires_grad=True)
            stats.n_steps += 1
        stats.epoch_losses.append(float(np.mean(losses)))
    stats.b_hat = model.bias.b_hat.values.copy()
    return stats
