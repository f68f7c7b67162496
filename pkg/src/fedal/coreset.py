"""Client-side core-set construction.

A core-set goes through three stages:

1. ``initial``: K real series, optimised so the reconstruction-loss gradient
   of the whole core-set matches each per-sample gradient of a private
   minibatch (gradient matching, taken over the head parameters);
2. ``perturbed``: Gaussian noise on the Fourier amplitudes, phases untouched;
3. ``aligned``: optimised so the summed pooled latents match the minibatch's.

Only the aligned stage leaves the client.

The ``model`` argument is duck-typed: anything with ``config.patch_len``,
``encode(tokens, mask)``, ``head_weight`` and ``head_bias`` (may be ``None``)
works, which is how the closed-form oracles in the tests plug in.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedal import data as D
from fedal import tensor as T
from fedal.errors import ConfigError, ContractError
from fedal.tensor import Tensor

STAGES = ("initial", "perturbed", "aligned")


@dataclass
class CoreSet:
    stage: str
    sequences: np.ndarray  # [K, length]
    source_client: int
    epsilon_used: float = 0.0
    match_loss_final: float = float("nan")
    align_loss_final: float = float("nan")
    match_history: list[float] = field(default_factory=list)
    align_history: list[float] = field(default_factory=list)
    minibatch_index: np.ndarray | None = field(default=None, repr=False)  # client-private

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown core-set stage {self.stage!r}")

    @property
    def K(self) -> int:
        return len(self.sequences)

    def _require(self, stage: str) -> None:
        if self.stage != stage:
            raise ContractError(f"core-set is in stage {self.stage!r}, expected {stage!r}")


def _tokens(seqs: Tensor, patch_len: int) -> Tensor:
    k, length = seqs.shape
    if length % patch_len:
        raise ConfigError(f"sequence length {length} not divisible by patch_len {patch_len}")
    return T.reshape(seqs, (k, length // patch_len, patch_len))


def _head_grads(z: Tensor, target: Tensor, mask: np.ndarray, w: np.ndarray, c):
    """Gradients of the masked reconstruction MSE w.r.t. head weight (and bias), as graph nodes."""
    d, p = w.shape
    n = int(mask.sum()) * p
    pred = z @ w if c is None else z @ w + c
    m = mask.astype(np.float64)[..., None]
    r = (pred - target) * m
    coef = 0.0 if n == 0 else 2.0 / n
    gw = T.scale(T.transpose(T.reshape(z, (-1, d))) @ T.reshape(r, (-1, p)), coef)
    grads = [gw]
    if c is not None:
        grads.append(T.scale(T.sum_(T.reshape(r, (-1, p)), axis=0), coef))
    return grads


def minibatch_grads(minibatch_seqs, model, mask_ratio: float = 0.75, seed: int = 0) -> list[np.ndarray]:
    """Per-sample head gradients of the minibatch, stacked per head parameter."""
    x_seqs = np.asarray(minibatch_seqs, dtype=np.float64)
    if x_seqs.ndim != 2 or x_seqs.shape[0] == 0:
        raise ContractError("match_loss needs a non-empty [K, length] minibatch")
    w, c = model.head_weight, model.head_bias
    tok_x = D.patchify(x_seqs, model.config.patch_len)
    batch = D.mask_tokens(tok_x, mask_ratio, seed)
    z_x = model.encode(batch.tokens, batch.mask).values
    per_sample: list[list[np.ndarray]] = [[], []] if c is not None else [[]]
    for k in range(len(tok_x)):
        for slot, g in enumerate(_head_grads(Tensor(z_x[k:k + 1]), Tensor(tok_x[k:k + 1]),
                                             batch.mask[k:k + 1], w, c)):
            per_sample[slot].append(g.values)
    return [np.stack(s) for s in per_sample]


def match_loss(coreset_seqs, minibatch_seqs, model, mask_ratio: float = 0.75, seed: int = 0,
               target_grads: list[np.ndarray] | None = None) -> Tensor:
    """Sum over minibatch samples of the squared distance between the core-set
    gradient and that sample's gradient (head parameters only).

    Differentiable with respect to ``coreset_seqs`` when it is a Tensor.
    ``target_grads`` caches :func:`minibatch_grads` across descent steps.
    """
    c_seqs = coreset_seqs if isinstance(coreset_seqs, Tensor) else Tensor(coreset_seqs)
    if c_seqs.ndim != 2 or c_seqs.shape[0] == 0:
        raise ContractError("match_loss needs a non-empty [K, length] core-set")
    if target_grads is None:
        target_grads = minibatch_grads(minibatch_seqs, model, mask_ratio, seed)

    tok_c = _tokens(c_seqs, model.config.patch_len)
    mask_c = D.mask_positions(tok_c.shape[0], tok_c.shape[1], mask_ratio, seed)
    z_c = model.encode(T.mul(tok_c, (~mask_c).astype(np.float64)[..., None]), mask_c)
    g_core = _head_grads(z_c, tok_c, mask_c, model.head_weight, model.head_bias)

    total = None
    for g_c, stack in zip(g_core, target_grads):
        diff = g_c - stack
        term = T.sum_(diff * diff)
        total = term if total is None else total + term
    return total


def _pooled(model, seqs: Tensor) -> Tensor:
    tok = _tokens(seqs, model.config.patch_len)
    z = model.encode(tok, np.zeros(tok.shape[:2], dtype=bool))
    return T.mean(z, axis=1)  # [K, d]


def align_loss(perturbed_seqs, minibatch_seqs, model, target_sum: np.ndarray | None = None) -> Tensor:
    """``(1/K) * || sum_j f(c_j) - sum_k f(x_k) ||^2`` with f the token-mean latent.

    ``target_sum`` caches the minibatch side across descent steps.
    """
    c_seqs = perturbed_seqs if isinstance(perturbed_seqs, Tensor) else Tensor(perturbed_seqs)
    x_seqs = np.asarray(minibatch_seqs, dtype=np.float64)
    k = c_seqs.shape[0]
    if k == 0 or x_seqs.shape[0] != k:
        raise ContractError(f"align_loss: core-set has {k} sequences, minibatch {x_seqs.shape[0]}")
    if target_sum is None:
        target_sum = T.sum_(_pooled(model, Tensor(x_seqs)), axis=0).values
    gap = T.sum_(_pooled(model, c_seqs), axis=0) - target_sum
    return T.scale(T.sum_(gap * gap), 1.0 / k)


def _descend(seqs: np.ndarray, loss_fn, eta: float, steps: int):
    x = Tensor(seqs.copy(), requires_grad=True)
    history = []
    for _ in range(steps):
        loss = loss_fn(x)
        T.backward(loss)
        history.append(float(loss.values))
        x = Tensor(x.values - eta * x.grad, requires_grad=True)
    final = float(loss_fn(Tensor(x.values)).values)
    history.append(final)
    return x.values, history


def sample_minibatch(shard: D.SeriesShard, k: int, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(len(shard), size=k, replace=False))


def build_coreset(client, shard: D.SeriesShard, K: int, eta: float, steps: int, seed,
                  mask_ratio: float = 0.75, minibatch_index: np.ndarray | None = None) -> CoreSet:
    """Initialise K real series and run ``steps`` descent iterations on the match loss."""
    if K < 1:
        raise ConfigError("core-set size K must be >= 1")
    if len(shard) < K:
        raise ConfigError(f"shard has {len(shard)} sequences, fewer than K={K}")
    rng = np.random.default_rng(seed)
    init_index = sample_minibatch(shard, K, rng)
    if minibatch_index is None:
        minibatch_index = sample_minibatch(shard, K, rng)
    mask_seed = int(rng.integers(2**31))
    model = client.frozen() if hasattr(client, "frozen") else client
    targets = minibatch_grads(shard.sequences[minibatch_index], model, mask_ratio, mask_seed)
    seqs, history = _descend(
        shard.sequences[init_index],
        lambda x: match_loss(x, None, model, mask_ratio, mask_seed, target_grads=targets),
        eta, steps,
    )
    return CoreSet("initial", seqs, getattr(client, "client_id", -1),
                   match_loss_final=history[-1], match_history=history,
                   minibatch_index=np.asarray(minibatch_index))


def perturb_fourier(coreset: CoreSet, epsilon: float, seed) -> CoreSet:
    """Add ``epsilon``-scaled Gaussian noise to each sequence's Fourier amplitudes.

    Phases are kept; amplitudes are clamped at zero so no bin flips sign.
    """
    coreset._require("initial")
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    rng = np.random.default_rng(seed)
    length = coreset.sequences.shape[1]
    spec = np.fft.rfft(coreset.sequences, axis=1)
    amp, phase = np.abs(spec), np.angle(spec)
    amp = np.maximum(amp + epsilon * rng.standard_normal(amp.shape), 0.0)
    out = np.fft.irfft(amp * np.exp(1j * phase), n=length, axis=1)
    return CoreSet("perturbed", out, coreset.source_client, epsilon_used=float(epsilon),
                   match_loss_final=coreset.match_loss_final, match_history=coreset.match_history,
                   minibatch_index=coreset.minibatch_index)


def refine_alignment(coreset: CoreSet, minibatch_seqs, model, eta: float, steps: int, seed=None) -> CoreSet:
    """Descend the alignment loss starting from the perturbed sequences."""
    coreset._require("perturbed")
    model = model.frozen() if hasattr(model, "frozen") else model
    minibatch = np.asarray(minibatch_seqs, dtype=np.float64)
    target = T.sum_(_pooled(model, Tensor(minibatch)), axis=0).values
    seqs, history = _descend(coreset.sequences,
                             lambda x: align_loss(x, minibatch, model, target_sum=target), eta, steps)
    return CoreSet("aligned", seqs, coreset.source_client, epsilon_used=coreset.epsilon_used,
                   match_loss_final=coreset.match_loss_final, align_loss_final=history[-1],
                   match_history=coreset.match_history, align_history=history,
                   minibatch_index=coreset.minibatch_index)


def construct_coreset(client, shard: D.SeriesShard, K: int, eta: float, steps: int, epsilon: float,
                      seed, mask_ratio: float = 0.75) -> CoreSet:
    """Full client pipeline: match, perturb, align. Returns the uploadable core-set."""
    rng = np.random.default_rng(seed)
    s_build, s_noise = (int(v) for v in rng.integers(2**31, size=2))
    c0 = build_coreset(client, shard, K, eta, steps, s_build, mask_ratio)
    c1 = perturb_fourier(c0, epsilon, s_noise)
    c2 = refine_alignment(c1, shard.sequences[c0.minibatch_index], client, eta, steps)
    c2.minibatch_index = None
    return c2


def nearest_real_distance(coreset: CoreSet, shard: D.SeriesShard) -> np.ndarray:
    """Per core-set sequence, L2 distance to the closest real shard sequence."""
    diff = coreset.sequences[:, None, :] - shard.sequences[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=2)).min(axis=1)


def export_coreset_csv(coreset: CoreSet, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "seq_index", "step", "value"])
        for j, seq in enumerate(coreset.sequences):
            for t, v in enumerate(seq):
                w.writerow([coreset.source_client, j, t, repr(float(v))])


def load_coreset_csv(path: str | Path) -> CoreSet:
    rows: dict[int, dict[int, float]] = {}
    client = -1
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            client = int(row["client_id"])
            rows.setdefault(int(row["seq_index"]), {})[int(row["step"])] = float(row["value"])
    seqs = np.array([[r[t] for t in sorted(r)] for _, r in sorted(rows.items())])
    return CoreSet("aligned", seqs, client)
