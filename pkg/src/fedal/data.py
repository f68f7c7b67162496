"""Synthetic heterogeneous time series, client partitioning, patching and masking.

Three dynamics families stand in for the ways real corpora differ:

* ``sinusoid-mixture``: sums of sinusoids whose periods are tied to the
  domain's resolution (samples per cycle), i.e. sampling-rate differences;
* ``bounded-saturating``: a driven signal hard-clamped to its amplitude range,
  i.e. a physical constraint;
* ``regime-switching``: two latent generators with geometric dwell times,
  i.e. pattern breaks.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedal.errors import ConfigError

DYNAMICS = ("sinusoid-mixture", "bounded-saturating", "regime-switching")
HOLDOUT_OFFSET = 1_000_000


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    resolution: int
    dynamics: str
    amplitude_range: tuple[float, float] = (0.5, 2.0)
    noise_std: float = 0.1
    transition_prob: float | None = None
    n_components: int | None = None  # sinusoid-mixture only; None draws 2-4

    def __post_init__(self):
        if self.dynamics not in DYNAMICS:
            raise ConfigError(f"domain {self.domain_id}: unknown dynamics {self.dynamics!r}")
        lo, hi = self.amplitude_range
        if not lo < hi:
            raise ConfigError(f"domain {self.domain_id}: amplitude_range needs lo < hi")
        if self.resolution < 2:
            raise ConfigError(f"domain {self.domain_id}: resolution must be >= 2")
        if self.noise_std < 0:
            raise ConfigError(f"domain {self.domain_id}: noise_std must be >= 0")
        if self.dynamics == "regime-switching":
            if self.transition_prob is None or not 0 < self.transition_prob <= 1:
                raise ConfigError(f"domain {self.domain_id}: regime-switching needs transition_prob in (0, 1]")
        elif self.transition_prob is not None:
            raise ConfigError(f"domain {self.domain_id}: transition_prob only applies to regime-switching")
        if self.n_components is not None and self.n_components < 1:
            raise ConfigError(f"domain {self.domain_id}: n_components must be >= 1")


@dataclass
class SeriesShard:
    client_id: int
    sequences: np.ndarray  # [n, length], z-scored per sequence
    domain_tags: list[str]
    seq_ids: list[str]
    stats: np.ndarray  # [n, 2] original (mean, std)

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def domains(self) -> set[str]:
        return set(self.domain_tags)


@dataclass
class MaskedBatch:
    tokens: np.ndarray  # [B, T, P], zeros where masked
    mask: np.ndarray  # [B, T] bool
    originals: np.ndarray  # [B, T, P]
    ratio: float = 0.0

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *[int(k) & 0xFFFFFFFF for k in keys]])


def _domain_key(domain_id: str) -> int:
    return zlib.crc32(domain_id.encode())


# ---------------------------------------------------------------------------
# generators


def _sinusoid_mixture(spec: DomainSpec, rng, t):
    n = spec.n_components or int(rng.integers(2, 5))
    lo, hi = spec.amplitude_range
    mults = [2.0, 3.0, 4.0] + ([0.5] if spec.resolution >= 4 else [])
    periods = [float(spec.resolution)] + [spec.resolution * float(rng.choice(mults)) for _ in range(n - 1)]
    x = np.zeros(len(t))
    for p in periods:
        x += rng.uniform(lo, hi) * np.sin(2 * np.pi * t / p + rng.uniform(0, 2 * np.pi))
    return x


def _bounded_saturating(spec: DomainSpec, rng, t):
    lo, hi = spec.amplitude_range
    centre, half = (lo + hi) / 2, (hi - lo) / 2
    drive = rng.uniform(1.0, 2.0) * np.sin(2 * np.pi * t / spec.resolution + rng.uniform(0, 2 * np.pi))
    drift = np.cumsum(rng.normal(0.0, 0.05, len(t)))
    x = centre + half * (drive + drift)
    x += rng.normal(0.0, spec.noise_std, len(t)) if spec.noise_std > 0 else 0.0
    return np.clip(x, lo, hi)


def _regime_path(rng, length: int, p: float) -> np.ndarray:
    flips = rng.random(length - 1) < p
    start = int(rng.integers(0, 2))
    return (start + np.concatenate([[0], np.cumsum(flips)])) % 2


def _regime_switching(spec: DomainSpec, rng, t):
    lo, hi = spec.amplitude_range
    regimes = _regime_path(rng, len(t), spec.transition_prob)
    a0, a1 = rng.uniform(lo, hi, 2)
    phase = rng.uniform(0, 2 * np.pi, 2)
    g0 = a0 * np.sin(2 * np.pi * t / spec.resolution + phase[0])
    g1 = a1 * np.sign(np.sin(2 * np.pi * t / (3 * spec.resolution) + phase[1])) + (hi - lo)
    return np.where(regimes == 0, g0, g1), regimes


def generate_domain(spec: DomainSpec, n_sequences: int, length: int, seed: int,
                    start_index: int = 0, return_regimes: bool = False):
    """Draw ``n_sequences`` raw series of ``length`` points from one domain.

    Sequence ``j`` depends only on ``(spec, seed, start_index + j)``, so prefixes
    are stable and index ranges never overlap.
    """
    if n_sequences < 1:
        raise ConfigError("n_sequences must be >= 1")
    if length < 2 * spec.resolution:
        raise ConfigError(
            f"length {length} too short for domain {spec.domain_id} (needs >= {2 * spec.resolution})"
        )
    t = np.arange(length, dtype=np.float64)
    out = np.empty((n_sequences, length))
    regimes = np.zeros((n_sequences, length), dtype=np.int64)
    for j in range(n_sequences):
        rng = _rng(seed, _domain_key(spec.domain_id), start_index + j)
        if spec.dynamics == "sinusoid-mixture":
            x = _sinusoid_mixture(spec, rng, t)
            if spec.noise_std > 0:
                x = x + rng.normal(0.0, spec.noise_std, length)
        elif spec.dynamics == "bounded-saturating":
            x = _bounded_saturating(spec, rng, t)
        else:
            x, regimes[j] = _regime_switching(spec, rng, t)
            if spec.noise_std > 0:
                x = x + rng.normal(0.0, spec.noise_std, length)
        out[j] = x
    if return_regimes:
        return out, regimes
    return out


def normalize(sequences: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sequence z-score; constant sequences keep std 1."""
    mu = sequences.mean(axis=1, keepdims=True)
    sd = sequences.std(axis=1, keepdims=True)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (sequences - mu) / sd, np.concatenate([mu, sd], axis=1)


# ---------------------------------------------------------------------------
# partitioning


def partition(domains: Sequence[DomainSpec], mode: str, n_clients: int, seqs_per_client: int,
              seed: int, length: int = 256, domains_per_client: int | None = None) -> list[SeriesShard]:
    """Split freshly generated series across clients.

    ``DI``: client ``c`` gets only domain ``c % len(domains)``.
    ``DM``: client ``c`` gets ``domains_per_client`` domains (all by default),
    starting at domain ``c`` and wrapping, with its series dealt round-robin.
    """
    nd = len(domains)
    if nd == 0 or n_clients < 1 or seqs_per_client < 1:
        raise ConfigError("partition needs >= 1 domain, client and sequence per client")
    if len({d.domain_id for d in domains}) != nd:
        raise ConfigError("domain ids must be unique")
    mode = mode.upper()
    if mode == "DI":
        plan = [[(c % nd, seqs_per_client)] for c in range(n_clients)]
    elif mode == "DM":
        if nd < 2:
            raise ConfigError("DM partitioning needs at least two domains")
        k = nd if domains_per_client is None else domains_per_client
        if not 2 <= k <= nd:
            raise ConfigError(f"domains_per_client must lie in [2, {nd}] for DM")
        if seqs_per_client < k:
            raise ConfigError("DM needs seqs_per_client >= domains_per_client")
        plan = []
        for c in range(n_clients):
            counts = [seqs_per_client // k + (1 if j < seqs_per_client % k else 0) for j in range(k)]
            plan.append([((c + j) % nd, counts[j]) for j in range(k)])
    else:
        raise ConfigError(f"unknown partition mode {mode!r} (use DM or DI)")

    need = [0] * nd
    for entries in plan:
        for d, n in entries:
            need[d] += n
    pools = {d: generate_domain(domains[d], need[d], length, seed) for d in range(nd) if need[d]}
    cursor = [0] * nd

    shards = []
    for c, entries in enumerate(plan):
        raw, tags, ids = [], [], []
        for d, n in entries:
            lo = cursor[d]
            raw.append(pools[d][lo:lo + n])
            tags += [domains[d].domain_id] * n
            ids += [f"{domains[d].domain_id}/{i}" for i in range(lo, lo + n)]
            cursor[d] += n
        z, stats = normalize(np.concatenate(raw, axis=0))
        shards.append(SeriesShard(c, z, tags, ids, stats))
    return shards


def holdout(domains: Sequence[DomainSpec], n_per_domain: int, length: int, seed: int) -> list[SeriesShard]:
    """One evaluation shard per domain, drawn from an index range training never uses."""
    shards = []
    for d, spec in enumerate(domains):
        raw = generate_domain(spec, n_per_domain, length, seed, start_index=HOLDOUT_OFFSET)
        z, stats = normalize(raw)
        ids = [f"{spec.domain_id}/{HOLDOUT_OFFSET + i}" for i in range(n_per_domain)]
        shards.append(SeriesShard(-1 - d, z, [spec.domain_id] * n_per_domain, ids, stats))
    return shards


def export_shards_csv(shards: Sequence[SeriesShard], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", "seq_id", "domain_id", "value"])
        for shard in shards:
            for seq, tag, sid in zip(shard.sequences, shard.domain_tags, shard.seq_ids):
                for v in seq:
                    w.writerow([shard.client_id, sid, tag, repr(float(v))])


# ---------------------------------------------------------------------------
# tokens


def patchify(sequence: np.ndarray, patch_len: int) -> np.ndarray:
    """Split the last axis into non-overlapping patches: [..., L] -> [..., L/P, P]."""
    sequence = np.asarray(sequence, dtype=np.float64)
    length = sequence.shape[-1]
    if patch_len < 1 or length % patch_len:
        raise ConfigError(f"sequence length {length} is not divisible by patch_len {patch_len}")
    return sequence.reshape(*sequence.shape[:-1], length // patch_len, patch_len)


def unpatchify(tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    return tokens.reshape(*tokens.shape[:-2], tokens.shape[-2] * tokens.shape[-1])


def mask_positions(n_seqs: int, n_tokens: int, ratio: float, seed: int) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1]")
    k = round_half_up(ratio * n_tokens)
    mask = np.zeros((n_seqs, n_tokens), dtype=bool)
    for b in range(n_seqs):
        mask[b, _rng(seed, b).permutation(n_tokens)[:k]] = True
    return mask


def mask_tokens(tokens: np.ndarray, ratio: float, seed: int) -> MaskedBatch:
    """Hide ``round(ratio * n_tokens)`` uniformly chosen tokens per sequence.

    Sequence ``b``'s mask depends only on ``(seed, b)``.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim == 2:
        tokens = tokens[None]
    mask = mask_positions(tokens.shape[0], tokens.shape[1], ratio, seed)
    return MaskedBatch(np.where(mask[..., None], 0.0, tokens), mask, tokens.copy(), ratio)


# ---------------------------------------------------------------------------
# presets

DOMAIN_LIBRARY: dict[str, DomainSpec] = {
    d.domain_id: d
    for d in [
        DomainSpec("fast-cycles", 8, "sinusoid-mixture", (0.5, 2.0), 0.1),
        DomainSpec("slow-cycles", 64, "sinusoid-mixture", (0.5, 2.0), 0.05),
        DomainSpec("saturating", 32, "bounded-saturating", (-1.0, 1.0), 0.05),
        DomainSpec("regimes", 16, "regime-switching", (0.5, 1.5), 0.1, transition_prob=0.02),
        DomainSpec("very-fast-cycles", 4, "sinusoid-mixture", (0.5, 2.0), 0.2),
        DomainSpec("very-slow-saturating", 128, "bounded-saturating", (0.0, 3.0), 0.05),
    ]
}

# name -> (mode, domain ids, domains per DM client)
PRESETS: dict[str, tuple[str, tuple[str, ...], int | None]] = {
    "di2": ("DI", ("fast-cycles", "saturating"), None),
    "di4": ("DI", ("fast-cycles", "slow-cycles", "saturating", "regimes"), None),
    "h1": ("DM", ("fast-cycles", "slow-cycles", "saturating", "regimes"), 2),
    "h2": ("DM", ("very-fast-cycles", "fast-cycles", "regimes", "very-slow-saturating"), 4),
}


def preset_domains(name: str) -> tuple[str, list[DomainSpec], int | None]:
    try:
        mode, ids, k = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown data preset {name!r}; choose from {sorted(PRESETS)}") from None
    return mode, [DOMAIN_LIBRARY[i] for i in ids], k
