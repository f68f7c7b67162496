"""Held-out masked-reconstruction metrics, mask-ratio sweeps and scaling sweeps."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from fedal import data as D
from fedal.config import RunConfig
from fedal.errors import ConfigError, ContractError
from fedal.model import BackboneConfig, encode, head
from fedal.params import ParamSet

log = logging.getLogger(__name__)

TABLE_RATIOS = (0.2, 0.35, 0.5, 0.75, 0.9)
AXES = ("data", "clients", "join_rate")


@dataclass(frozen=True)
class EvalReport:
    model_id: str
    dataset_id: str
    mask_ratio: float
    mse: float
    mae: float
    n_sequences: int
    seed: int
    n_masked: int = 0
    empty_mask: bool = False


def predict(theta: ParamSet, config: BackboneConfig, batch: D.MaskedBatch,
            bias: np.ndarray | None = None) -> np.ndarray:
    z = encode(theta, config, batch.tokens, batch.mask)
    if bias is not None:
        z = z + bias
    return head(theta, z).values


def reconstruct_eval(theta: ParamSet, dataset: Sequence[D.SeriesShard], mask_ratio: float, seed: int,
                     config: BackboneConfig, bias: np.ndarray | None = None, model_id: str = "theta",
                     dataset_id: str = "holdout", batch_size: int = 64) -> EvalReport:
    """MSE / MAE over masked positions of every held-out sequence.

    ``bias`` injects a latent offset before the head (diagnostic only; the
    default evaluates the shared model alone).
    """
    seqs = [s.sequences for s in dataset if len(s)]
    if not seqs:
        raise ContractError("reconstruct_eval: empty dataset")
    tokens = D.patchify(np.concatenate(seqs, axis=0), config.patch_len)
    batch = D.mask_tokens(tokens, mask_ratio, seed)
    sq = ab = 0.0
    count = 0
    for lo in range(0, len(tokens), batch_size):
        sub = D.MaskedBatch(batch.tokens[lo:lo + batch_size], batch.mask[lo:lo + batch_size],
                            batch.originals[lo:lo + batch_size], mask_ratio)
        err = (predict(theta, config, sub, bias) - sub.originals)[sub.mask]
        sq += float(np.sum(err ** 2))
        ab += float(np.sum(np.abs(err)))
        count += err.size
    empty = count == 0
    if empty:
        log.warning("reconstruct_eval: mask ratio %s hides no tokens; reporting zeros", mask_ratio)
    return EvalReport(model_id, dataset_id, float(mask_ratio),
                      0.0 if empty else sq / count, 0.0 if empty else ab / count,
                      len(tokens), int(seed), count, empty)


def mask_sweep(theta: ParamSet, dataset: Sequence[D.SeriesShard], ratios: Sequence[float], seed: int,
               config: BackboneConfig, **kw) -> list[EvalReport]:
    return [reconstruct_eval(theta, dataset, r, seed, config, **kw) for r in ratios]


def write_reports(reports: Sequence[EvalReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(EvalReport.__dataclass_fields__)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            w.writerow([getattr(r, c) for c in cols])


def evaluate_config(config: RunConfig, theta: ParamSet, ratio: float = 0.75) -> float:
    """Held-out MSE for a trained model, with the evaluation set derived from the config."""
    return reconstruct_eval(theta, _holdout(config), ratio, config.seed, config.backbone).mse


def _holdout(config: RunConfig) -> list[D.SeriesShard]:
    _, specs, _ = config.data.domains()
    return D.holdout(specs, config.data.eval_seqs_per_domain, config.data.length, config.seed)


def apply_axis(base: RunConfig, axis: str, value: float) -> RunConfig:
    """Desk-scale analogue of each scaling axis; the client axis keeps total data fixed."""
    if axis == "data":
        return base.with_data(seqs_per_client=int(value))
    if axis == "clients":
        n = int(value)
        if n < 1:
            raise ConfigError("client count must be >= 1")
        total = base.data.n_clients * base.data.seqs_per_client
        return base.with_data(n_clients=n, seqs_per_client=max(1, total // n))
    if axis == "join_rate":
        return replace(base, join_ratio=float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")


def scaling_sweep(axis: str, grid: Sequence[float], base: RunConfig, out: str | Path | None = None,
                  ratio: float = 0.75) -> list[tuple[str, float, float]]:
    """One training run plus a held-out evaluation per grid value; rows (axis, value, mse)."""
    from fedal.orchestrator import run_training

    configs = [apply_axis(base, axis, v) for v in grid]  # validate the whole grid first
    rows = []
    for v, cfg in zip(grid, configs):
        res = run_training(cfg)
        rows.append((axis, v, evaluate_config(cfg, res.theta_g, ratio)))
    if out is not None:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "value", f"mse@{ratio}"])
            for a, v, m in rows:
                w.writerow([a, v, repr(m)])
    return rows
