"""End-to-end federated protocol: initialisation, client sampling, the
per-round local phase, and the server phase, plus run-directory artifacts."""
from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedal import data as D
from fedal.config import RunConfig, dump_config
from fedal.coreset import CoreSet, construct_coreset, export_coreset_csv
from fedal.model import BiasState, ClientModel, TrainStats, init_params, local_train
from fedal.params import ParamSet, save_checkpoint
from fedal.server import (ServerState, coreset_finetune, correct_global, fuse, update_global_bias,
                          update_state, weighted_average)

# stream tags for np.random.default_rng([seed, round, client, tag])
_WARMUP, _LOCAL, _CORESET, _SAMPLE, _SERVER = 1, 2, 3, 4, 5


@dataclass
class Client:
    """A participant: its model plus the private shard that never leaves it."""
    model: ClientModel
    shard: D.SeriesShard

    @property
    def client_id(self) -> int:
        return self.model.client_id


@dataclass
class RoundReport:
    round: int
    participants: list[int]
    losses: dict[int, list[float]]
    bias_gaps: dict[int, float]
    drift_pre: float  # ||theta' - theta_prev||
    drift_post: float  # ||theta_g - theta_prev||
    correction_norm: float  # ||theta'' - theta'||
    pooled_before: float
    pooled_after: float
    s_norm: float
    wall_ms: float = 0.0
    biases: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    coresets: dict[int, CoreSet] = field(default_factory=dict, repr=False)


@dataclass
class TrainingResult:
    theta_g: ParamSet
    reports: list[RoundReport]
    bias_rows: list[tuple[int, int, int, float]]
    state: ServerState
    clients: list[Client]


def participant_count(n_clients: int, rho: float) -> int:
    return max(1, D.round_half_up(rho * n_clients))


def sample_clients(n_clients: int, rho: float, round_index: int, seed: int) -> list[int]:
    """Uniform draw without replacement, keyed by (seed, round)."""
    m = participant_count(n_clients, rho)
    rng = np.random.default_rng([int(seed), int(round_index), 0, _SAMPLE])
    return sorted(int(i) for i in rng.choice(n_clients, size=m, replace=False))


def make_shards(config: RunConfig) -> list[D.SeriesShard]:
    mode, specs, k = config.data.domains()
    return D.partition(specs, mode, config.data.n_clients, config.data.seqs_per_client,
                       config.seed, config.data.length, k)


def make_holdout(config: RunConfig) -> list[D.SeriesShard]:
    _, specs, _ = config.data.domains()
    return D.holdout(specs, config.data.eval_seqs_per_domain, config.data.length, config.seed)


def initialize(config: RunConfig, shards: list[D.SeriesShard] | None = None) -> tuple[ServerState, list[Client]]:
    """Broadcast theta^0, run the warm-up epoch to seed the global bias, reset client biases."""
    cfg = config.backbone
    shards = make_shards(config) if shards is None else shards
    theta0 = init_params(cfg, config.seed)
    state = ServerState.start(theta0, cfg.d_model, config.beta, config.alpha)
    clients = [Client(ClientModel(cfg, theta0.copy(), BiasState(cfg.d_model, config.mu), i), shard)
               for i, shard in enumerate(shards)]
    if config.ablations.dbe:
        warm = []
        for c in clients:
            stats = local_train(c.model, c.shard, 1, config.warmup_lr, 0.0, config.mask_ratio, config.tau,
                                [config.seed, 0, c.client_id, _WARMUP], batch_size=config.batch_size,
                                loss_on_all_tokens=config.loss_on_all_tokens)
            warm.append(stats.b_hat)
        update_global_bias(state, warm, [len(c.shard) for c in clients], "init")
    for c in clients:
        c.model.bias.reset()
        c.model.bias.b_global = state.b_global.copy()
    return state, clients


def client_update(client: Client, theta: ParamSet, b_global: np.ndarray, config: RunConfig,
                  round_index: int) -> tuple[Client, TrainStats, CoreSet | None]:
    """Local phase for one participant; touches nothing but ``client``."""
    cid = client.client_id
    client.model.load(theta)
    client.model.bias.b_global = b_global.copy()
    ab = config.ablations
    stats = local_train(client.model, client.shard, config.local_epochs, config.lr, config.effective_lam,
                        config.mask_ratio, config.tau, [config.seed, round_index, cid, _LOCAL],
                        batch_size=config.batch_size, dbe=ab.dbe,
                        loss_on_all_tokens=config.loss_on_all_tokens)
    core = None
    if ab.gbe_coreset:
        core = construct_coreset(client.model, client.shard, config.K, config.coreset_eta,
                                 config.coreset_steps, config.epsilon,
                                 [config.seed, round_index, cid, _CORESET], config.mask_ratio)
    return client, stats, core


def _client_job(args):
    return client_update(*args)


def run_round(state: ServerState, clients: list[Client], config: RunConfig, pool=None) -> RoundReport:
    """One communication round; mutates ``state`` and the participating clients."""
    t0 = time.perf_counter()
    r = state.round + 1
    ab = config.ablations
    ids = sample_clients(len(clients), config.join_ratio, r, config.seed)
    theta_prev = state.theta_g
    b_g = state.b_global
    jobs = [(clients[i], theta_prev, b_g, config, r) for i in ids]
    results = list(pool.map(_client_job, jobs)) if pool is not None else [client_update(*j) for j in jobs]
    for (client, _, _), i in zip(results, ids):
        clients[i] = client  # workers hand back updated copies

    params = [clients[i].model.params for i in ids]
    sizes = [len(clients[i].shard) for i in ids]
    theta_p = weighted_average(params, sizes)
    if ab.gbe_correction:
        scale = 1.0 / len(clients) if config.drift_norm == "clients" else 1.0
        update_state(state, params, theta_prev, scale)
        theta_c = correct_global(theta_p, state)
    else:
        theta_c = theta_p
    pooled = {"pooled_before": float("nan"), "pooled_after": float("nan")}
    coresets = {i: core for (_, _, core), i in zip(results, ids) if core is not None}
    if ab.gbe_coreset:
        # the tuned model starts from the plain weighted average, as the
        # algorithm refines the freshly aggregated global model
        theta_t, pooled = coreset_finetune(theta_p, list(coresets.values()), config.fine_tune_epochs,
                                           config.fine_tune_lr, config.mask_ratio,
                                           [config.seed, r, 0, _SERVER], config.backbone,
                                           config.batch_size)
        theta_g = fuse(theta_c, theta_t, config.alpha)
    else:
        theta_g = theta_c
    biases = {i: stats.b_hat for (_, stats, _), i in zip(results, ids)}
    if ab.dbe and not config.freeze_global_bias:
        update_global_bias(state, [biases[i] for i in ids], sizes, "round")
    state.theta_g = theta_g
    state.round = r
    return RoundReport(
        round=r,
        participants=ids,
        losses={i: stats.epoch_losses for (_, stats, _), i in zip(results, ids)},
        bias_gaps={i: stats.bias_gap(b_g) if ab.dbe else float("nan") for (_, stats, _), i in zip(results, ids)},
        drift_pre=(theta_p - theta_prev).l2_norm(),
        drift_post=(theta_g - theta_prev).l2_norm(),
        correction_norm=(theta_c - theta_p).l2_norm(),
        pooled_before=pooled["pooled_before"],
        pooled_after=pooled["pooled_after"],
        s_norm=state.s.l2_norm(),
        wall_ms=1000.0 * (time.perf_counter() - t0),
        biases=biases,
        coresets=coresets,
    )


def _fmt(v: float) -> str:
    return repr(float(v))


class RunWriter:
    """Writes the run directory; every file except ``timings.csv`` is deterministic."""

    def __init__(self, out: str | Path, config: RunConfig):
        self.out = Path(out)
        self.config = config
        try:
            (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.out / "config.snapshot").write_text(dump_config(config))
            self._open()
        except OSError as exc:
            raise OSError(f"cannot write run directory {self.out}: {exc}") from exc

    def _open(self):
        self._files = {}
        self._writers = {}
        headers = {
            "rounds.csv": ["round", "client", "epoch", "loss", "bias_gap"],
            "server.csv": ["round", "drift_pre", "drift_post", "correction_norm",
                           "pooled_before", "pooled_after", "s_norm"],
            "bias_trajectory.csv": ["round", "client", "dim", "value"],
            "timings.csv": ["round", "wall_ms"],
        }
        for name, header in headers.items():
            fh = (self.out / name).open("w", newline="")
            self._files[name] = fh
            self._writers[name] = csv.writer(fh)
            self._writers[name].writerow(header)

    def checkpoint(self, r: int, theta: ParamSet) -> None:
        save_checkpoint(self.out / "checkpoints" / f"round_{r}.ckpt", theta,
                        {"round": r, "config": self.config.to_dict()})

    def biases(self, r: int, biases: dict[int, np.ndarray]) -> None:
        w = self._writers["bias_trajectory.csv"]
        for cid in sorted(biases):
            for dim, v in enumerate(biases[cid]):
                w.writerow([r, cid, dim, _fmt(v)])

    def report(self, rep: RoundReport) -> None:
        w = self._writers["rounds.csv"]
        for cid in rep.participants:
            for epoch, loss in enumerate(rep.losses[cid]):
                w.writerow([rep.round, cid, epoch, _fmt(loss), _fmt(rep.bias_gaps[cid])])
        self._writers["server.csv"].writerow(
            [rep.round] + [_fmt(v) for v in (rep.drift_pre, rep.drift_post, rep.correction_norm,
                                             rep.pooled_before, rep.pooled_after, rep.s_norm)])
        self._writers["timings.csv"].writerow([rep.round, f"{rep.wall_ms:.3f}"])
        self.biases(rep.round, rep.biases)
        for cid, core in rep.coresets.items():
            export_coreset_csv(core, self.out / "coresets" / f"round_{rep.round}" / f"client_{cid}.csv")
        for fh in self._files.values():
            fh.flush()

    def close(self) -> None:
        for fh in self._files.values():
            fh.close()


def run_training(config: RunConfig, out: str | Path | None = None, workers: int | None = None,
                 progress=None) -> TrainingResult:
    """Run ``config.rounds`` rounds; with ``out`` set, write the run directory."""
    workers = config.workers if workers is None else workers
    state, clients = initialize(config)
    writer = RunWriter(out, config) if out is not None else None
    reports: list[RoundReport] = []
    bias_rows: list[tuple[int, int, int, float]] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        if writer:
            writer.checkpoint(0, state.theta_g)
        for _ in range(config.rounds):
            rep = run_round(state, clients, config, pool)
            reports.append(rep)
            for cid in sorted(rep.biases):
                bias_rows.extend((rep.round, cid, d, float(v)) for d, v in enumerate(rep.biases[cid]))
            if writer:
                writer.report(rep)
                writer.checkpoint(rep.round, state.theta_g)
            rep.coresets = {}  # free memory; already exported
            if progress:
                progress(rep)
    finally:
        if pool is not None:
            pool.shutdown()
        if writer:
            writer.close()
    return TrainingResult(state.theta_g, reports, bias_rows, state, clients)
