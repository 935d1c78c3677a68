"""Round-based execution of the five algorithms over the transport layer.

One process plays both sides: the server loop owns the global state and the
meters, client steps run on a thread pool, and every exchanged value passes
through the wire codec (so 32-bit rounding and byte counts are identical on
the loopback and TCP paths).

Projected-variant round t: broadcast z_bar_t; each client locally minimizes
the augmented objective under the round map A_t, ascends its dual against
z_bar_t, has its parameter norm floored, then projects under the fresh
A_{t+1} whose seed the rotating generator client sealed to its peers; the
server averages the projected vectors it can see but never the parameters.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import admm, privacy, rng, transport
from .data import Dataset, PartitionPlan, full_batch, partition_iid
from .models import Batch, ModelSpec, evaluate, init_params, loss_and_gradient
from .projection import (
    IdentityMap,
    ProjectionSpec,
    SeedEnvelope,
    SeedLedger,
    as_linear_map,
    open_round_seed,
    seal_round_seed,
    sealing_key_from_seed,
)

ALGORITHMS = ("fedrp", "fedavg", "fedadmm", "fedavg_dp", "fwc")
_EVAL_CHUNK = 2048


class ConfigError(ValueError):
    pass


class RoundAbortError(RuntimeError):
    """A client disappeared mid-round; full participation is a protocol requirement."""

    def __init__(self, message: str, round_index: int):
        super().__init__(message)
        self.round_index = round_index


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str
    model: ModelSpec
    num_clients: int
    rounds: int
    local_epochs: int
    batch_size: int = 64
    learning_rate: float = 0.1
    rho: float = 1.0
    m: int | None = None
    dp_sigma: float | None = None
    sigma_min: float = 1e-3
    delta: float = 0.01
    delta_sensitivity: float = 1.0
    eval_model: str = "client_zero"
    transport_mode: str = "loopback"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    master_seed: int = 0
    projection_mode: str = "random"  # "identity" only for structural tests (needs m == n)
    dual_timing: str = "fresh"  # classic dual convention; "stale" mirrors the projected one
    track_trajectories: bool = False

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        for name in ("num_clients", "rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate <= 0 or self.rho <= 0:
            raise ConfigError("learning_rate and rho must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.algorithm == "fedrp":
            if self.m is None or self.m < 1:
                raise ConfigError("fedrp requires a positive projected dimension m")
            if self.projection_mode not in ("random", "identity"):
                raise ConfigError(f"unknown projection_mode {self.projection_mode!r}")
            if self.projection_mode == "identity" and self.m != self.model.num_params:
                raise ConfigError("identity projection requires m == n")
            if self.sigma_min <= 0:
                raise ConfigError("fedrp requires sigma_min > 0")
        if self.algorithm == "fedavg_dp" and (self.dp_sigma is None or self.dp_sigma < 0):
            raise ConfigError("fedavg_dp requires dp_sigma >= 0")
        if self.eval_model not in ("client_zero", "average"):
            raise ConfigError(f"unknown eval_model {self.eval_model!r}")
        if self.transport_mode not in ("loopback", "tcp"):
            raise ConfigError(f"unknown transport mode {self.transport_mode!r}")
        if self.dual_timing not in ("fresh", "stale"):
            raise ConfigError(f"unknown dual_timing {self.dual_timing!r}")


@dataclass
class RoundMetrics:
    round: int
    mean_train_loss: float
    test_accuracy: float
    bytes_up_per_client: int
    bytes_down_per_client: int
    epsilon_round: float | None
    epsilon_cumulative: float | None
    wall_time: float


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list[RoundMetrics]
    client_params: list[np.ndarray]
    global_params: np.ndarray | None
    seed_log: list[int] = field(default_factory=list)
    envelope_bytes_total: int = 0
    header_bytes_total: int = 0
    max_param_step: float = 0.0  # diagnostic: max ||w_i^t - w_i^{t-1}|| seen
    trajectories: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_accuracy

    @property
    def total_bytes_per_client(self) -> int:
        return sum(m.bytes_up_per_client + m.bytes_down_per_client for m in self.metrics)


def _test_batches(test_ds: Dataset) -> list[Batch]:
    return [
        Batch(inputs=test_ds.inputs[i : i + _EVAL_CHUNK], labels=test_ds.labels[i : i + _EVAL_CHUNK])
        for i in range(0, len(test_ds), _EVAL_CHUNK)
    ]


def evaluate_global(cfg: ExperimentConfig, client_states: list[np.ndarray], test_batches) -> float:
    """Accuracy of the designated global model: client 0's w or the client mean."""
    if cfg.eval_model == "average":
        w = np.mean(np.stack(client_states), axis=0)
    else:
        w = client_states[0]
    return evaluate(cfg.model, w, test_batches)


def _sgd_epochs(problem: admm.ModelProblem, w: np.ndarray, cfg: ExperimentConfig, epoch_offset: int):
    """Plain minibatch SGD on the data loss (the FedAvg/FWC local routine)."""
    w = w.copy()
    loss_sum, count = 0.0, 0
    for epoch in range(cfg.local_epochs):
        for batch in problem.epoch_batches(epoch_offset + epoch, cfg.batch_size):
            data_loss, grad = problem.loss_and_gradient(w, batch)
            w -= cfg.learning_rate * grad
            loss_sum += data_loss
            count += 1
    if not np.all(np.isfinite(w)):
        raise admm.DivergenceError("parameters became non-finite during local training")
    return w, loss_sum / max(count, 1)


class _Run:
    """Shared plumbing: data partition, channels, meter, eval, metrics."""

    def __init__(self, cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset):
        if cfg.model.input_dim != train_ds.dim:
            raise ConfigError(
                f"model expects input dim {cfg.model.input_dim}, dataset has {train_ds.dim}"
            )
        self.cfg = cfg
        self.plan: PartitionPlan = partition_iid(
            train_ds, cfg.num_clients, rng.derive_seed(cfg.master_seed, "partition")
        )
        self.problems = [
            admm.ModelProblem(
                cfg.model, train_ds, self.plan.shard_indices[i],
                shuffle_seed=rng.derive_seed(cfg.master_seed, "batches", i),
            )
            for i in range(cfg.num_clients)
        ]
        self.w_init = init_params(cfg.model, rng.derive_seed(cfg.master_seed, "model-init"))
        self.test_batches = _test_batches(test_ds)
        self.meter = transport.ByteMeter()
        self.channels = None
        if cfg.algorithm != "fwc":
            self.channels = transport.open_channels(
                cfg.transport_mode, cfg.num_clients, cfg.tcp_host, cfg.tcp_port
            )
        self.pool = ThreadPoolExecutor(max_workers=min(cfg.num_clients, 8))
        self.local_cfg = admm.LocalSolveConfig(
            epochs=cfg.local_epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate
        )
        self.result = RunResult(config=cfg, metrics=[], client_params=[], global_params=None)
        self._prev_ws: list[np.ndarray] | None = None

    def close(self) -> None:
        self.pool.shutdown(wait=False)
        if self.channels is not None:
            self.channels.close()

    def map_clients(self, fn):
        try:
            return list(self.pool.map(fn, range(self.cfg.num_clients)))
        except transport.TransportClosedError as exc:
            round_index = len(self.result.metrics)
            raise RoundAbortError(
                f"round {round_index}: client channel failed mid-round ({exc})", round_index
            ) from exc

    def broadcast(self, round_index: int, values: np.ndarray) -> None:
        msg = transport.WireMessage.from_vector(
            transport.MsgType.SERVER_BROADCAST, round_index, transport.SERVER_ID, values
        )
        for ch in self.channels.server_side:
            ch.send(msg)
            self.meter.record(msg)

    def gather(self, round_index: int, expected_type: transport.MsgType) -> list[np.ndarray]:
        """Exactly one update from each client, in id order, or round abort."""
        by_client: dict[int, np.ndarray] = {}
        for ch in self.channels.server_side:
            try:
                msg = ch.recv()
            except transport.TransportClosedError as exc:
                raise RoundAbortError(
                    f"round {round_index}: client disconnected before reporting ({exc})",
                    round_index,
                ) from exc
            if msg.msg_type != expected_type or msg.round != round_index:
                raise RoundAbortError(
                    f"round {round_index}: unexpected message {msg.msg_type.name} for round {msg.round}",
                    round_index,
                )
            by_client[msg.client_id] = msg.vector()
            self.meter.record(msg)
        if sorted(by_client) != list(range(self.cfg.num_clients)):
            raise RoundAbortError(
                f"round {round_index}: expected updates from all {self.cfg.num_clients} clients",
                round_index,
            )
        return [by_client[i] for i in range(self.cfg.num_clients)]

    def track_step(self, ws: list[np.ndarray]) -> None:
        if self._prev_ws is not None:
            step = max(
                float(np.linalg.norm(w - p)) for w, p in zip(ws, self._prev_ws)
            )
            self.result.max_param_step = max(self.result.max_param_step, step)
        self._prev_ws = [w.copy() for w in ws]
        if self.cfg.track_trajectories:
            self.result.trajectories.append([w.copy() for w in ws])

    def add_metrics(
        self,
        round_index: int,
        mean_loss: float,
        accuracy: float,
        eps_round: float | None,
        t_start: float,
    ) -> None:
        cfg = self.cfg
        up = self.meter.per_round_up // cfg.num_clients
        down = self.meter.per_round_down // cfg.num_clients
        eps_cum = None if eps_round is None else privacy.compose_linear(eps_round, round_index + 1)
        self.result.metrics.append(
            RoundMetrics(
                round=round_index,
                mean_train_loss=mean_loss,
                test_accuracy=accuracy,
                bytes_up_per_client=up,
                bytes_down_per_client=down,
                epsilon_round=eps_round,
                epsilon_cumulative=eps_cum,
                wall_time=time.perf_counter() - t_start,
            )
        )

    def finish(self, client_ws: list[np.ndarray], global_w: np.ndarray | None) -> RunResult:
        self.result.client_params = client_ws
        self.result.global_params = global_w
        self.result.envelope_bytes_total = self.meter.envelope_total
        self.result.header_bytes_total = self.meter.header_total
        return self.result


def run_fedavg(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    return _run_averaging(cfg, train_ds, test_ds, with_noise=False)


def run_fedavg_dp(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    return _run_averaging(cfg, train_ds, test_ds, with_noise=True)


def _run_averaging(cfg: ExperimentConfig, train_ds, test_ds, with_noise: bool) -> RunResult:
    run = _Run(cfg, train_ds, test_ds)
    try:
        global_w = run.w_init.copy()
        eps_round = None
        if with_noise and cfg.dp_sigma and cfg.dp_sigma > 0:
            eps_round = privacy.epsilon_gaussian(
                privacy.GaussianBudget(cfg.delta_sensitivity, cfg.dp_sigma, cfg.delta)
            )
        elif with_noise:
            eps_round = 0.0
        for t in range(cfg.rounds):
            t0 = time.perf_counter()
            run.meter.start_round()
            run.broadcast(t, global_w)
            losses = [0.0] * cfg.num_clients
            ws = [None] * cfg.num_clients

            def step(i: int) -> None:
                msg = run.channels.client_side[i].recv()
                w = msg.vector()
                try:
                    w_new, mean_loss = _sgd_epochs(run.problems[i], w, cfg, t * cfg.local_epochs)
                except admm.DivergenceError as exc:
                    raise admm.DivergenceError(str(exc), round_index=t, client_id=i) from exc
                ws[i] = w_new
                losses[i] = mean_loss
                if with_noise and cfg.dp_sigma:
                    w_new = privacy.add_gaussian_noise(
                        w_new, cfg.dp_sigma, rng.derive_seed(cfg.master_seed, "dp-noise", t, i)
                    )
                run.channels.client_side[i].send(
                    transport.WireMessage.from_vector(transport.MsgType.FULL_PARAMS, t, i, w_new)
                )

            run.map_clients(step)
            updates = run.gather(t, transport.MsgType.FULL_PARAMS)
            global_w = admm.aggregate(updates)
            run.track_step(ws)
            acc = evaluate(cfg.model, global_w, run.test_batches)
            run.add_metrics(t, float(np.mean(losses)), acc, eps_round, t0)
        return run.finish(ws, global_w)
    finally:
        run.close()


def run_fwc(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    """No communication at all: every client keeps training its own model."""
    run = _Run(cfg, train_ds, test_ds)
    try:
        ws = [run.w_init.copy() for _ in range(cfg.num_clients)]
        for t in range(cfg.rounds):
            t0 = time.perf_counter()
            run.meter.start_round()
            losses = [0.0] * cfg.num_clients

            def step(i: int) -> None:
                try:
                    ws[i], losses[i] = _sgd_epochs(run.problems[i], ws[i], cfg, t * cfg.local_epochs)
                except admm.DivergenceError as exc:
                    raise admm.DivergenceError(str(exc), round_index=t, client_id=i) from exc

            run.map_clients(step)
            run.track_step(ws)
            acc = evaluate_global(cfg, ws, run.test_batches)
            run.add_metrics(t, float(np.mean(losses)), acc, None, t0)
        return run.finish(ws, None)
    finally:
        run.close()


def run_fedadmm(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    """Classic consensus ADMM in the full parameter space (Eqs. of record)."""
    run = _Run(cfg, train_ds, test_ds)
    try:
        n = cfg.model.num_params
        z_bar = np.zeros(n)
        ws = [run.w_init.copy() for _ in range(cfg.num_clients)]
        ys = [np.zeros(n) for _ in range(cfg.num_clients)]
        have_prior = False
        for t in range(cfg.rounds):
            t0 = time.perf_counter()
            run.meter.start_round()
            run.broadcast(t, z_bar)
            losses = [0.0] * cfg.num_clients

            def step(i: int) -> None:
                msg = run.channels.client_side[i].recv()
                zb = msg.vector()
                state = admm.ClientAdmmState(w=ws[i], y=ys[i], rho=cfg.rho)
                if cfg.dual_timing == "fresh" and have_prior:
                    # Eq-6 convention: ascend against the just-published consensus
                    ys[i] = admm.dual_update_classic(state, ws[i], zb)
                    state = admm.ClientAdmmState(w=ws[i], y=ys[i], rho=cfg.rho)
                try:
                    w_new, stats = admm.local_update_classic(
                        state, zb, run.problems[i], run.local_cfg, epoch_offset=t * cfg.local_epochs
                    )
                except admm.DivergenceError as exc:
                    raise admm.DivergenceError(str(exc), round_index=t, client_id=i) from exc
                if cfg.dual_timing == "stale":
                    ys[i] = admm.dual_update_classic(state, w_new, zb)
                ws[i] = w_new
                losses[i] = stats.mean_data_loss
                run.channels.client_side[i].send(
                    transport.WireMessage.from_vector(transport.MsgType.FULL_PARAMS, t, i, w_new)
                )

            run.map_clients(step)
            updates = run.gather(t, transport.MsgType.FULL_PARAMS)
            z_bar = admm.aggregate(updates)
            have_prior = True
            run.track_step(ws)
            acc = evaluate(cfg.model, z_bar, run.test_batches)
            run.add_metrics(t, float(np.mean(losses)), acc, None, t0)
        return run.finish(ws, z_bar)
    finally:
        run.close()


def _round_map(cfg: ExperimentConfig, seed: int):
    if cfg.projection_mode == "identity":
        return IdentityMap(cfg.model.num_params)
    return as_linear_map(ProjectionSpec(round_seed=seed, m=cfg.m, n=cfg.model.num_params))


def run_fedrp(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    run = _Run(cfg, train_ds, test_ds)
    try:
        K = cfg.num_clients
        keys = [sealing_key_from_seed(rng.derive_seed(cfg.master_seed, "seal-key", i)) for i in range(K)]
        ledgers = [SeedLedger() for _ in range(K)]
        seen_seeds: set[int] = set()

        def distribute_seed(round_index: int, generator_id: int) -> int:
            """Generator client draws a fresh seed and seals it to every peer."""
            seed = rng.derive_seed(cfg.master_seed, "proj-seed", round_index)
            if seed in seen_seeds:
                raise RoundAbortError(
                    f"round {round_index}: seed collides with an earlier round", round_index
                )
            recipients = [(i, keys[i]) for i in range(K) if i != generator_id]
            envelopes = seal_round_seed(
                round_index, seed, recipients, sender_client=generator_id,
                ledger=ledgers[generator_id],
            )
            opened = {generator_id: seed}
            if run.channels is not None and K > 1:
                # generator -> server -> recipient, all as SEED_ENVELOPE frames
                for env in envelopes:
                    payload = transport.encode_envelope_payload(
                        env.sender_client, env.recipient_client, env.sealed_payload
                    )
                    up = transport.WireMessage(
                        transport.MsgType.SEED_ENVELOPE, round_index, generator_id, payload
                    )
                    run.channels.client_side[generator_id].send(up)
                for _ in envelopes:
                    msg = run.channels.server_side[generator_id].recv()
                    run.meter.record(msg)
                    _, recipient, _ = transport.decode_envelope_payload(msg.payload)
                    run.channels.server_side[recipient].send(msg)
                    run.meter.record(msg)
                for i in range(K):
                    if i == generator_id:
                        continue
                    msg = run.channels.client_side[i].recv()
                    sender, recipient, sealed = transport.decode_envelope_payload(msg.payload)
                    env = SeedEnvelope(
                        round=msg.round, sealed_payload=sealed,
                        sender_client=sender, recipient_client=recipient,
                    )
                    opened[i] = open_round_seed(env, keys[i])
            else:
                for env in envelopes:
                    opened[env.recipient_client] = open_round_seed(env, keys[env.recipient_client])
            seeds = set(opened.values())
            if len(seeds) != 1:
                raise RoundAbortError(f"round {round_index}: clients derived different seeds", round_index)
            seen_seeds.add(seed)
            run.result.seed_log.append(seed)
            return seed

        seed0 = distribute_seed(0, generator_id=0)  # setup phase, before round 1
        current_map = _round_map(cfg, seed0)
        z_bar = np.zeros(cfg.m)
        ws = [run.w_init.copy() for _ in range(K)]
        ys = [np.zeros(cfg.m) for _ in range(K)]
        m_eff = cfg.m
        eps_round = privacy.epsilon_fedrp(
            privacy.FedRpBudget(
                delta_sensitivity=cfg.delta_sensitivity, sigma_min=cfg.sigma_min,
                m=m_eff, delta=cfg.delta, rounds=cfg.rounds,
            )
        )

        for t in range(cfg.rounds):
            t0 = time.perf_counter()
            run.meter.start_round()
            run.broadcast(t, z_bar)
            losses = [0.0] * K
            zb_seen = [None] * K

            def local_phase(i: int) -> None:
                msg = run.channels.client_side[i].recv()
                zb = msg.vector()
                zb_seen[i] = zb
                state = admm.ClientAdmmState(w=ws[i], y=ys[i], rho=cfg.rho)
                try:
                    w_new, stats = admm.local_update_fedrp(
                        state, current_map, zb, run.problems[i], run.local_cfg,
                        epoch_offset=t * cfg.local_epochs,
                    )
                except admm.DivergenceError as exc:
                    raise admm.DivergenceError(str(exc), round_index=t, client_id=i) from exc
                ys[i] = admm.dual_update_fedrp(state, current_map, w_new, zb)
                ws[i] = privacy.enforce_sigma_min(w_new, cfg.sigma_min)
                losses[i] = stats.mean_data_loss

            run.map_clients(local_phase)

            next_seed = distribute_seed(t + 1, generator_id=(t + 1) % K)
            next_map = _round_map(cfg, next_seed)

            def send_phase(i: int) -> None:
                z_i = admm.compute_z(next_map, ws[i])
                run.channels.client_side[i].send(
                    transport.WireMessage.from_vector(transport.MsgType.CLIENT_UPDATE, t, i, z_i)
                )

            run.map_clients(send_phase)
            updates = run.gather(t, transport.MsgType.CLIENT_UPDATE)
            z_bar = admm.aggregate(updates)
            current_map = next_map
            run.track_step(ws)
            acc = evaluate_global(cfg, ws, run.test_batches)
            run.add_metrics(t, float(np.mean(losses)), acc, eps_round, t0)
        return run.finish(ws, None)
    finally:
        run.close()


_RUNNERS = {
    "fedrp": run_fedrp,
    "fedavg": run_fedavg,
    "fedadmm": run_fedadmm,
    "fedavg_dp": run_fedavg_dp,
    "fwc": run_fwc,
}


def run_experiment(cfg: ExperimentConfig, train_ds: Dataset, test_ds: Dataset) -> RunResult:
    return _RUNNERS[cfg.algorithm](cfg, train_ds, test_ds)


def meter_preview(cfg: ExperimentConfig) -> dict:
    """Per-round byte law without training: encode one real uplink frame and meter it.

    The projected variant uploads 4m bytes per client per round, the
    parameter-sending baselines 4n; fwc uploads nothing.
    """
    n = cfg.model.num_params
    meter_obj = transport.ByteMeter()
    if cfg.algorithm == "fwc":
        up = 0
        down = 0
    else:
        if cfg.algorithm == "fedrp":
            length = cfg.m
            mtype = transport.MsgType.CLIENT_UPDATE
        else:
            length = n
            mtype = transport.MsgType.FULL_PARAMS
        up_msg = transport.WireMessage.from_vector(mtype, 0, 0, np.zeros(length))
        down_len = cfg.m if cfg.algorithm == "fedrp" else n
        down_msg = transport.WireMessage.from_vector(
            transport.MsgType.SERVER_BROADCAST, 0, transport.SERVER_ID, np.zeros(down_len)
        )
        transport.meter(meter_obj, up_msg)
        transport.meter(meter_obj, down_msg)
        up = meter_obj.per_round_up
        down = meter_obj.per_round_down
    return {
        "algorithm": cfg.algorithm,
        "param_count": n,
        "bytes_up_per_client_per_round": up,
        "bytes_down_per_client_per_round": down,
        "bytes_up_total_per_client": up * cfg.rounds,
    }
