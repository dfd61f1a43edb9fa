"""Round orchestration: client sampling, local SGD, poisoning, aggregation, global update.

Determinism: every random stream is a PCG64 generator keyed by a
``SeedSequence`` of ``(seed, stream tag, round, client)``, client training is a
pure function of its inputs, and the server consumes updates sorted by client
id. A round therefore gives identical bits whether clients run one after
another or on a thread pool.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .aggregation import Defense, aggregate_mean, aggregate_trimmed_mean, make_agr
from .attacks import AttackConfig, AttackKind, apply_attack
from .data import ClientShard, LabeledDataset
from .errors import ConfigError, InputError, NumericError
from .losses import DistillContext, LossKind, LossSpec, client_loss
from .metrics import MetricsRecord, evaluate
from .nn import ModelArch, OptimizerState, ParameterVector, backward, forward, sgd_step

__all__ = [
    "FederationConfig", "ClientUpdate", "RoundState", "Simulation",
    "sample_clients", "local_train", "aggregate_mean", "aggregate_trimmed_mean",
    "global_update", "run_round", "initial_state",
]

log = logging.getLogger(__name__)

_SAMPLE_STREAM = 1
_BATCH_STREAM = 2


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class FederationConfig:
    total_clients: int = 20
    sample_fraction: float = 1.0
    local_epochs: int = 2
    server_lr: float = 1.0
    rounds: int = 40
    batch_size: int = 50
    optimizer: OptimizerState = field(default_factory=lambda: OptimizerState(0.05, 0.9, 1e-5))
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise ConfigError("sample_fraction must be in (0, 1]")
        if self.total_clients < 1 or self.batch_size < 1:
            raise ConfigError("total_clients and batch_size must be positive")
        if self.local_epochs < 0 or self.rounds < 0:
            raise ConfigError("local_epochs and rounds must be non-negative")

    @property
    def clients_per_round(self) -> int:
        return max(1, int(np.floor(self.total_clients * self.sample_fraction + 0.5)))

    def to_dict(self) -> dict:
        return {
            "total_clients": self.total_clients,
            "sample_fraction": self.sample_fraction,
            "local_epochs": self.local_epochs,
            "server_lr": self.server_lr,
            "rounds": self.rounds,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer.to_dict(),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParameterVector
    num_examples: int
    stats: Optional[dict] = None
    # end-of-round local model, kept for the contrastive "previous" representation
    local_params: Optional[ParameterVector] = None


@dataclass
class RoundState:
    round_index: int
    global_params: ParameterVector
    initial_params: ParameterVector
    prev_local: dict[int, ParameterVector] = field(default_factory=dict)
    metrics: list[MetricsRecord] = field(default_factory=list)


def sample_clients(config: FederationConfig, round_index: int) -> list[int]:
    """n = max(1, round(N * fraction)) distinct ids, uniform without replacement, sorted."""
    n = config.clients_per_round
    if n >= config.total_clients:
        return list(range(config.total_clients))
    chosen = _rng(config.seed, _SAMPLE_STREAM, round_index).choice(
        config.total_clients, size=n, replace=False)
    return sorted(int(c) for c in chosen)


def _context(arch: ModelArch, spec: LossSpec, batch: np.ndarray, global_params: ParameterVector,
             prev_params: Optional[ParameterVector]) -> DistillContext:
    if spec.kind is LossKind.CE:
        return DistillContext()
    server = forward(arch, global_params, batch)
    ctx = DistillContext(server_logits=server.logits,
                         server_representation=server.representation)
    if spec.kind.uses_contrastive:
        prev = forward(arch, prev_params if prev_params is not None else global_params, batch)
        ctx.prev_local_representation = prev.representation
        ctx.prev_local_aux_representation = prev.aux_representation
    return ctx


def local_train(global_params: ParameterVector, shard: ClientShard, dataset: LabeledDataset,
                loss_spec: LossSpec, arch: ModelArch, config: FederationConfig,
                prev_local_params: Optional[ParameterVector] = None,
                round_index: int = 0) -> ClientUpdate:
    """E epochs of mini-batch momentum SGD starting from the global model.

    Batches are reshuffled every epoch (last batch may be short). The
    distillation targets are recomputed per batch from the frozen global and
    previous-local models. Returns ``delta = local - global``.
    """
    if len(shard) == 0:
        raise InputError(f"client {shard.client_id} has no examples")
    if loss_spec.kind.uses_aux and not arch.has_aux:
        raise ConfigError(f"{loss_spec.kind.value} needs an auxiliary head")
    rng = _rng(config.seed, _BATCH_STREAM, round_index, shard.client_id)
    params = global_params
    state = config.optimizer.fresh()
    indices = np.asarray(shard.example_indices)
    totals = np.zeros(4)
    steps = 0
    for _ in range(config.local_epochs):
        order = indices[rng.permutation(indices.size)]
        for start in range(0, order.size, config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            x, y = dataset.features[batch_idx], dataset.labels[batch_idx]
            trace = forward(arch, params, x)
            ctx = _context(arch, loss_spec, x, global_params, prev_local_params)
            try:
                result = client_loss(trace, ctx, y, loss_spec)
                if not np.isfinite(result.loss):
                    raise NumericError("non-finite loss")
                grad = backward(arch, params, trace, **result.upstream())
                params, state = sgd_step(params, grad, state)
            except NumericError as exc:
                raise NumericError(f"client {shard.client_id}, round {round_index + 1}: {exc}") from exc
            totals += (result.loss, result.ce, result.kd_final, result.kd_aux)
            steps += 1
    delta = params.with_values(params.values - global_params.values)
    stats = dict(zip(("loss", "ce", "kd_final", "kd_aux"), totals / max(steps, 1)))
    stats["steps"] = steps
    return ClientUpdate(shard.client_id, delta, len(shard), stats, params)


def global_update(global_params: ParameterVector, aggregate, server_lr: float) -> ParameterVector:
    """theta <- theta + server_lr * aggregate."""
    agg = np.asarray(getattr(aggregate, "values", aggregate), dtype=np.float64)
    if agg.shape != global_params.values.shape:
        raise ConfigError("aggregate does not match the global parameter layout")
    return global_params.with_values(global_params.values + server_lr * agg)


@dataclass
class Simulation:
    """Everything a round needs besides the evolving :class:`RoundState`."""

    arch: ModelArch
    loss_spec: LossSpec
    config: FederationConfig
    train: LabeledDataset
    shards: list[ClientShard]
    test: LabeledDataset
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: Defense = Defense.MEAN
    trim: int = 0
    workers: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        self.defense = Defense(self.defense)
        if len(self.shards) != self.config.total_clients:
            raise ConfigError("one shard per client is required")
        if self.defense is Defense.TRMEAN and self.config.clients_per_round <= 2 * self.trim:
            raise ConfigError(
                f"trimmed mean with m={self.trim} needs more than {2 * self.trim} clients per round")
        if self.loss_spec.kind.uses_aux and not self.arch.has_aux:
            raise ConfigError(f"{self.loss_spec.kind.value} needs an auxiliary head")
        if (self.loss_spec.kind is LossKind.HYDRA_MOON
                and self.arch.aux_representation_dim != self.arch.representation_dim):
            raise ConfigError("HYDRA_MOON needs aux representation width == trunk representation width")

    @property
    def malicious_ids(self) -> frozenset[int]:
        if self.attack.kind is AttackKind.NONE:
            return frozenset()
        return self.attack.malicious_ids(self.config.total_clients)


def initial_state(arch: ModelArch, params: ParameterVector) -> RoundState:
    return RoundState(0, params, params)


def _train_clients(sim: Simulation, state: RoundState, client_ids: list[int]) -> dict[int, ClientUpdate]:
    def job(cid: int) -> ClientUpdate:
        prev = state.prev_local.get(cid, state.initial_params)
        return local_train(state.global_params, sim.shards[cid], sim.train, sim.loss_spec,
                           sim.arch, sim.config, prev, state.round_index)

    if sim.workers > 1 and len(client_ids) > 1:
        with ThreadPoolExecutor(max_workers=sim.workers) as pool:
            results = list(pool.map(job, client_ids))
    else:
        results = [job(cid) for cid in client_ids]
    return {u.client_id: u for u in results}


def _nonempty(sim: Simulation, ids: list[int], round_index: int) -> list[int]:
    keep = [c for c in ids if len(sim.shards[c]) > 0]
    skipped = sorted(set(ids) - set(keep))
    if skipped:
        log.warning("round %d: skipping clients with no data %s", round_index, skipped)
    return keep


def run_round(state: RoundState, sim: Simulation) -> RoundState:
    started = time.perf_counter()
    t = state.round_index
    sampled = sample_clients(sim.config, t)
    malicious = sim.malicious_ids
    attackers = [c for c in sampled if c in malicious]
    benign_ids = _nonempty(sim, [c for c in sampled if c not in malicious], t)
    trained = _train_clients(sim, state, benign_ids)

    reference = None
    if attackers and not trained:
        # no benign client this round: the adversary trains its own clients honestly
        reference = list(_train_clients(sim, state, _nonempty(sim, attackers, t)).values())

    updates = [trained[c] for c in benign_ids]
    updates += [ClientUpdate(c, state.global_params.zeros_like(), len(sim.shards[c]))
                for c in attackers]
    updates.sort(key=lambda u: u.client_id)

    trim = sim.trim if sim.defense is Defense.TRMEAN else 0
    if trim and len(updates) <= 2 * trim:
        log.warning("round %d: only %d updates, trimming %d per side instead of %d",
                    t, len(updates), (len(updates) - 1) // 2, trim)
    # clamped so the adversary's benign-only reference is defined; identical
    # to the plain rule on every full round with n > 2m
    agr = make_agr(sim.defense, trim, clamp=True)

    attacked = bool(attackers) and bool(trained or reference)
    if attacked:
        updates = apply_attack(updates, malicious, sim.attack, agr, reference)

    if updates:
        aggregate = agr([u.delta for u in updates])
        new_global = global_update(state.global_params, aggregate, sim.config.server_lr)
        if not np.all(np.isfinite(new_global.values)):
            raise NumericError(f"round {t + 1}: global model became non-finite")
    else:
        log.warning("round %d: no updates, global model unchanged", t)
        new_global = state.global_params

    accuracy = evaluate(sim.arch, new_global, sim.test)
    stats = [trained[c].stats for c in benign_ids]
    means = {k: float(np.mean([s[k] for s in stats])) if stats else 0.0
             for k in ("loss", "ce", "kd_final", "kd_aux")}
    wall = (time.perf_counter() - started) * 1000.0 if sim.record_wall_time else 0.0
    record = MetricsRecord(t + 1, accuracy, means["loss"], means["ce"], means["kd_final"],
                           means["kd_aux"], bool(attacked), wall)

    prev_local = state.prev_local
    if sim.loss_spec.kind.uses_contrastive:
        prev_local = dict(prev_local)
        prev_local.update({c: trained[c].local_params for c in benign_ids})
    return replace(state, round_index=t + 1, global_params=new_global, prev_local=prev_local,
                   metrics=state.metrics + [record])
