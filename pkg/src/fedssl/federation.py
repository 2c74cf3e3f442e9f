"""Server/client round loop with FedAVG, FedBN and FedProx aggregation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, two_view_batch
from .datasets import DatasetContainer
from .engine import ops
from .engine.optim import OPTIMIZERS, SGD, make_optimizer
from .engine.tensor import Tape, Tensor, backward
from .errors import AggregationError, ConfigError, ContractError, RoundError
from .losses import (FeatureMemory, SslConfig, barlow_loss, info_nce, simsiam_loss,
                     tico_loss, vicreg_loss)
from .model import ParamSet, forward_predictor, forward_projected

log = logging.getLogger(__name__)

SCHEMES = ("fedavg", "fedbn", "fedprox")


def client_stream(seed: int, client_id: int, round_idx: int) -> np.random.Generator:
    """Independent RNG stream for one client in one round."""
    return np.random.default_rng(np.random.SeedSequence([seed, client_id, round_idx]))


@dataclass(frozen=True)
class FedConfig:
    scheme: str = "fedavg"
    mu: float = 0.001
    participation: float = 1.0
    share_running_stats: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {', '.join(SCHEMES)}")
        if self.mu < 0:
            raise ConfigError("proximal weight mu must be non-negative")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation must lie in (0, 1]")


@dataclass(frozen=True)
class RoundPlan:
    local_epochs: int = 20
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; choose from {', '.join(OPTIMIZERS)}")
        if self.local_epochs < 1 or self.batch_size < 2:
            raise ConfigError("need local_epochs >= 1 and batch_size >= 2")


@dataclass
class ClientState:
    client_id: int
    params: ParamSet
    data: DatasetContainer
    optimizer: SGD = field(default_factory=SGD)
    memory: FeatureMemory = field(default_factory=FeatureMemory)

    @property
    def n_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class ClientUpdate:
    params: ParamSet
    n_samples: int
    client_id: int
    round: int

    def __post_init__(self):
        if self.n_samples <= 0:
            raise AggregationError(f"client {self.client_id} reported {self.n_samples} samples")


@dataclass
class ServerState:
    global_params: ParamSet
    round: int = 0
    history: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# aggregation


def _check_layout(updates: Sequence[ClientUpdate]) -> None:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ref = updates[0].params
    for u in updates[1:]:
        p = u.params
        if p.names() != ref.names():
            diff = sorted(set(p.names()) ^ set(ref.names()))
            raise AggregationError(f"client {u.client_id} name-set mismatch: {', '.join(diff) or 'ordering'}")
        bad = [n for n in ref if p[n].shape != ref[n].shape]
        if bad:
            raise AggregationError(f"client {u.client_id} shape mismatch: {', '.join(bad)}")


def _weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    first = arrays[0]
    if all(np.array_equal(a, first) for a in arrays[1:]):
        return first.copy()
    acc = weights[0] * arrays[0]
    for w, a in zip(weights[1:], arrays[1:]):
        acc = acc + w * a
    return acc


def aggregate_fedavg(updates: Sequence[ClientUpdate], names: Optional[Sequence[str]] = None) -> ParamSet:
    """Sample-count weighted average of every entry (BN included)."""
    _check_layout(updates)
    total = sum(u.n_samples for u in updates)
    weights = [u.n_samples / total for u in updates]
    ref = updates[0].params
    out = ParamSet(ref.arch, total)
    for name in ref:
        if names is None or name in names:
            value = _weighted_mean([u.params[name].data for u in updates], weights)
        else:
            value = ref[name].data.copy()
        out.add(name, Tensor(value, requires_grad=ref[name].requires_grad), ref.is_batchnorm(name))
    return out


def aggregate_fedbn(
    updates: Sequence[ClientUpdate],
    placeholder: Optional[ParamSet] = None,
) -> tuple[ParamSet, dict[int, ParamSet]]:
    """Average non-BN entries; BN entries stay with their clients.

    Returns the global set, whose BN entries are copied from ``placeholder``
    (or the first update) and are never broadcast, and each client's own BN
    entries keyed by client id.
    """
    _check_layout(updates)
    ref = updates[0].params
    non_bn = [n for n in ref if not ref.is_batchnorm(n)]
    merged = aggregate_fedavg(updates, names=non_bn)
    source = placeholder if placeholder is not None else ref
    for name in ref.bn_names():
        merged[name].data[...] = source[name].data
    local_bn = {}
    for u in updates:
        own = ParamSet(u.params.arch, u.n_samples)
        for name in u.params.bn_names():
            t = u.params[name]
            own.add(name, Tensor(t.data.copy(), requires_grad=t.requires_grad), True)
        local_bn[u.client_id] = own
    return merged, local_bn


def fedprox_penalty(local: ParamSet, anchor: ParamSet, mu: float) -> Tensor:
    """``(mu / 2) * sum ||w - w_t||^2`` over all entries; the anchor is a constant."""
    terms = []
    for name, t in local.items():
        a = anchor[name]
        if a.is_taped:
            raise ContractError(f"anchor entry {name} is on a tape; pass a detached snapshot")
        terms.append(ops.sum(ops.square(ops.sub(t, a.data))))
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return ops.scale(total, mu / 2.0)


# ---------------------------------------------------------------------------
# local training


def ssl_objective(params: ParamSet, view1, view2, ssl: SslConfig,
                  memory: FeatureMemory) -> tuple[Tensor, FeatureMemory]:
    """Loss for one batch of paired views (and the updated TiCo memory)."""
    z1 = forward_projected(params, view1, train=True)
    z2 = forward_projected(params, view2, train=True)
    m = ssl.method
    if m == "simclr":
        return info_nce(z1, z2, ssl.temperature), memory
    if m == "simsiam":
        p1 = forward_predictor(params, z1, train=True)
        p2 = forward_predictor(params, z2, train=True)
        return simsiam_loss(p1, p2, z1.detach(), z2.detach()), memory
    if m == "barlow":
        return barlow_loss(z1, z2, ssl.barlow_lambda), memory
    if m == "vicreg":
        return vicreg_loss(z1, z2, ssl.vicreg_inv, ssl.vicreg_var, ssl.vicreg_cov, ssl.vicreg_gamma), memory
    n1, n2 = ops.l2_normalize_rows(z1), ops.l2_normalize_rows(z2)
    return tico_loss(n1, n2, memory, ssl.tico_beta, ssl.tico_rho)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Consecutive batches; a trailing single sample joins the previous batch (BN needs >= 2)."""
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def local_train(
    client: ClientState,
    anchor: ParamSet,
    plan: RoundPlan,
    fed: FedConfig,
    ssl: SslConfig,
    round_idx: int,
) -> float:
    """Run ``plan.local_epochs`` epochs of SSL training; return the mean batch loss."""
    rng = client_stream(plan.seed, client.client_id, round_idx)
    client.optimizer = make_optimizer(plan.optimizer, plan.lr, plan.momentum)
    trainable = client.params.trainable()
    n = client.n_samples
    if n < 2:
        log.warning("client %d holds %d sample(s); skipping local training", client.client_id, n)
        return float("nan")
    losses = []
    for _ in range(plan.local_epochs):
        for idx in _batches(rng.permutation(n), plan.batch_size):
            v1, v2 = two_view_batch(client.data.floats(idx), plan.augment, rng)
            with Tape():
                loss, memory = ssl_objective(client.params, v1, v2, ssl, client.memory)
                if fed.scheme == "fedprox":
                    loss = ops.add(loss, fedprox_penalty(client.params, anchor, fed.mu))
                backward(loss)
            client.memory = memory
            client.optimizer.step(trainable)
            losses.append(loss.item())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# rounds


def select_clients(n_clients: int, participation: float, seed: int, round_idx: int) -> list[int]:
    if participation >= 1.0:
        return list(range(n_clients))
    count = max(1, math.ceil(participation * n_clients))
    rng = client_stream(seed, -1 % (2 ** 32), round_idx)
    return sorted(int(i) for i in rng.choice(n_clients, size=count, replace=False))


def shared_names(params: ParamSet, fed: FedConfig) -> list[str]:
    """Entries the server averages and broadcasts under ``fed``."""
    if fed.scheme == "fedbn":
        return [n for n in params if not params.is_batchnorm(n)]
    if not fed.share_running_stats:
        return [n for n in params if not n.endswith(("running_mean", "running_var"))]
    return params.names()


def broadcast(global_params: ParamSet, client: ClientState, fed: FedConfig) -> None:
    client.params.assign_from(global_params, shared_names(global_params, fed))


def run_round(
    server: ServerState,
    clients: Sequence[ClientState],
    plan: RoundPlan,
    fed: FedConfig,
    ssl: SslConfig,
    parallel: int = 0,
) -> ServerState:
    """Broadcast, train selected clients, aggregate; returns the next server state.

    ``parallel`` > 1 trains clients on that many worker threads. Any client
    failure aborts the round before aggregation.
    """
    t = server.round
    selected_ids = select_clients(len(clients), fed.participation, plan.seed, t)
    selected = [clients[i] for i in selected_ids]
    anchor = server.global_params.snapshot()
    for c in selected:
        broadcast(anchor, c, fed)

    def work(c: ClientState) -> float:
        try:
            return local_train(c, anchor, plan, fed, ssl, t)
        except Exception as exc:
            raise RoundError(f"round {t}: client {c.client_id} failed: {exc}") from exc

    if parallel and parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            losses = list(pool.map(work, selected))
    else:
        losses = [work(c) for c in selected]

    updates = [ClientUpdate(c.params.snapshot(), c.n_samples, c.client_id, t) for c in selected]
    if fed.scheme == "fedbn":
        new_global, _ = aggregate_fedbn(updates, placeholder=server.global_params)
    else:
        new_global = aggregate_fedavg(updates, names=shared_names(anchor, fed))
    # Every client now holds its post-round view: global weights (own BN under FedBN).
    for c in clients:
        broadcast(new_global, c, fed)

    summary = {
        "round": t,
        "clients": selected_ids,
        "n_total": int(sum(u.n_samples for u in updates)),
        "mean_loss": {str(c.client_id): loss for c, loss in zip(selected, losses)},
    }
    return ServerState(new_global, t + 1, server.history + [summary])
