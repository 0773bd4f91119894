"""Federated rounds: partitioned broadcast, regularized local SGD, weighted averaging.

One round, for every client in ascending id order:

1. copy the server's GLOBAL-tagged entries into the client (LOCAL ones stay);
2. run E epochs of minibatch SGD on the client's data;

then replace the server model by the dataset-size weighted average of *all*
client entries, LOCAL ones included.  The classifier head used by the
guiding regularizer is the server head captured at the start of the round.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateWeightsError, RoundError, SchemaError
from .model import GLOBAL, LOCAL

NONE, GUIDING, PROX = "NONE", "GUIDING", "PROX"


@dataclass(frozen=True)
class Regularizer:
    kind: str = NONE
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in (NONE, GUIDING, PROX):
            raise ConfigurationError(f"unknown regularizer {self.kind!r}")
        if self.kind == GUIDING and not 0.0 <= self.weight:
            raise ConfigurationError(f"guiding weight must be >= 0, got {self.weight}")
        if self.kind == PROX and not self.weight > 0:
            raise ConfigurationError(f"proximal mu must be > 0, got {self.weight}")

    @classmethod
    def none(cls):
        return cls(NONE, 0.0)

    @classmethod
    def guiding(cls, lam):
        return cls(GUIDING, float(lam))

    @classmethod
    def prox(cls, mu):
        return cls(PROX, float(mu))

    @property
    def label(self):
        if self.kind == NONE:
            return "NONE"
        return f"{self.kind}({self.weight:g})"


class ParamPartition(dict):
    """name -> GLOBAL | LOCAL for every registry entry."""

    @classmethod
    def from_model(cls, model):
        return cls(model.tags)

    @classmethod
    def all_global(cls, model):
        return cls({n: GLOBAL for n in model.params})

    def local(self):
        return [n for n, t in self.items() if t == LOCAL]

    def global_(self):
        return [n for n, t in self.items() if t == GLOBAL]


@dataclass
class ClientState:
    client_id: int
    model: object
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    rng: np.random.Generator

    @property
    def dataset_size(self):
        return len(self.train_y)


@dataclass
class ClientLog:
    round: int
    client_id: int
    train_loss: float
    reg_loss: float
    val_acc: float


@dataclass
class RoundLog:
    round: int
    clients: list
    mean_val_acc: float
    head_used: tuple = None
    params: dict = None
    sent: dict = field(default_factory=dict)
    received: dict = field(default_factory=dict)


@dataclass
class ServerState:
    global_model: object
    total_rounds: int
    round: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.round > self.total_rounds:
            raise ValueError(f"round {self.round} exceeds total rounds {self.total_rounds}")


def check_schema(reference, other):
    """Raise :class:`SchemaError` naming the first entry where two registries differ."""
    a, b = list(reference.params.items()), list(other.params.items())
    for (na, va), (nb, vb) in zip(a, b):
        if na != nb:
            raise SchemaError(f"registry entry {na!r} vs {nb!r}")
        if va.shape != vb.shape:
            raise SchemaError(f"registry entry {na!r}: shape {va.shape} vs {vb.shape}")
    if len(a) != len(b):
        first = (a if len(a) > len(b) else b)[min(len(a), len(b))][0]
        raise SchemaError(f"registry entry {first!r} present on one side only")


def broadcast(server, client, partition):
    """Overwrite the client's GLOBAL entries with the server's; returns values sent."""
    check_schema(server.global_model, client.model)
    sent = 0
    for name, tag in partition.items():
        if tag == GLOBAL:
            value = server.global_model.params[name]
            client.model.params[name] = value.copy()
            sent += value.size
    return sent


def prox_penalty(leaves, anchor, mu):
    """``mu/2 * sum ||theta - anchor||^2`` over the given leaves."""
    total = None
    for name, leaf in leaves.items():
        term = T.tsum(T.square(T.sub(leaf, anchor[name])))
        total = term if total is None else T.add(total, term)
    return T.mul(total, 0.5 * mu)


def local_loss(model, leaves, xb, yb, reg, global_head=None, anchor=None, reduction="sum"):
    """Classification loss plus the chosen regularizer; returns (total, cls, reg) tensors."""
    feats = model.features(xb, "train", leaves)
    cls = T.cross_entropy(model.head(feats, leaves), yb, reduction)
    if reg.kind == GUIDING:
        head_w, head_b = global_head
        extra = T.cross_entropy(T.linear(feats, T.Tensor(head_w), T.Tensor(head_b)), yb, reduction)
        return T.add(cls, T.mul(extra, reg.weight)), cls, extra
    if reg.kind == PROX:
        extra = prox_penalty(leaves, anchor, reg.weight)
        return T.add(cls, extra), cls, extra
    return cls, cls, None


def local_train(client, reg, global_head=None, global_snapshot=None, epochs=1, lr=2e-3,
                batch_size=32, reduction="sum"):
    """E epochs of minibatch SGD on the client's training set.

    ``global_head`` is a (weight, bias) pair used read-only by GUIDING;
    ``global_snapshot`` maps names to anchor values for PROX.  Returns the
    client together with the mean per-sample classification and
    regularizer losses of the last epoch.
    """
    if reg.kind == GUIDING and global_head is None:
        raise ConfigurationError("GUIDING regularizer needs the global head")
    if reg.kind == PROX and global_snapshot is None:
        raise ConfigurationError("PROX regularizer needs a global parameter snapshot")
    if batch_size < 1 or epochs < 0:
        raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
    model = client.model
    buffers = [n for n in model.params if n not in model.trainable]
    n = client.dataset_size
    cls_total = reg_total = 0.0
    for _ in range(epochs):
        order = client.rng.permutation(n)
        cls_total = reg_total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            leaves = model.leaves()
            loss, cls, extra = local_loss(model, leaves, client.train_x[idx], client.train_y[idx],
                                          reg, global_head, global_snapshot, reduction)
            scale = len(idx) if reduction == "mean" else 1.0
            cls_total += cls.item() * scale
            if extra is not None:
                reg_total += extra.item() * (scale if reg.kind == GUIDING else 1.0)
            grads = T.backward(loss, leaves)
            T.sgd_step(model.params, grads, lr, frozen=buffers)
    per = max(n, 1)
    return client, cls_total / per, reg_total / per


def aggregate(clients):
    """Dataset-size weighted average of every registry entry.

    Accumulates in ascending ``client_id`` order so the result is bitwise
    reproducible regardless of how the list is ordered.
    """
    if not clients:
        raise DegenerateWeightsError("no clients to aggregate")
    ordered = sorted(clients, key=lambda c: c.client_id)
    total = sum(c.dataset_size for c in ordered)
    if total <= 0:
        raise DegenerateWeightsError("total dataset size is zero")
    ref = ordered[0].model
    for c in ordered[1:]:
        check_schema(ref, c.model)
    out = {name: np.zeros_like(value) for name, value in ref.params.items()}
    for c in ordered:
        w = c.dataset_size / total
        for name in out:
            out[name] += w * c.model.params[name]
    return out


def run_rounds(server, clients, partition, reg, rounds, epochs=1, lr=2e-3, batch_size=32,
               reduction="sum", on_round=None, keep_params=False):
    """Run ``rounds`` federated rounds, mutating ``server`` and ``clients``.

    ``on_round(server, log)`` is called after every aggregation.
    """
    if server.round + rounds > server.total_rounds:
        raise ValueError(f"{rounds} more rounds would pass total_rounds={server.total_rounds}")
    for c in clients:
        check_schema(server.global_model, c.model)
    ordered = sorted(clients, key=lambda c: c.client_id)
    for _ in range(rounds):
        t = server.round + 1
        head = server.global_model.head_snapshot()
        logs, sent, received = [], {}, {}
        for c in ordered:
            try:
                sent[c.client_id] = broadcast(server, c, partition)
                anchor = None
                if reg.kind == PROX:
                    anchor = {n: c.model.params[n].copy() for n in c.model.trainable}
                _, cls_loss, reg_loss = local_train(c, reg, head, anchor, epochs, lr, batch_size, reduction)
            except Exception as exc:
                raise RoundError(t, c.client_id, exc) from exc
            received[c.client_id] = c.model.num_params()
            logs.append([c.client_id, cls_loss, reg_loss])
        server.global_model.params = aggregate(ordered)
        server.round = t
        val = {c.client_id: server.global_model.accuracy(c.val_x, c.val_y) for c in ordered}
        client_logs = [ClientLog(t, cid, cl, rl, val[cid]) for cid, cl, rl in logs]
        log = RoundLog(t, client_logs, float(np.mean(list(val.values()))),
                       head_used=head,
                       params={k: v.copy() for k, v in server.global_model.params.items()} if keep_params else None,
                       sent=sent, received=received)
        server.history.append(log)
        if on_round is not None:
            on_round(server, log)
    return server
