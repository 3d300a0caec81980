"""Bilevel episodic optimizer: inner-loop adaptation with learnable per-layer
step sizes, a multi-step target loss, second- or first-order meta-gradients,
and an outer loop of decoupled-weight-decay Adam under a cosine schedule with
top-5 checkpoint tracking and early stopping.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Callable

import numpy as np

from .data import Episode, EpisodeError, SiteTable, sample_episode
from .models import Batch, ModelSpec, forward, init_params
from .tensor import (
    NonFiniteError,
    ParamSet,
    Tensor,
    add,
    bce_with_logits,
    grad,
    parameter,
    scalar_mul,
    scale,
    sigmoid,
    sub,
)

LossFn = Callable[[ParamSet, Batch], Tensor]

LR_FLOOR = 1e-8


@dataclass(frozen=True)
class MetaConfig:
    """All meta-learning hyperparameters.

    Defaults follow the selected episode sizes (1 site, 20 support, 10 target
    per site) and the outer-loop recipe of Adam with 1e-4 decoupled weight
    decay under a cosine schedule; the inner loop runs 5 steps so the
    multi-step loss is non-trivial.
    """

    n_sites_per_episode: int = 1
    k_support: int = 20
    t_target: int = 10
    inner_steps: int = 5
    inner_lr_init: float = 0.2
    meta_lr: float = 2e-3
    weight_decay: float = 1e-4
    order: str = "second"
    msl_anneal_epochs: int = 60
    max_epochs: int = 40
    early_stop_patience: int = 12
    episodes_per_epoch: int = 50
    val_episodes: int = 10
    lr_rule_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.order not in ("second", "first"):
            raise ValueError(f"order must be 'second' or 'first', got {self.order!r}")
        if self.inner_steps < 1:
            raise ValueError(f"inner_steps must be >= 1, got {self.inner_steps}")
        for name in ("inner_lr_init", "meta_lr", "lr_rule_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.msl_anneal_epochs < 0:
            raise ValueError("weight_decay and msl_anneal_epochs must be non-negative")
        for name in ("n_sites_per_episode", "k_support", "t_target", "max_epochs",
                     "episodes_per_epoch", "val_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError(
                f"early_stop_patience must lie in [1, max_epochs], got {self.early_stop_patience}"
            )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "MetaConfig":
        return cls(**json.loads(blob))


class LearnableLRTable:
    """One positive inner-loop step size per parameter tensor per inner step."""

    def __init__(self, param_names, inner_steps: int, init_rate: float):
        if init_rate <= 0:
            raise ValueError(f"initial rate must be positive, got {init_rate}")
        self.inner_steps = int(inner_steps)
        self._names = tuple(param_names)
        self._rates: dict[str, list[Tensor]] = {
            name: [parameter(float(init_rate)) for _ in range(self.inner_steps)]
            for name in self._names
        }

    @classmethod
    def from_values(cls, values: dict[str, np.ndarray]) -> "LearnableLRTable":
        names = tuple(values)
        steps = len(next(iter(values.values())))
        table = cls.__new__(cls)
        table.inner_steps = steps
        table._names = names
        table._rates = {
            name: [parameter(float(v)) for v in np.asarray(values[name], dtype=np.float64)]
            for name in names
        }
        return table

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def rate(self, name: str, step: int) -> Tensor:
        return self._rates[name][step]

    def as_named_tensors(self) -> list[tuple[str, Tensor]]:
        return [
            (f"lr:{name}#{s}", self._rates[name][s])
            for name in self._names
            for s in range(self.inner_steps)
        ]

    def values(self) -> dict[str, np.ndarray]:
        return {
            name: np.array([float(t.data) for t in steps])
            for name, steps in self._rates.items()
        }

    def updated(self, grads: ParamSet, rule_rate: float) -> "LearnableLRTable":
        """Plain-SGD step on every rate, clamped strictly positive."""
        new_values = {}
        for name in self._names:
            row = np.empty(self.inner_steps)
            for s in range(self.inner_steps):
                g = float(grads[f"lr:{name}#{s}"].data)
                row[s] = max(float(self._rates[name][s].data) - rule_rate * g, LR_FLOOR)
            new_values[name] = row
        return LearnableLRTable.from_values(new_values)


@dataclass
class AdaptationTrace:
    """Per-step parameters (theta^0 .. theta^S) and target losses of one episode."""

    params_per_step: list[ParamSet]
    target_loss_per_step: list[float]


@dataclass
class OuterState:
    """Adam moment estimates plus step/epoch counters for the outer loop."""

    step: int
    epoch: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def fresh(cls, params: ParamSet) -> "OuterState":
        return cls(
            step=0,
            epoch=0,
            m={name: np.zeros(t.shape) for name, t in params.items()},
            v={name: np.zeros(t.shape) for name, t in params.items()},
        )


def cosine_lr(base: float, epoch: int, max_epochs: int) -> float:
    frac = min(max(epoch, 0), max_epochs) / max_epochs
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


def msl_weights(epoch: int, inner_steps: int, anneal_epochs: int) -> np.ndarray:
    """Multi-step loss weights: uniform at epoch 0, linearly annealing until
    only the final step carries weight."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if inner_steps < 1:
        raise ValueError(f"inner_steps must be >= 1, got {inner_steps}")
    r = 1.0 if anneal_epochs <= 0 else min(1.0, epoch / anneal_epochs)
    w = np.full(inner_steps, (1.0 - r) / inner_steps)
    w[-1] += r
    return w


def batch_loss(spec: ModelSpec, params: ParamSet, batch: Batch) -> Tensor:
    return bce_with_logits(forward(spec, params, batch), batch.labels)


def inner_adapt(
    spec: ModelSpec,
    params: ParamSet,
    support: Batch,
    lr_table: LearnableLRTable,
    step: int,
    order: str = "second",
    loss_fn: LossFn | None = None,
) -> ParamSet:
    """One inner-loop step: theta' = theta - lr[layer][step] * grad(support loss).

    With ``order='second'`` the returned parameters stay differentiable
    through the gradient itself; with ``order='first'`` the gradient is
    detached and only the direct dependence on theta survives.
    """
    if loss_fn is None:
        loss_fn = lambda p, b: batch_loss(spec, p, b)
    try:
        loss = loss_fn(params, support)
        grads = grad(loss, params, create_graph=(order == "second"))
    except NonFiniteError as exc:
        raise NonFiniteError(f"inner step {step}: {exc}") from exc
    return params.zip_map(grads, lambda name, theta, g: sub(theta, scale(g, lr_table.rate(name, step))))


def episode_loss(
    spec: ModelSpec,
    meta_params: ParamSet,
    episode: Episode,
    lr_table: LearnableLRTable,
    config: MetaConfig,
    epoch: int = 0,
    loss_fn: LossFn | None = None,
) -> tuple[Tensor, AdaptationTrace]:
    """Adapt on the support set for ``inner_steps`` steps, scoring the target
    set after every step; returns the weighted multi-step loss, differentiable
    with respect to the meta-parameters and the LR table per ``config.order``."""
    if loss_fn is None:
        loss_fn = lambda p, b: batch_loss(spec, p, b)
    weights = msl_weights(epoch, config.inner_steps, config.msl_anneal_epochs)
    params_per_step = [meta_params]
    target_losses: list[float] = []
    total: Tensor | None = None
    current = meta_params
    for s in range(config.inner_steps):
        current = inner_adapt(spec, current, episode.support, lr_table, s, config.order, loss_fn)
        params_per_step.append(current)
        try:
            step_loss = loss_fn(current, episode.target)
        except NonFiniteError as exc:
            raise NonFiniteError(f"target loss at inner step {s}: {exc}") from exc
        target_losses.append(float(step_loss.data))
        term = scalar_mul(step_loss, float(weights[s]))
        total = term if total is None else add(total, term)
    assert total is not None
    return total, AdaptationTrace(params_per_step, target_losses)


def meta_step(
    spec: ModelSpec,
    meta_params: ParamSet,
    lr_table: LearnableLRTable,
    episode_batch: list[Episode],
    config: MetaConfig,
    outer_state: OuterState,
    loss_fn: LossFn | None = None,
) -> tuple[ParamSet, LearnableLRTable, OuterState, float]:
    """One outer update: mean episode loss backpropagated to theta and the LR
    table; theta takes a decoupled-weight-decay Adam step at the cosine rate,
    the LR table takes its own plain-SGD step. A non-finite loss or gradient
    aborts before any state is produced."""
    if not episode_batch:
        raise ValueError("episode batch must be non-empty")
    total: Tensor | None = None
    for ep in episode_batch:
        loss, _ = episode_loss(spec, meta_params, ep, lr_table, config,
                               epoch=outer_state.epoch, loss_fn=loss_fn)
        total = loss if total is None else add(total, loss)
    total = scalar_mul(total, 1.0 / len(episode_batch))
    loss_value = float(total.data)
    if not np.isfinite(loss_value):
        raise NonFiniteError("episode batch loss is not finite")

    combined = ParamSet(list(meta_params.items()) + lr_table.as_named_tensors())
    grads = grad(total, combined)

    lr_now = cosine_lr(config.meta_lr, outer_state.epoch, config.max_epochs)
    t = outer_state.step + 1
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    new_m, new_v, new_pairs = {}, {}, []
    for name, theta in meta_params.items():
        g = grads[name].data
        m = beta1 * outer_state.m[name] + (1.0 - beta1) * g
        v = beta2 * outer_state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        stepped = theta.data - lr_now * (m_hat / (np.sqrt(v_hat) + eps)) \
            - lr_now * config.weight_decay * theta.data
        new_m[name], new_v[name] = m, v
        new_pairs.append((name, stepped))

    new_params = ParamSet.from_arrays(new_pairs, tracked=True)
    new_table = lr_table.updated(grads, config.lr_rule_rate)
    new_state = OuterState(step=t, epoch=outer_state.epoch, m=new_m, v=new_v)
    return new_params, new_table, new_state, loss_value


@dataclass
class CheckpointEntry:
    """One recorded meta-model: validation score, epoch, and a frozen snapshot."""

    score: float
    epoch: int
    spec: ModelSpec
    params: dict[str, np.ndarray]
    lr_values: dict[str, np.ndarray]
    config: MetaConfig

    def param_set(self) -> ParamSet:
        return ParamSet.from_arrays(
            ((name, arr.copy()) for name, arr in self.params.items()), tracked=True
        )

    def lr_table(self) -> LearnableLRTable:
        return LearnableLRTable.from_values({k: v.copy() for k, v in self.lr_values.items()})


class CheckpointRing:
    """The top-``capacity`` models by validation score, ties broken by the
    earlier epoch."""

    capacity = 5

    def __init__(self):
        self.entries: list[CheckpointEntry] = []

    def add(self, entry: CheckpointEntry) -> None:
        self.entries.append(entry)
        self.entries.sort(key=lambda e: (-e.score, e.epoch))
        del self.entries[self.capacity:]

    def best(self) -> CheckpointEntry:
        if not self.entries:
            raise ValueError("checkpoint ring is empty")
        return self.entries[0]

    def __len__(self) -> int:
        return len(self.entries)


def _snapshot(score, epoch, spec, params, lr_table, config) -> CheckpointEntry:
    return CheckpointEntry(
        score=float(score),
        epoch=int(epoch),
        spec=spec,
        params={name: t.data.copy() for name, t in params.items()},
        lr_values=lr_table.values(),
        config=config,
    )


def adapt(
    spec: ModelSpec,
    params: ParamSet,
    support: Batch,
    lr_table: LearnableLRTable,
    inner_steps: int,
    loss_fn: LossFn | None = None,
) -> ParamSet:
    """Evaluation-time adaptation: the inner-loop rule without graph retention."""
    current = params
    for s in range(inner_steps):
        current = inner_adapt(spec, current, support, lr_table, s, "first", loss_fn)
    return current.detach()


def predict_probs(spec: ModelSpec, params: ParamSet, batch: Batch) -> np.ndarray:
    return sigmoid(forward(spec, params, batch)).data.copy()


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auc: float
    outer_lr: float


def write_log_csv(path: str, log: list[EpochStats]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_auc,outer_lr\n")
        for row in log:
            fh.write(f"{row.epoch},{row.train_loss:.10g},{row.val_auc:.10g},{row.outer_lr:.10g}\n")


def _validation_auc(table, spec, params, lr_table, config, rng) -> float:
    from .metrics import roc_auc

    scores: list[float] = []
    labels: list[float] = []
    for _ in range(config.val_episodes):
        ep = sample_episode(table, "meta_val", config.n_sites_per_episode,
                            config.k_support, config.t_target, rng)
        adapted = adapt(spec, params, ep.support, lr_table, config.inner_steps)
        probs = predict_probs(spec, adapted, ep.target)
        scores.extend(probs.tolist())
        labels.extend(ep.target.labels.data.tolist())
    return roc_auc(scores, labels)


def meta_train(
    table: SiteTable,
    spec: ModelSpec,
    config: MetaConfig,
) -> tuple[CheckpointRing, list[EpochStats]]:
    """Run the full episodic training loop.

    Each epoch takes ``episodes_per_epoch`` outer steps on meta-train sites
    (one episode per step), then scores ``val_episodes`` adaptation episodes
    on the validation slices and records the model in the checkpoint ring.
    Stops at ``max_epochs`` or when validation ROC-AUC has not improved for
    ``early_stop_patience`` consecutive epochs. A non-finite step is skipped
    with the previous state kept; two consecutive skips end training. The
    returned log always reflects the epochs actually completed.
    """
    if not table.role_sites("meta_train") or not table.role_sites("meta_val"):
        raise ValueError("table must populate the meta_train and meta_val roles")
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, config.seed)
    lr_table = LearnableLRTable(params.names, config.inner_steps, config.inner_lr_init)
    state = OuterState.fresh(params)
    ring = CheckpointRing()
    log: list[EpochStats] = []
    best = -np.inf
    stale = 0
    aborted_in_a_row = 0

    for epoch in range(config.max_epochs):
        state = replace(state, epoch=epoch)
        losses: list[float] = []
        stop_now = False
        for _ in range(config.episodes_per_epoch):
            try:
                batch = [
                    sample_episode(table, "meta_train", config.n_sites_per_episode,
                                   config.k_support, config.t_target, rng)
                ]
                params, lr_table, state, loss_value = meta_step(
                    spec, params, lr_table, batch, config, state
                )
            except NonFiniteError:
                aborted_in_a_row += 1
                if aborted_in_a_row >= 2:
                    stop_now = True
                    break
                continue
            except EpisodeError:
                # impossible to sample from this table at all: nothing partial
                # to keep unless an earlier epoch completed
                if not log:
                    raise
                stop_now = True
                break
            aborted_in_a_row = 0
            losses.append(loss_value)
        if stop_now:
            break

        val_auc = _validation_auc(table, spec, params, lr_table, config, rng)
        ring.add(_snapshot(val_auc, epoch, spec, params, lr_table, config))
        log.append(EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_auc=val_auc,
            outer_lr=cosine_lr(config.meta_lr, epoch, config.max_epochs),
        ))
        if val_auc > best:
            best = val_auc
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                break
    return ring, log


# ---------------------------------------------------------------------------
# checkpoint file: magic, version, entry count, then per entry the model spec
# plan, config snapshot, parameters, LR table, score and epoch

_CKPT_MAGIC = b"SMCK"
_CKPT_VERSION = 1


def save_ring(path: str, ring: CheckpointRing) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<QQ", _CKPT_VERSION, len(ring.entries)))
        for entry in ring.entries:
            _write_entry(fh, entry)


def load_ring(path: str) -> CheckpointRing:
    ring = CheckpointRing()
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, count = struct.unpack("<QQ", fh.read(16))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            ring.entries.append(_read_entry(fh))
    return ring


def _write_entry(fh: BinaryIO, entry: CheckpointEntry) -> None:
    from .tensor import write_named_array, write_paramset

    fh.write(struct.pack("<dQ", entry.score, entry.epoch))
    plan = entry.spec.to_plan()
    fh.write(struct.pack("<Q", len(plan)))
    for x in plan:
        fh.write(struct.pack("<Q", x))
    blob = entry.config.to_json().encode("utf-8")
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    write_paramset(fh, ParamSet.from_arrays(entry.params.items(), tracked=False))
    fh.write(struct.pack("<Q", len(entry.lr_values)))
    for name in entry.lr_values:
        write_named_array(fh, name, entry.lr_values[name])


def _read_entry(fh: BinaryIO) -> CheckpointEntry:
    from .tensor import read_named_array, read_paramset

    score, epoch = struct.unpack("<dQ", fh.read(16))
    plan_len = struct.unpack("<Q", fh.read(8))[0]
    plan = [struct.unpack("<Q", fh.read(8))[0] for _ in range(plan_len)]
    blob_len = struct.unpack("<Q", fh.read(8))[0]
    config = MetaConfig.from_json(fh.read(blob_len).decode("utf-8"))
    params = read_paramset(fh, tracked=False)
    lr_count = struct.unpack("<Q", fh.read(8))[0]
    lr_values = dict(read_named_array(fh) for _ in range(lr_count))
    return CheckpointEntry(
        score=score,
        epoch=int(epoch),
        spec=ModelSpec.from_plan(plan),
        params=dict(params.as_arrays()),
        lr_values=lr_values,
        config=config,
    )
