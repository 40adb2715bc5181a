"""Regularized training and task-sequence orchestration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import importance as imp
from .analysis import SequenceReport, compute_forgetting, memory_account, omega_summary
from .errors import ConfigError, ShapeError
from .nn import (CROSS_ENTROPY, IDENTITY, L2_REGRESSION, FlatParams, Network, forward,
                 init_network, loss_and_grad, loss_value, sgd_step)
from .tasks import CLASSIFICATION, EMBEDDING, Dataset, TaskSpec

log = logging.getLogger(__name__)

FINETUNE = "finetune"
JOINT = "joint"
METHODS = (FINETUNE, imp.MAS_GLOBAL, imp.MAS_VECTOR, imp.L_MAS, imp.EWC, imp.SI, imp.L2)
METHOD_ALIASES = {"mas": imp.MAS_GLOBAL, "lmas": imp.L_MAS, "hebbian": imp.L_MAS}
SOURCES = ("train", "test", "train+test", "custom-subset", "none")
PENALTY_STEPS = ("implicit", "explicit")


def canonical_method(tag: str) -> str:
    tag = METHOD_ALIASES.get(tag, tag)
    if tag not in METHODS + (JOINT,):
        raise ConfigError(f"unknown method {tag!r}; valid: {sorted(METHODS + (JOINT,) + tuple(METHOD_ALIASES))}")
    return tag


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 200
    lr: float = 0.1
    seed: int = 0
    importance_source: str = "train"
    method: str = imp.MAS_GLOBAL
    lam: float = 1.0
    hidden: tuple[int, ...] = (128, 128)
    merge: str = imp.MERGE_SUM
    si_xi: float = 0.1
    penalty_step: str = "implicit"

    def __post_init__(self):
        self.method = canonical_method(self.method)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.importance_source not in SOURCES:
            raise ConfigError(f"importance_source must be one of {SOURCES}")
        if self.penalty_step not in PENALTY_STEPS:
            raise ConfigError(f"penalty_step must be one of {PENALTY_STEPS}")
        if self.merge not in (imp.MERGE_SUM, imp.MERGE_MEAN):
            raise ConfigError(f"merge must be 'sum' or 'mean', got {self.merge!r}")


@dataclass
class PenaltyState:
    """Quadratic anchor ``lam * sum_trunk omega * (theta - theta_star)^2``."""

    theta_star: FlatParams
    omega: FlatParams
    lam: float

    def __post_init__(self):
        self.theta_star.check_layout(self.omega)
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if np.any(self.omega.values[~self.omega.trunk_mask] != 0):
            raise ValueError("penalty omega must be zero outside the trunk")

    def value_and_grad(self, theta: FlatParams) -> tuple[float, np.ndarray]:
        theta.check_layout(self.theta_star)
        d = theta.values - self.theta_star.values
        w = self.omega.values
        return float(self.lam * np.sum(w * d * d)), 2.0 * self.lam * w * d

    def prox(self, theta: FlatParams, lr: float) -> FlatParams:
        """Exact minimizer of ``|t - theta|^2 / (2 lr) + penalty(t)``.

        Stable for any ``lam * omega``, where an explicit gradient step on the
        penalty diverges once ``2 lr lam omega > 2``.
        """
        theta.check_layout(self.theta_star)
        c = 2.0 * lr * self.lam * self.omega.values
        return FlatParams((theta.values + c * self.theta_star.values) / (1.0 + c), theta.layout)


def _task_objective(loss: str) -> str:
    return CROSS_ENTROPY if loss == CLASSIFICATION else L2_REGRESSION


@dataclass
class LossParts:
    task_value: float
    task_grad: FlatParams
    penalty_value: float
    grad: FlatParams

    @property
    def value(self) -> float:
        return self.task_value + self.penalty_value


def loss_parts(net: Network, x, targets, head: str | None, loss: str,
               penalty: PenaltyState | None = None) -> LossParts:
    task_value, task_grad = loss_and_grad(net, x, _task_objective(loss), targets, head)
    if penalty is None:
        return LossParts(task_value, task_grad, 0.0, task_grad)
    theta = net.flatten()
    pval, pgrad = penalty.value_and_grad(theta)
    return LossParts(task_value, task_grad, pval, FlatParams(task_grad.values + pgrad, theta.layout))


def regularized_loss(net: Network, x, targets, head: str | None, loss: str,
                     penalty: PenaltyState | None = None) -> tuple[float, FlatParams]:
    """Task loss plus importance-weighted drift penalty, with its exact gradient."""
    parts = loss_parts(net, x, targets, head, loss, penalty)
    return parts.value, parts.grad


# -- evaluation ---------------------------------------------------------------

def predict(net: Network, x, head: str | None) -> np.ndarray:
    return forward(net, x, head)


def evaluate(net: Network, task: TaskSpec, ds: Dataset | None = None) -> float:
    """Classification accuracy, or nearest-target retrieval accuracy for embeddings."""
    ds = task.eval if ds is None else ds
    out = predict(net, ds.inputs, task.head)
    if task.loss == CLASSIFICATION:
        return float(np.mean(np.argmax(out, axis=1) == ds.labels))
    t = ds.labels
    d2 = (out ** 2).sum(1)[:, None] - 2.0 * out @ t.T + (t ** 2).sum(1)[None, :]
    return float(np.mean(np.argmin(d2, axis=1) == np.arange(len(ds))))


def eval_loss(net: Network, task: TaskSpec, ds: Dataset | None = None) -> float:
    ds = task.eval if ds is None else ds
    return loss_value(net, ds.inputs, _task_objective(task.loss), ds.labels, task.head)


# -- training -------------------------------------------------------------------

@dataclass
class EpochLog:
    task: str
    epoch: int
    task_loss: float
    penalty: float
    train_metric: float


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_task(net: Network, task: TaskSpec, cfg: TrainConfig, penalty: PenaltyState | None = None,
               si: imp.SiAccumulator | None = None, stream: int = 0
               ) -> tuple[Network, list[EpochLog], imp.SiAccumulator | None]:
    """SGD on the regularized loss; returns a trained copy of ``net``.

    With ``cfg.penalty_step == "implicit"`` each step is an SGD step on the
    task loss followed by the exact proximal step of the penalty (see
    :meth:`PenaltyState.prox`); ``"explicit"`` takes a plain gradient step on
    the sum.

    Only the trunk and the task's own head receive gradient, so other heads
    stay bit-identical. When ``si`` is given it is advanced after every step
    with the task-loss gradient and the realized parameter change.
    """
    if len(task.train) == 0:
        raise ConfigError(f"task {task.name!r} has an empty training set")
    if task.train.labels is None:
        raise ConfigError(f"task {task.name!r} has no training labels")
    if task.head is not None and task.head not in net.heads:
        raise KeyError(f"network has no head {task.head!r}")
    net = net.copy()
    rng = np.random.default_rng([cfg.seed, stream])
    x_all, y_all = task.train.inputs, task.train.labels
    theta = net.flatten()
    if penalty is not None and penalty.lam == 0:
        penalty = None
    implicit = penalty is not None and cfg.penalty_step == "implicit"
    logs = []
    for epoch in range(cfg.epochs):
        tl = pv = 0.0
        nb = 0
        for idx in _batches(len(task.train), cfg.batch_size, rng):
            parts = loss_parts(net, x_all[idx], y_all[idx], task.head, task.loss, penalty)
            if implicit:
                new = penalty.prox(sgd_step(theta, parts.task_grad, cfg.lr), cfg.lr)
            else:
                new = sgd_step(theta, parts.grad, cfg.lr)
            if si is not None:
                si = imp.si_step(si, parts.task_grad,
                                 FlatParams(new.values - theta.values, theta.layout))
            theta = new
            net.load_flat(theta)
            tl += parts.task_value
            pv += parts.penalty_value
            nb += 1
        logs.append(EpochLog(task.name, epoch, tl / nb, pv / nb, evaluate(net, task, task.train)))
        log.debug("%s epoch %d loss %.4f penalty %.4f", task.name, epoch, tl / nb, pv / nb)
    return net, logs, si


def importance_source_set(task: TaskSpec, source: str) -> Dataset:
    if source == "train":
        return task.train
    if source == "test":
        return task.eval
    if source == "train+test":
        return task.train.concat(task.eval)
    if source == "custom-subset":
        if task.importance_set is None or len(task.importance_set) == 0:
            raise ConfigError(f"task {task.name!r} has no importance subset")
        return task.importance_set
    raise ConfigError(f"importance source {source!r} selects no data")


def estimate_importance_phase(net: Network, task: TaskSpec, cfg: TrainConfig) -> imp.ImportanceMap:
    """Per-task importance over the configured point set, after training.

    Labels are removed before the data reaches the unsupervised estimators;
    only EWC reads them.
    """
    method = cfg.method
    if method == imp.L2:
        return imp.uniform_importance(net.layout)
    if method in (FINETUNE, imp.SI, JOINT):
        raise ConfigError(f"method {method!r} has no separate importance phase")
    ds = importance_source_set(task, cfg.importance_source)
    if method == imp.EWC:
        if task.loss != CLASSIFICATION:
            raise imp.UnsupportedObjectiveError("EWC needs a classification task")
        labels = ds.labels
        if labels is None:
            raise ConfigError("EWC needs labeled importance data")
    x = ds.unlabeled().inputs
    imap = imp.ImportanceMap.empty(net.layout, method)
    for start in range(0, len(x), cfg.batch_size):
        xb = x[start:start + cfg.batch_size]
        if method == imp.MAS_GLOBAL:
            imap = imp.mas_update(imap, net, xb, task.head)
        elif method == imp.MAS_VECTOR:
            imap = imp.mas_update_vector_output(imap, net, xb, task.head)
        elif method == imp.L_MAS:
            imap = imp.hebbian_update(imap, net, xb)
        else:
            imap = imp.ewc_fisher_update(imap, net, xb, labels[start:start + cfg.batch_size], task.head)
    return imap


def build_network(tasks: Sequence[TaskSpec], hidden: Sequence[int], seed: int) -> Network:
    """Trunk of ``hidden`` ReLU layers plus one linear head per task.

    When no task names a head, every layer is shared: the trunk ends with a
    linear layer of the common output width (embedding tasks, or
    classification with a single shared output layer).
    """
    d = tasks[0].train.dim
    if any(t.train.dim != d for t in tasks):
        raise ShapeError("all tasks in a sequence must share the input width")
    if all(t.head is None for t in tasks):
        widths = {t.output_dim for t in tasks}
        if len(widths) != 1:
            raise ShapeError("headless tasks must share the output width")
        return init_network([d, *hidden, widths.pop()], seed=seed, last_trunk_activation=IDENTITY)
    if any(t.head is None for t in tasks):
        raise ConfigError("cannot mix headless and headed tasks in one sequence")
    heads: dict[str, list[int]] = {}
    for t in tasks:
        if t.head in heads and heads[t.head] != [t.output_dim]:
            raise ShapeError(f"head {t.head!r} declared with two widths")
        heads[t.head] = [t.output_dim]
    return init_network([d, *hidden], heads, seed=seed)


@dataclass
class SequenceState:
    """Live structures at the end of a run (not serialized with the report)."""

    network: Network
    penalty: PenaltyState | None
    importance: imp.ImportanceMap | None
    si: imp.SiAccumulator | None = None
    logs: list[EpochLog] = field(default_factory=list)


def run_sequence(tasks: Sequence[TaskSpec], cfg: TrainConfig,
                 probes: dict[str, tuple[int, Dataset]] | None = None,
                 net: Network | None = None) -> SequenceReport:
    """Learn ``tasks`` one after another with the configured regularizer.

    ``probes`` maps a name to ``(task index, dataset)``: the dataset is scored
    with that task's head right after the task is trained and again at the end.
    """
    if not tasks:
        raise ConfigError("need at least one task")
    if cfg.method == JOINT:
        raise ConfigError("use joint_train for the joint reference")
    net = build_network(tasks, cfg.hidden, cfg.seed) if net is None else net.copy()
    layout = net.layout
    regularized = cfg.method != FINETUNE
    merged: imp.ImportanceMap | None = None
    penalty: PenaltyState | None = None
    acc = np.full((len(tasks), len(tasks)), np.nan)
    losses = np.full((len(tasks), len(tasks)), np.nan)
    probe_after: dict[str, float] = {}
    all_logs: list[EpochLog] = []
    si_acc = None
    for i, task in enumerate(tasks):
        si_acc = imp.si_start(net.flatten(), cfg.si_xi) if cfg.method == imp.SI else None
        net, logs, si_acc = train_task(net, task, cfg, penalty, si_acc, stream=i)
        all_logs += logs
        for j in range(i + 1):
            acc[i, j] = evaluate(net, tasks[j])
            losses[i, j] = eval_loss(net, tasks[j])
        for name, (k, ds) in (probes or {}).items():
            if k == i:
                probe_after[name] = evaluate(net, tasks[k], ds)
        if not regularized:
            continue
        if cfg.method == imp.SI:
            new_map = imp.si_finalize(si_acc, net.flatten())
        else:
            new_map = estimate_importance_phase(net, task, cfg)
        if merged is None or cfg.method == imp.L2:
            merged = imp.merge_across_tasks(imp.ImportanceMap.empty(layout, new_map.method), new_map, cfg.merge)
        else:
            merged = imp.merge_across_tasks(merged, new_map, cfg.merge)
        penalty = PenaltyState(net.flatten(), merged.omega, cfg.lam)
    report = SequenceReport(
        method=cfg.method, seed=cfg.seed, lam=cfg.lam if regularized else 0.0,
        task_names=[t.name for t in tasks],
        acc_matrix=acc.tolist(), loss_matrix=losses.tolist(),
        acc_after_training=[float(acc[j, j]) for j in range(len(tasks))],
        acc_at_end=[float(acc[-1, j]) for j in range(len(tasks))],
        memory=memory_account(cfg.method, layout),
        omega_stats=omega_summary(merged.omega.trunk_values()) if merged is not None else None,
        probes={name: {"after": probe_after[name],
                       "end": evaluate(net, tasks[k], ds)} for name, (k, ds) in (probes or {}).items()},
    )
    report.state = SequenceState(net, penalty, merged, si_acc, all_logs)
    return compute_forgetting(report)


def joint_train(tasks: Sequence[TaskSpec], cfg: TrainConfig) -> tuple[Network, SequenceReport]:
    """Reference run on all tasks at once: batches from each task interleaved round-robin."""
    if not tasks:
        raise ConfigError("need at least one task")
    for t in tasks:
        if len(t.train) == 0:
            raise ConfigError(f"task {t.name!r} has an empty training set")
    if len(tasks) == 1:
        one = replace(cfg, method=FINETUNE)
        net, logs, _ = train_task(build_network(tasks, cfg.hidden, cfg.seed), tasks[0], one, stream=0)
    else:
        net = build_network(tasks, cfg.hidden, cfg.seed)
        rngs = [np.random.default_rng([cfg.seed, i]) for i in range(len(tasks))]
        theta = net.flatten()
        logs = []
        for epoch in range(cfg.epochs):
            streams = [list(_batches(len(t.train), cfg.batch_size, r)) for t, r in zip(tasks, rngs)]
            for step in range(max(len(s) for s in streams)):
                for t, s in zip(tasks, streams):
                    if step >= len(s):
                        continue
                    idx = s[step]
                    parts = loss_parts(net, t.train.inputs[idx], t.train.labels[idx], t.head, t.loss)
                    theta = sgd_step(theta, parts.grad, cfg.lr)
                    net.load_flat(theta)
            for t in tasks:
                logs.append(EpochLog(t.name, epoch, eval_loss(net, t, t.train), 0.0, evaluate(net, t, t.train)))
    accs = [evaluate(net, t) for t in tasks]
    n = len(tasks)
    report = SequenceReport(
        method=JOINT, seed=cfg.seed, lam=0.0, task_names=[t.name for t in tasks],
        acc_matrix=[[a for a in accs] for _ in range(n)],
        loss_matrix=[[eval_loss(net, t) for t in tasks] for _ in range(n)],
        acc_after_training=accs, acc_at_end=accs,
        memory=memory_account(FINETUNE, net.layout),
    )
    report.state = SequenceState(net, None, None, None, logs)
    return net, compute_forgetting(report)
