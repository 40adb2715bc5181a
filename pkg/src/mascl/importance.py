"""Per-parameter importance estimators and their cross-task accumulation.

Every estimator only scores shared (trunk) parameters; head entries stay 0.
Per-task maps keep a running sum of per-point contributions plus the number
of points seen, so ``omega`` is the mean over points and streaming updates
agree with a single batch pass.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError, StateError, UnsupportedObjectiveError
from .nn import (LOG_PROB, OUTPUT_COMPONENT, SQUARED_L2, FlatParams, Layout, Network,
                 flat_from_dict, flat_to_dict, forward, per_sample_reduce)

MAS_GLOBAL = "mas-global"
MAS_VECTOR = "mas-vector"
L_MAS = "l-mas"
EWC = "ewc"
SI = "si"
L2 = "l2"
ESTIMATORS = (MAS_GLOBAL, MAS_VECTOR, L_MAS, EWC, SI, L2)

MERGE_SUM = "sum"
MERGE_MEAN = "mean"


@dataclass
class ImportanceMap:
    """Nonnegative per-parameter importance.

    ``omega = carried + omega_sum / samples_seen``. ``carried`` holds what was
    merged in from earlier tasks; ``task_samples`` records the point count of
    each task folded into it.
    """

    omega_sum: FlatParams
    samples_seen: int
    method: str
    carried: FlatParams | None = None
    task_samples: tuple[int, ...] = ()

    @classmethod
    def empty(cls, layout: Layout, method: str) -> "ImportanceMap":
        if method not in ESTIMATORS:
            raise ValueError(f"unknown estimator {method!r}; expected one of {ESTIMATORS}")
        return cls(FlatParams(np.zeros(layout.size), layout), 0, method)

    @classmethod
    def from_omega(cls, omega: FlatParams, method: str, samples_seen: int = 1) -> "ImportanceMap":
        """Wrap an already-normalized per-task omega."""
        return cls(FlatParams(omega.values * samples_seen, omega.layout), samples_seen, method)

    @property
    def layout(self) -> Layout:
        return self.omega_sum.layout

    @property
    def history(self) -> tuple[int, ...]:
        return self.task_samples + ((self.samples_seen,) if self.samples_seen else ())

    @property
    def omega(self) -> FlatParams:
        vals = self.omega_sum.values / self.samples_seen if self.samples_seen else np.zeros(self.layout.size)
        if self.carried is not None:
            vals = self.carried.values + vals
        return FlatParams(vals, self.layout)

    def _check(self, net: Network, method: str) -> None:
        if self.method != method:
            raise ValueError(f"map was built for {self.method!r}, not {method!r}")
        if net.layout != self.layout:
            raise ShapeError("importance map layout does not match the network")

    def _add(self, contribution: FlatParams, n: int) -> "ImportanceMap":
        vals = np.where(self.layout.trunk_mask, contribution.values, 0.0)
        return replace(self, omega_sum=FlatParams(self.omega_sum.values + vals, self.layout),
                       samples_seen=self.samples_seen + n)


def _n_points(net: Network, x) -> int:
    x = np.asarray(x)
    return 1 if x.ndim == 1 else x.shape[0]


def mas_update(imap: ImportanceMap, net: Network, x, head: str | None = None) -> ImportanceMap:
    """Add ``|d ||F(x_k)||^2 / d theta|`` for each point ``x_k``; labels are never used."""
    imap._check(net, MAS_GLOBAL)
    contrib = per_sample_reduce(net, x, SQUARED_L2, head=head)
    return imap._add(contrib, _n_points(net, x))


def mas_update_vector_output(imap: ImportanceMap, net: Network, x, head: str | None = None) -> ImportanceMap:
    """Add ``sum_o |dF_o(x_k) / d theta|``, one backward pass per output component."""
    imap._check(net, MAS_VECTOR)
    total = None
    for o in range(net.output_dim(head)):
        c = per_sample_reduce(net, x, OUTPUT_COMPONENT, aux=o, head=head).values
        total = c if total is None else total + c
    return imap._add(FlatParams(total, net.layout), _n_points(net, x))


def hebbian_update(imap: ImportanceMap, net: Network, x=None) -> ImportanceMap:
    """Local rule: add ``|y_in_i * y_out_j|`` for every trunk connection.

    Uses the activations cached by the last forward pass when ``x`` is None.
    Biases see a constant input of 1. The factor 2 of the local squared-norm
    gradient is dropped; for ReLU layers with nonnegative inputs the absolute
    value is a no-op.
    """
    imap._check(net, L_MAS)
    if x is not None:
        forward(net, x)
    cache = net.cache
    if cache is None:
        raise StateError("hebbian_update needs a forward pass (pass x or call forward first)")
    layout = net.layout
    vals = np.zeros(layout.size)
    for i in range(len(net.trunk)):
        y_in = np.abs(cache.inputs[i])
        y_out = np.abs(cache.outputs[i])
        w = layout.segment(f"trunk/{i}/weights")
        b = layout.segment(f"trunk/{i}/bias")
        vals[w.offset:w.stop] = (y_out.T @ y_in).ravel()
        vals[b.offset:b.stop] = y_out.sum(axis=0)
    return imap._add(FlatParams(vals, layout), cache.inputs[0].shape[0])


def ewc_fisher_update(imap: ImportanceMap, net: Network, x, labels, head: str | None = None) -> ImportanceMap:
    """Empirical diagonal Fisher: add ``(d log p(label | x) / d theta)^2`` per point."""
    imap._check(net, EWC)
    if labels is None or np.asarray(labels).ndim != 1:
        raise UnsupportedObjectiveError("EWC Fisher needs class labels for a softmax output")
    contrib = per_sample_reduce(net, x, LOG_PROB, aux=labels, head=head, power=2)
    return imap._add(contrib, _n_points(net, x))


def uniform_importance(layout: Layout) -> ImportanceMap:
    """Plain L2 anchoring: omega = 1 on every trunk parameter."""
    return ImportanceMap.from_omega(FlatParams(layout.trunk_mask.astype(np.float64), layout), L2)


@dataclass
class SiAccumulator:
    path_omega: FlatParams
    theta_start: FlatParams
    xi: float = 0.1

    def __post_init__(self):
        if self.xi <= 0:
            raise ValueError("SI damping xi must be positive")
        self.path_omega.check_layout(self.theta_start)


def si_start(theta: FlatParams, xi: float = 0.1) -> SiAccumulator:
    return SiAccumulator(theta.zeros_like(), theta.copy(), xi)


def si_step(acc: SiAccumulator, grad_before: FlatParams, delta_theta: FlatParams) -> SiAccumulator:
    acc.path_omega.check_layout(grad_before)
    acc.path_omega.check_layout(delta_theta)
    path = acc.path_omega.values - grad_before.values * delta_theta.values
    return replace(acc, path_omega=FlatParams(path, acc.path_omega.layout))


def si_finalize(acc: SiAccumulator, theta_end: FlatParams) -> ImportanceMap:
    """``max(0, path) / (displacement^2 + xi)`` on trunk parameters."""
    acc.theta_start.check_layout(theta_end)
    disp = theta_end.values - acc.theta_start.values
    omega = np.maximum(acc.path_omega.values, 0.0) / (disp ** 2 + acc.xi)
    omega = np.where(theta_end.layout.trunk_mask, omega, 0.0)
    return ImportanceMap.from_omega(FlatParams(omega, theta_end.layout), SI)


def merge_across_tasks(old: ImportanceMap, new: ImportanceMap, mode: str = MERGE_SUM) -> ImportanceMap:
    """Fold a new per-task map into the accumulated one.

    ``sum`` adds the per-task means; ``mean`` averages them over tasks.
    """
    if old.method != new.method:
        raise ValueError(f"cannot merge {old.method!r} map with {new.method!r} map")
    if old.layout != new.layout:
        raise ShapeError("importance map layouts differ")
    a, b = old.omega.values, new.omega.values
    if mode == MERGE_SUM:
        vals = a + b
    elif mode == MERGE_MEAN:
        k_old, k_new = len(old.history), len(new.history)
        vals = (a * k_old + b * k_new) / max(k_old + k_new, 1)
    else:
        raise ValueError(f"unknown merge mode {mode!r}")
    layout = old.layout
    return ImportanceMap(FlatParams(np.zeros(layout.size), layout), 0, old.method,
                         carried=FlatParams(vals, layout),
                         task_samples=old.history + new.history)


def importance_to_dict(imap: ImportanceMap) -> dict:
    return flat_to_dict(imap.omega, kind="importance", method=imap.method,
                        task_samples=list(imap.history))


def importance_from_dict(doc: dict) -> ImportanceMap:
    """Inverse of :func:`importance_to_dict`; the loaded omega comes back as ``carried``."""
    omega, kind, meta = flat_from_dict(doc)
    if kind != "importance":
        raise ValueError(f"document holds {kind!r}, not an importance map")
    return ImportanceMap(omega.zeros_like(), 0, meta["method"], carried=omega,
                         task_samples=tuple(int(v) for v in meta.get("task_samples", ())))
