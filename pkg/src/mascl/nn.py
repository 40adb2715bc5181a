"""Dense-network core: layers, flat parameter vectors, forward/backward, SGD.

Everything is float64 numpy. Weight matrices are stored ``(out, in)`` and a
layer computes ``act(x @ W.T + b)`` on a row-major batch ``x``.

Gradients come from explicit per-layer backward rules rather than a tape. The
ReLU derivative at exactly zero is taken to be 0, which is what makes the
local squared-norm gradient coincide with the activation product rule in
:mod:`mascl.importance` even at the kink.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError, StateError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)

# scalar objective tags
SQUARED_L2 = "squared-l2"
CROSS_ENTROPY = "cross-entropy"
L2_REGRESSION = "l2-regression"
LOG_PROB = "log-prob"
OUTPUT_COMPONENT = "output-component"
OBJECTIVES = (SQUARED_L2, CROSS_ENTROPY, L2_REGRESSION, LOG_PROB, OUTPUT_COMPONENT)

WEIGHTS_FORMAT = "mascl.flat"
WEIGHTS_VERSION = 1


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != layer width {self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass(frozen=True)
class Segment:
    """One contiguous block of the flat vector (a weight matrix or a bias)."""

    name: str
    offset: int
    shape: tuple[int, ...]
    trunk: bool
    activation: str

    @property
    def length(self) -> int:
        return int(np.prod(self.shape))

    @property
    def layer_id(self) -> str:
        return self.name.rsplit("/", 1)[0]

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class Layout:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        pos = 0
        for seg in self.segments:
            if seg.offset != pos:
                raise ShapeError(f"segment {seg.name} starts at {seg.offset}, expected {pos}")
            pos = seg.stop

    @property
    def size(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    @cached_property
    def trunk_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for seg in self.segments:
            if seg.trunk:
                mask[seg.offset:seg.stop] = True
        mask.setflags(write=False)
        return mask

    @property
    def trunk_size(self) -> int:
        return int(self.trunk_mask.sum())

    def trunk_only(self) -> "Layout":
        segs, pos = [], 0
        for seg in self.segments:
            if seg.trunk:
                segs.append(Segment(seg.name, pos, seg.shape, True, seg.activation))
                pos += seg.length
        return Layout(tuple(segs))

    @property
    def head_ids(self) -> list[str]:
        ids = []
        for seg in self.segments:
            if not seg.trunk:
                hid = seg.name.split("/")[1]
                if hid not in ids:
                    ids.append(hid)
        return ids

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def to_json(self) -> list[dict]:
        return [
            {"name": s.name, "offset": s.offset, "shape": list(s.shape),
             "trunk": s.trunk, "activation": s.activation}
            for s in self.segments
        ]

    @classmethod
    def from_json(cls, items: list[dict]) -> "Layout":
        return cls(tuple(
            Segment(d["name"], int(d["offset"]), tuple(int(v) for v in d["shape"]),
                    bool(d["trunk"]), d["activation"])
            for d in items
        ))


@dataclass
class FlatParams:
    """A flat float64 vector indexed by a :class:`Layout`.

    Used for parameters, gradients, snapshots and importance maps alike.
    """

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ShapeError(
                f"values shape {self.values.shape} does not match layout size {self.layout.size}"
            )

    @property
    def trunk_mask(self) -> np.ndarray:
        return self.layout.trunk_mask

    def check_layout(self, other: "FlatParams | Layout") -> None:
        layout = other if isinstance(other, Layout) else other.layout
        if layout != self.layout:
            raise ShapeError("parameter layouts differ")

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), self.layout)

    def zeros_like(self) -> "FlatParams":
        return FlatParams(np.zeros_like(self.values), self.layout)

    def trunk_values(self) -> np.ndarray:
        return self.values[self.layout.trunk_mask]

    def trunk(self) -> "FlatParams":
        """Restriction to the shared parameters, with a trunk-only layout."""
        return FlatParams(self.values[self.layout.trunk_mask], self.layout.trunk_only())

    def block(self, name: str) -> np.ndarray:
        seg = self.layout.segment(name)
        return self.values[seg.offset:seg.stop].reshape(seg.shape)


@dataclass
class ForwardCache:
    head: str | None
    inputs: list[np.ndarray]   # input to each layer on the path
    preacts: list[np.ndarray]
    outputs: list[np.ndarray]  # post-activation of each layer on the path


class Network:
    """Shared trunk plus optional task heads.

    A network with no heads is valid (embedding mode): the trunk output is the
    network output.
    """

    def __init__(self, trunk: Sequence[DenseLayer], heads: dict[str, Sequence[DenseLayer]] | None = None):
        if not trunk:
            raise ShapeError("network needs at least one trunk layer")
        self.trunk = list(trunk)
        self.heads = {str(k): list(v) for k, v in (heads or {}).items()}
        self.cache: ForwardCache | None = None
        _check_chain(self.trunk, "trunk")
        for hid, layers in self.heads.items():
            if not layers:
                raise ShapeError(f"head {hid!r} has no layers")
            if layers[0].in_dim != self.trunk[-1].out_dim:
                raise ShapeError(
                    f"head {hid!r} expects {layers[0].in_dim} inputs, trunk gives {self.trunk[-1].out_dim}"
                )
            _check_chain(layers, f"head {hid!r}")

    @property
    def input_dim(self) -> int:
        return self.trunk[0].in_dim

    def output_dim(self, head: str | None = None) -> int:
        return self.path(head)[-1][1].out_dim

    def path(self, head: str | None = None) -> list[tuple[str, DenseLayer]]:
        """(layer-id, layer) pairs traversed for ``head`` (trunk only if None)."""
        steps = [(f"trunk/{i}", layer) for i, layer in enumerate(self.trunk)]
        if head is not None:
            if head not in self.heads:
                raise KeyError(f"unknown head {head!r}; known heads: {sorted(self.heads)}")
            steps += [(f"head/{head}/{i}", layer) for i, layer in enumerate(self.heads[head])]
        return steps

    def named_layers(self) -> Iterator[tuple[str, DenseLayer, bool]]:
        for i, layer in enumerate(self.trunk):
            yield f"trunk/{i}", layer, True
        for hid, layers in self.heads.items():
            for i, layer in enumerate(layers):
                yield f"head/{hid}/{i}", layer, False

    @cached_property
    def layout(self) -> Layout:
        segs = []
        pos = 0
        for lid, layer, trunk in self.named_layers():
            for part, shape in (("weights", layer.weights.shape), ("bias", layer.bias.shape)):
                seg = Segment(f"{lid}/{part}", pos, tuple(shape), trunk, layer.activation)
                segs.append(seg)
                pos = seg.stop
        return Layout(tuple(segs))

    def param_arrays(self) -> Iterator[tuple[Segment, np.ndarray]]:
        """Segments paired with the live arrays they index (mutable views)."""
        arrays = []
        for _, layer, _ in self.named_layers():
            arrays += [layer.weights, layer.bias]
        yield from zip(self.layout.segments, arrays)

    def flatten(self) -> FlatParams:
        vals = np.concatenate([a.ravel() for _, a in self.param_arrays()])
        return FlatParams(vals, self.layout)

    def load_flat(self, flat: FlatParams) -> None:
        """Overwrite parameters in place from ``flat``."""
        flat.check_layout(self.layout)
        for seg, arr in self.param_arrays():
            arr[...] = flat.values[seg.offset:seg.stop].reshape(seg.shape)
        self.cache = None

    @classmethod
    def from_flat(cls, flat: FlatParams) -> "Network":
        trunk: dict[int, dict] = {}
        heads: dict[str, dict[int, dict]] = {}
        for seg in flat.layout.segments:
            parts = seg.name.split("/")
            block = flat.values[seg.offset:seg.stop].reshape(seg.shape).copy()
            if parts[0] == "trunk":
                slot = trunk.setdefault(int(parts[1]), {})
            else:
                slot = heads.setdefault(parts[1], {}).setdefault(int(parts[2]), {})
            slot[parts[-1]] = block
            slot["activation"] = seg.activation

        def build(d):
            return [DenseLayer(d[i]["weights"], d[i]["bias"], d[i]["activation"]) for i in sorted(d)]

        return cls(build(trunk), {h: build(d) for h, d in heads.items()})

    def copy(self) -> "Network":
        return Network([l.copy() for l in self.trunk],
                       {h: [l.copy() for l in ls] for h, ls in self.heads.items()})

    def __repr__(self):
        dims = [self.input_dim] + [l.out_dim for l in self.trunk]
        return f"Network(trunk={dims}, heads={list(self.heads)})"


def _check_chain(layers: Sequence[DenseLayer], where: str) -> None:
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeError(f"{where}: layer of width {a.out_dim} feeds layer expecting {b.in_dim}")


def glorot_layer(rng: np.random.Generator, n_in: int, n_out: int, activation: str) -> DenseLayer:
    a = np.sqrt(6.0 / (n_in + n_out))
    return DenseLayer(rng.uniform(-a, a, size=(n_out, n_in)), np.zeros(n_out), activation)


def init_network(
    sizes: Sequence[int],
    heads: dict[str, Sequence[int]] | None = None,
    seed: int = 0,
    trunk_activation: str = RELU,
    last_trunk_activation: str | None = None,
) -> Network:
    """Build a seeded network.

    ``sizes`` lists trunk widths starting with the input dimension. ``heads``
    maps head ids to their widths after the trunk output, e.g. ``{"t1": [10]}``.
    Head output layers are linear; hidden head layers use ReLU.
    """
    rng = np.random.default_rng(seed)
    trunk = []
    for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
        last = k == len(sizes) - 2
        act = last_trunk_activation if (last and last_trunk_activation) else trunk_activation
        trunk.append(glorot_layer(rng, a, b, act))
    head_layers = {}
    for hid, widths in (heads or {}).items():
        dims = [sizes[-1], *widths]
        head_layers[hid] = [
            glorot_layer(rng, a, b, IDENTITY if k == len(dims) - 2 else RELU)
            for k, (a, b) in enumerate(zip(dims, dims[1:]))
        ]
    return Network(trunk, head_layers)


def _as_batch(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"input shape {x.shape} incompatible with input width {net.input_dim}")
    return x


def forward(net: Network, x, head: str | None = None) -> np.ndarray:
    """Batch forward pass; caches per-layer inputs, pre-activations and outputs on ``net``."""
    a = _as_batch(net, x)
    inputs, preacts, outputs = [], [], []
    for _, layer in net.path(head):
        inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == RELU else z
        preacts.append(z)
        outputs.append(a)
    net.cache = ForwardCache(head, inputs, preacts, outputs)
    return a


def _one_hot(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    out = np.zeros((n, k))
    out[np.arange(n), labels.astype(np.int64)] = 1.0
    return out


def _log_softmax(out: np.ndarray) -> np.ndarray:
    shifted = out - out.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def objective_terms(out: np.ndarray, objective: str, aux=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample objective values and their derivatives w.r.t. the output rows."""
    n, k = out.shape
    if objective == SQUARED_L2:
        return (out ** 2).sum(axis=1), 2.0 * out
    if objective == OUTPUT_COMPONENT:
        if aux is None:
            raise ValueError("output-component objective needs the component index in aux")
        o = int(aux)
        if not 0 <= o < k:
            raise ValueError(f"component {o} out of range for output width {k}")
        seed = np.zeros_like(out)
        seed[:, o] = 1.0
        return out[:, o].copy(), seed
    if objective in (CROSS_ENTROPY, LOG_PROB):
        if aux is None:
            raise ValueError(f"{objective} objective needs labels in aux")
        onehot = _one_hot(aux, n, k)
        logp = _log_softmax(out)
        nll = -(logp * onehot).sum(axis=1)
        d = np.exp(logp) - onehot
        return (nll, d) if objective == CROSS_ENTROPY else (-nll, -d)
    if objective == L2_REGRESSION:
        if aux is None:
            raise ValueError("l2-regression objective needs targets in aux")
        t = np.asarray(aux, dtype=np.float64).reshape(n, -1)
        if t.shape != out.shape:
            raise ShapeError(f"targets shape {t.shape} != output shape {out.shape}")
        r = out - t
        return (r ** 2).sum(axis=1), 2.0 * r
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def backprop(net: Network, d_out: np.ndarray) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Propagate per-sample output derivatives through the cached forward pass.

    Returns ``(layer-id, layer_input, d_preact)`` for every layer on the path.
    Rows are kept per sample (not reduced), so callers can form per-sample
    quantities: the batch gradient of a weight matrix is ``d_preact.T @ layer_input``.
    """
    cache = net.cache
    if cache is None:
        raise StateError("backprop called before forward")
    steps = net.path(cache.head)
    signals = []
    delta = d_out
    for idx in range(len(steps) - 1, -1, -1):
        lid, layer = steps[idx]
        dz = delta * (cache.preacts[idx] > 0.0) if layer.activation == RELU else delta
        signals.append((lid, cache.inputs[idx], dz))
        if idx:
            delta = dz @ layer.weights
    signals.reverse()
    return signals


def _reduce_signals(net: Network, signals, weight_fn, bias_fn) -> FlatParams:
    layout = net.layout
    vals = np.zeros(layout.size)
    for lid, a_in, dz in signals:
        w = layout.segment(f"{lid}/weights")
        b = layout.segment(f"{lid}/bias")
        vals[w.offset:w.stop] = weight_fn(dz, a_in).ravel()
        vals[b.offset:b.stop] = bias_fn(dz)
    return FlatParams(vals, layout)


def loss_and_grad(net: Network, x, objective: str, aux=None, head: str | None = None) -> tuple[float, FlatParams]:
    """Batch-mean objective and its exact gradient over every parameter.

    Parameters off the active path (other heads) get a zero gradient.
    """
    out = forward(net, x, head)
    values, d = objective_terms(out, objective, aux)
    n = out.shape[0]
    signals = backprop(net, d / n)
    grad = _reduce_signals(net, signals, lambda dz, a: dz.T @ a, lambda dz: dz.sum(axis=0))
    return float(values.mean()), grad


def grad_scalar(net: Network, x, objective: str, aux=None, head: str | None = None) -> FlatParams:
    return loss_and_grad(net, x, objective, aux, head)[1]


def loss_value(net: Network, x, objective: str, aux=None, head: str | None = None) -> float:
    out = forward(net, x, head)
    return float(objective_terms(out, objective, aux)[0].mean())


def per_sample_reduce(net: Network, x, objective: str, aux=None, head: str | None = None,
                      power: int = 1) -> FlatParams:
    """Sum over samples of ``|g_k| ** power`` for the per-sample gradients ``g_k``.

    Dense weight gradients factor per sample as an outer product, so
    ``sum_k |dz_k|^p (x) |a_k|^p`` gives the result in one matmul.
    """
    out = forward(net, x, head)
    _, d = objective_terms(out, objective, aux)
    signals = backprop(net, d)
    if power == 1:
        return _reduce_signals(net, signals, lambda dz, a: np.abs(dz).T @ np.abs(a),
                               lambda dz: np.abs(dz).sum(axis=0))
    return _reduce_signals(net, signals, lambda dz, a: (np.abs(dz) ** power).T @ (np.abs(a) ** power),
                           lambda dz: (np.abs(dz) ** power).sum(axis=0))


def near_kink(net: Network, x, head: str | None = None, tol: float = 1e-4) -> bool:
    """True if any ReLU pre-activation on the path lies within ``tol`` of zero."""
    forward(net, x, head)
    return any(
        layer.activation == RELU and np.any(np.abs(z) < tol)
        for (_, layer), z in zip(net.path(head), net.cache.preacts)
    )


def fd_check(net: Network, x, objective: str, aux=None, step: float = 1e-5,
             head: str | None = None, floor: float = 1e-7) -> float:
    """Worst per-coordinate relative error of :func:`grad_scalar` against central differences.

    Coordinates whose gradient magnitude is below ``floor`` are compared on an
    absolute scale of ``floor`` (otherwise round-off in the difference quotient
    dominates a meaningless ratio).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = grad_scalar(net, x, objective, aux, head).values
    numeric = np.zeros_like(analytic)
    for seg, arr in net.param_arrays():
        flat = arr.reshape(-1)
        for j in range(seg.length):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_value(net, x, objective, aux, head)
            flat[j] = orig - step
            down = loss_value(net, x, objective, aux, head)
            flat[j] = orig
            numeric[seg.offset + j] = (up - down) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def sgd_step(params: FlatParams, grad: FlatParams, lr: float) -> FlatParams:
    params.check_layout(grad)
    return FlatParams(params.values - lr * grad.values, params.layout)


# -- portable weight file ---------------------------------------------------

def flat_to_dict(flat: FlatParams, kind: str = "params", **meta) -> dict:
    if not np.all(np.isfinite(flat.values)):
        raise ValueError("refusing to serialize non-finite values")
    return {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "kind": kind,
        "meta": meta,
        "layout": flat.layout.to_json(),
        "values": flat.values.tolist(),
    }


def flat_from_dict(doc: dict) -> tuple[FlatParams, str, dict]:
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"not a {WEIGHTS_FORMAT} document")
    if doc.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"unsupported version {doc.get('version')!r}")
    flat = FlatParams(np.array(doc["values"], dtype=np.float64), Layout.from_json(doc["layout"]))
    return flat, doc["kind"], doc.get("meta", {})


def save_flat(path, flat: FlatParams, kind: str = "params", **meta) -> None:
    Path(path).write_text(json.dumps(flat_to_dict(flat, kind, **meta)))


def load_flat(path) -> tuple[FlatParams, str, dict]:
    return flat_from_dict(json.loads(Path(path).read_text()))


def save_network(path, net: Network, **meta) -> None:
    save_flat(path, net.flatten(), "params", **meta)


def load_network(path) -> Network:
    flat, kind, _ = load_flat(path)
    if kind != "params":
        raise ValueError(f"file holds {kind!r}, not network parameters")
    return Network.from_flat(flat)
