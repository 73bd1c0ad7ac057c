"""Static layer graphs: execution, parameter registry, checkpoints, grad checks."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import Layer, ShapeError, softmax_xent

INPUT = "data"
CKPT_MAGIC = b"TCNNCKPT"
CKPT_VERSION = 1


class FingerprintMismatch(ValueError):
    pass


@dataclass
class Parameter:
    """A trainable tensor plus its gradient accumulator and momentum buffer.

    ``value`` aliases the owning layer's array, so in-place updates are seen by
    the layer.
    """

    value: np.ndarray
    grad: np.ndarray
    momentum: np.ndarray
    node: str

    @property
    def size(self) -> int:
        return self.value.size


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: list[str]


@dataclass
class Activations:
    """Result of a forward pass: node outputs plus per-node backward contexts."""

    values: dict[str, np.ndarray]
    ctx: dict[str, dict]
    train: bool

    @property
    def masks(self) -> dict[str, np.ndarray]:
        return {k: c["mask"] for k, c in self.ctx.items() if c.get("mask") is not None}


class NetworkGraph:
    def __init__(self, name: str = "net", logits: str | None = None):
        self.name = name
        self.nodes: list[Node] = []
        self._index: dict[str, int] = {}
        self.params: dict[str, Parameter] = {}
        self.logits = logits
        self.nominal_input: tuple[int, int, int, int] | None = None
        self.fixed_input = False
        self.spec = None

    # -- construction -------------------------------------------------------

    def add(self, name: str, layer: Layer, inputs: str | list[str] | None = None) -> str:
        if name in self._index or name == INPUT:
            raise ValueError(f"duplicate node name {name!r}")
        if inputs is None:
            inputs = [self.nodes[-1].name if self.nodes else INPUT]
        elif isinstance(inputs, str):
            inputs = [inputs]
        for src in inputs:
            if src != INPUT and src not in self._index:
                raise ValueError(f"node {name!r} references unknown input {src!r}")
        if len(inputs) != layer.n_inputs:
            raise ValueError(f"{layer.kind} node {name!r} takes {layer.n_inputs} inputs, got {len(inputs)}")
        self._index[name] = len(self.nodes)
        self.nodes.append(Node(name, layer, list(inputs)))
        if layer.params:
            self._register(self.nodes[-1])
        self.logits = name
        return name

    def _register(self, nd: Node) -> None:
        for pname, arr in nd.layer.params.items():
            self.params[f"{nd.name}.{pname}"] = Parameter(arr, np.zeros_like(arr), np.zeros_like(arr), nd.name)

    @property
    def materialized(self) -> bool:
        return all(set(nd.layer.params) == set(nd.layer.param_shapes()) for nd in self.nodes)

    def materialize(self) -> "NetworkGraph":
        """Allocate parameter, gradient and momentum arrays for every layer."""
        self.params = {}
        for nd in self.nodes:
            if set(nd.layer.params) != set(nd.layer.param_shapes()):
                nd.layer.allocate()
            self._register(nd)
        return self

    def node(self, name: str) -> Node:
        return self.nodes[self._index[name]]

    def index(self, name: str) -> int:
        return self._index[name]

    def infer_shapes(self, input_shape) -> dict[str, tuple]:
        """Propagate shapes; failures name the offending node."""
        shapes = {INPUT: tuple(input_shape)}
        for nd in self.nodes:
            try:
                shapes[nd.name] = tuple(nd.layer.output_shape([shapes[s] for s in nd.inputs]))
            except ShapeError as exc:
                raise ShapeError(f"node {nd.name!r} ({nd.layer.kind}): {exc}") from None
        return shapes

    def set_nominal_input(self, shape, fixed: bool = False) -> None:
        self.infer_shapes(shape)
        self.nominal_input = tuple(shape)
        self.fixed_input = fixed

    def check_input(self, shape) -> dict[str, tuple]:
        """Shape-check a runtime input; fixed-input graphs only take the nominal size."""
        shapes = self.infer_shapes(shape)
        if self.fixed_input and self.nominal_input and tuple(shape[1:]) != self.nominal_input[1:]:
            fc = next((nd.name for nd in self.nodes if nd.layer.kind == "fc"), self.logits)
            raise ShapeError(
                f"node {fc!r} (fc): {self.name} needs {self.nominal_input[2]}x{self.nominal_input[3]} "
                f"inputs, got {shape[2]}x{shape[3]}"
            )
        return shapes

    # -- execution ----------------------------------------------------------

    def forward(self, x, train=False, rng=None, masks=None, overrides=None) -> Activations:
        """Run every node once in order.

        ``masks`` freezes dropout masks by node name; ``overrides`` replaces a
        node's output with a given tensor (used to inject activations).
        """
        acts = Activations({INPUT: x}, {}, train)
        for nd in self.nodes:
            acts.ctx[nd.name] = {"mask": masks[nd.name]} if masks and nd.name in masks else {}
        return self._run(acts, 0, rng, overrides)

    def forward_from(self, acts: Activations, start: int, rng=None, overrides=None) -> Activations:
        """Recompute nodes ``start..`` reusing earlier outputs and frozen masks from ``acts``."""
        new = Activations(dict(acts.values), {}, acts.train)
        for i, nd in enumerate(self.nodes):
            if i < start:
                new.ctx[nd.name] = acts.ctx[nd.name]
            else:
                m = acts.ctx[nd.name].get("mask")
                new.ctx[nd.name] = {"mask": m} if m is not None else {}
        return self._run(new, start, rng, overrides)

    def _run(self, acts, start, rng, overrides):
        for nd in self.nodes[start:]:
            if overrides and nd.name in overrides:
                acts.values[nd.name] = overrides[nd.name]
                acts.ctx[nd.name]["overridden"] = True
                continue
            try:
                ins = [acts.values[s] for s in nd.inputs]
                acts.values[nd.name] = nd.layer.forward(ins, acts.ctx[nd.name], acts.train, rng)
            except ShapeError as exc:
                raise ShapeError(f"node {nd.name!r} ({nd.layer.kind}): {exc}") from None
        return acts

    def backward(self, acts: Activations, grad_logits, accumulate: bool = True) -> dict[str, np.ndarray]:
        """Backpropagate from the logits node.

        Parameter gradients are added into ``Parameter.grad`` (call
        :meth:`zero_grad` first).  Returns the gradient w.r.t. every node
        output, including the input under the key ``"data"``.
        """
        grads: dict[str, np.ndarray] = {self.logits: grad_logits}
        for nd in reversed(self.nodes):
            g = grads.get(nd.name)
            if g is None or acts.ctx.get(nd.name, {}).get("overridden"):
                continue
            if nd.name not in acts.values:
                raise ValueError(f"missing activation for node {nd.name!r}")
            gins, pgrads = nd.layer.backward(g, acts.ctx[nd.name])
            for pname, pg in pgrads.items():
                p = self.params[f"{nd.name}.{pname}"]
                if accumulate:
                    p.grad += pg
                else:
                    p.grad[...] = pg
            for src, gi in zip(nd.inputs, gins):
                grads[src] = grads[src] + gi if src in grads else gi
        return grads

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def loss(self, x, labels, train=False, rng=None, masks=None):
        acts = self.forward(x, train, rng, masks)
        loss, grad = softmax_xent(acts.values[self.logits], labels)
        return loss, grad, acts

    def predict(self, x) -> np.ndarray:
        return self.forward(x).values[self.logits]

    # -- bookkeeping --------------------------------------------------------

    def param_count(self) -> int:
        """Exact count of weights and biases; needs no allocated arrays."""
        return sum(nd.layer.param_count() for nd in self.nodes)

    def param_shapes(self) -> dict[str, tuple]:
        return {f"{nd.name}.{k}": s for nd in self.nodes for k, s in nd.layer.param_shapes().items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], skip: tuple[str, ...] = ()) -> None:
        for k, p in self.params.items():
            if p.node in skip:
                continue
            if k not in state:
                raise KeyError(f"missing parameter {k!r}")
            v = np.asarray(state[k], dtype=np.float64)
            if v.size != p.value.size:
                raise FingerprintMismatch(f"parameter {k!r}: {v.size} values for shape {p.value.shape}")
            p.value[...] = v.reshape(p.value.shape)

    def fingerprint_entries(self, exclude: tuple[str, ...] = ()) -> list:
        out = []
        for nd in self.nodes:
            if nd.name in exclude:
                continue
            shapes = {k: list(v) for k, v in nd.layer.param_shapes().items()}
            out.append([nd.name, nd.layer.kind, nd.layer.config(), nd.inputs, shapes])
        return out

    def fingerprint(self, exclude: tuple[str, ...] = ()) -> str:
        blob = json.dumps(self.fingerprint_entries(exclude), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, graph: NetworkGraph) -> None:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    out += bytes.fromhex(graph.fingerprint())
    out += struct.pack("<Q", len(graph.params))
    for name, p in graph.params.items():
        raw = name.encode("utf-8")
        shape = tuple(p.value.shape) + (1,) * (4 - p.value.ndim)
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<4Q", *shape)
        out += p.value.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    """Return ``(fingerprint_hex, {name: array with stored 4-D shape})``."""
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fp = blob[12:44].hex()
    (count,) = struct.unpack_from("<Q", blob, 44)
    pos = 52
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + ln].decode("utf-8")
        pos += ln
        shape = struct.unpack_from("<4Q", blob, pos)
        pos += 32
        n = int(np.prod(shape))
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after {count} parameters")
    return fp, state


def load_checkpoint(path: str | Path, graph: NetworkGraph) -> None:
    fp, state = read_checkpoint(path)
    if fp != graph.fingerprint():
        raise FingerprintMismatch(f"{path}: architecture fingerprint does not match {graph.name}")
    graph.load_state_dict(state)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    threshold: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.threshold

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if not v < self.threshold]

    def format(self) -> str:
        lines = [f"{'parameter':<24} {'entries':>8} {'max rel err':>12}"]
        for k, v in self.errors.items():
            flag = "ok" if v < self.threshold else "FAIL"
            lines.append(f"{k:<24} {self.checked.get(k, 0):>8} {v:>12.3e}  {flag}")
        lines.append(f"max {self.max_error:.3e} vs threshold {self.threshold:.0e}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``.

    At epsilon 1e-5 a central difference of an O(1) loss carries ~1e-10 of
    round-off, so gradients below ``floor`` are compared on an absolute scale.
    """
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    graph: NetworkGraph,
    x,
    labels,
    epsilon: float = 1e-5,
    threshold: float = 1e-4,
    rng=None,
    check_input: bool = True,
    max_entries: int | None = None,
    input_entries: int | None = 512,
    floor: float = 1e-6,
    loss_fn=softmax_xent,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, parameter by parameter.

    Dropout masks drawn in the first forward pass stay frozen for every
    perturbed evaluation.  Each perturbation only re-runs the nodes from the
    owning layer onward.  ``max_entries`` caps the entries checked per
    parameter tensor and ``input_entries`` those of the input (sampled with
    ``rng``); ``None`` checks every entry.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    train = any(nd.layer.kind == "dropout" for nd in graph.nodes)
    acts = graph.forward(x, train=train, rng=rng)
    _, g_logits = loss_fn(acts.values[graph.logits], labels)
    graph.zero_grad()
    node_grads = graph.backward(acts, g_logits)

    def loss_from(start):
        a = graph.forward_from(acts, start, rng)
        return loss_fn(a.values[graph.logits], labels)[0]

    errors, checked = {}, {}
    targets = [(k, p.value, p.grad.copy(), graph.index(p.node)) for k, p in graph.params.items()]
    if check_input:
        targets.append((INPUT, x, node_grads.get(INPUT, np.zeros_like(x)), 0))
    for name, value, analytic, start in targets:
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        cap = input_entries if name == INPUT else max_entries
        if cap is not None and flat.size > cap:
            idx = np.sort(rng.choice(flat.size, cap, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_from(start)
            flat[i] = orig - epsilon
            lm = loss_from(start)
            flat[i] = orig
            numeric[j] = (lp - lm) / (2 * epsilon)
        errors[name] = float(relative_error(analytic.reshape(-1)[idx], numeric, floor).max(initial=0.0))
        checked[name] = int(idx.size)
    return GradCheckReport(errors, threshold, checked)
