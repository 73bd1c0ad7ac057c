"""Builders for the texture CNNs, the AlexNet baseline and their variants.

Every builder returns an unallocated :class:`NetworkGraph` when called without
an rng (enough for parameter counts, summaries and fingerprints) and an
initialised one otherwise.

Desk scale divides conv and FC widths by ``desk_factor`` (floor 8) and uses a
stride-2 first convolution with a 64x64 nominal input, so every family,
including the five-conv AlexNet, still has positive feature-map sizes on
small synthetic images.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from .layers import LRN, Concat, Conv2D, Dropout, Energy, Flatten, FullyConnected, MaxPool, ReLU
from .network import NetworkGraph

FAMILIES = ("tcnn", "alexnet", "alexnet_short3", "tscnn3")

# AlexNet conv stack: (out_channels, kernel, stride, pad, groups)
ALEXNET_CONVS = [
    (96, 11, 4, 0, 1),
    (256, 5, 1, 2, 2),
    (384, 3, 1, 1, 1),
    (384, 3, 1, 1, 2),
    (256, 3, 1, 1, 2),
]
PAPER_INPUT = 227
DESK_INPUT = 64
DESK_CONV1_STRIDE = 2


@dataclass(frozen=True)
class ModelSpec:
    family: str = "tcnn"
    depth: int = 3
    energy_mode: str = "average"
    class_count: int = 1000
    fc_width: int = 4096
    scale: str = "paper"
    lrn: bool = True
    grouped: bool | None = None  # None: AlexNet family grouped, T-CNN ungrouped
    dropout: float = 0.5
    init: str | None = None  # None: "alexnet" at paper scale, "he" at desk scale
    desk_factor: int = 16

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "tcnn" and not 1 <= self.depth <= 5:
            raise ValueError(f"T-CNN depth must be 1..5, got {self.depth}")
        if self.energy_mode not in ("average", "max"):
            raise ValueError(f"energy_mode must be 'average' or 'max', got {self.energy_mode!r}")
        if self.scale not in ("paper", "desk"):
            raise ValueError(f"scale must be 'paper' or 'desk', got {self.scale!r}")
        if self.class_count < 1 or self.fc_width < 1:
            raise ValueError("class_count and fc_width must be positive")

    @property
    def label(self) -> str:
        if self.family == "tcnn":
            tag = f"T-CNN-{self.depth}"
            return tag if self.energy_mode == "average" else tag + " (max)"
        return {"alexnet": "AlexNet", "alexnet_short3": "AlexNet-short3", "tscnn3": "TS-CNN-3"}[self.family]

    @property
    def is_grouped(self) -> bool:
        return self.family != "tcnn" if self.grouped is None else self.grouped

    @property
    def init_scheme(self) -> str:
        if self.init is not None:
            return self.init
        return "alexnet" if self.scale == "paper" else "he"

    @property
    def head_name(self) -> str:
        return "fc3" if self.family == "tcnn" else "fc8"

    @property
    def nominal_size(self) -> int:
        return PAPER_INPUT if self.scale == "paper" else DESK_INPUT

    def width(self, w: int) -> int:
        return w if self.scale == "paper" else max(8, w // self.desk_factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)

    def with_classes(self, k: int) -> "ModelSpec":
        return replace(self, class_count=k)


def _add_convs(g: NetworkGraph, spec: ModelSpec, count: int, pool_last: bool) -> int:
    """Append conv/relu (+ lrn/pool after conv1 and conv2) stages; return channel count."""
    cin = 3
    for i, (cout, k, stride, pad, groups) in enumerate(ALEXNET_CONVS[:count], start=1):
        cout = spec.width(cout)
        if i == 1 and spec.scale == "desk":
            stride = DESK_CONV1_STRIDE
        groups = groups if spec.is_grouped else 1
        g.add(f"conv{i}", Conv2D(cin, cout, k, stride, pad, groups, allocate=False))
        g.add(f"relu{i}", ReLU())
        if i <= 2 and (i < count or pool_last):
            if spec.lrn:
                g.add(f"norm{i}", LRN())
            g.add(f"pool{i}", MaxPool(3, 2))
        cin = cout
    return cin


def _add_head(g: NetworkGraph, spec: ModelSpec, in_features: int, names: tuple[str, str, str]) -> None:
    width = spec.width(spec.fc_width)
    a, b, c = names
    g.add(a, FullyConnected(in_features, width, allocate=False))
    g.add(f"relu_{a}", ReLU())
    g.add(f"drop_{a}", Dropout(spec.dropout))
    g.add(b, FullyConnected(width, width, allocate=False))
    g.add(f"relu_{b}", ReLU())
    g.add(f"drop_{b}", Dropout(spec.dropout))
    g.add(c, FullyConnected(width, spec.class_count, allocate=False))


def _flat_features(g: NetworkGraph, spec: ModelSpec, node: str) -> int:
    s = spec.nominal_size
    _, c, h, w = g.infer_shapes((1, 3, s, s))[node]
    return c * h * w


def build_tcnn(spec: ModelSpec, rng=None) -> NetworkGraph:
    """Conv stack of ``spec.depth`` layers, energy pooled from the last ReLU, 3 FC layers."""
    if spec.family != "tcnn":
        raise ValueError("build_tcnn needs family 'tcnn'")
    g = NetworkGraph(spec.label)
    channels = _add_convs(g, spec, spec.depth, pool_last=False)
    g.add("energy", Energy(spec.energy_mode))
    _add_head(g, spec, channels, ("fc1", "fc2", "fc3"))
    return _finish(g, spec, fixed=False, rng=rng)


def build_alexnet(spec: ModelSpec, rng=None) -> NetworkGraph:
    if spec.family != "alexnet":
        raise ValueError("build_alexnet needs family 'alexnet'")
    g = NetworkGraph(spec.label)
    _add_convs(g, spec, 5, pool_last=True)
    g.add("pool5", MaxPool(3, 2))
    g.add("flatten", Flatten())
    _add_head(g, spec, _flat_features(g, spec, "flatten"), ("fc6", "fc7", "fc8"))
    return _finish(g, spec, fixed=True, rng=rng)


def build_alexnet_short3(spec: ModelSpec, rng=None) -> NetworkGraph:
    """AlexNet without C4/C5: P5 pools C3's output and FC6 is resized to match."""
    if spec.family != "alexnet_short3":
        raise ValueError("build_alexnet_short3 needs family 'alexnet_short3'")
    g = NetworkGraph(spec.label)
    _add_convs(g, spec, 3, pool_last=True)
    g.add("pool5", MaxPool(3, 2))
    g.add("flatten", Flatten())
    _add_head(g, spec, _flat_features(g, spec, "flatten"), ("fc6", "fc7", "fc8"))
    return _finish(g, spec, fixed=True, rng=rng)


def build_tscnn3(spec: ModelSpec, rng=None) -> NetworkGraph:
    """AlexNet whose FC6 also sees the average energy of C3 (energy channels first)."""
    if spec.family != "tscnn3":
        raise ValueError("build_tscnn3 needs family 'tscnn3'")
    g = NetworkGraph(spec.label)
    _add_convs(g, spec, 5, pool_last=True)
    g.add("pool5", MaxPool(3, 2))
    g.add("flatten", Flatten())
    g.add("energy3", Energy("average"), "relu3")
    g.add("flatten_energy", Flatten())
    g.add("concat", Concat(), ["flatten_energy", "flatten"])
    _add_head(g, spec, _flat_features(g, spec, "concat"), ("fc6", "fc7", "fc8"))
    return _finish(g, spec, fixed=True, rng=rng)


BUILDERS = {
    "tcnn": build_tcnn,
    "alexnet": build_alexnet,
    "alexnet_short3": build_alexnet_short3,
    "tscnn3": build_tscnn3,
}


def build(spec: ModelSpec, rng=None) -> NetworkGraph:
    return BUILDERS[spec.family](spec, rng)


def _finish(g: NetworkGraph, spec: ModelSpec, fixed: bool, rng) -> NetworkGraph:
    s = spec.nominal_size
    g.set_nominal_input((1, 3, s, s), fixed=fixed)
    g.spec = spec
    if rng is not None:
        g.materialize()
        initialize(g, spec, rng)
    return g


def initialize(g: NetworkGraph, spec: ModelSpec, rng) -> None:
    """Draw every parameter in node order.

    ``alexnet``: N(0, 0.01) weights (0.005 for hidden FC), biases 0.1 on
    conv2/4/5 and hidden FC, 0 elsewhere.  ``he``: N(0, 2/fan_in) weights
    (1/fan_in for the classifier), zero biases.
    """
    scheme = spec.init_scheme
    head = spec.head_name
    for nd in g.nodes:
        if not nd.layer.params:
            continue
        w, b = nd.layer.params["weight"], nd.layer.params["bias"]
        fan_in = int(np.prod(w.shape[1:]))
        if scheme == "alexnet":
            hidden_fc = nd.layer.kind == "fc" and nd.name != head
            std = 0.005 if hidden_fc else 0.01
            bias = 0.1 if hidden_fc or nd.name in ("conv2", "conv4", "conv5") else 0.0
        elif scheme == "he":
            std = np.sqrt((1.0 if nd.name == head else 2.0) / fan_in)
            bias = 0.0
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        w[...] = rng.standard_normal(w.shape) * std
        b[...] = bias


def summary(g: NetworkGraph, size: int | None = None) -> str:
    """One line per node: name, kind, output shape at the nominal input, params."""
    shape = g.nominal_input if size is None else (1, 3, size, size)
    shapes = g.infer_shapes(shape)
    lines = [f"{g.name}  input {shape}", f"{'name':<16}{'kind':<10}{'output':<22}{'params':>12}"]
    for nd in g.nodes:
        lines.append(f"{nd.name:<16}{nd.layer.kind:<10}{str(shapes[nd.name]):<22}{nd.layer.param_count():>12,}")
    lines.append(f"{'total':<48}{g.param_count():>12,}")
    return "\n".join(lines)


def derivation(g: NetworkGraph) -> list[str]:
    """Per-layer parameter arithmetic, e.g. ``conv2: 48*5*5*256 + 256 = 307,456``."""
    out = []
    for nd in g.nodes:
        L = nd.layer
        if L.kind == "conv":
            expr = f"{L.in_channels // L.groups}*{L.kernel}*{L.kernel}*{L.out_channels} + {L.out_channels}"
        elif L.kind == "fc":
            expr = f"{L.in_features}*{L.out_features} + {L.out_features}"
        else:
            continue
        out.append(f"{nd.name}: {expr} = {L.param_count():,}")
    return out
