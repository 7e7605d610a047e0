"""Architecture specs and forward passes for DNN, DGN and DLGN variants.

Three families are supported:

* ``fc``       — fully connected, depth d, width w
* ``conv_gap`` — 1-D circular convolutions + global average pooling + FC head
* ``res``      — residual: (b+2) fully connected blocks, b identity skips

No bias terms exist anywhere: biases would break the path-product
decomposition the whole package is built around. The hard gate at a
pre-activation of exactly 0 evaluates to 0 (strict inequality).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

FC = "fc"
CONV_GAP = "conv_gap"
RES = "res"

HARD = "hard"
SOFT = "soft"


@dataclass(frozen=True)
class ArchSpec:
    """Declarative description of one network, with all dimensional constants."""

    family: str
    d_in: int
    # fc
    depth: int = 0
    width: int = 0
    # conv_gap
    d_cv: int = 0
    d_fc: int = 0
    w_cv: int = 0
    # res
    b: int = 0
    d_blk: int = 0
    # common
    n_out: int = 1
    c_scale: float = 1.0
    beta: float = 10.0

    def __post_init__(self):
        if self.family not in (FC, CONV_GAP, RES):
            raise ValueError(f"unknown family {self.family!r}")
        if self.d_in < 1 or self.width < 1 or self.n_out < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.c_scale <= 0 or self.beta <= 0:
            raise ValueError("c_scale and beta must be positive")
        if self.family == FC and self.depth < 2:
            raise ValueError("fc family needs depth >= 2")
        if self.family == CONV_GAP:
            if self.d_cv < 1 or self.d_fc < 1:
                raise ValueError("conv_gap needs d_cv >= 1 and d_fc >= 1")
            if not (1 <= self.w_cv < self.d_in):
                raise ValueError("conv_gap needs 1 <= w_cv < d_in")
        if self.family == RES and (self.b < 0 or self.d_blk < 1):
            raise ValueError("res needs b >= 0 and d_blk >= 1")

    def n_gate_layers(self) -> int:
        if self.family == FC:
            return self.depth - 1
        if self.family == CONV_GAP:
            return self.d_cv + (self.d_fc - 1)
        return (self.b + 2) * self.d_blk - 1

    def gate_layer_shapes(self) -> list[tuple[int, ...]]:
        """Per gated layer, the shape of one sample's gate array."""
        if self.family == FC:
            return [(self.width,)] * (self.depth - 1)
        if self.family == CONV_GAP:
            conv = [(self.d_in, self.width)] * self.d_cv
            fc = [(self.width,)] * (self.d_fc - 1)
            return conv + fc
        return [(self.width,)] * self.n_gate_layers()


def scalar_head(arch: ArchSpec) -> ArchSpec:
    """The same trunk with a single scalar output head."""
    return arch if arch.n_out == 1 else replace(arch, n_out=1)


def weight_layer_specs(arch: ArchSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) per weight layer, in forward order.

    kind is 'conv' for circular-conv tensors (w_cv, c_in, c_out) and 'fc'
    for dense matrices (in, out).
    """
    w, k = arch.width, arch.n_out
    if arch.family == FC:
        dims = [arch.d_in] + [w] * (arch.depth - 1) + [k]
        return [(f"fc{l}", (dims[l - 1], dims[l]), "fc") for l in range(1, arch.depth + 1)]
    if arch.family == CONV_GAP:
        specs = []
        for l in range(1, arch.d_cv + 1):
            c_in = 1 if l == 1 else w
            specs.append((f"cv{l}", (arch.w_cv, c_in, w), "conv"))
        dims = [w] * arch.d_fc + [k]
        for l in range(1, arch.d_fc + 1):
            specs.append((f"fc{l}", (dims[l - 1], dims[l]), "fc"))
        return specs
    # res: block 0 enters from d_in, block b+1 exits to n_out
    specs = []
    for j in range(arch.b + 2):
        for l in range(1, arch.d_blk + 1):
            ins = arch.d_in if (j == 0 and l == 1) else w
            outs = k if (j == arch.b + 1 and l == arch.d_blk) else w
            specs.append((f"b{j}l{l}", (ins, outs), "fc"))
    return specs


def shallow_layer_specs(arch: ArchSpec) -> list[tuple[str, tuple[int, ...], str]]:
    """Per gated layer, an independent single map from the raw input (DLGN-SF)."""
    specs = []
    for i, shape in enumerate(arch.gate_layer_shapes()):
        if len(shape) == 2:  # conv gate layer (d_in, w)
            specs.append((f"sf{i + 1}", (arch.w_cv, 1, arch.width), "conv"))
        else:
            specs.append((f"sf{i + 1}", (arch.d_in, arch.width), "fc"))
    return specs


def init_params(
    arch: ArchSpec,
    rng: np.random.Generator,
    sigma: float | None = None,
    role: str = "dense",
) -> dict[str, np.ndarray]:
    """Bernoulli +/-sigma ParamSet; default sigma is c_scale/sqrt(fan) per layer.

    Conv layers use c_scale/sqrt(w * w_cv), dense layers c_scale/sqrt(w).
    A float `sigma` overrides every layer.
    """
    from .numerics import init_bernoulli

    specs = shallow_layer_specs(arch) if role == "shallow" else weight_layer_specs(arch)
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in specs:
        if sigma is not None:
            s = sigma
        elif kind == "conv":
            s = arch.c_scale / np.sqrt(arch.width * arch.w_cv)
        else:
            s = arch.c_scale / np.sqrt(arch.width)
        params[name] = init_bernoulli(shape, s, rng)
    return params


@dataclass
class GateTensor:
    """Per-layer gating values in [0, 1]; conv includes a constant pooling mask."""

    arch: ArchSpec
    layers: list[np.ndarray]
    mode: str

    def __post_init__(self):
        if self.mode not in (HARD, SOFT):
            raise ValueError(f"gate mode must be hard or soft, got {self.mode!r}")

    @property
    def pool_value(self) -> float | None:
        """GAP modeled as a constant gate of 1/d_in (conv family only)."""
        return 1.0 / self.arch.d_in if self.arch.family == CONV_GAP else None

    def pool_mask(self) -> np.ndarray | None:
        if self.arch.family != CONV_GAP:
            return None
        return np.full((self.arch.d_in, self.arch.width), 1.0 / self.arch.d_in)


@dataclass(frozen=True)
class GateRouting:
    """Optional permutation of the gate layers and constant-1 value input."""

    perm: tuple[int, ...] | None = None
    constant_one_input: bool = False

    def validate(self, arch: ArchSpec) -> None:
        if self.perm is None:
            return
        shapes = arch.gate_layer_shapes()
        if sorted(self.perm) != list(range(len(shapes))):
            raise ValueError(f"perm must be a permutation of 0..{len(shapes) - 1}")
        for i, j in enumerate(self.perm):
            if shapes[i] != shapes[j]:
                raise ValueError(
                    f"routing permutes layers of unequal gate shape: {shapes[i]} vs {shapes[j]}"
                )

    def apply(self, gates: Sequence) -> list:
        if self.perm is None:
            return list(gates)
        return [gates[j] for j in self.perm]


IDENTITY_ROUTING = GateRouting()


@dataclass
class ForwardResult:
    y: float | np.ndarray
    gates: GateTensor
    trace: dict
    y_node: Node
    gate_nodes: list


def gate_fn(q, mode: str, beta: float | None = None):
    """Hard: 1{q > 0}; soft: logistic(beta * q)."""
    q = np.asarray(q, dtype=np.float64)
    if mode == HARD:
        return (q > 0.0).astype(np.float64)
    if mode == SOFT:
        if beta is None or beta <= 0:
            raise ValueError("soft mode needs beta > 0")
        return 1.0 / (1.0 + np.exp(-beta * q))
    raise ValueError(f"unknown gate mode {mode!r}")


def _ensure_batch(x, d_in: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != d_in:
            raise ValueError(f"input length {x.shape[0]} != d_in {d_in}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != d_in:
            raise ValueError(f"input width {x.shape[1]} != d_in {d_in}")
        return x, False
    raise ValueError(f"input must be 1-D or 2-D, got shape {x.shape}")


def _as_nodes(params: Mapping) -> dict[str, Node]:
    return {k: (v if isinstance(v, Node) else Node(v)) for k, v in params.items()}


GateProvider = Callable[[int, Node], Node]


def _stack(
    arch: ArchSpec,
    params: Mapping[str, Node],
    X: np.ndarray,
    gate_provider: GateProvider | None,
) -> tuple[Node, list[Node], list[Node], list[Node]]:
    """Run the weight stack, gating each hidden layer via `gate_provider`.

    `gate_provider(idx, q)` returns the gate node for gated layer `idx` given
    its pre-activation node; None runs the stack fully linear (deep linear
    feature network). Returns (output, preacts, gates, layer_outputs).
    """
    preacts: list[Node] = []
    gates: list[Node] = []
    outs: list[Node] = []
    idx = 0

    def gated(q: Node, is_gated: bool) -> Node:
        nonlocal idx
        preacts.append(q)
        if not is_gated or gate_provider is None:
            z = q
            if is_gated:
                gates.append(None)  # linear feature nets export preacts, not gates
        else:
            g = gate_provider(idx, q)
            idx += 1
            gates.append(g)
            z = ad.mul(q, g)
        outs.append(z)
        return z

    if arch.family == FC:
        z: Node = Node(X)
        for l in range(1, arch.depth + 1):
            q = ad.matmul(z, params[f"fc{l}"])
            z = gated(q, is_gated=(l < arch.depth))
        return z, preacts, gates, outs

    if arch.family == CONV_GAP:
        z = Node(X[:, :, None])
        for l in range(1, arch.d_cv + 1):
            q = ad.conv_circular(z, params[f"cv{l}"])
            z = gated(q, is_gated=True)
        z = ad.global_avg_pool(z)
        outs.append(z)
        for l in range(1, arch.d_fc + 1):
            q = ad.matmul(z, params[f"fc{l}"])
            z = gated(q, is_gated=(l < arch.d_fc))
        return z, preacts, gates, outs

    # res
    z = Node(X)
    total_layers = (arch.b + 2) * arch.d_blk
    layer_no = 0
    for j in range(arch.b + 2):
        block_in = z
        for l in range(1, arch.d_blk + 1):
            layer_no += 1
            q = ad.matmul(z, params[f"b{j}l{l}"])
            z = gated(q, is_gated=(layer_no < total_layers))
        if 1 <= j <= arch.b:
            z = ad.add(block_in, z)
            outs.append(z)
    return z, preacts, gates, outs


def _squeeze_result(
    arch: ArchSpec,
    y_node: Node,
    gate_nodes: list[Node],
    preacts: list[Node],
    outs: list[Node],
    mode: str,
    squeeze: bool,
) -> ForwardResult:
    def val(node):
        v = np.asarray(node.value if isinstance(node, Node) else node)
        return v[0] if squeeze else v

    gate_vals = [val(g) for g in gate_nodes]
    y = y_node.value
    if squeeze:
        y = float(y[0, 0]) if arch.n_out == 1 else y[0]
    trace = {
        "preactivations": [val(p) for p in preacts],
        "outputs": [val(z) for z in outs],
    }
    return ForwardResult(
        y=y,
        gates=GateTensor(arch=arch, layers=gate_vals, mode=mode),
        trace=trace,
        y_node=y_node,
        gate_nodes=gate_nodes,
    )


def forward_relu(arch: ArchSpec, params: Mapping, x) -> ForwardResult:
    """Plain DNN with ReLUs: every hidden unit is q * 1{q > 0}."""
    X, squeeze = _ensure_batch(x, arch.d_in)
    nodes = _as_nodes(params)

    def provider(idx: int, q: Node) -> Node:
        return Node(ad.hard_gate_values(q.value, warn=False))

    y, preacts, gates, outs = _stack(arch, nodes, X, provider)
    return _squeeze_result(arch, y, gates, preacts, outs, HARD, squeeze)


def _external_provider(gates_seq: list) -> GateProvider:
    def provider(idx: int, q: Node) -> Node:
        g = gates_seq[idx]
        g = g if isinstance(g, Node) else Node(g)
        if g.value.shape != q.value.shape:
            raise ValueError(
                f"gate shape {g.value.shape} incompatible with pre-activation "
                f"{q.value.shape} at gated layer {idx}"
            )
        return g

    return provider


def _resolve_value_input(arch, x_f, x_v, routing: GateRouting):
    if routing.constant_one_input or (isinstance(x_v, str) and x_v == "ones"):
        base = np.asarray(x_f, dtype=np.float64)
        return np.ones_like(base) if base.ndim > 0 else np.ones(arch.d_in)
    return x_v


def forward_gated(
    arch: ArchSpec,
    params_v: Mapping,
    external_gates,
    routing: GateRouting = IDENTITY_ROUTING,
    x_v=None,
) -> ForwardResult:
    """Value network of GaLUs driven by externally supplied gates.

    `external_gates` is a GateTensor or a list of per-layer gate arrays/nodes
    (unrouted; `routing.perm` is applied here). `x_v` may be 'ones' for the
    constant-1 input.
    """
    routing.validate(arch)
    if isinstance(external_gates, GateTensor):
        seq, mode = external_gates.layers, external_gates.mode
    else:
        seq, mode = list(external_gates), HARD
    if len(seq) != arch.n_gate_layers():
        raise ValueError(f"expected {arch.n_gate_layers()} gate layers, got {len(seq)}")
    if isinstance(x_v, str) and x_v == "ones":
        x_v = np.ones(arch.d_in)
    X, squeeze = _ensure_batch(x_v, arch.d_in)
    routed = routing.apply(seq)
    # broadcast single-sample gates over the batch
    routed2 = []
    for g in routed:
        if isinstance(g, Node):
            routed2.append(g)
        else:
            g = np.asarray(g, dtype=np.float64)
            if g.ndim == len(arch.gate_layer_shapes()[0]) and X.shape[0] > 1:
                g = np.broadcast_to(g, (X.shape[0],) + g.shape)
            elif g.ndim == 1 or (arch.family == CONV_GAP and g.ndim == 2 and g.shape[0] == arch.d_in):
                g = g[None, ...]
            routed2.append(Node(np.asarray(g, dtype=np.float64)))
    nodes = _as_nodes(params_v)
    y, preacts, gates, outs = _stack(arch, nodes, X, _external_provider(routed2))
    return _squeeze_result(arch, y, gates, preacts, outs, mode, squeeze)


def feature_gates(
    arch: ArchSpec,
    params_f: Mapping,
    x_f,
    mode: str = HARD,
    linear: bool = False,
    shallow: bool = False,
    warn_on_ties: bool = True,
) -> tuple[list[Node], Node | None, bool]:
    """Gate nodes produced by the feature network on x_f.

    linear=False: ReLU feature network (DGN); linear=True: deep linear
    feature network (DLGN); shallow=True: per-layer independent single maps
    (DLGN-SF). Returns (gate nodes, feature-net output node or None, squeeze).
    """
    X, squeeze = _ensure_batch(x_f, arch.d_in)
    nodes = _as_nodes(params_f)

    def to_gate(q: Node) -> Node:
        if mode == SOFT:
            return ad.logistic(q, arch.beta)
        return Node(ad.hard_gate_values(q.value, warn=warn_on_ties))

    if shallow:
        gates = []
        for (name, _, kind), shape in zip(shallow_layer_specs(arch), arch.gate_layer_shapes()):
            if kind == "conv":
                q = ad.conv_circular(Node(X[:, :, None]), nodes[name])
            else:
                q = ad.matmul(Node(X), nodes[name])
            gates.append(to_gate(q))
        return gates, None, squeeze

    if linear:
        y_f, preacts, _, _ = _stack(arch, nodes, X, gate_provider=None)
        gated_preacts = _gated_preacts(arch, preacts)
        return [to_gate(q) for q in gated_preacts], y_f, squeeze

    # ReLU feature network: hidden units propagate with hard self-gates,
    # the exported gates tap the pre-activations (hard or soft).
    def provider(idx: int, q: Node) -> Node:
        return Node(ad.hard_gate_values(q.value, warn=False))

    y_f, preacts, _, _ = _stack(arch, nodes, X, provider)
    gated_preacts = _gated_preacts(arch, preacts)
    return [to_gate(q) for q in gated_preacts], y_f, squeeze


def _gated_preacts(arch: ArchSpec, preacts: list[Node]) -> list[Node]:
    """Drop the final (ungated, output) pre-activation from a stack's list."""
    return preacts[:-1]


def forward_dgn(
    arch: ArchSpec,
    params_f: Mapping,
    params_v: Mapping,
    x_f,
    x_v=None,
    mode: str = HARD,
    routing: GateRouting = IDENTITY_ROUTING,
) -> ForwardResult:
    """DGN: ReLU feature network gates a GaLU value network."""
    return _forward_two_net(arch, params_f, params_v, x_f, x_v, mode, routing, linear=False)


def forward_dlgn(
    arch: ArchSpec,
    params_f: Mapping,
    params_v: Mapping,
    x_f,
    x_v=None,
    mode: str = SOFT,
    routing: GateRouting = IDENTITY_ROUTING,
    shallow_features: bool = False,
) -> ForwardResult:
    """DLGN: deep linear (or per-layer shallow) feature network gates a GaLU net."""
    return _forward_two_net(
        arch, params_f, params_v, x_f, x_v, mode, routing,
        linear=not shallow_features, shallow=shallow_features,
    )


def _forward_two_net(arch, params_f, params_v, x_f, x_v, mode, routing, linear, shallow=False):
    routing.validate(arch)
    if x_v is None:
        x_v = x_f
    x_v = _resolve_value_input(arch, x_f, x_v, routing)
    gates, _, _ = feature_gates(arch, params_f, x_f, mode=mode, linear=linear, shallow=shallow)
    X, squeeze = _ensure_batch(x_v, arch.d_in)
    if np.asarray(x_f).ndim != np.asarray(x_v).ndim:
        raise ValueError("x_f and x_v must have the same batch structure")
    routed = routing.apply(gates)
    nodes = _as_nodes(params_v)
    y, preacts, gate_nodes, outs = _stack(arch, nodes, X, _external_provider(routed))
    return _squeeze_result(arch, y, gate_nodes, preacts, outs, mode, squeeze)
