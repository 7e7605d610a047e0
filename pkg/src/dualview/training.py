"""Losses, optimizers, and the six training regimes.

Regimes:

* ``DNN``            — plain ReLU network, all weights trained
* ``DGN_FR``         — frozen random ReLU feature net supplies hard gates
* ``DGN_FL``         — feature net pre-trained as a ReLU classifier, frozen,
  then the value net is trained against its hard gates
* ``DGN_STANDALONE`` — feature + value nets trained jointly through soft gates
* ``DLGN``           — deep linear feature net, joint soft training
* ``DLGN_SF``        — per-layer shallow linear feature maps, joint soft training

Hard-gate regimes freeze the feature parameters bit-exactly; soft regimes use
the logistic gate with the architecture's beta. The gate routing permutation
and the constant-1 value input are applied identically during training and
evaluation.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .arch import (
    ArchSpec,
    GateRouting,
    HARD,
    SOFT,
    forward_dgn,
    forward_dlgn,
    forward_relu,
    init_params,
    shallow_layer_specs,
    weight_layer_specs,
)
from .autodiff import Node, backward
from .numerics import make_rng

DNN = "DNN"
DGN_FR = "DGN_FR"
DGN_FL = "DGN_FL"
DGN_STANDALONE = "DGN_STANDALONE"
DLGN = "DLGN"
DLGN_SF = "DLGN_SF"
REGIMES = (DNN, DGN_FR, DGN_FL, DGN_STANDALONE, DLGN, DLGN_SF)

HARD_GATE_REGIMES = (DGN_FR, DGN_FL)
SOFT_GATE_REGIMES = (DGN_STANDALONE, DLGN, DLGN_SF)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def loss_softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    logits: (n, k) or (k,); labels: (n,) integer array or a scalar.
    The gradient is (softmax - onehot) / n, matching the mean loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): {labels[(labels < 0) | (labels >= k)][0]}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), labels]))
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(n), labels] -= 1.0
    grad = p / n
    return loss, (grad[0] if single else grad)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def appendix_schedule(total_iters: int) -> Callable[[int], float]:
    """4-phase piecewise learning rate {0.01, 0.1, 0.01, 0.001}.

    The reference breakpoints {400, 32000, 48000} out of 64000 iterations are
    rescaled proportionally to `total_iters` for desk-scale runs.
    """
    if total_iters < 1:
        raise ValueError("total_iters must be >= 1")
    fracs = (400 / 64000, 32000 / 64000, 48000 / 64000)
    breaks = [max(1, int(round(f * total_iters))) for f in fracs]
    values = (0.01, 0.1, 0.01, 0.001)

    def lr(t: int) -> float:
        for b, v in zip(breaks, values):
            if t < b:
                return v
        return values[-1]

    return lr


class Optimizer:
    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        raise NotImplementedError


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")


class SGDMomentum(Optimizer):
    """v <- mu v - eta g; theta <- theta + v. Optional per-iteration schedule."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9,
                 schedule: Callable[[int], float] | None = None):
        if lr <= 0 or not 0.0 <= momentum < 1.0:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        self.lr, self.momentum, self.schedule = lr, momentum, schedule
        self.t = 0
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        eta = self.schedule(self.t) if self.schedule else self.lr
        for name, g in grads.items():
            _check_finite(name, g)
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(params[name])
            v = self.momentum * v - eta * g
            self.velocity[name] = v
            params[name] = params[name] + v
        self.t += 1


class Adam(Optimizer):
    def __init__(self, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("need lr > 0")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            _check_finite(name, g)
            m = self.m.get(name, np.zeros_like(params[name]))
            v = self.v.get(name, np.zeros_like(params[name]))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, lr: float, momentum: float = 0.9,
                   schedule_iters: int | None = None) -> Optimizer:
    if name == "adam":
        return Adam(lr=lr)
    if name == "sgd":
        sched = appendix_schedule(schedule_iters) if schedule_iters else None
        return SGDMomentum(lr=lr, momentum=momentum, schedule=sched)
    raise ValueError(f"unknown optimizer {name!r}; choose adam or sgd")


# ---------------------------------------------------------------------------
# Config / report
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    regime: str = DNN
    x_v: str = "data"  # "data" or "ones" (constant-1 value input)
    perm: tuple[int, ...] | None = None  # gate routing permutation
    optimizer: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.9
    use_schedule: bool = False  # 4-phase schedule (sgd only)
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    init: str = "normal"  # "normal" or "bernoulli" (+-sigma)
    pretrain_epochs: int = 20  # DGN_FL feature pre-training

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.x_v not in ("data", "ones"):
            raise ValueError(f"x_v must be 'data' or 'ones', got {self.x_v!r}")
        if self.init not in ("normal", "bernoulli"):
            raise ValueError(f"init must be 'normal' or 'bernoulli', got {self.init!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.perm is not None:
            self.perm = tuple(int(p) for p in self.perm)

    def routing(self) -> GateRouting:
        return GateRouting(perm=self.perm, constant_one_input=(self.x_v == "ones"))


@dataclass
class TrainReport:
    regime: str
    seed: int
    config: dict
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    final_test_accuracy: float | None = None
    wall_clock_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """A trained (or initialized) network plus everything needed to run it."""

    arch: ArchSpec
    regime: str
    params_f: dict[str, np.ndarray] | None
    params_v: dict[str, np.ndarray]
    routing: GateRouting

    def logits_node(self, X: np.ndarray, nodes_f=None, nodes_v=None) -> Node:
        pf = self.params_f if nodes_f is None else nodes_f
        pv = self.params_v if nodes_v is None else nodes_v
        if self.regime == DNN:
            return forward_relu(self.arch, pv, X).y_node
        if self.regime in HARD_GATE_REGIMES:
            return forward_dgn(self.arch, pf, pv, X, mode=HARD, routing=self.routing).y_node
        if self.regime == DGN_STANDALONE:
            return forward_dgn(self.arch, pf, pv, X, mode=SOFT, routing=self.routing).y_node
        if self.regime == DLGN:
            return forward_dlgn(self.arch, pf, pv, X, mode=SOFT, routing=self.routing).y_node
        return forward_dlgn(self.arch, pf, pv, X, mode=SOFT, routing=self.routing,
                            shallow_features=True).y_node

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.logits_node(np.asarray(X, dtype=np.float64)).value

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)


def evaluate(model: Model, dataset) -> float:
    """Fraction of samples whose argmax logit matches the label."""
    return float(np.mean(model.predict(dataset.X) == dataset.y))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _init_net(arch: ArchSpec, rng, how: str, role: str = "dense") -> dict[str, np.ndarray]:
    if how == "bernoulli":
        return init_params(arch, rng, role=role)
    specs = shallow_layer_specs(arch) if role == "shallow" else weight_layer_specs(arch)
    params = {}
    for name, shape, kind in specs:
        fan = arch.width * arch.w_cv if kind == "conv" else arch.width
        params[name] = rng.normal(scale=arch.c_scale / np.sqrt(fan), size=shape)
    return params


def _trainable(regime: str) -> tuple[bool, bool]:
    """(train feature params, train value params)."""
    if regime == DNN:
        return False, True
    if regime in HARD_GATE_REGIMES:
        return False, True
    return True, True


def _batch_grads(model: Model, Xb, yb, train_f: bool, train_v: bool):
    nodes_v = {k: Node(v) for k, v in model.params_v.items()}
    nodes_f = None
    if model.params_f is not None:
        nodes_f = {k: Node(v) for k, v in model.params_f.items()}
    out = model.logits_node(Xb, nodes_f=nodes_f, nodes_v=nodes_v)
    loss, dlogits = loss_softmax_ce(out.value, yb)
    cot = backward(out, seed=dlogits)

    def collect(prefix, nodes):
        g = {}
        for name, node in nodes.items():
            c = cot.get(id(node))
            g[f"{prefix}{name}"] = np.zeros_like(node.value) if c is None else c
        return g

    grads: dict[str, np.ndarray] = {}
    if train_v:
        grads.update(collect("v.", nodes_v))
    if train_f and nodes_f is not None:
        grads.update(collect("f.", nodes_f))
    return loss, grads


def _run_epochs(model: Model, dataset, opt: Optimizer, epochs, batch_size, rng,
                train_f, train_v, report: TrainReport | None, test=None):
    n = dataset.n
    flat = {}
    for name, arr in model.params_v.items():
        flat[f"v.{name}"] = arr
    if model.params_f is not None and train_f:
        for name, arr in model.params_f.items():
            flat[f"f.{name}"] = arr
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = _batch_grads(model, dataset.X[idx], dataset.y[idx], train_f, train_v)
            opt.step(flat, grads)
            for name, arr in flat.items():
                side, pname = name.split(".", 1)
                (model.params_v if side == "v" else model.params_f)[pname] = arr
            losses.append(loss)
        if report is not None:
            report.train_loss.append(float(np.mean(losses)))
            report.train_accuracy.append(evaluate(model, dataset))
            if test is not None:
                report.test_accuracy.append(evaluate(model, test))


def train(arch: ArchSpec, dataset, config: TrainConfig, test=None):
    """Run one regime on a dataset. Returns (TrainReport, Model)."""
    if arch.n_out != dataset.k:
        raise ValueError(f"arch.n_out={arch.n_out} != dataset classes k={dataset.k}")
    if arch.d_in != dataset.d_in:
        raise ValueError(f"arch.d_in={arch.d_in} != dataset d_in={dataset.d_in}")
    routing = config.routing()
    routing.validate(arch)

    t0 = time.perf_counter()
    rng_f = make_rng(config.seed, stream=1)
    rng_v = make_rng(config.seed, stream=2)
    rng_batch = make_rng(config.seed, stream=3)

    role_f = "shallow" if config.regime == DLGN_SF else "dense"
    params_f = None if config.regime == DNN else _init_net(arch, rng_f, config.init, role_f)
    params_v = _init_net(arch, rng_v, config.init)
    model = Model(arch=arch, regime=config.regime, params_f=params_f,
                  params_v=params_v, routing=routing)

    report = TrainReport(regime=config.regime, seed=config.seed, config=asdict(config))

    if config.regime == DGN_FL:
        # pre-train the feature net as a plain ReLU classifier on y_hat_f,
        # same loss and optimizer family as the main run
        pre = Model(arch=arch, regime=DNN, params_f=None, params_v=params_f,
                    routing=GateRouting())
        iters = config.pretrain_epochs * max(1, dataset.n // config.batch_size)
        pre_opt = make_optimizer(config.optimizer, config.lr, config.momentum,
                                 iters if config.use_schedule else None)
        _run_epochs(pre, dataset, pre_opt, config.pretrain_epochs, config.batch_size,
                    make_rng(config.seed, stream=4), train_f=False, train_v=True,
                    report=None)

    frozen_before = None
    if config.regime in HARD_GATE_REGIMES:
        frozen_before = {k: v.copy() for k, v in params_f.items()}

    train_f, train_v = _trainable(config.regime)
    iters = config.epochs * max(1, dataset.n // config.batch_size)
    opt = make_optimizer(config.optimizer, config.lr, config.momentum,
                         iters if config.use_schedule else None)
    _run_epochs(model, dataset, opt, config.epochs, config.batch_size, rng_batch,
                train_f, train_v, report, test=test)

    if frozen_before is not None:
        for k, v in frozen_before.items():
            if not np.array_equal(v, model.params_f[k]):
                raise AssertionError(f"frozen feature parameter {k!r} changed during training")

    if test is not None:
        report.final_test_accuracy = evaluate(model, test)
    report.wall_clock_s = time.perf_counter() - t0
    return report, model
