"""Finite-difference gradient suite for every differentiable operation.

Each entry perturbs float64 parameters and compares central differences
against the recorded backward pass. The suite is shared by the test suite
and the ``gradcheck`` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .networks import CommandEncoder, EncoderConfig, MLP, NetworkConfig, PolicyNet, gaussian_log_prob
from .tensor import Tensor, finite_difference_check

OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _op_cases(rng: np.random.Generator):
    """(name, params, build_loss) triples covering every op, several shapes each."""
    cases = []

    def add_case(name, params, fn):
        cases.append((name, params, fn))

    shapes = [(3,), (2, 4), (2, 3, 4)]
    for i, shp in enumerate(shapes):
        a, b = _rand(rng, *shp), _rand(rng, *shp)
        add_case(f"add/{i}", [a, b], lambda a=a, b=b: T.sum_(T.tanh(a + b)))
        add_case(f"sub/{i}", [a, b], lambda a=a, b=b: T.sum_(T.tanh(a - b)))
        add_case(f"mul/{i}", [a, b], lambda a=a, b=b: T.sum_(T.tanh(a * b)))
        c = Tensor(rng.uniform(0.5, 1.5, shp), requires_grad=True, dtype=np.float64)
        add_case(f"div/{i}", [a, c], lambda a=a, c=c: T.sum_(T.tanh(a / c)))
        add_case(f"neg/{i}", [a], lambda a=a: T.sum_(T.tanh(-a)))
        add_case(f"square/{i}", [a], lambda a=a: T.sum_(T.tanh(T.square(a))))
        add_case(f"exp/{i}", [a], lambda a=a: T.sum_(T.tanh(T.exp(a))))
        add_case(f"tanh/{i}", [a], lambda a=a: T.sum_(T.square(T.tanh(a))))
        add_case(f"relu/{i}", [a], lambda a=a: T.sum_(T.square(T.relu(a))))
        add_case(f"elu/{i}", [a], lambda a=a: T.sum_(T.square(T.elu(a))))
        add_case(f"gelu/{i}", [a], lambda a=a: T.sum_(T.square(T.gelu(a))))
        add_case(f"softmax/{i}", [a], lambda a=a: T.sum_(T.square(T.softmax(a))))
        add_case(f"mean/{i}", [a], lambda a=a: T.mean(T.square(a)))
        add_case(f"sum_axis/{i}", [a], lambda a=a: T.sum_(T.square(T.sum_(a, axis=-1))))
        add_case(
            f"concat/{i}", [a, b],
            lambda a=a, b=b: T.sum_(T.tanh(T.concat([a, b], axis=-1))),
        )
        add_case(
            f"maximum/{i}", [a, b], lambda a=a, b=b: T.sum_(T.tanh(T.maximum(a, b)))
        )
        add_case(
            f"minimum/{i}", [a, b], lambda a=a, b=b: T.sum_(T.tanh(T.minimum(a, b)))
        )
        add_case(
            f"maximum_const/{i}", [a], lambda a=a: T.sum_(T.tanh(T.maximum_const(a, 0.1)))
        )
        add_case(
            f"clip_const/{i}", [a], lambda a=a: T.sum_(T.tanh(T.clip_const(a, -0.7, 0.7)))
        )
        add_case(f"slice/{i}", [a], lambda a=a: T.sum_(T.square(a[..., 1:])))

    p = Tensor(rng.uniform(0.5, 2.0, (4,)), requires_grad=True, dtype=np.float64)
    add_case("log", [p], lambda p=p: T.sum_(T.square(T.log(p))))

    for i, (m, k, n) in enumerate([(3, 4, 2), (2, 5, 5)]):
        a, b = _rand(rng, m, k), _rand(rng, k, n)
        add_case(f"matmul/{i}", [a, b], lambda a=a, b=b: T.sum_(T.tanh(a @ b)))
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)
    add_case("matmul/batched", [a, b], lambda a=a, b=b: T.sum_(T.tanh(a @ b)))
    a, b = _rand(rng, 2, 2, 3, 4), _rand(rng, 4, 5)
    add_case("matmul/broadcast", [a, b], lambda a=a, b=b: T.sum_(T.tanh(a @ b)))

    x = _rand(rng, 3, 5)
    g = Tensor(rng.uniform(0.5, 1.5, (5,)), requires_grad=True, dtype=np.float64)
    bb = _rand(rng, 5)
    add_case("layer_norm", [x, g, bb], lambda x=x, g=g, bb=bb: T.sum_(T.square(T.layer_norm(x, g, bb))))

    x = _rand(rng, 4, 3, 6)
    idx = rng.integers(0, 3, size=4)
    add_case("take_tokens", [x], lambda x=x, idx=idx: T.sum_(T.tanh(T.take_tokens(x, idx))))

    x = _rand(rng, 2, 3, 4)
    add_case("reshape", [x], lambda x=x: T.sum_(T.tanh(T.reshape(x, (2, 12)))))
    add_case("swapaxes", [x], lambda x=x: T.sum_(T.tanh(T.swapaxes(x, 1, 2))))
    return cases


def run_op_checks(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for name, params, fn in _op_cases(rng):
        err = finite_difference_check(fn, params)
        out.append(GradCheckResult(name, err, OP_TOL))
    return out


def run_composite_checks(seed: int = 0) -> list[GradCheckResult]:
    """Full encoder and encoder+MLP policy composites against central differences."""
    rng = np.random.Generator(np.random.PCG64(seed + 1))
    out = []

    enc_cfg = EncoderConfig(num_heads=2, num_layers=2, d_model=8, feedforward=12, output=6)
    enc = CommandEncoder(enc_cfg, token_width=7, rng=rng, dtype=np.float64)
    tokens = Tensor(rng.standard_normal((2, 3, 7)), dtype=np.float64)
    params = list(enc.params.values())
    err = finite_difference_check(
        lambda: T.mean(T.square(enc.forward(tokens))), params
    )
    out.append(GradCheckResult("encoder", err, COMPOSITE_TOL))

    net_cfg = NetworkConfig(
        encoder=EncoderConfig(num_heads=1, num_layers=1, d_model=6, feedforward=6, output=4),
        mlp_hidden=(8, 8),
    )
    pol = PolicyNet(obs_width=5, token_width=7, n_actions=3, cfg=net_cfg, rng=rng, dtype=np.float64)
    obs = Tensor(rng.standard_normal((2, 5)), dtype=np.float64)
    tokens = Tensor(rng.standard_normal((2, 4, 7)), dtype=np.float64)
    t_lefts = np.array([[0.1, 0.2, 0.3], [-0.1, -0.2, -0.3]])
    actions = rng.standard_normal((2, 3))

    def loss():
        mean_t, std = pol.forward(obs, tokens, t_lefts)
        return T.mean(gaussian_log_prob(mean_t, std, actions))

    err = finite_difference_check(loss, list(pol.params.values()))
    out.append(GradCheckResult("policy(encoder+mlp+gaussian)", err, COMPOSITE_TOL))

    mlp = MLP([4, 6, 2], rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((3, 4)), dtype=np.float64)
    err = finite_difference_check(
        lambda: T.mean(T.square(mlp.forward(x))), list(mlp.params.values())
    )
    out.append(GradCheckResult("mlp", err, COMPOSITE_TOL))
    return out


def run_gradient_suite(seed: int = 0) -> list[GradCheckResult]:
    return run_op_checks(seed) + run_composite_checks(seed)
