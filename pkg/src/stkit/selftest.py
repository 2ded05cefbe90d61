"""Quick oracle and gradient checks runnable from the command line."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops, oracles
from .blocks import FeatureGate, InceptionBlock, InceptionConfig, feature_gate
from .tensor import Tensor, backward, precision

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-12


@dataclass
class Check:
    name: str
    ok: bool
    error: float
    tolerance: float

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<34} err={self.error:.3e}  tol={self.tolerance:.0e}"


def _leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def grad_check(loss_fn: Callable[[], Tensor], leaves: list[Tensor], rng: np.random.Generator, samples: int = 6) -> float:
    """Worst relative error between autodiff and central differences on sampled entries."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss_fn())
    worst = 0.0
    for leaf in leaves:
        idx = rng.choice(leaf.size, size=min(samples, leaf.size), replace=False)
        num = oracles.numerical_gradient(lambda: float(loss_fn().data), leaf.data, 1e-6, idx)
        ana = leaf.grad.reshape(-1)[idx]
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst


def _weighted(y: Tensor, probe: np.ndarray) -> Tensor:
    return (y * Tensor(probe)).sum()


def run(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    with precision(np.float64):
        x = rng.normal(size=(2, 5, 6, 6, 3))
        w = rng.normal(size=(3, 3, 3, 3, 4))
        b = rng.normal(size=4)
        for padding in ("VALID", "SAME"):
            y = ops.conv3d(Tensor(x), ops.FilterBank(Tensor(w), Tensor(b), (1, 2, 2), padding)).data
            err = oracles.relative_error(y, oracles.naive_conv3d(x, w, b, (1, 2, 2), padding))
            checks.append(Check(f"conv3d oracle {padding}", err <= ORACLE_TOL, err, ORACLE_TOL))
        y = ops.maxpool3d(Tensor(x), (3, 3, 3), (2, 2, 2)).data
        err = oracles.relative_error(y, oracles.naive_maxpool3d(x, (3, 3, 3), (2, 2, 2)))
        checks.append(Check("maxpool3d oracle", err <= ORACLE_TOL, err, ORACLE_TOL))
        W, gb = rng.normal(size=(3, 3)), rng.normal(size=3)
        g = feature_gate(Tensor(x), Tensor(W), Tensor(gb)).data
        err = oracles.relative_error(g, x * oracles.naive_gate(x, W, gb)[:, None, None, None, :])
        checks.append(Check("feature gate oracle", err <= ORACLE_TOL, err, ORACLE_TOL))

        xs = _leaf(rng, (2, 4, 5, 5, 2))
        ws = _leaf(rng, (3, 3, 3, 2, 3))
        bs = _leaf(rng, (3,))
        probe = rng.normal(size=(2, 4, 3, 3, 3))
        for tp in ("zeros", "edge"):
            f = lambda: _weighted(ops.conv3d(xs, ops.FilterBank(ws, bs, (1, 2, 2), "SAME", tp)), probe)  # noqa: E731
            err = grad_check(f, [xs, ws, bs], rng)
            checks.append(Check(f"conv3d gradient ({tp})", err < GRAD_TOL, err, GRAD_TOL))
        probe = rng.normal(size=(2, 2, 3, 3, 2))
        err = grad_check(lambda: _weighted(ops.maxpool3d(xs, (3, 3, 3), (2, 2, 2)), probe), [xs], rng)
        checks.append(Check("maxpool3d gradient", err < GRAD_TOL, err, GRAD_TOL))

        gate = FeatureGate(2)
        gate.W.data = rng.normal(size=(2, 2))
        gate.b.data = rng.normal(size=2)
        probe = rng.normal(size=xs.shape)
        err = grad_check(lambda: _weighted(gate(xs), probe), [xs, gate.W, gate.b], rng)
        checks.append(Check("feature gate gradient", err < GRAD_TOL, err, GRAD_TOL))

        block = InceptionBlock(InceptionConfig(2, 2, 3, 1, 2, 2, kind="sep", gated=True), 2, rng=rng)
        for _, p in block.named_parameters():
            if p.ndim <= 2:
                p.data = rng.normal(scale=0.3, size=p.shape)
        probe = rng.normal(size=(2, 4, 5, 5, 9))
        params = [p for _, p in block.named_parameters()][:4] + [xs]
        err = grad_check(lambda: _weighted(block(xs), probe), params, rng, samples=4)
        checks.append(Check("gated sep block gradient", err < GRAD_TOL, err, GRAD_TOL))
    return checks
