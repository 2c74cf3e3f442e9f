"""Gradient self-test: every op and the tiny encoder under each SSL loss."""

from __future__ import annotations

import dataclasses
import time
from typing import Callable

import numpy as np

from .engine import ops
from .engine.gradcheck import check_gradients
from .engine.tensor import Tensor
from .losses import (METHODS, FeatureMemory, barlow_loss, info_nce, simsiam_loss,
                     tico_loss, vicreg_loss)
from .model import build_model, forward_predictor, forward_projected, tiny_spec

TOLERANCE = 1e-4


def _t(rng, *shape, positive=False) -> Tensor:
    data = rng.uniform(0.5, 1.5, shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    # a fixed random readout so every output element gets a distinct cotangent
    return ops.sum(ops.mul(out, weights))


def op_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """``{name: (loss_fn, inputs)}`` exercising each differentiable op."""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, build, *inputs):
        probe = build(*inputs)
        w = rng.normal(size=probe.shape)
        cases[name] = (lambda: _weighted(build(*inputs), w), list(inputs))

    add_case("add", ops.add, _t(rng, 3, 4), _t(rng, 1, 4))
    add_case("sub", ops.sub, _t(rng, 3, 4), _t(rng, 3, 1))
    add_case("mul", ops.mul, _t(rng, 3, 4), _t(rng, 4))
    add_case("div", ops.div, _t(rng, 3, 4), _t(rng, 3, 4, positive=True))
    add_case("scale", lambda a: ops.scale(a, -2.5), _t(rng, 5))
    add_case("square", ops.square, _t(rng, 3, 3))
    add_case("relu", ops.relu, _t(rng, 4, 5))
    add_case("sqrt", ops.sqrt, _t(rng, 6, positive=True))
    add_case("exp", ops.exp, _t(rng, 3, 2))
    add_case("log", ops.log, _t(rng, 3, 2, positive=True))
    add_case("sum", lambda a: ops.sum(a, axis=1, keepdims=True), _t(rng, 3, 4))
    add_case("mean", lambda a: ops.mean(a, axis=0), _t(rng, 3, 4))
    add_case("var", lambda a: ops.var(a, axis=0, ddof=1), _t(rng, 5, 3))
    add_case("reshape", lambda a: ops.reshape(a, (2, 6)), _t(rng, 3, 4))
    add_case("transpose", ops.transpose, _t(rng, 3, 4))
    add_case("concat", lambda a, b: ops.concat([a, b], axis=0), _t(rng, 2, 3), _t(rng, 4, 3))
    add_case("matmul", ops.matmul, _t(rng, 3, 4), _t(rng, 4, 2))
    add_case("l2_normalize_rows", ops.l2_normalize_rows, _t(rng, 4, 3))
    add_case("conv2d", ops.conv2d, _t(rng, 2, 2, 5, 5), _t(rng, 3, 2, 3, 3))
    add_case("maxpool2d", ops.maxpool2d, _t(rng, 2, 2, 4, 4))
    add_case("batchnorm_train_4d",
             lambda x, g, b: ops.batchnorm(x, g, b, None, None, train=True),
             _t(rng, 3, 2, 3, 3), _t(rng, 2), _t(rng, 2))
    add_case("batchnorm_train_2d",
             lambda x, g, b: ops.batchnorm(x, g, b, None, None, train=True),
             _t(rng, 5, 3), _t(rng, 3), _t(rng, 3))
    rm, rv = Tensor(rng.normal(size=3)), Tensor(rng.uniform(0.5, 2.0, 3))
    add_case("batchnorm_eval",
             lambda x, g, b: ops.batchnorm(x, g, b, rm, rv, train=False),
             _t(rng, 4, 3), _t(rng, 3), _t(rng, 3))
    return cases


def composed_case(method: str, seed: int = 0, batch: int = 6, image_size: int = 12):
    """Loss of the tiny encoder on fixed views as a function of its trainable entries.

    SimSiam targets come from a frozen copy of the initial weights. TiCo uses
    beta = 1 so the (fixed, positive semi-definite) memory is not changed by
    the call and the loss stays a pure function of the weights.
    """
    rng = np.random.default_rng(seed)
    spec = dataclasses.replace(tiny_spec(method), image_size=image_size)
    params = build_model(spec, rng)
    v1 = rng.uniform(size=(batch, 1, image_size, image_size))
    v2 = rng.uniform(size=(batch, 1, image_size, image_size))
    frozen = params.snapshot()
    a = rng.normal(size=(spec.proj_dim, spec.proj_dim))
    memory = FeatureMemory(a @ a.T / spec.proj_dim)

    def loss_fn() -> Tensor:
        z1 = forward_projected(params, v1, train=True)
        z2 = forward_projected(params, v2, train=True)
        if method == "simclr":
            return info_nce(z1, z2, 0.5)
        if method == "simsiam":
            t1 = forward_projected(frozen, v1, train=True).detach()
            t2 = forward_projected(frozen, v2, train=True).detach()
            p1 = forward_predictor(params, z1, train=True)
            p2 = forward_predictor(params, z2, train=True)
            return simsiam_loss(p1, p2, t1, t2)
        if method == "barlow":
            return barlow_loss(z1, z2, 5e-3)
        if method == "vicreg":
            return vicreg_loss(z1, z2, 25.0, 25.0, 1.0, 1.0)
        n1, n2 = ops.l2_normalize_rows(z1), ops.l2_normalize_rows(z2)
        return tico_loss(n1, n2, memory, 1.0, 8.0)[0]

    return loss_fn, list(params.trainable().values())


def run_suite(seed: int = 0, h: float = 1e-5, tolerance: float = TOLERANCE) -> list[dict]:
    """Check every op case and every composed case; one result row per case."""
    rows = []
    cases = {f"op:{k}": v for k, v in op_cases(seed).items()}
    cases.update({f"encoder+{m}": composed_case(m, seed) for m in METHODS})
    for name, (fn, inputs) in cases.items():
        start = time.perf_counter()
        # composed cases are judged on the full parameter vector: some biases
        # have an exactly zero gradient there (a later BN cancels them)
        err = max(check_gradients(fn, inputs, h, joint=name.startswith("encoder+")))
        rows.append({
            "case": name,
            "max_rel_error": err,
            "passed": bool(err < tolerance),
            "seconds": time.perf_counter() - start,
        })
    return rows
