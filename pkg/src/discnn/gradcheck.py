"""Central finite-difference gradient oracle for tape-built losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import Graph, Node

__all__ = ["GradCheckReport", "finite_diff_check", "relative_error"]

# Loss builders take a fresh graph plus parameter arrays and return the
# scalar loss node. They must be deterministic (dropout off or a fixed
# mask) so the two perturbed evaluations differ only in the probed entry.
LossBuilder = Callable[[Graph, dict], Node]


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    """|a - b| scaled by the larger magnitude, floored to dodge 0/0."""
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: tuple[str, int]
    per_op_errors: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_relative_error < 0:
            raise ValueError("max_relative_error must be non-negative")


def _evaluate(build_loss: LossBuilder, params: dict) -> float:
    return float(build_loss(Graph(np.float64), params).value)


def finite_diff_check(
    build_loss: LossBuilder,
    params: dict,
    h: float = 1e-5,
    max_coords_per_param: Optional[int] = None,
    coord_seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against (f(p+h) - f(p-h)) / 2h per coordinate.

    Runs at double precision regardless of the caller's arrays. With
    ``max_coords_per_param`` set, a seeded subset of coordinates is probed
    in each tensor (the full-network check would otherwise need two forward
    passes per parameter entry).
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    params = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}

    graph = Graph(np.float64)
    loss = build_loss(graph, params)
    graph.backward(loss)
    analytic = graph.parameter_gradients()

    param_names = {node.id: name for name, node in graph.params.items()}
    consumer_op: dict[str, str] = {}
    for node in graph.nodes:
        for parent in node.parents:
            name = param_names.get(parent.id)
            if name is not None and name not in consumer_op:
                consumer_op[name] = node.op

    rng = np.random.default_rng(coord_seed)
    max_err = 0.0
    worst = ("", -1)
    per_op: dict[str, float] = {}
    for name, base in params.items():
        size = base.size
        if max_coords_per_param is None or size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            coords = np.sort(rng.choice(size, size=max_coords_per_param, replace=False))
        for c in coords:
            bumped = base.copy()
            bumped.flat[c] += h
            f_plus = _evaluate(build_loss, {**params, name: bumped})
            bumped.flat[c] -= 2 * h
            f_minus = _evaluate(build_loss, {**params, name: bumped})
            numeric = (f_plus - f_minus) / (2 * h)
            err = relative_error(float(analytic[name].flat[c]), numeric)
            op = consumer_op.get(name, "unused")
            per_op[op] = max(per_op.get(op, 0.0), err)
            if err > max_err:
                max_err = err
                worst = (name, int(c))
    return GradCheckReport(max_err, worst, per_op)
