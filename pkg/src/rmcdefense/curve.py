"""Quadratic Bezier paths between two parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .model import ModelParams


@dataclass(frozen=True, eq=False)
class CurveParams:
    theta_start: ModelParams
    theta_control: ModelParams
    theta_end: ModelParams

    def __post_init__(self):
        arch = self.theta_start.arch
        if self.theta_control.arch != arch or self.theta_end.arch != arch:
            raise UsageError("curve endpoints and control point must share one architecture")

    @property
    def arch(self):
        return self.theta_start.arch

    def with_control(self, flat) -> "CurveParams":
        return CurveParams(self.theta_start, self.theta_start.replace(flat), self.theta_end)


def init_curve(a: ModelParams, b: ModelParams) -> CurveParams:
    """Curve whose control point is the endpoint midpoint, i.e. the straight segment."""
    if a.arch != b.arch:
        raise UsageError("endpoints have different architectures")
    return CurveParams(a, a.replace(0.5 * (a.flat + b.flat)), b)


def bezier_weights(t: float) -> tuple[float, float, float]:
    s = 1.0 - t
    return s * s, 2.0 * t * s, t * t


def _check_t(t) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise UsageError(f"curve parameter t={t} outside [0, 1]")
    return t


def curve_point(curve: CurveParams, t: float) -> ModelParams:
    """phi(t) = (1-t)^2 start + 2t(1-t) control + t^2 end."""
    t = _check_t(t)
    if t == 0.0:
        return curve.theta_start
    if t == 1.0:
        return curve.theta_end
    _, w1, w2 = bezier_weights(t)
    # same polynomial, written relative to the start so coinciding blocks stay exact
    start = curve.theta_start.flat
    flat = start + w1 * (curve.theta_control.flat - start) + w2 * (curve.theta_end.flat - start)
    return curve.theta_start.replace(flat)


def control_grad(grad_at_point, t: float, n_params: int | None = None) -> np.ndarray:
    """Chain rule from d(loss)/d(phi(t)) to d(loss)/d(control)."""
    t = _check_t(t)
    g = np.asarray(grad_at_point, dtype=np.float64)
    if n_params is not None and g.size != n_params:
        raise UsageError(f"gradient length {g.size} != parameter count {n_params}")
    return bezier_weights(t)[1] * g
