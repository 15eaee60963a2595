"""lp-bounded attacks: steepest-ascent steps, exact ball projections, PGD and
multi steepest descent (MSD).

All operations act row-wise: a 2-D ``x`` is a batch and every row gets its own
perturbation, norm and projection. A 1-D ``x`` is treated as a single sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import UsageError
from .model import ModelParams, input_grad, per_sample_loss
from .numcore import parse_norm, row_norms

# Desk budgets for d = 8: l2 = linf * d**0.25 and l1 = linf * d**0.5 (rounded), so
# no ball contains another. IMAGE_BUDGETS are the image-scale values.
DEFAULT_BUDGETS = {"linf": 0.05, "l2": 0.085, "l1": 0.14}
IMAGE_BUDGETS = {"linf": 8 / 255, "l2": 1.0, "l1": 12.0}
TRAIN_STEPS = 10
EVAL_STEPS = 50
FEAS_RTOL = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    """One perturbation model. ``l1_k`` only matters for ``p == "l1"``."""

    p: str
    delta: float
    steps: int = TRAIN_STEPS
    alpha: float | None = None
    l1_k: int = 1

    def __post_init__(self):
        object.__setattr__(self, "p", parse_norm(self.p))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "steps", int(self.steps))
        if self.alpha is None:
            object.__setattr__(self, "alpha", 2.0 * self.delta / self.steps if self.steps else 0.0)
        object.__setattr__(self, "alpha", float(self.alpha))
        if not (self.delta >= 0 and np.isfinite(self.delta)):
            raise UsageError(f"budget must be finite and nonnegative, got {self.delta}")
        if self.steps < 0:
            raise UsageError(f"steps must be nonnegative, got {self.steps}")
        if not (self.alpha >= 0 and np.isfinite(self.alpha)):
            raise UsageError(f"step size must be finite and nonnegative, got {self.alpha}")
        if self.l1_k < 1:
            raise UsageError(f"l1_k must be at least 1, got {self.l1_k}")


@dataclass(frozen=True)
class DomainBox:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise UsageError("box needs lo < hi")


UNIT_BOX = DomainBox()


def make_specs(norms, budgets=None, steps: int = TRAIN_STEPS) -> list[AttackSpec]:
    """Specs for each norm with alpha = 2 * delta / steps."""
    budgets = {**DEFAULT_BUDGETS, **(budgets or {})}
    specs = [AttackSpec(parse_norm(n), budgets[parse_norm(n)], steps) for n in norms]
    if len({s.p for s in specs}) != len(specs):
        raise UsageError("norms must be pairwise distinct")
    return specs


def steepest_step(grad, spec: AttackSpec) -> np.ndarray:
    """Steepest-ascent step of length ``alpha`` in the spec's norm, per row."""
    g = np.asarray(grad, dtype=np.float64)
    if spec.p == "linf":
        return spec.alpha * np.sign(g)
    if spec.p == "l2":
        n = row_norms(g, "l2")[..., None]
        safe = np.where(n > 0, n, 1.0)
        return np.where(n > 0, spec.alpha * g / safe, 0.0)
    k = min(spec.l1_k, g.shape[-1])
    order = np.argsort(-np.abs(g), axis=-1, kind="stable")[..., :k]
    step = np.zeros_like(g)
    chosen = np.take_along_axis(g, order, axis=-1)
    np.put_along_axis(step, order, (spec.alpha / k) * np.sign(chosen), axis=-1)
    return step


def project_l1_ball(v, radius: float) -> np.ndarray:
    """Euclidean projection of each row onto {w : ||w||_1 <= radius}.

    Sort-based simplex projection of |v| followed by sign restoration.
    """
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, v.shape[-1]) if v.ndim else v.reshape(1, 1)
    out = flat.copy()
    a = np.abs(flat)
    outside = a.sum(axis=1) > radius
    if np.any(outside):
        if radius <= 0:
            out[outside] = 0.0
        else:
            ao = a[outside]
            u = -np.sort(-ao, axis=1)
            css = np.cumsum(u, axis=1)
            j = np.arange(1, u.shape[1] + 1)
            cond = u * j > (css - radius)
            rho = np.maximum(cond.sum(axis=1) - 1, 0)  # rounding can empty cond for tiny radii
            theta = (css[np.arange(len(rho)), rho] - radius) / (rho + 1.0)
            out[outside] = np.sign(flat[outside]) * np.maximum(ao - theta[:, None], 0.0)
    return out.reshape(v.shape)


def _project_ball(eps: np.ndarray, spec: AttackSpec) -> np.ndarray:
    if spec.p == "linf":
        return np.clip(eps, -spec.delta, spec.delta)
    if spec.p == "l2":
        n = row_norms(eps, "l2")[..., None]
        scale = np.where(n > spec.delta, spec.delta / np.where(n > 0, n, 1.0), 1.0)
        return eps * scale
    return project_l1_ball(eps, spec.delta)


def project(eps, x, spec: AttackSpec, box: DomainBox = UNIT_BOX) -> np.ndarray:
    """Map ``eps`` into the spec's ball, then keep ``x + eps`` inside the box."""
    eps = np.asarray(eps, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if eps.shape != x.shape:
        raise UsageError(f"perturbation shape {eps.shape} != input shape {x.shape}")
    out = _project_ball(eps, spec)
    z = x + out
    out = np.where(z > box.hi, box.hi - x, np.where(z < box.lo, box.lo - x, out))
    bad = row_norms(out, spec.p) > spec.delta * (1.0 + FEAS_RTOL)
    if np.any(bad):
        out = np.where(bad[..., None] if out.ndim > 1 else bad, _project_ball(out, spec), out)
    return out


def _as_batch(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
        y = np.atleast_1d(y)
    return x, np.asarray(y), single


def _finish(x, eps, box, single):
    adv = np.clip(x + eps, box.lo, box.hi)
    return adv[0] if single else adv


def pgd_attack(params: ModelParams, x, y, spec: AttackSpec, box: DomainBox = UNIT_BOX) -> np.ndarray:
    """Projected steepest ascent from eps = 0 for ``spec.steps`` iterations."""
    x, y, single = _as_batch(x, y)
    eps = np.zeros_like(x)
    for _ in range(spec.steps):
        g = input_grad(params, x + eps, y)
        eps = project(eps + steepest_step(g, spec), x, spec, box)
    return _finish(x, eps, box, single)


class MSDStep(NamedTuple):
    candidates: np.ndarray  # (n_specs, n, d)
    losses: np.ndarray      # (n_specs, n)
    choice: np.ndarray      # (n,) index of the selected spec per sample
    eps: np.ndarray         # (n, d) selected perturbation


def iter_msd(params: ModelParams, x, y, specs: Sequence[AttackSpec],
             box: DomainBox = UNIT_BOX) -> Iterator[MSDStep]:
    """Yield every MSD inner step for a 2-D batch.

    Each step takes one input gradient at x + eps, builds one projected
    candidate per spec and keeps, per sample, the candidate with the largest
    loss (first spec wins ties). Runs for the largest ``steps`` among specs.
    """
    specs = list(specs)
    if not specs:
        raise UsageError("msd_attack needs at least one attack spec")
    if len({s.p for s in specs}) != len(specs):
        raise UsageError("msd specs must have pairwise distinct norms")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    eps = np.zeros_like(x)
    rows = np.arange(x.shape[0])
    for _ in range(max(s.steps for s in specs)):
        g = input_grad(params, x + eps, y)
        cands = np.stack([project(eps + steepest_step(g, s), x, s, box) for s in specs])
        losses = np.stack([per_sample_loss(params, x + c, y) for c in cands])
        choice = np.argmax(losses, axis=0)
        eps = cands[choice, rows]
        yield MSDStep(cands, losses, choice, eps)


def msd_attack(params: ModelParams, x, y, specs: Sequence[AttackSpec],
               box: DomainBox = UNIT_BOX) -> np.ndarray:
    x, y, single = _as_batch(x, y)
    eps = np.zeros_like(x)
    for step in iter_msd(params, x, y, specs, box):
        eps = step.eps
    return _finish(x, eps, box, single)


def craft(params: ModelParams, x, y, specs: Sequence[AttackSpec], box: DomainBox = UNIT_BOX) -> np.ndarray:
    """No attack, PGD or MSD depending on how many specs are given."""
    if not specs:
        return np.asarray(x, dtype=np.float64)
    if len(specs) == 1:
        return pgd_attack(params, x, y, specs[0], box)
    return msd_attack(params, x, y, specs, box)
