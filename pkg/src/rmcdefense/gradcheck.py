"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import numpy as np

from .model import ArchSpec, ModelParams, forward_loss, init_params, input_grad, param_grad, per_sample_loss
from .numcore import RngStream

FD_STEP = 1e-5


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def fd_gradient(f, v: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function of a flat vector."""
    v = np.array(v, dtype=np.float64)
    g = np.empty_like(v)
    for i in range(v.size):
        old = v[i]
        v[i] = old + h
        up = f(v)
        v[i] = old - h
        down = f(v)
        v[i] = old
        g[i] = (up - down) / (2.0 * h)
    return g


KINK_MARGIN = 1e-3


def _near_kink(params: ModelParams, x: np.ndarray) -> bool:
    h = x[None, :]
    for (w, b), layer in zip(params.unflatten(), params.arch.layers):
        z = h @ w + b
        if layer.activation == "relu":
            if np.min(np.abs(z)) < KINK_MARGIN:
                return True
            z = np.maximum(z, 0.0)
        h = z
    return False


def random_problem(arch: ArchSpec, seed: int, batch: int = 6):
    """Random parameters and a batch whose hidden pre-activations all stay at
    least KINK_MARGIN away from zero, where finite differences are meaningful."""
    stream = RngStream(seed)
    params = init_params(arch, stream)
    # nonzero biases so the check also covers them
    params = params.replace(params.flat + 0.1 * (stream.uniforms(arch.n_params) - 0.5))
    rows = []
    while len(rows) < batch:
        row = stream.uniforms(arch.input_dim)
        if not _near_kink(params, row):
            rows.append(row)
    y = np.array([int(stream.uniform() * arch.num_classes) for _ in range(batch)])
    return params, np.array(rows), y


def check_param_grad(params: ModelParams, x, y, h: float = FD_STEP) -> float:
    analytic = param_grad(params, x, y)
    numeric = fd_gradient(lambda v: forward_loss(ModelParams(params.arch, v), x, y)[0], params.flat, h)
    return relative_error(analytic, numeric)


def check_input_grad(params: ModelParams, x, y, h: float = FD_STEP) -> float:
    """Worst per-sample relative error of the input gradient."""
    analytic = input_grad(params, x, y)
    worst = 0.0
    for i in range(x.shape[0]):
        numeric = fd_gradient(lambda v: per_sample_loss(params, v[None, :], y[i:i + 1])[0], x[i], h)
        worst = max(worst, relative_error(analytic[i], numeric))
    return worst


def gradcheck(arch: ArchSpec, seed: int, batch: int = 6) -> dict:
    params, x, y = random_problem(arch, seed, batch)
    return {"param": check_param_grad(params, x, y), "input": check_input_grad(params, x, y)}
