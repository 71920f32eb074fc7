"""Measurements on trained networks.

Generalization gap at a threshold, input-gradient sensitivity, the dominant
Hessian eigenvalue (power iteration on finite-difference Hessian-vector
products), per-layer singular spectra and a perturbation probe of the local
Lipschitz bound.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass, field, fields
from typing import Callable, NamedTuple

import numpy as np

from . import linalg
from .nn import Network, forward, kernel_as_matrix, local_jacobian, loss_and_grad

HESSIAN_MAX_SAMPLES = 2048
FLAT_FLOOR = 1e-12


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    grad_norm_train: float
    grad_norm_test: float
    penalty: float
    per_layer_sigma: tuple[float, ...] = field(default_factory=tuple)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_tuple(self):
        return astuple(self)


def generalization_gap(metrics, alpha: float) -> float | None:
    """Smallest ``train_acc - test_acc`` over records whose ``test_acc > alpha``.

    Returns ``None`` when no record qualifies.
    """
    metrics = list(metrics)
    if not metrics:
        raise ValueError("generalization_gap needs at least one record")
    gaps = [m.train_acc - m.test_acc for m in metrics if m.test_acc > alpha]
    return min(gaps) if gaps else None


def per_sample_input_grads(net: Network, x, labels, chunk: int = 1024) -> np.ndarray:
    """Rows are d/dx_i of the loss on sample i, flattened."""
    x = np.asarray(x, dtype=np.float64)
    out = [
        loss_and_grad(net, x[i : i + chunk], labels[i : i + chunk], reduction="sum").input_grad.reshape(
            len(x[i : i + chunk]), -1
        )
        for i in range(0, len(x), chunk)
    ]
    return np.concatenate(out)


def input_grad_norm(net: Network, x, labels, chunk: int = 1024) -> float:
    """Mean over samples of ``||grad_x L(f(x_i), y_i)||_2``."""
    if len(x) == 0:
        raise ValueError("input_grad_norm needs a non-empty split")
    g = per_sample_input_grads(net, x, labels, chunk)
    return float(np.mean(np.sqrt(np.einsum("ij,ij->i", g, g))))


# ---------------------------------------------------------------------------
# Hessian
# ---------------------------------------------------------------------------


def hvp_fd(grad_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    """Central difference ``(g(theta + h v) - g(theta - h v)) / 2h``."""
    hv = (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)
    if not np.all(np.isfinite(hv)):
        raise FloatingPointError("non-finite Hessian-vector product")
    return hv


def dominant_eig(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    iters: int = 100,
    fd_step: float | None = None,
    rng: np.random.Generator | None = None,
    tol: float = 0.0,
) -> float:
    """Largest-magnitude Hessian eigenvalue (signed) of the function whose gradient is ``grad_fn``.

    Power iteration ``v <- Hv / |Hv|`` with Rayleigh-quotient estimates; stops
    early once successive estimates agree to ``tol`` (relative) if ``tol > 0``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    h = fd_step if fd_step is not None else 1e-4 * (1.0 + np.max(np.abs(theta), initial=0.0))
    if not h > 0:
        raise ValueError("fd_step must be > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    v = rng.standard_normal(theta.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = hvp_fd(grad_fn, theta, v, h)
        new = float(v @ hv)
        nh = np.linalg.norm(hv)
        if nh == 0.0:
            return 0.0
        v = hv / nh
        if tol > 0 and abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def hessian_max_eig(
    net: Network,
    x,
    labels,
    iters: int = 100,
    fd_step: float | None = None,
    max_samples: int = HESSIAN_MAX_SAMPLES,
    seed: int = 0,
    tol: float = 0.0,
) -> float:
    """Dominant eigenvalue of the Hessian of the mean loss w.r.t. all parameters.

    Splits larger than ``max_samples`` are subsampled with a seeded draw.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) > max_samples:
        idx = np.sort(np.random.default_rng(seed).choice(len(x), max_samples, replace=False))
        x, labels = x[idx], labels[idx]
    work = net.copy()

    def grad_fn(theta):
        work.set_flat(theta)
        return work.flatten_grads(loss_and_grad(work, x, labels).param_grads)

    return dominant_eig(grad_fn, net.get_flat(), iters, fd_step, np.random.default_rng(seed), tol)


# ---------------------------------------------------------------------------
# spectra and Lipschitz probe
# ---------------------------------------------------------------------------


def singular_spectrum(net: Network) -> dict[str, np.ndarray]:
    """Singular values of each dense weight / matricized conv kernel, largest first."""
    return {name: linalg.svd_exact(kernel_as_matrix(net.params[name])).singular_values for name in net.weight_names}


def spectrum_flatness(sv: np.ndarray) -> float:
    """``sigma_max / sigma_min`` with sigma_min the smallest value above 1e-12."""
    sv = np.asarray(sv)
    live = sv[sv > FLAT_FLOOR]
    return float(live.max() / live.min()) if live.size else float("nan")


def normalized_spectrum(sv: np.ndarray) -> np.ndarray:
    sv = np.asarray(sv, dtype=np.float64)
    return sv / sv[0] if sv.size and sv[0] > 0 else sv


def layer_sigmas(net: Network) -> tuple[float, ...]:
    return tuple(float(s[0]) for s in singular_spectrum(net).values())


class LipschitzProbe(NamedTuple):
    empirical_max_ratio: float
    sigma_product: float


def _is_dense_piecewise_linear(net: Network) -> bool:
    return all(l.kind in ("dense", "relu") for l in net.layers)


def lipschitz_probe(net: Network, x, trials: int, xi_norm: float, rng: np.random.Generator) -> LipschitzProbe:
    """Largest observed ``|f(x + xi) - f(x)| / |xi|`` against ``prod_l sigma(W_l)``."""
    if not _is_dense_piecewise_linear(net):
        raise ValueError("lipschitz_probe needs a network of dense and relu layers only")
    x = np.asarray(x, dtype=np.float64).reshape(net.input_shape)
    xi = rng.standard_normal((trials, x.size))
    xi *= xi_norm / np.linalg.norm(xi, axis=1, keepdims=True)
    base = forward(net, x[None])[0]
    moved = forward(net, x[None] + xi)[0]
    ratios = np.linalg.norm(moved - base, axis=1) / np.linalg.norm(xi, axis=1)
    product = float(np.prod(layer_sigmas(net)))
    return LipschitzProbe(float(ratios.max()), product)


def local_sigma(net: Network, x) -> float:
    """Spectral norm of the local Jacobian at ``x``."""
    return float(linalg.svd_exact(local_jacobian(net, x)).singular_values[0])
