"""Training objectives: vanilla, weight decay, adversarial, spectral.

Each one is a transformation of the plain cross-entropy
:class:`~specreg.nn.GradientBundle`.  Only weight matrices (dense weights and
matricized conv kernels) are regularized; biases never are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .linalg import PowerIterState
from .nn import GradientBundle, Network, kernel_as_matrix, loss_and_grad, loss_and_grad_chunked

KINDS = ("vanilla", "decay", "adversarial", "spectral")

SpectralStates = dict[str, PowerIterState]


@dataclass(frozen=True)
class RegularizerConfig:
    kind: str = "vanilla"
    lam: float = 0.0
    alpha: float = 0.5
    epsilon: float = 1.0
    power_iters: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"regularizer kind must be one of {KINDS}, got {self.kind!r}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.power_iters < 1:
            raise ValueError(f"power_iters must be >= 1, got {self.power_iters}")

    @classmethod
    def default_for(cls, kind: str) -> "RegularizerConfig":
        """Usual hyperparameters for each objective."""
        return {
            "vanilla": cls("vanilla"),
            "decay": cls("decay", lam=1e-4),
            "adversarial": cls("adversarial", alpha=0.5, epsilon=1.0),
            "spectral": cls("spectral", lam=0.01),
        }[kind]


def init_spectral_states(net: Network, rng: np.random.Generator) -> SpectralStates:
    """Gaussian starting vectors for every weight matrix, in registry order."""
    states = {}
    for name in net.weight_names:
        rows, cols = kernel_as_matrix(net.params[name]).shape
        states[name] = PowerIterState.random(rows, cols, rng)
    return states


def _copy_bundle(bundle: GradientBundle) -> GradientBundle:
    return GradientBundle(
        param_grads={k: g.copy() for k, g in bundle.param_grads.items()},
        input_grad=bundle.input_grad,
        loss=bundle.loss,
        penalty=bundle.penalty,
    )


def decay_penalty(net: Network, lam: float) -> float:
    return 0.5 * lam * sum(linalg.frobenius_norm_sq(net.params[n]) for n in net.weight_names)


def apply_weight_decay(bundle: GradientBundle, net: Network, lam: float) -> GradientBundle:
    """Add ``lam * W`` to every weight gradient (penalty ``lam/2 * sum ||W||_F^2``)."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return bundle
    out = _copy_bundle(bundle)
    for name in net.weight_names:
        out.param_grads[name] += lam * net.params[name]
    out.penalty += decay_penalty(net, lam)
    return out


def apply_spectral(
    bundle: GradientBundle,
    net: Network,
    lam: float,
    states: SpectralStates,
    power_iters: int = 1,
    rng: np.random.Generator | None = None,
) -> tuple[GradientBundle, SpectralStates]:
    """Advance each matrix's power iteration and add ``lam * sigma * u v^T``.

    Conv gradients are mapped back to kernel layout by the inverse of
    :func:`~specreg.nn.kernel_as_matrix`.  The states are advanced even when
    ``lam == 0``.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    new_states: SpectralStates = {}
    added = {}
    penalty = 0.0
    for name in net.weight_names:
        if name not in states:
            raise KeyError(f"no power-iteration state for weight matrix {name!r}")
        W = kernel_as_matrix(net.params[name])
        sigma, st = linalg.spectral_norm(W, power_iters, states[name], rng)
        new_states[name] = st
        penalty += 0.5 * lam * sigma * sigma
        if lam != 0:
            added[name] = lam * linalg.spectral_sq_grad(W, st).reshape(net.params[name].shape)
    if lam == 0:
        return bundle, new_states
    out = _copy_bundle(bundle)
    for name, g in added.items():
        out.param_grads[name] += g
    out.penalty += penalty
    return out, new_states


def spectral_penalty(states: SpectralStates, lam: float) -> float:
    return 0.5 * lam * sum(st.sigma**2 for st in states.values())


def adversarial_batch(net: Network, x, labels, epsilon: float):
    """Move each input ``epsilon`` along its own normalized loss gradient.

    Returns ``(x_adv, unperturbed)`` where ``unperturbed`` flags samples whose
    input gradient was exactly zero and were left as they were.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    g = loss_and_grad(net, x, labels, reduction="sum").input_grad
    flat = g.reshape(len(x), -1)
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    zero = norms == 0.0
    scale = np.where(zero, 0.0, epsilon / np.where(zero, 1.0, norms))
    x_adv = x + (flat * scale[:, None]).reshape(x.shape)
    return x_adv, zero


def objective_grad(
    net: Network,
    x,
    labels,
    config: RegularizerConfig,
    states: SpectralStates | None = None,
    rng: np.random.Generator | None = None,
    chunk_size: int = 0,
) -> tuple[GradientBundle, SpectralStates | None, float]:
    """Gradient of the configured objective at one minibatch.

    Returns ``(bundle, states, penalty)``; ``bundle.loss`` is the data term
    (for adversarial, the alpha-mix of clean and perturbed losses) and
    ``penalty`` the regularizer value.  ``chunk_size > 0`` accumulates the
    data term over chunks (see :func:`~specreg.nn.loss_and_grad_chunked`).
    """
    kind = config.kind
    if kind == "vanilla":
        return loss_and_grad_chunked(net, x, labels, chunk_size), states, 0.0
    if kind == "decay":
        b = apply_weight_decay(loss_and_grad_chunked(net, x, labels, chunk_size), net, config.lam)
        return b, states, b.penalty
    if kind == "spectral":
        if states is None:
            raise ValueError("spectral objective needs power-iteration states")
        base = loss_and_grad_chunked(net, x, labels, chunk_size)
        b, states = apply_spectral(base, net, config.lam, states, config.power_iters, rng)
        return b, states, spectral_penalty(states, config.lam)
    # adversarial: eta is recomputed at the current parameters and then held fixed
    clean = loss_and_grad_chunked(net, x, labels, chunk_size)
    a = config.alpha
    if a == 1.0:
        return clean, states, 0.0
    x_adv, _ = adversarial_batch(net, x, labels, config.epsilon)
    adv = loss_and_grad_chunked(net, x_adv, labels, chunk_size)
    grads = {k: a * clean.param_grads[k] + (1.0 - a) * adv.param_grads[k] for k in clean.param_grads}
    bundle = GradientBundle(
        param_grads=grads,
        input_grad=a * clean.input_grad + (1.0 - a) * adv.input_grad,
        loss=a * clean.loss + (1.0 - a) * adv.loss,
    )
    return bundle, states, 0.0
