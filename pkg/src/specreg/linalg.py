"""Dense matrix helpers: warm-started power iteration and a Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays.  The power-iteration state is
the only mutable object here and is owned by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

SVD_MAX_DIM = 512
UNIT_TOL = 1e-8


class LinalgError(ValueError):
    """Bad input to a linear-algebra routine (shape, size, non-finite)."""


@dataclass
class PowerIterState:
    """Running estimate of the dominant singular triple of one matrix.

    ``v`` is the warm start for the next call.  ``reseeded`` is set when the
    last update had to redraw ``v`` because ``W v`` vanished.
    """

    v: np.ndarray
    u: np.ndarray
    sigma: float = 0.0
    reseeded: bool = False

    @classmethod
    def random(cls, rows: int, cols: int, rng: np.random.Generator) -> "PowerIterState":
        return cls(v=_random_unit(cols, rng), u=_random_unit(rows, rng))

    def copy(self) -> "PowerIterState":
        return PowerIterState(self.v.copy(), self.u.copy(), self.sigma, self.reseeded)


@dataclass
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray  # (rows, k), orthonormal columns
    right_vectors: np.ndarray  # (cols, k), orthonormal columns
    sweeps: int = field(default=0, compare=False)

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T


def as_matrix(W) -> np.ndarray:
    """Validate and return ``W`` as a C-contiguous finite float64 matrix."""
    A = np.ascontiguousarray(W, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise LinalgError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise LinalgError("matrix has non-finite entries")
    return A


def _random_unit(n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal(n)
    nx = np.linalg.norm(x)
    while nx == 0.0:  # pragma: no cover - probability zero
        x = rng.standard_normal(n)
        nx = np.linalg.norm(x)
    return x / nx


def power_iter_step(W, state: PowerIterState, rng: np.random.Generator | None = None) -> PowerIterState:
    """One step ``u <- W v / |W v|``, ``v <- W^T u / |W^T u|``, ``sigma <- u^T W v``."""
    return _iterate(as_matrix(W), state, 1, rng)


def spectral_norm(
    W, iters: int, state: PowerIterState, rng: np.random.Generator | None = None
) -> tuple[float, PowerIterState]:
    """Estimate sigma_1(W) with ``iters`` warm-started power steps.

    The returned state should be passed back in on the next call; with a
    slowly changing ``W`` a single step keeps the estimate accurate.
    """
    if iters < 1:
        raise LinalgError(f"iters must be >= 1, got {iters}")
    new = _iterate(as_matrix(W), state, iters, rng)
    return new.sigma, new


def _iterate(W: np.ndarray, state: PowerIterState, iters: int, rng) -> PowerIterState:
    m, n = W.shape
    v = np.asarray(state.v, dtype=np.float64)
    if v.shape != (n,):
        raise LinalgError(f"state.v has shape {v.shape}, matrix has {n} columns")
    nv = np.linalg.norm(v)
    if not nv > 0.0:
        raise LinalgError("state.v must be a nonzero vector")
    u, v, sigma, ok = _kernels.power_iterate(W, v / nv, iters)
    if ok:
        return PowerIterState(v=v, u=u, sigma=float(sigma), reseeded=False)

    # W v vanished: the direction is unidentifiable, so redraw v and retry.
    rng = rng if rng is not None else np.random.default_rng()
    u, v, sigma, ok = _kernels.power_iterate(W, _random_unit(n, rng), iters)
    if not ok:
        # Zero (or numerically null) matrix: any unit pair is a singular pair.
        return PowerIterState(v=_random_unit(n, rng), u=_random_unit(m, rng), sigma=0.0, reseeded=True)
    return PowerIterState(v=v, u=u, sigma=float(sigma), reseeded=True)


def spectral_sq_grad(W, state: PowerIterState) -> np.ndarray:
    """Gradient of sigma(W)^2 / 2, i.e. ``sigma * u v^T`` from the current state."""
    A = as_matrix(W)
    u = np.asarray(state.u, dtype=np.float64)
    v = np.asarray(state.v, dtype=np.float64)
    if u.shape != (A.shape[0],) or v.shape != (A.shape[1],):
        raise LinalgError(f"state vectors {u.shape}/{v.shape} do not match matrix {A.shape}")
    if abs(np.linalg.norm(u) - 1.0) > UNIT_TOL or abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise LinalgError("state vectors are not unit length; run power_iter_step first")
    return state.sigma * np.outer(u, v)


def frobenius_norm_sq(W) -> float:
    A = np.asarray(W, dtype=np.float64)
    return float(np.sum(A * A))


def svd_exact(W, tol: float | None = None, max_sweeps: int = 100) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Intended as a test oracle and for per-layer spectra, so it is limited to
    ``min(rows, cols) <= 512``; use :func:`spectral_norm` for anything larger.
    """
    A = as_matrix(W)
    m, n = A.shape
    if min(m, n) > SVD_MAX_DIM:
        raise LinalgError(
            f"svd_exact is limited to min(rows, cols) <= {SVD_MAX_DIM}, got {A.shape}; "
            "use spectral_norm (power iteration) for large matrices"
        )
    transposed = m < n
    # Rows of G are the vectors to orthogonalize: columns of A, or of A^T when wide.
    G = np.array(A if transposed else A.T, dtype=np.float64, order="C")
    k, rows = G.shape
    if tol is None:
        tol = max(1e-15, rows * np.finfo(np.float64).eps)
    Vt = np.eye(k)
    sweeps = int(_kernels.jacobi_sweeps(G, Vt, tol, max_sweeps))

    sv = np.sqrt(np.einsum("ij,ij->i", G, G))
    order = np.argsort(-sv, kind="stable")
    sv, G, Vt = sv[order], G[order], Vt[order]
    live = sv > np.finfo(np.float64).tiny
    U = np.zeros((rows, k))
    U[:, live] = (G[live] / sv[live, None]).T
    sv[~live] = 0.0
    if not live.all():
        U = _complete_orthonormal(U, live)
    V = np.ascontiguousarray(Vt.T)
    if transposed:
        U, V = V, U
    return SvdResult(singular_values=sv, left_vectors=U, right_vectors=V, sweeps=sweeps)


def _complete_orthonormal(U: np.ndarray, live: np.ndarray) -> np.ndarray:
    """Fill the dead columns of ``U`` with unit vectors orthogonal to the rest."""
    m = U.shape[0]
    basis = [U[:, j] for j in np.flatnonzero(live)]
    for j in np.flatnonzero(~live):
        best, best_norm = None, -1.0
        for e in np.eye(m):
            r = e.copy()
            for _ in range(2):  # twice is enough for Gram-Schmidt
                for q in basis:
                    r -= (q @ r) * q
            nr = np.linalg.norm(r)
            if nr > best_norm:
                best, best_norm = r, nr
            if nr > 0.7:
                break
        U[:, j] = best / best_norm
        basis.append(U[:, j])
    return U
