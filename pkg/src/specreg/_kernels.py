"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature.  The module-level
names (``power_iterate``, ``jacobi_sweeps``, ``im2col``, ``col2im``) point at
the numba versions unless numba is missing or ``SPECREG_DISABLE_JIT`` is set
to a truthy value in the environment at import time.

Both backends are deterministic, but they are not bitwise identical to each
other (different summation orders), so a run should stay on one backend.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("SPECREG_DISABLE_JIT", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba
except ImportError:  # pragma: no cover - numba is optional
    numba = None

HAVE_NUMBA = numba is not None
BACKEND = "numba" if (HAVE_NUMBA and not _DISABLE) else "numpy"

# A product W v this small (relative to ||W||_F) carries no direction.
ZERO_REL = 1e-14


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def power_iterate_numpy(W, v, iters):
    """Run ``iters`` normalized power steps from unit vector ``v``.

    Returns ``(u, v, sigma, ok)``.  ``ok`` is False when W v vanished, in
    which case u/v/sigma are those of the last completed step (or the inputs).
    """
    m = W.shape[0]
    fro = np.sqrt(np.sum(W * W))
    u = np.zeros(m)
    sigma = 0.0
    if fro == 0.0:
        return u, v, 0.0, False
    floor = ZERO_REL * fro
    for _ in range(iters):
        wu = W @ v
        nu = np.sqrt(wu @ wu)
        if nu <= floor:
            return u, v, sigma, False
        u = wu / nu
        wv = W.T @ u
        nv = np.sqrt(wv @ wv)
        if nv <= floor:
            return u, v, sigma, False
        v = wv / nv
        sigma = nv
    return u, v, sigma, True


def _round_robin(n):
    """Tournament schedule: n-1 (or n) rounds of disjoint column pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        pairs = [(players[i], players[k - 1 - i]) for i in range(k // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            rounds.append(np.array(pairs, dtype=np.int64))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_sweeps_numpy(G, Vt, tol, max_sweeps):
    """One-sided Jacobi on the *rows* of ``G`` (in place), accumulating ``Vt``.

    Rows are the vectors being orthogonalized (the columns of the original
    matrix), which keeps every inner loop contiguous.  Rotations within a
    round touch disjoint row pairs, so each round is a single vectorized
    update.  Returns the number of sweeps performed.
    """
    n = G.shape[0]
    if n < 2:
        return 0
    rounds = _round_robin(n)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for pairs in rounds:
            I, J = pairs[:, 0], pairs[:, 1]
            gi, gj = G[I], G[J]
            alpha = np.einsum("ij,ij->i", gi, gi)
            beta = np.einsum("ij,ij->i", gj, gj)
            gamma = np.einsum("ij,ij->i", gi, gj)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            I, J = I[act], J[act]
            gi, gj = gi[act], gj[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            G[I] = c * gi - s * gj
            G[J] = s * gi + c * gj
            vi, vj = Vt[I], Vt[J]
            Vt[I] = c * vi - s * vj
            Vt[J] = s * vi + c * vj
        if not rotated:
            return sweep
    return max_sweeps + 1


def im2col_numpy(xp, kh, kw, stride, oh, ow):
    """Patch matrix of shape (B*oh*ow, C*kh*kw); columns ordered (c, i, j)."""
    B, C = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * oh * ow, C * kh * kw)


def col2im_numpy(cols, B, C, Hp, Wp, kh, kw, stride, oh, ow):
    """Adjoint of :func:`im2col_numpy`: scatter-add patches back to (B, C, Hp, Wp)."""
    d = cols.reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((B, C, Hp, Wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d[:, :, i, j]
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def power_iterate_numba(W, v, iters):
        m, n = W.shape
        fro = 0.0
        for i in range(m):
            for j in range(n):
                fro += W[i, j] * W[i, j]
        fro = np.sqrt(fro)
        u = np.zeros(m)
        sigma = 0.0
        if fro == 0.0:
            return u, v, 0.0, False
        floor = ZERO_REL * fro
        for _ in range(iters):
            wu = np.zeros(m)
            for i in range(m):
                acc = 0.0
                for j in range(n):
                    acc += W[i, j] * v[j]
                wu[i] = acc
            nu = np.sqrt(np.dot(wu, wu))
            if nu <= floor:
                return u, v, sigma, False
            u = wu / nu
            wv = np.zeros(n)
            for i in range(m):
                ui = u[i]
                for j in range(n):
                    wv[j] += W[i, j] * ui
            nv = np.sqrt(np.dot(wv, wv))
            if nv <= floor:
                return u, v, sigma, False
            v = wv / nv
            sigma = nv
        return u, v, sigma, True

    @njit
    def jacobi_sweeps_numba(G, Vt, tol, max_sweeps):
        n, m = G.shape
        nv = Vt.shape[1]
        if n < 2:
            return 0
        for sweep in range(1, max_sweeps + 1):
            rotated = False
            for i in range(n - 1):
                gi = G[i]
                vi = Vt[i]
                for j in range(i + 1, n):
                    gj = G[j]
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for k in range(m):
                        a = gi[k]
                        b = gj[k]
                        alpha += a * a
                        beta += b * b
                        gamma += a * b
                    if abs(gamma) <= tol * np.sqrt(alpha * beta):
                        continue
                    rotated = True
                    zeta = (beta - alpha) / (2.0 * gamma)
                    sgn = 1.0 if zeta >= 0.0 else -1.0
                    t = sgn / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                    c = 1.0 / np.sqrt(1.0 + t * t)
                    s = c * t
                    for k in range(m):
                        a = gi[k]
                        b = gj[k]
                        gi[k] = c * a - s * b
                        gj[k] = s * a + c * b
                    vj = Vt[j]
                    for k in range(nv):
                        a = vi[k]
                        b = vj[k]
                        vi[k] = c * a - s * b
                        vj[k] = s * a + c * b
            if not rotated:
                return sweep
        return max_sweeps + 1

    @njit
    def im2col_numba(xp, kh, kw, stride, oh, ow):
        B, C = xp.shape[0], xp.shape[1]
        cols = np.empty((B * oh * ow, C * kh * kw))
        for b in range(B):
            for y in range(oh):
                for x in range(ow):
                    r = (b * oh + y) * ow + x
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                cols[r, col] = xp[b, c, y * stride + i, x * stride + j]
                                col += 1
        return cols

    @njit
    def col2im_numba(cols, B, C, Hp, Wp, kh, kw, stride, oh, ow):
        out = np.zeros((B, C, Hp, Wp))
        for b in range(B):
            for y in range(oh):
                for x in range(ow):
                    r = (b * oh + y) * ow + x
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, c, y * stride + i, x * stride + j] += cols[r, col]
                                col += 1
        return out


if BACKEND == "numba":
    power_iterate = power_iterate_numba
    jacobi_sweeps = jacobi_sweeps_numba
    im2col = im2col_numba
    col2im = col2im_numba
else:
    power_iterate = power_iterate_numpy
    jacobi_sweeps = jacobi_sweeps_numpy
    im2col = im2col_numpy
    col2im = col2im_numpy
