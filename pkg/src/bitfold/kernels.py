"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Backend selection: environment variable BITFOLD_BACKEND set to "numpy"
forces the fallback; "numba" (or unset, when numba imports cleanly) uses
the JIT kernels. `set_backend` switches at runtime, which the bench
subcommand uses to time both paths on identical inputs.

Kernel set:
  cmm / cmm_bt / cmm_at  channel-wise L x L matmuls backing the triangle
                         multiplicative update and its backward pass
  pdist / pdist_grad     smoothed pairwise Calpha distance matrix used by
                         the tokenizer reconstruction loss
  so3_grid_min_rmsd      brute-force rigid-fit oracle over an Euler-angle
                         grid (verification and bench only)
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

_backend = os.environ.get("BITFOLD_BACKEND", "numba" if _HAS_NUMBA else "numpy")
if _backend not in ("numba", "numpy"):
    raise ValueError(f"BITFOLD_BACKEND must be 'numba' or 'numpy', got {_backend!r}")
if _backend == "numba" and not _HAS_NUMBA:
    _backend = "numpy"


def backend():
    return _backend


def set_backend(name):
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not _HAS_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


# -- numpy reference implementations ----------------------------------------

def _cmm_np(a, b):
    # out[i,j,d] = sum_k a[i,k,d] * b[k,j,d]
    return np.einsum("ikd,kjd->ijd", a, b, optimize=True)


def _cmm_bt_np(a, b):
    # out[i,j,d] = sum_k a[i,k,d] * b[j,k,d]
    return np.einsum("ikd,jkd->ijd", a, b, optimize=True)


def _cmm_at_np(a, b):
    # out[i,j,d] = sum_k a[k,i,d] * b[k,j,d]
    return np.einsum("kid,kjd->ijd", a, b, optimize=True)


def _pdist_np(x, eps):
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1) + eps)


def _pdist_grad_np(x, d, g, eps):
    diff = x[:, None, :] - x[None, :, :]
    w = g / d  # d >= sqrt(eps) > 0
    gx = (w[:, :, None] * diff).sum(axis=1)
    gx -= (w[:, :, None] * diff).sum(axis=0)
    del eps
    return gx


def _rot_from_euler(alpha, beta, gamma):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    # Z(alpha) Y(beta) Z(gamma)
    return np.array(
        [
            [ca * cb * cg - sa * sg, -ca * cb * sg - sa * cg, ca * sb],
            [sa * cb * cg + ca * sg, -sa * cb * sg + ca * cg, sa * sb],
            [-sb * cg, sb * sg, cb],
        ]
    )


def _so3_grid_np(p, q, step_deg):
    # p, q: centered (N,3); minimize RMSD(R p, q) over a ZYZ Euler grid
    step = np.deg2rad(step_deg)
    alphas = np.arange(0.0, 2.0 * np.pi, step)
    betas = np.arange(0.0, np.pi + 1e-12, step)
    gammas = np.arange(0.0, 2.0 * np.pi, step)
    n = p.shape[0]
    best = np.inf
    for b in betas:
        cb, sb = np.cos(b), np.sin(b)
        for a in alphas:
            ca, sa = np.cos(a), np.sin(a)
            # fold gamma loop into a vectorized sweep
            cg, sg = np.cos(gammas), np.sin(gammas)
            r00 = ca * cb * cg - sa * sg
            r01 = -ca * cb * sg - sa * cg
            r10 = sa * cb * cg + ca * sg
            r11 = -sa * cb * sg + ca * cg
            r20 = -sb * cg
            r21 = sb * sg
            rx = np.outer(r00, p[:, 0]) + np.outer(r01, p[:, 1]) + ca * sb * p[None, :, 2]
            ry = np.outer(r10, p[:, 0]) + np.outer(r11, p[:, 1]) + sa * sb * p[None, :, 2]
            rz = np.outer(r20, p[:, 0]) + np.outer(r21, p[:, 1]) + cb * p[None, :, 2]
            sq = (rx - q[None, :, 0]) ** 2 + (ry - q[None, :, 1]) ** 2 + (rz - q[None, :, 2]) ** 2
            best = min(best, sq.sum(axis=1).min() / n)
    return np.sqrt(best)


# -- numba implementations ---------------------------------------------------

if _HAS_NUMBA:

    @njit(cache=True)
    def _cmm_nb(a, b):
        L, _, D = a.shape
        out = np.zeros((L, L, D))
        for i in range(L):
            for k in range(L):
                for j in range(L):
                    for d in range(D):
                        out[i, j, d] += a[i, k, d] * b[k, j, d]
        return out

    @njit(cache=True)
    def _cmm_bt_nb(a, b):
        L, _, D = a.shape
        out = np.zeros((L, L, D))
        for i in range(L):
            for j in range(L):
                for k in range(L):
                    for d in range(D):
                        out[i, j, d] += a[i, k, d] * b[j, k, d]
        return out

    @njit(cache=True)
    def _cmm_at_nb(a, b):
        L, _, D = a.shape
        out = np.zeros((L, L, D))
        for k in range(L):
            for i in range(L):
                for j in range(L):
                    for d in range(D):
                        out[i, j, d] += a[k, i, d] * b[k, j, d]
        return out

    @njit(cache=True)
    def _pdist_nb(x, eps):
        n = x.shape[0]
        out = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                s = eps
                for c in range(3):
                    t = x[i, c] - x[j, c]
                    s += t * t
                out[i, j] = np.sqrt(s)
        return out

    @njit(cache=True)
    def _pdist_grad_nb(x, d, g, eps):  # eps unused: d already carries it
        n = x.shape[0]
        gx = np.zeros((n, 3))
        for i in range(n):
            for j in range(n):
                w = g[i, j] / d[i, j]
                for c in range(3):
                    diff = x[i, c] - x[j, c]
                    gx[i, c] += w * diff
                    gx[j, c] -= w * diff
        return gx

    @njit(cache=True)
    def _so3_grid_nb(p, q, step_deg):
        step = step_deg * np.pi / 180.0
        n = p.shape[0]
        best = 1e300
        beta = 0.0
        while beta <= np.pi + 1e-12:
            cb, sb = np.cos(beta), np.sin(beta)
            alpha = 0.0
            while alpha < 2.0 * np.pi:
                ca, sa = np.cos(alpha), np.sin(alpha)
                gamma = 0.0
                while gamma < 2.0 * np.pi:
                    cg, sg = np.cos(gamma), np.sin(gamma)
                    r00 = ca * cb * cg - sa * sg
                    r01 = -ca * cb * sg - sa * cg
                    r02 = ca * sb
                    r10 = sa * cb * cg + ca * sg
                    r11 = -sa * cb * sg + ca * cg
                    r12 = sa * sb
                    r20 = -sb * cg
                    r21 = sb * sg
                    r22 = cb
                    s = 0.0
                    for m in range(n):
                        px = r00 * p[m, 0] + r01 * p[m, 1] + r02 * p[m, 2] - q[m, 0]
                        py = r10 * p[m, 0] + r11 * p[m, 1] + r12 * p[m, 2] - q[m, 1]
                        pz = r20 * p[m, 0] + r21 * p[m, 1] + r22 * p[m, 2] - q[m, 2]
                        s += px * px + py * py + pz * pz
                    if s < best:
                        best = s
                    gamma += step
                alpha += step
            beta += step
        return np.sqrt(best / n)


# -- dispatch ----------------------------------------------------------------

def cmm(a, b):
    if _backend == "numba":
        return _cmm_nb(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return _cmm_np(a, b)


def cmm_bt(a, b):
    if _backend == "numba":
        return _cmm_bt_nb(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return _cmm_bt_np(a, b)


def cmm_at(a, b):
    if _backend == "numba":
        return _cmm_at_nb(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return _cmm_at_np(a, b)


def pdist(x, eps=1e-8):
    if _backend == "numba":
        return _pdist_nb(np.ascontiguousarray(x), eps)
    return _pdist_np(x, eps)


def pdist_grad(x, d, g, eps=1e-8):
    if _backend == "numba":
        return _pdist_grad_nb(np.ascontiguousarray(x), d, np.ascontiguousarray(g), eps)
    return _pdist_grad_np(x, d, g, eps)


def so3_grid_min_rmsd(p, q, step_deg=2.0):
    p = np.ascontiguousarray(p - p.mean(axis=0))
    q = np.ascontiguousarray(q - q.mean(axis=0))
    if _backend == "numba":
        return float(_so3_grid_nb(p, q, float(step_deg)))
    return float(_so3_grid_np(p, q, float(step_deg)))
