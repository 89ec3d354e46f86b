"""Batch kernels for multi-caption query-scoring similarity matrices
and their exact gradients.

Two interchangeable backends compute the same quantities:

  * numba @njit loops (default when numba is importable), and
  * a pure-numpy fallback, selected by setting CAPVID_NUMBA=0.

Both are sequential with a fixed reduction order, so results are
deterministic per backend. Ragged videos/caption sets are packed as a
concatenated row matrix plus int64 offsets (CSR style). Gradients are
hand-derived reverse-mode through: cosine logits -> softmax pooling
weights -> weighted frame sum -> cosine -> weighted caption combine.
Correctness is pinned by finite-difference oracles in the test suite.
"""
from __future__ import annotations

import os

import numpy as np

_ENV_FLAG = os.environ.get("CAPVID_NUMBA", "1").strip().lower()
_WANT_NUMBA = _ENV_FLAG not in ("0", "false", "off", "no")

if _WANT_NUMBA:
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # fallback path keeps the package importable
        _HAVE_NUMBA = False
else:
    _HAVE_NUMBA = False


def backend_name() -> str:
    return "numba" if _HAVE_NUMBA else "numpy"


def pack_groups(groups) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate a list of (n_i, d) matrices into (rows, offsets)."""
    offsets = np.zeros(len(groups) + 1, dtype=np.int64)
    for i, g in enumerate(groups):
        offsets[i + 1] = offsets[i] + g.shape[0]
    if not groups:
        return np.zeros((0, 0)), offsets
    data = np.ascontiguousarray(np.concatenate(groups, axis=0), dtype=np.float64)
    return data, offsets


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _phi_forward_np(vis, vis_off, caps, cap_off, capw, tau):
    bv = len(vis_off) - 1
    bc = len(cap_off) - 1
    vnorm = np.linalg.norm(vis, axis=1)
    cnorm = np.linalg.norm(caps, axis=1)
    phi = np.zeros((bv, bc))
    for i in range(bv):
        v = vis[vis_off[i]:vis_off[i + 1]]
        nv = vnorm[vis_off[i]:vis_off[i + 1]]
        for j in range(bc):
            c = caps[cap_off[j]:cap_off[j + 1]]
            nc = cnorm[cap_off[j]:cap_off[j + 1]]
            w_l = capw[cap_off[j]:cap_off[j + 1]]
            s = (v @ c.T) / (nv[:, None] * nc[None, :])       # (N, L) cosines
            a = s / tau
            a -= a.max(axis=0)
            e = np.exp(a)
            w = e / e.sum(axis=0)                             # (N, L) pooling
            pooled = w.T @ v                                  # (L, d)
            pn = np.linalg.norm(pooled, axis=1)
            phis = np.einsum("ld,ld->l", pooled, c) / (pn * nc)
            phi[i, j] = float(np.dot(w_l, phis))
    return phi


def _phi_backward_np(vis, vis_off, caps, cap_off, capw, tau, dphi):
    bv = len(vis_off) - 1
    bc = len(cap_off) - 1
    vnorm = np.linalg.norm(vis, axis=1)
    cnorm = np.linalg.norm(caps, axis=1)
    dvis = np.zeros_like(vis)
    dcaps = np.zeros_like(caps)
    for i in range(bv):
        v0, v1 = vis_off[i], vis_off[i + 1]
        v = vis[v0:v1]
        nv = vnorm[v0:v1]
        for j in range(bc):
            g = dphi[i, j]
            if g == 0.0:
                continue
            c0, c1 = cap_off[j], cap_off[j + 1]
            c = caps[c0:c1]
            nc = cnorm[c0:c1]
            w_l = capw[c0:c1]
            s = (v @ c.T) / (nv[:, None] * nc[None, :])
            a = s / tau
            a -= a.max(axis=0)
            e = np.exp(a)
            w = e / e.sum(axis=0)
            pooled = w.T @ v                                  # (L, d)
            pn = np.linalg.norm(pooled, axis=1)
            phis = np.einsum("ld,ld->l", pooled, c) / (pn * nc)
            dphi_l = g * w_l                                  # (L,)
            inv = 1.0 / (pn * nc)
            grad_p = dphi_l[:, None] * (c * inv[:, None]
                                        - phis[:, None] * pooled / (pn ** 2)[:, None])
            dcaps[c0:c1] += dphi_l[:, None] * (pooled * inv[:, None]
                                               - phis[:, None] * c / (nc ** 2)[:, None])
            # through pooled = sum_n w[n, l] * v[n]
            dvis[v0:v1] += w @ grad_p
            dw = v @ grad_p.T                                 # (N, L)
            da = w * (dw - np.sum(w * dw, axis=0, keepdims=True))
            ds = da / tau
            coef = ds / (nv[:, None] * nc[None, :])
            dvis[v0:v1] += coef @ c - (np.sum(ds * s, axis=1) / nv ** 2)[:, None] * v
            dcaps[c0:c1] += coef.T @ v - (np.sum(ds * s, axis=0) / nc ** 2)[:, None] * c
    return dvis, dcaps


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _row_norms(rows):
        out = np.empty(rows.shape[0])
        for r in range(rows.shape[0]):
            acc = 0.0
            for k in range(rows.shape[1]):
                acc += rows[r, k] * rows[r, k]
            out[r] = np.sqrt(acc)
        return out

    @njit(cache=True, nogil=True)
    def _phi_forward_nb(vis, vis_off, caps, cap_off, capw, tau):
        bv = vis_off.shape[0] - 1
        bc = cap_off.shape[0] - 1
        d = vis.shape[1]
        vnorm = _row_norms(vis)
        cnorm = _row_norms(caps)
        phi = np.zeros((bv, bc))
        for i in range(bv):
            v0 = vis_off[i]
            n = vis_off[i + 1] - v0
            logits = np.empty(n)
            w = np.empty(n)
            pooled = np.empty(d)
            for j in range(bc):
                acc = 0.0
                for l in range(cap_off[j], cap_off[j + 1]):
                    hi = -1e300
                    for nn in range(n):
                        dot = 0.0
                        for k in range(d):
                            dot += vis[v0 + nn, k] * caps[l, k]
                        logits[nn] = dot / (vnorm[v0 + nn] * cnorm[l] * tau)
                        if logits[nn] > hi:
                            hi = logits[nn]
                    z = 0.0
                    for nn in range(n):
                        w[nn] = np.exp(logits[nn] - hi)
                        z += w[nn]
                    for k in range(d):
                        pooled[k] = 0.0
                    for nn in range(n):
                        wn = w[nn] / z
                        for k in range(d):
                            pooled[k] += wn * vis[v0 + nn, k]
                    pdot = 0.0
                    psq = 0.0
                    for k in range(d):
                        pdot += pooled[k] * caps[l, k]
                        psq += pooled[k] * pooled[k]
                    acc += capw[l] * pdot / (np.sqrt(psq) * cnorm[l])
                phi[i, j] = acc
        return phi

    @njit(cache=True, nogil=True)
    def _phi_backward_nb(vis, vis_off, caps, cap_off, capw, tau, dphi):
        bv = vis_off.shape[0] - 1
        bc = cap_off.shape[0] - 1
        d = vis.shape[1]
        vnorm = _row_norms(vis)
        cnorm = _row_norms(caps)
        dvis = np.zeros_like(vis)
        dcaps = np.zeros_like(caps)
        for i in range(bv):
            v0 = vis_off[i]
            n = vis_off[i + 1] - v0
            s = np.empty(n)
            w = np.empty(n)
            dw = np.empty(n)
            pooled = np.empty(d)
            grad_p = np.empty(d)
            for j in range(bc):
                g = dphi[i, j]
                if g == 0.0:
                    continue
                for l in range(cap_off[j], cap_off[j + 1]):
                    hi = -1e300
                    for nn in range(n):
                        dot = 0.0
                        for k in range(d):
                            dot += vis[v0 + nn, k] * caps[l, k]
                        s[nn] = dot / (vnorm[v0 + nn] * cnorm[l])
                        if s[nn] > hi:
                            hi = s[nn]
                    z = 0.0
                    for nn in range(n):
                        w[nn] = np.exp((s[nn] - hi) / tau)
                        z += w[nn]
                    for k in range(d):
                        pooled[k] = 0.0
                    for nn in range(n):
                        w[nn] /= z
                        for k in range(d):
                            pooled[k] += w[nn] * vis[v0 + nn, k]
                    pdot = 0.0
                    psq = 0.0
                    for k in range(d):
                        pdot += pooled[k] * caps[l, k]
                        psq += pooled[k] * pooled[k]
                    pn = np.sqrt(psq)
                    phi_l = pdot / (pn * cnorm[l])
                    gamma = g * capw[l]
                    inv = 1.0 / (pn * cnorm[l])
                    for k in range(d):
                        grad_p[k] = gamma * (caps[l, k] * inv
                                             - phi_l * pooled[k] / psq)
                        dcaps[l, k] += gamma * (pooled[k] * inv
                                                - phi_l * caps[l, k]
                                                / (cnorm[l] * cnorm[l]))
                    dbar = 0.0
                    for nn in range(n):
                        acc = 0.0
                        for k in range(d):
                            acc += grad_p[k] * vis[v0 + nn, k]
                        dw[nn] = acc
                        dbar += w[nn] * acc
                    for nn in range(n):
                        da = w[nn] * (dw[nn] - dbar)
                        ds = da / tau
                        inv2 = 1.0 / (vnorm[v0 + nn] * cnorm[l])
                        nv2 = vnorm[v0 + nn] * vnorm[v0 + nn]
                        for k in range(d):
                            dvis[v0 + nn, k] += (w[nn] * grad_p[k]
                                                 + ds * (caps[l, k] * inv2
                                                         - s[nn] * vis[v0 + nn, k] / nv2))
                            dcaps[l, k] += ds * (vis[v0 + nn, k] * inv2
                                                 - s[nn] * caps[l, k]
                                                 / (cnorm[l] * cnorm[l]))
        return dvis, dcaps


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def phi_matrix(vis, vis_off, caps, cap_off, capw, tau: float) -> np.ndarray:
    """Similarity matrix Phi[i, j] between video i (frames) and caption
    set j, each entry a capw-weighted combination of per-caption
    query-scored cosines."""
    vis = np.ascontiguousarray(vis, dtype=np.float64)
    caps = np.ascontiguousarray(caps, dtype=np.float64)
    vis_off = np.ascontiguousarray(vis_off, dtype=np.int64)
    cap_off = np.ascontiguousarray(cap_off, dtype=np.int64)
    capw = np.ascontiguousarray(capw, dtype=np.float64)
    if _HAVE_NUMBA:
        return _phi_forward_nb(vis, vis_off, caps, cap_off, capw, float(tau))
    return _phi_forward_np(vis, vis_off, caps, cap_off, capw, float(tau))


def phi_backward(vis, vis_off, caps, cap_off, capw, tau: float,
                 dphi) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(dphi * Phi) w.r.t. the projected frame rows and
    caption rows."""
    vis = np.ascontiguousarray(vis, dtype=np.float64)
    caps = np.ascontiguousarray(caps, dtype=np.float64)
    vis_off = np.ascontiguousarray(vis_off, dtype=np.int64)
    cap_off = np.ascontiguousarray(cap_off, dtype=np.int64)
    capw = np.ascontiguousarray(capw, dtype=np.float64)
    dphi = np.ascontiguousarray(dphi, dtype=np.float64)
    if _HAVE_NUMBA:
        return _phi_backward_nb(vis, vis_off, caps, cap_off, capw, float(tau), dphi)
    return _phi_backward_np(vis, vis_off, caps, cap_off, capw, float(tau), dphi)
