"""Compiled inner loops for the selective-scan recurrence.

Rows (sequences) are independent, so the kernels parallelize over the
leading axis without shared writes; results are bitwise reproducible for
any thread count. Reductions that cross rows (dA, dD) are emitted as
per-row partials and summed by the caller in a fixed order. Accumulators
are typed from the input arrays so the float32 path stays fully SIMD.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def scan_forward(u, delta, abar, B, C, D, h_all, y):
    """h_t = abar_t*h_{t-1} + delta_t*B_t*u_t; y_t = <C_t, h_t> + D*u_t.

    u, delta: [S,T,E]; abar: [S,T,E,N]; B, C: [S,T,N]; D: [E].
    Fills h_all [S,T,E,N] (kept for the backward pass) and y [S,T,E].
    """
    S, T, E = u.shape
    N = B.shape[2]
    zero = u[0, 0, 0] - u[0, 0, 0]
    for s in prange(S):
        for t in range(T):
            for e in range(E):
                d = delta[s, t, e]
                ut = u[s, t, e]
                acc = zero
                if t > 0:
                    for n in range(N):
                        hv = abar[s, t, e, n] * h_all[s, t - 1, e, n] \
                            + d * B[s, t, n] * ut
                        h_all[s, t, e, n] = hv
                        acc += C[s, t, n] * hv
                else:
                    for n in range(N):
                        hv = d * B[s, t, n] * ut
                        h_all[s, t, e, n] = hv
                        acc += C[s, t, n] * hv
                y[s, t, e] = acc + D[e] * ut


@njit(parallel=True, cache=True)
def scan_backward(gy, u, delta, abar, h_all, A, B, C, D,
                  du, ddelta, dB, dC, dA_rows, dD_rows):
    """Adjoints of scan_forward for every input.

    du, ddelta [S,T,E], dB, dC [S,T,N] are fully overwritten. dA and dD
    cross rows; per-row partials dA_rows [S,E,N] and dD_rows [S,E] are
    written for a deterministic outer sum.
    """
    S, T, E = u.shape
    N = B.shape[2]
    zero = u[0, 0, 0] - u[0, 0, 0]
    for s in prange(S):
        gh = np.zeros((E, N), dtype=u.dtype)
        dA_local = np.zeros((E, N), dtype=u.dtype)
        for e in range(E):
            acc = zero
            for t in range(T):
                acc += gy[s, t, e] * u[s, t, e]
            dD_rows[s, e] = acc
        for t in range(T - 1, -1, -1):
            for n in range(N):
                dB[s, t, n] = zero
                dC[s, t, n] = zero
            for e in range(E):
                g = gy[s, t, e]
                d = delta[s, t, e]
                ut = u[s, t, e]
                dd = zero
                duv = zero
                if t > 0:
                    for n in range(N):
                        ghv = gh[e, n] + g * C[s, t, n]
                        dC[s, t, n] += g * h_all[s, t, e, n]
                        ab = abar[s, t, e, n]
                        common = ghv * h_all[s, t - 1, e, n] * ab
                        dA_local[e, n] += common * d
                        dd += common * A[e, n] + ghv * B[s, t, n] * ut
                        dB[s, t, n] += ghv * d * ut
                        duv += ghv * d * B[s, t, n]
                        gh[e, n] = ghv * ab
                else:
                    for n in range(N):
                        ghv = gh[e, n] + g * C[s, t, n]
                        dC[s, t, n] += g * h_all[s, t, e, n]
                        dd += ghv * B[s, t, n] * ut
                        dB[s, t, n] += ghv * d * ut
                        duv += ghv * d * B[s, t, n]
                        gh[e, n] = ghv * abar[s, t, e, n]
                ddelta[s, t, e] = dd
                du[s, t, e] = duv + g * D[e]
        for e in range(E):
            for n in range(N):
                dA_rows[s, e, n] = dA_local[e, n]
