"""Independent reference implementations shared by several test files."""
import numpy as np

from mambatrans.ssm import DELTA_FLOOR


def sequential_oracle(x, p):
    """Plain per-step recurrence in float64, written without the library kernel."""
    W, b = p.dt_proj.weight.data.astype(np.float64), p.dt_proj.bias.data.astype(np.float64)
    WB, WC = p.B_proj.weight.data.astype(np.float64), p.C_proj.weight.data.astype(np.float64)
    A = -np.exp(p.A_log.data.astype(np.float64))
    D = p.D.data.astype(np.float64)
    L, E = x.shape
    h = np.zeros_like(A)
    y = np.zeros((L, E))
    for t in range(L):
        z = x[t] @ W + b
        delta = np.maximum(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0), DELTA_FLOOR)
        Bt, Ct = x[t] @ WB, x[t] @ WC
        for d in range(E):
            for n in range(A.shape[1]):
                h[d, n] = np.exp(delta[d] * A[d, n]) * h[d, n] + delta[d] * Bt[n] * x[t, d]
            y[t, d] = float(np.dot(Ct, h[d])) + D[d] * x[t, d]
    return y
