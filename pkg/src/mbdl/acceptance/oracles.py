"""Reference computations used to check the solvers and the engine.

Each oracle takes a different route from the code it checks: cyclic
coordinate descent for the LASSO, central differences for gradients, direct
Riccati iteration for control gains.
"""

import numpy as np


def lasso_cd(G, x, rho, tol=1e-15, max_sweeps=200000):
    """Cyclic coordinate descent on ``1/2 ||x - G r||^2 + rho ||r||_1``."""
    G = np.asarray(G, dtype=float)
    n = G.shape[1]
    col_sq = np.einsum("ij,ij->j", G, G)
    r = np.zeros(n)
    resid = np.array(x, dtype=float)
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(n):
            if col_sq[j] == 0:
                continue
            old = r[j]
            z = old + G[:, j] @ resid / col_sq[j]
            new = np.sign(z) * max(abs(z) - rho / col_sq[j], 0.0)
            if new != old:
                resid -= G[:, j] * (new - old)
                r[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest <= tol:
            break
    return r


def lasso_value(G, x, rho, r):
    resid = np.asarray(x) - np.asarray(G) @ r
    return 0.5 * float(resid @ resid) + rho * float(np.sum(np.abs(r)))


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), floor))


def riccati_fixed_point(a, b, q, r, iters=100000, tol=1e-15):
    """Scalar LQR value iteration ``P <- q + a^2 P - (a b P)^2 / (r + b^2 P)``."""
    P = q
    for _ in range(iters):
        nxt = q + a * a * P - (a * b * P) ** 2 / (r + b * b * P)
        if abs(nxt - P) <= tol * max(1.0, abs(P)):
            P = nxt
            break
        P = nxt
    return P
