"""Independent reference solvers used as test oracles."""

import numpy as np


def cd_lasso(X, y, lam, iters=20000, tol=1e-14):
    """Coordinate descent for ``mean((y - X b)^2) + lam * ||b||_1``."""
    n, p = X.shape
    b = np.zeros(p)
    col_sq = (X ** 2).mean(axis=0)
    r = y.copy()
    for _ in range(iters):
        biggest = 0.0
        for j in range(p):
            old = b[j]
            rho = (X[:, j] @ r) / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                b[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest < tol:
            break
    return b


def least_squares(X, y):
    return np.linalg.solve(X.T @ X, X.T @ y)
