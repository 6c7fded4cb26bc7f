"""Synthetic strongly-convex quadratic objectives with exact constants.

Each client i owns the loss f_i(x) = 1/2 (x - b_i)^T Q_i (x - b_i) with a
symmetric positive-definite Q_i whose eigenvalues lie in [mu, L]. That makes
every f_i exactly mu-strongly convex and L-smooth, the global minimizer of
the average loss available in closed form, and gradient noise calibration
exact, so convergence-rate experiments can be checked against known
constants rather than estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ObjectiveEnsemble:
    """Per-client quadratics plus certified curvature and noise constants.

    Attributes:
        n: Client count.
        d: Model dimension.
        Q: (n, d, d) symmetric positive-definite curvature matrices.
        b: (n, d) local minimizers.
        mu: Strong-convexity constant (lower eigenvalue bound for every Q_i).
        L: Smoothness constant (upper eigenvalue bound for every Q_i).
        sigma: Gradient-noise standard deviation; stochastic gradients carry
            isotropic Gaussian noise with total second moment exactly sigma^2.
        x_star: Exact minimizer of the average loss.

    Immutable; share freely across concurrent replicates.
    """

    n: int
    d: int
    Q: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    mu: float
    L: float
    sigma: float
    x_star: np.ndarray = field(repr=False)


def ensemble_from_parts(
    Q: np.ndarray, b: np.ndarray, mu: float, L: float, sigma: float
) -> ObjectiveEnsemble:
    """Build an ensemble from explicit curvatures and targets.

    Computes the exact average-loss minimizer (sum_i Q_i)^{-1} sum_i Q_i b_i.
    The caller is responsible for the eigenvalues of each Q_i actually lying
    in [mu, L]; shapes and symmetry are validated here.
    """
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    if Q.ndim != 3 or Q.shape[1] != Q.shape[2]:
        raise ValueError(f"Q must have shape (n, d, d), got {Q.shape}")
    n, d = Q.shape[0], Q.shape[1]
    if b.shape != (n, d):
        raise ValueError(f"b must have shape ({n}, {d}), got {b.shape}")
    if not np.allclose(Q, np.transpose(Q, (0, 2, 1)), rtol=0.0, atol=1e-12):
        raise ValueError("each curvature matrix must be symmetric")
    _validate_constants(mu, L, sigma)
    x_star = np.linalg.solve(Q.sum(axis=0), np.einsum("nij,nj->ni", Q, b).sum(axis=0))
    Q = Q.copy()
    b = b.copy()
    for arr in (Q, b, x_star):
        arr.flags.writeable = False
    return ObjectiveEnsemble(
        n=n, d=d, Q=Q, b=b, mu=float(mu), L=float(L), sigma=float(sigma), x_star=x_star
    )


def make_quadratic_ensemble(
    n: int,
    d: int,
    mu: float,
    L: float,
    heterogeneity: float = 0.0,
    sigma: float = 0.0,
    seed: int = 0,
) -> ObjectiveEnsemble:
    """Draw a random ensemble, deterministic in the seed.

    Each Q_i gets eigenvalues uniform in [mu, L] in a random orthonormal
    basis. Local minimizers are b_i = b0 + heterogeneity * u_i with a shared
    Gaussian base point b0 and unit-norm pseudorandom directions u_i, so
    heterogeneity = 0 makes every client share the same minimizer while
    larger values spread the local optima apart.
    """
    if n < 1:
        raise ValueError(f"client count must be at least 1, got {n}")
    if d < 1:
        raise ValueError(f"dimension must be at least 1, got {d}")
    if heterogeneity < 0.0:
        raise ValueError(f"heterogeneity must be nonnegative, got {heterogeneity}")
    _validate_constants(mu, L, sigma)

    rng = np.random.default_rng(seed)
    Q = np.empty((n, d, d))
    for i in range(n):
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eigs = rng.uniform(mu, L, size=d)
        sym = (basis * eigs) @ basis.T
        Q[i] = 0.5 * (sym + sym.T)
    b0 = rng.standard_normal(d)
    b = np.empty((n, d))
    for i in range(n):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        b[i] = b0 + heterogeneity * direction
    return ensemble_from_parts(Q, b, mu, L, sigma)


def local_loss(ens: ObjectiveEnsemble, i: int, x: np.ndarray) -> float:
    """Loss of client i at x."""
    r = np.asarray(x, dtype=float) - ens.b[i]
    return 0.5 * float(r @ ens.Q[i] @ r)


def global_loss(ens: ObjectiveEnsemble, x: np.ndarray) -> float:
    """Average loss over all clients at x."""
    return sum(local_loss(ens, i, x) for i in range(ens.n)) / ens.n


def gradient(ens: ObjectiveEnsemble, i: int, x: np.ndarray) -> np.ndarray:
    """Exact local gradient Q_i (x - b_i)."""
    return ens.Q[i] @ (np.asarray(x, dtype=float) - ens.b[i])


def stochastic_gradient(
    ens: ObjectiveEnsemble, i: int, x: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Exact gradient plus isotropic Gaussian noise.

    The noise has per-coordinate variance sigma^2 / d, so its total second
    moment is sigma^2 exactly. With sigma = 0 no randomness is consumed.
    """
    g = gradient(ens, i, x)
    if ens.sigma == 0.0:
        return g
    return g + rng.standard_normal(ens.d) * (ens.sigma / np.sqrt(ens.d))


def suboptimality(ens: ObjectiveEnsemble, x: np.ndarray) -> float:
    """Squared distance of x from the exact global minimizer."""
    r = np.asarray(x, dtype=float) - ens.x_star
    return float(r @ r)


def _validate_constants(mu: float, L: float, sigma: float) -> None:
    if not mu > 0.0:
        raise ValueError(f"strong-convexity constant must be positive, got {mu}")
    if L < mu:
        raise ValueError(f"smoothness constant L={L} must be at least mu={mu}")
    if sigma < 0.0:
        raise ValueError(f"noise level must be nonnegative, got {sigma}")
