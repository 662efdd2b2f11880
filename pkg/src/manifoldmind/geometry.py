"""Poincaré-ball operations with a per-call (possibly per-pair) curvature.

Curvatures are negative scalars ``kappa``; the ball of curvature ``kappa`` is
``{x : |x|^2 < -1/kappa}``. Every function accepts batched inputs where the
last axis holds coordinates and ``kappa`` broadcasts over the leading axes.
"""

from __future__ import annotations

import numpy as np

KAPPA_MIN = -5.0
KAPPA_MAX = -0.01
EPS_ATANH = 1e-7
EPS_BALL = 1e-5
_MIN_NORM = 1e-15


class DomainError(ValueError):
    """Raised when an argument is outside the domain of a geometric operation."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite input")


def _check_curvature(kappa: np.ndarray) -> None:
    if np.any(kappa >= 0):
        raise DomainError("curvature must be strictly negative")


def effective_curvature(r_i, kappa_i, r_j, kappa_j):
    """Radius-weighted harmonic mean of two curvatures.

    Each curvature is weighted by its entity's radius, so the entity with the
    LARGER radius pulls the result toward its own curvature (the formula is kept
    as written even though it is often described the other way round). Equal
    curvatures are returned unchanged.
    """
    r_i, kappa_i, r_j, kappa_j = map(_as_array, (r_i, kappa_i, r_j, kappa_j))
    _check_finite(r_i, kappa_i, r_j, kappa_j)
    if np.any(r_i <= 0) or np.any(r_j <= 0):
        raise DomainError("radii must be strictly positive")
    _check_curvature(kappa_i)
    _check_curvature(kappa_j)
    out = (r_i + r_j) / (r_i / kappa_i + r_j / kappa_j)
    return out if out.ndim else float(out)


def effective_curvature_grad(r_i, kappa_i, r_j, kappa_j):
    """Return ``(kappa_ij, d/dr_i, d/dkappa_i, d/dr_j, d/dkappa_j)``."""
    s = r_i / kappa_i + r_j / kappa_j
    k = (r_i + r_j) / s
    d_ri = (1.0 - k / kappa_i) / s
    d_rj = (1.0 - k / kappa_j) / s
    d_ki = k * k * r_i / ((r_i + r_j) * kappa_i * kappa_i)
    d_kj = k * k * r_j / ((r_i + r_j) * kappa_j * kappa_j)
    return k, d_ri, d_ki, d_rj, d_kj


def geodesic_distance(mu_i, mu_j, kappa):
    """Distance between two ball points using the scalar-denominator form.

    ``d = 2/sqrt(-kappa) * atanh(|mu_i - mu_j| / |1 - kappa <mu_i, mu_j>|)``

    The atanh argument is clamped to ``[0, 1 - EPS_ATANH]``. This is not the
    Möbius gyrodistance (see :func:`gyro_distance`) and does not satisfy the
    triangle inequality in general.
    """
    mu_i, mu_j, kappa = _as_array(mu_i), _as_array(mu_j), _as_array(kappa)
    _check_finite(mu_i, mu_j, kappa)
    _check_curvature(kappa)
    out = _distance(mu_i, mu_j, kappa)
    return out if out.ndim else float(out)


def _distance(mu_i, mu_j, kappa):
    delta = mu_i - mu_j
    diff = np.sqrt(np.sum(delta * delta, axis=-1))
    denom = np.abs(1.0 - kappa * np.sum(mu_i * mu_j, axis=-1))
    frac = np.clip(diff / np.maximum(denom, _MIN_NORM), 0.0, 1.0 - EPS_ATANH)
    return 2.0 / np.sqrt(-kappa) * np.arctanh(frac)


def geodesic_distance_grad(mu_i, mu_j, kappa):
    """Distance plus its partials ``(d, dd/dmu_i, dd/dmu_j, dd/dkappa)``.

    Inputs are batched arrays ``(n, dim)``, ``(n, dim)``, ``(n,)``. Where the
    atanh argument is clamped the derivative is zero (flat clamp); where the
    two points coincide the center partials are set to zero.
    """
    delta = mu_i - mu_j
    n = np.linalg.norm(delta, axis=-1)
    p = np.sum(mu_i * mu_j, axis=-1)
    g = 1.0 - kappa * p
    sg = np.sign(g)
    ag = np.maximum(np.abs(g), _MIN_NORM)
    raw = n / ag
    clamped = raw >= 1.0 - EPS_ATANH
    f = np.minimum(raw, 1.0 - EPS_ATANH)
    c = 2.0 / np.sqrt(-kappa)
    at = np.arctanh(f)
    d = c * at

    datanh = np.where(clamped, 0.0, 1.0 / (1.0 - f * f))
    safe_n = np.where(n > 0, n, 1.0)
    unit = np.where((n > 0)[..., None], delta / safe_n[..., None], 0.0)
    # df/dmu_i = delta/(n|g|) + n*sign(g)*kappa*mu_j/g^2
    w = (n * sg * kappa / (ag * ag))[..., None]
    df_dmi = unit / ag[..., None] + w * mu_j
    df_dmj = -unit / ag[..., None] + w * mu_i
    df_dk = n * sg * p / (ag * ag)
    scale = (c * datanh)[..., None]
    dd_dmi = scale * df_dmi
    dd_dmj = scale * df_dmj
    dd_dk = np.power(-kappa, -1.5) * at + c * datanh * df_dk
    zero = (n == 0)
    dd_dmi[zero] = 0.0
    dd_dmj[zero] = 0.0
    return d, dd_dmi, dd_dmj, dd_dk


def gyro_distance(mu_i, mu_j, kappa):
    """Möbius gyrodistance; diagnostic alternative to :func:`geodesic_distance`."""
    mu_i, mu_j, kappa = _as_array(mu_i), _as_array(mu_j), _as_array(kappa)
    sc = np.sqrt(-kappa)
    m = mobius_add(-mu_i, mu_j, kappa)
    arg = np.clip(sc * np.linalg.norm(m, axis=-1), 0.0, 1.0 - EPS_ATANH)
    out = 2.0 / sc * np.arctanh(arg)
    return out if out.ndim else float(out)


def mobius_add(x, y, kappa):
    c = -_as_array(kappa)[..., None]
    xy = np.sum(x * y, axis=-1, keepdims=True)
    x2 = np.sum(x * x, axis=-1, keepdims=True)
    y2 = np.sum(y * y, axis=-1, keepdims=True)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c * c * x2 * y2
    return num / np.maximum(den, _MIN_NORM)


def project_to_ball(p, kappa):
    """Radially pull ``p`` inside the ball when it is within the boundary margin."""
    p, kappa = _as_array(p), _as_array(kappa)
    _check_curvature(kappa)
    limit = -1.0 / kappa
    sq = np.sum(p * p, axis=-1)
    target = np.sqrt(limit) * (1.0 - EPS_BALL)
    outside = sq >= (1.0 - EPS_BALL) * limit
    if not np.any(outside):
        return p.copy()
    norm = np.sqrt(np.where(outside, sq, 1.0))
    factor = np.where(outside, target / norm, 1.0)
    return p * factor[..., None]


def exp_map(base, tangent, kappa):
    """Exponential map at ``base`` followed by :func:`project_to_ball`."""
    base, tangent, kappa = _as_array(base), _as_array(tangent), _as_array(kappa)
    _check_finite(base, tangent, kappa)
    _check_curvature(kappa)
    sc = np.sqrt(-kappa)[..., None]
    vnorm = np.linalg.norm(tangent, axis=-1, keepdims=True)
    lam = 2.0 / (1.0 + kappa[..., None] * np.sum(base * base, axis=-1, keepdims=True))
    safe = np.where(vnorm > _MIN_NORM, vnorm, 1.0)
    second = np.where(vnorm > _MIN_NORM,
                      np.tanh(sc * lam * safe / 2.0) * tangent / (sc * safe), 0.0)
    return project_to_ball(mobius_add(base, second, kappa), kappa)


def log_map(base, target, kappa):
    """Inverse of :func:`exp_map` at ``base``."""
    base, target, kappa = _as_array(base), _as_array(target), _as_array(kappa)
    _check_finite(base, target, kappa)
    _check_curvature(kappa)
    sc = np.sqrt(-kappa)[..., None]
    m = mobius_add(-base, target, kappa)
    mnorm = np.linalg.norm(m, axis=-1, keepdims=True)
    lam = 2.0 / (1.0 + kappa[..., None] * np.sum(base * base, axis=-1, keepdims=True))
    safe = np.where(mnorm > _MIN_NORM, mnorm, 1.0)
    arg = np.clip(sc * safe, 0.0, 1.0 - EPS_ATANH)
    return np.where(mnorm > _MIN_NORM, 2.0 / (sc * lam) * np.arctanh(arg) * m / safe, 0.0)


def conformal_factor(p, kappa):
    """Inverse squared metric scale ``(1 + kappa |p|^2)^2 / 4`` at ``p``."""
    p, kappa = _as_array(p), _as_array(kappa)
    out = (1.0 + kappa * np.sum(p * p, axis=-1)) ** 2 / 4.0
    return out if out.ndim else float(out)


def euclidean_distance(mu_i, mu_j):
    out = np.linalg.norm(_as_array(mu_i) - _as_array(mu_j), axis=-1)
    return out if out.ndim else float(out)
