"""Quadrature rules on triangles and edges.

Triangle rules are returned as barycentric points and weights normalized so
that ``integral = area * sum(w_q * g(x_q))``.  Edge rules are points in [0, 1]
along the segment with weights summing to one.
"""

import numpy as np

# Three-point rule, exact for degree 2 (edge midpoints).
_TRI3_BARY = np.array([
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
    [0.5, 0.5, 0.0],
])
_TRI3_W = np.full(3, 1.0 / 3.0)

# Six-point rule, exact for degree 4 (two symmetric orbits).
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
_TRI6_BARY = np.array([
    [1 - 2 * _A1, _A1, _A1],
    [_A1, 1 - 2 * _A1, _A1],
    [_A1, _A1, 1 - 2 * _A1],
    [1 - 2 * _A2, _A2, _A2],
    [_A2, 1 - 2 * _A2, _A2],
    [_A2, _A2, 1 - 2 * _A2],
])
_TRI6_W = np.array([_W1, _W1, _W1, _W2, _W2, _W2])


def triangle_rule(degree):
    """Return (bary, weights) exact for polynomials up to ``degree``.

    Degrees <= 2 and <= 4 use the standard symmetric rules; higher degrees
    fall back to a collapsed Gauss product rule.
    """
    if degree <= 2:
        return _TRI3_BARY, _TRI3_W
    if degree <= 4:
        return _TRI6_BARY, _TRI6_W
    return _conical_rule(degree)


def _conical_rule(degree):
    # Duffy map x = u, y = v*(1-u) with Jacobian (1-u); the u-integrand
    # carries one extra degree from the Jacobian.
    nu = (degree + 3) // 2
    nv = (degree + 2) // 2
    xu, wu = _gauss01(nu)
    xv, wv = _gauss01(nv)
    u = np.repeat(xu, nv)
    v = np.tile(xv, nu)
    w = np.repeat(wu, nv) * np.tile(wv, nu) * (1.0 - u)
    x = u
    y = v * (1.0 - u)
    bary = np.column_stack([1.0 - x - y, x, y])
    return bary, 2.0 * w


def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def edge_rule(npoints):
    """Gauss-Legendre points/weights on [0, 1]; exact for degree 2n-1."""
    return _gauss01(npoints)


def triangle_points(bary, vertices):
    """Map barycentric points to physical coordinates.

    vertices: (..., 3, 2) array of triangle corners; returns (..., nq, 2).
    """
    return np.einsum("qi,...id->...qd", bary, vertices)
