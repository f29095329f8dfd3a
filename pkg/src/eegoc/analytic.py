"""
Ground truth for the spherical-shell experiment.

Harmonic potentials in the shell ``r_in <= r <= r_out`` are expanded in
real, orthonormal spherical harmonics without the Condon-Shortley phase::

    u(r, theta, phi) = sum_lm (a_lm r^l + b_lm r^(-l-1)) Y_lm(theta, phi)

with the polar axis along +z.  Coefficients are chosen so that ``u`` takes a
prescribed trace on the inner sphere and has zero normal derivative on the
outer sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_legendre, sph_harm_y

from .errors import InputError, UsageError
from .fem import ElectrodeSet

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def n_coefficients(l_max):
    return (l_max + 1) ** 2


def lm_index(l, m):
    return l * l + l + m


def degrees(l_max):
    return np.concatenate([np.full(2 * l + 1, l) for l in range(l_max + 1)])


def to_spherical(points):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(p, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arccos(np.clip(np.where(r > 0, p[:, 2] / r, 1.0), -1.0, 1.0))
    phi = np.arctan2(p[:, 1], p[:, 0])
    return r, theta, phi


def real_sph_harm(l_max, theta, phi, gradient=False):
    """Real orthonormal spherical harmonics up to degree ``l_max``.

    Returns an array of shape ``(n_coefficients(l_max), npts)``; with
    ``gradient=True`` also the derivatives with respect to ``theta`` and
    ``phi`` (same shape each).
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n = n_coefficients(l_max)
    Y = np.empty((n,) + theta.shape)
    dT = np.empty_like(Y) if gradient else None
    dP = np.empty_like(Y) if gradient else None
    for l in range(l_max + 1):
        for m in range(0, l + 1):
            if gradient:
                y, dy = sph_harm_y(l, m, theta, phi, diff_n=1)
                yt, yp = dy[..., 0], dy[..., 1]
            else:
                y = sph_harm_y(l, m, theta, phi)
            sgn = (-1.0) ** m
            if m == 0:
                Y[lm_index(l, 0)] = y.real
                if gradient:
                    dT[lm_index(l, 0)] = yt.real
                    dP[lm_index(l, 0)] = yp.real
                continue
            c = np.sqrt(2.0) * sgn
            Y[lm_index(l, m)] = c * y.real
            Y[lm_index(l, -m)] = c * y.imag
            if gradient:
                dT[lm_index(l, m)] = c * yt.real
                dT[lm_index(l, -m)] = c * yt.imag
                dP[lm_index(l, m)] = c * yp.real
                dP[lm_index(l, -m)] = c * yp.imag
    if gradient:
        return Y, dT, dP
    return Y


def sphere_quadrature(l_max, oversample=2):
    """Gauss-Legendre x trapezoid rule on the unit sphere.

    Integrates products of two harmonics of degree ``<= l_max`` exactly for
    ``oversample >= 1``.
    """
    n_theta = oversample * (l_max + 1)
    n_phi = 2 * n_theta
    x, w = roots_legendre(n_theta)
    theta = np.arccos(x)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.repeat(w, n_phi) * (2 * np.pi / n_phi)
    return T.ravel(), P.ravel(), W


@dataclass(frozen=True, eq=False)
class ShellHarmonicField:
    """Harmonic potential in a spherical shell, Neumann-free on the outer sphere."""

    l_max: int
    a: np.ndarray
    b: np.ndarray
    r_in: float
    r_out: float

    def neumann_residuals(self):
        """``l a r_out^(l-1) - (l+1) b r_out^(-l-2)`` for each coefficient; zero by construction."""
        l = degrees(self.l_max)
        return l * self.a * self.r_out ** (l - 1.0) - (l + 1) * self.b * self.r_out ** (-l - 2.0)

    def inner_coefficients(self):
        l = degrees(self.l_max)
        return self.a * self.r_in**l + self.b * self.r_in ** (-l - 1.0)


def fit_shell_field(inner, l_max, r_in=0.7, r_out=1.0, oversample=2):
    """Harmonic field with inner trace ``inner`` and zero flux through ``r_out``.

    Parameters
    ----------
    inner : callable or tuple
        Either a function of points on the inner sphere (an (n, 3) array), or
        a ``(points, values)`` pair of nodal samples; samples are fitted by
        least squares, functions are projected by quadrature.
    l_max : int
        Degree cutoff.
    """
    if l_max < 0:
        raise InputError("l_max must be non-negative")
    n = n_coefficients(l_max)
    if callable(inner):
        T, P, W = sphere_quadrature(l_max, oversample)
        pts = r_in * np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=1)
        vals = np.asarray(inner(pts), dtype=np.float64)
        c = real_sph_harm(l_max, T, P) @ (W * vals)
    else:
        pts, vals = inner
        _, T, P = to_spherical(pts)
        Y = real_sph_harm(l_max, T, P)
        if Y.shape[1] < n:
            raise InputError("not enough samples for the requested degree")
        c = np.linalg.lstsq(Y.T, np.asarray(vals, dtype=np.float64), rcond=None)[0]

    # per degree: a r_in^l + b r_in^(-l-1) = c,  l a r_out^(l-1) - (l+1) b r_out^(-l-2) = 0
    a = np.zeros(n)
    b = np.zeros(n)
    for l in range(l_max + 1):
        sl = slice(l * l, (l + 1) ** 2)
        if l == 0:
            a[sl] = c[sl]
            continue
        mat = np.array([[r_in**l, r_in ** (-l - 1.0)],
                        [l * r_out ** (l - 1.0), -(l + 1) * r_out ** (-l - 2.0)]])
        coef = np.linalg.solve(mat, np.stack([c[sl], np.zeros(2 * l + 1)]))
        a[sl], b[sl] = coef[0], coef[1]
    return ShellHarmonicField(int(l_max), a, b, float(r_in), float(r_out))


def field_from_coefficients(inner_coefficients, r_in=0.7, r_out=1.0):
    """Field whose inner trace has the given real harmonic coefficients."""
    c = np.asarray(inner_coefficients, dtype=np.float64)
    l_max = int(round(np.sqrt(len(c)))) - 1
    if n_coefficients(l_max) != len(c):
        raise InputError("coefficient count must be a perfect square")
    T, P, W = sphere_quadrature(l_max)
    Y = real_sph_harm(l_max, T, P)
    pts = r_in * np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=1)
    return fit_shell_field((pts, c @ Y), l_max, r_in, r_out)


def _radial(field, r, derivative=False):
    l = degrees(field.l_max)[:, None]
    r = r[None, :]
    if derivative:
        return field.a[:, None] * l * r ** (l - 1.0) - field.b[:, None] * (l + 1) * r ** (-l - 2.0)
    return field.a[:, None] * r**l + field.b[:, None] * r ** (-l - 1.0)


def _check_domain(field, r, tol):
    lo, hi = field.r_in * (1 - tol), field.r_out * (1 + tol)
    bad = np.nonzero((r < lo) | (r > hi))[0]
    if len(bad):
        raise UsageError(f"point {bad[0]} at radius {r[bad[0]]:.6g} lies outside the shell "
                         f"[{field.r_in}, {field.r_out}]")


def eval_field(field, points, *, check=True, tol=1e-9):
    """Evaluate the potential at ``points`` (n, 3).

    With ``check=False`` the series is evaluated wherever it converges,
    which is convenient for faceted meshes that poke slightly out of the
    true shell.
    """
    r, theta, phi = to_spherical(points)
    if check:
        _check_domain(field, r, tol)
    Y = real_sph_harm(field.l_max, theta, phi)
    return np.einsum("ij,ij->j", _radial(field, r), Y)


def eval_gradient(field, points):
    """Cartesian gradient of the potential, shape (n, 3).  No domain check."""
    r, theta, phi = to_spherical(points)
    Y, dT, dP = real_sph_harm(field.l_max, theta, phi, gradient=True)
    R = _radial(field, r)
    dR = _radial(field, r, derivative=True)
    u_r = np.einsum("ij,ij->j", dR, Y)
    u_t = np.einsum("ij,ij->j", R, dT) / r
    with np.errstate(invalid="ignore", divide="ignore"):
        u_p = np.where(np.sin(theta) > 1e-12,
                       np.einsum("ij,ij->j", R, dP) / (r * np.sin(theta)), 0.0)
    st, ct, sp_, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    e_r = np.stack([st * cp, st * sp_, ct], axis=1)
    e_t = np.stack([ct * cp, ct * sp_, -st], axis=1)
    e_p = np.stack([-sp_, cp, np.zeros_like(phi)], axis=1)
    return u_r[:, None] * e_r + u_t[:, None] * e_t + u_p[:, None] * e_p


def eval_radial_derivative(field, points):
    """``du/dr`` at ``points``; no domain check."""
    r, theta, phi = to_spherical(points)
    Y = real_sph_harm(field.l_max, theta, phi)
    return np.einsum("ij,ij->j", _radial(field, r, derivative=True), Y)


# --------------------------------------------------------------------------
# cross pattern
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CrossSpec:
    """Cross of two orthogonal great-circle bands centred on the +y pole.

    Angles are in degrees.  The value is 1 inside the cross, 0 outside, with
    a sine roll-off of total width ``rolloff`` centred on each edge.
    """

    half_width: float = 10.0
    arm_length: float = 35.0
    rolloff: float = 2.0


def _rolloff(t, width):
    # t: signed angular distance inside the edge (degrees); 0.5 on the edge
    return np.where(t >= width / 2, 1.0,
                    np.where(t <= -width / 2, 0.0, 0.5 + 0.5 * np.sin(np.pi * t / width)))


def cross_pattern(points, spec=CrossSpec(), r_in=None, tol=1e-6):
    """Unit-amplitude cross on the sphere, evaluated at ``points`` (n, 3).

    One arm runs along the great circle in the xy-plane, the other along the
    great circle in the yz-plane; both are centred on the +y direction.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(p, axis=1)
    if r_in is not None and np.any(np.abs(r - r_in) > tol * r_in):
        raise UsageError("cross_pattern expects points on the inner sphere")
    u = p / r[:, None]
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    deg = np.degrees

    def arm(off_axis, in_plane):
        across = deg(np.arcsin(np.clip(np.abs(off_axis), 0.0, 1.0)))
        along = deg(np.arctan2(np.abs(in_plane), y))
        return (_rolloff(spec.half_width - across, spec.rolloff)
                * _rolloff(spec.arm_length - along, spec.rolloff))

    return np.maximum(arm(z, x), arm(x, z))


# --------------------------------------------------------------------------
# electrodes and noise
# --------------------------------------------------------------------------

def electrode_layout_hemisphere(K, r=1.0):
    """``K`` quasi-uniform electrodes on the hemisphere ``y > 0`` of radius ``r``.

    A golden-angle spiral in ``y``: point ``i`` sits at height
    ``y = 1 - (i + 1/2) / K`` (equal-area bands); a single electrode is put
    on the pole.  Weights are 1.
    """
    if K < 1:
        raise InputError("need at least one electrode")
    if K == 1:
        return ElectrodeSet(np.array([[0.0, r, 0.0]]), np.ones(1))
    i = np.arange(K)
    y = 1.0 - (i + 0.5) / K
    rho = np.sqrt(1.0 - y * y)
    phi = i * GOLDEN_ANGLE
    pts = r * np.stack([rho * np.cos(phi), y, rho * np.sin(phi)], axis=1)
    return ElectrodeSet(pts, np.ones(K))


@dataclass(frozen=True)
class NoiseSpec:
    level: float
    seed: int = 0


def add_noise(d, spec):
    """Add zero-mean Gaussian noise with std ``level * |d_i|`` to each datum.

    Returns the noisy data and the per-electrode standard deviations.
    """
    if spec.level < 0:
        raise InputError("noise level must be non-negative")
    d = np.asarray(d, dtype=np.float64)
    s = spec.level * np.abs(d)
    if spec.level == 0:
        return d.copy(), s
    rng = np.random.default_rng(spec.seed)
    return d + s * rng.standard_normal(d.shape), s
