"""Spherical harmonic analysis and synthesis on the equiangular grid.

Grid convention (shared with :mod:`semsphere.projection`): an ``n x n`` array
indexed ``[i, j]`` where ``i`` is the azimuth bin, ``theta`` in
``[2 pi i / n, 2 pi (i + 1) / n)``, and ``j`` the polar bin, ``phi`` in
``[pi j / n, pi (j + 1) / n)``.  Samples sit at cell centres.  Rolling the
array along axis 0 is therefore an exact rotation about the z axis.

The basis is the orthonormal complex one with the Condon-Shortley phase.
Polar integration uses Fejer's first rule on the cell-centre rings, which is
exact for band-limited products whenever ``n >= 2 B``; this makes
``sht_forward`` an exact left inverse of ``sht_inverse``.

Two coefficient layouts are used:

* :class:`HarmonicCoefficients` - full complex set, flat index ``l*l + l + m``.
* "real layout" - ``(..., B, B)`` complex arrays ``[l, m]`` holding ``m >= 0``
  only, for real signals.  This is what the network uses.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import sph_harm_y

from .errors import (
    BandwidthMismatch,
    BandwidthTooHigh,
    InvalidExactShift,
    ResolutionTooLow,
)

SO3_MAX_BANDWIDTH = 8


def grid_angles(n):
    """Cell-centre azimuth ``theta`` and polar ``phi`` samples, each shape (n,)."""
    k = np.arange(n) + 0.5
    return 2.0 * np.pi * k / n, np.pi * k / n


@functools.lru_cache(maxsize=None)
def quadrature_weights(n):
    """Per-ring weights ``q_j`` so that the sphere integral is ``sum q_j f_ij``."""
    _, phi = grid_angles(n)
    k = np.arange(1, n // 2 + 1)
    s = (np.cos(2.0 * np.outer(phi, k)) / (4.0 * k * k - 1.0)).sum(axis=1)
    w = (2.0 / n) * (1.0 - 2.0 * s)
    q = w * (2.0 * np.pi / n)
    q.setflags(write=False)
    return q


def grid_weights(n):
    """Full ``(n, n)`` quadrature weight array."""
    return np.broadcast_to(quadrature_weights(n)[None, :], (n, n))


@functools.lru_cache(maxsize=None)
def legendre_table(n, bandwidth):
    """Normalised associated Legendre values ``P[l, m, j]`` for ``m >= 0``.

    ``Y_lm(theta, phi) = P[l, m, j] * exp(1j m theta)`` on ring ``j``.
    Entries with ``m > l`` are zero.
    """
    _, phi = grid_angles(n)
    table = np.zeros((bandwidth, bandwidth, n))
    for l in range(bandwidth):
        for m in range(l + 1):
            table[l, m] = sph_harm_y(l, m, phi, 0.0).real
    table.setflags(write=False)
    return table


@functools.lru_cache(maxsize=None)
def _weighted_table(n, bandwidth):
    pq = legendre_table(n, bandwidth) * quadrature_weights(n)[None, None, :]
    pq.setflags(write=False)
    return pq


def degree_norm(bandwidth):
    """The per-degree factor ``sqrt(4 pi / (2l + 1))`` of the convolution theorem."""
    l = np.arange(bandwidth)
    return np.sqrt(4.0 * np.pi / (2.0 * l + 1.0))


def lm_index(l, m):
    return l * l + l + m


@functools.lru_cache(maxsize=None)
def _lm_arrays(bandwidth):
    ls = np.concatenate([np.full(2 * l + 1, l) for l in range(bandwidth)])
    ms = np.concatenate([np.arange(-l, l + 1) for l in range(bandwidth)])
    return ls, ms


@dataclass(frozen=True)
class HarmonicCoefficients:
    """Complex coefficients ``c_lm`` for ``0 <= l < bandwidth``, flat layout."""

    bandwidth: int
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.shape != (self.bandwidth**2,):
            raise ValueError(
                f"expected {self.bandwidth**2} coefficients, got shape {c.shape}"
            )
        object.__setattr__(self, "coeffs", c)

    def __getitem__(self, lm):
        l, m = lm
        if not (0 <= l < self.bandwidth and -l <= m <= l):
            raise IndexError(lm)
        return self.coeffs[lm_index(l, m)]

    @classmethod
    def zeros(cls, bandwidth):
        return cls(bandwidth, np.zeros(bandwidth**2, dtype=np.complex128))

    @classmethod
    def from_dict(cls, bandwidth, values):
        c = np.zeros(bandwidth**2, dtype=np.complex128)
        for (l, m), v in values.items():
            c[lm_index(l, m)] = v
        return cls(bandwidth, c)

    def is_conjugate_symmetric(self, tol=1e-9):
        ls, ms = _lm_arrays(self.bandwidth)
        mirror = self.coeffs[ls * ls + ls - ms]
        expected = ((-1.0) ** np.abs(ms)) * np.conj(mirror)
        scale = max(1.0, float(np.abs(self.coeffs).max(initial=0.0)))
        return bool(np.abs(self.coeffs - expected).max(initial=0.0) <= tol * scale)

    def energy(self):
        return float(np.sum(np.abs(self.coeffs) ** 2))

    def to_real_layout(self):
        """``(B, B)`` array ``[l, m]`` of the ``m >= 0`` coefficients."""
        out = np.zeros((self.bandwidth, self.bandwidth), dtype=np.complex128)
        for l in range(self.bandwidth):
            out[l, : l + 1] = self.coeffs[l * l + l : l * l + 2 * l + 1]
        return out

    @classmethod
    def from_real_layout(cls, arr):
        arr = np.asarray(arr)
        bandwidth = arr.shape[0]
        ls, ms = _lm_arrays(bandwidth)
        pos = arr[ls, np.abs(ms)]
        sign = np.where(ms < 0, (-1.0) ** np.abs(ms), 1.0)
        c = np.where(ms < 0, sign * np.conj(pos), pos)
        return cls(bandwidth, c)


def _check_grid(grid):
    grid = np.asarray(grid)
    if grid.ndim < 2 or grid.shape[-1] != grid.shape[-2]:
        raise ValueError(f"expected square (n, n) grid, got shape {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ValueError("grid contains non-finite values")
    return grid, grid.shape[-1]


def sht_forward(grid, bandwidth):
    """Analyse an ``(n, n)`` grid into :class:`HarmonicCoefficients`.

    Uses an FFT over azimuth and quadrature over polar rings; linear in the
    input and exact on band-limited signals.
    """
    grid, n = _check_grid(grid)
    if grid.ndim != 2:
        raise ValueError("sht_forward takes a single (n, n) grid")
    if bandwidth < 1 or 2 * bandwidth > n:
        raise BandwidthTooHigh(f"bandwidth {bandwidth} needs n >= {2 * bandwidth}, got {n}")
    F = np.fft.fft(grid, axis=0)
    ls, ms = _lm_arrays(bandwidth)
    phase = np.exp(-1j * np.pi * ms / n)
    pq = _weighted_table(n, bandwidth)
    sign = np.where(ms < 0, (-1.0) ** np.abs(ms), 1.0)
    rows = pq[ls, np.abs(ms)] * sign[:, None]
    coeffs = phase * np.einsum("kj,kj->k", rows, F[ms % n])
    return HarmonicCoefficients(bandwidth, coeffs)


def sht_inverse(coeffs, n, real=None):
    """Synthesise ``sum c_lm Y_lm`` on the ``(n, n)`` grid.

    ``real=None`` returns a real array when the coefficients are conjugate
    symmetric, otherwise complex.
    """
    B = coeffs.bandwidth
    if n < 2 * B:
        raise ResolutionTooLow(f"n={n} < 2B={2 * B}")
    if real is None:
        real = coeffs.is_conjugate_symmetric()
    ls, ms = _lm_arrays(B)
    P = legendre_table(n, B)
    sign = np.where(ms < 0, (-1.0) ** np.abs(ms), 1.0)
    rows = P[ls, np.abs(ms)] * sign[:, None]
    G = np.zeros((n, n), dtype=np.complex128)
    np.add.at(G, ms % n, rows * (coeffs.coeffs * np.exp(1j * np.pi * ms / n))[:, None])
    out = np.fft.ifft(G, axis=0) * n
    return out.real.copy() if real else out


# ---------------------------------------------------------------------------
# real-layout fast path (batched; used by the network)


@functools.lru_cache(maxsize=32)
def _m_major_tables(n, B):
    """Tables with m leading, for batched matmuls: analysis (m, j, l), synthesis (m, l, j)."""
    ana = np.ascontiguousarray(_weighted_table(n, B).transpose(1, 2, 0))
    syn = np.ascontiguousarray(legendre_table(n, B).transpose(1, 0, 2))
    return ana, syn


def _per_m_matmul(x, table):
    """``out[m] = x[m] @ table[m]`` for complex ``x`` (m, batch, k) and real ``table``."""
    stacked = np.concatenate([x.real, x.imag], axis=1) if np.iscomplexobj(x) else x
    out = np.matmul(stacked, table)
    if not np.iscomplexobj(x):
        return out
    half = x.shape[1]
    return out[:, :half] + 1j * out[:, half:]


def analyze_real(grids, bandwidth):
    """Batched analysis of real grids ``(..., n, n)`` to ``(..., B, B)`` [l, m>=0]."""
    grids = np.asarray(grids, dtype=np.float64)
    n = grids.shape[-1]
    if 2 * bandwidth > n:
        raise BandwidthTooHigh(f"bandwidth {bandwidth} needs n >= {2 * bandwidth}, got {n}")
    lead = grids.shape[:-2]
    F = np.fft.rfft(grids.reshape(-1, n, n), axis=-2)[:, :bandwidth, :]
    F = F * np.exp(-1j * np.pi * np.arange(bandwidth) / n)[:, None]
    ana, _ = _m_major_tables(n, bandwidth)
    out = _per_m_matmul(F.transpose(1, 0, 2), ana)  # (m, batch, l)
    return out.transpose(1, 2, 0).reshape(lead + (bandwidth, bandwidth))


def synthesize_real(coeffs, n):
    """Batched synthesis of real-layout coefficients ``(..., B, B)`` to ``(..., n, n)``."""
    coeffs = np.asarray(coeffs)
    B = coeffs.shape[-1]
    if n < 2 * B:
        raise ResolutionTooLow(f"n={n} < 2B={2 * B}")
    lead = coeffs.shape[:-2]
    _, syn = _m_major_tables(n, B)
    G = _per_m_matmul(coeffs.reshape(-1, B, B).transpose(2, 0, 1), syn)  # (m, batch, j)
    G = G * (n * np.exp(1j * np.pi * np.arange(B) / n))[:, None, None]
    X = np.zeros((n // 2 + 1,) + G.shape[1:], dtype=np.complex128)
    X[:B] = G
    out = np.fft.irfft(X, n=n, axis=0)  # (i, batch, j)
    return out.transpose(1, 0, 2).reshape(lead + (n, n))


def real_layout_inner(u, v):
    """Real inner product ``sum_{l, |m|<=l} conj(u_lm) v_lm`` of real-signal spectra.

    Both operands are in real layout; returns per-degree sums, shape (..., B).
    """
    prod = (np.conj(u) * v).real
    return 2.0 * prod.sum(axis=-1) - prod[..., 0]


# ---------------------------------------------------------------------------
# convolution


def s2_convolve_zonal(f, kernel):
    """Convolve with a zonal kernel given by its per-degree spectrum ``h_l``.

    ``out_lm = f_lm * h_l * sqrt(4 pi / (2l + 1))``.  Diagonal per degree, hence
    commutes with every rotation.
    """
    kernel = np.asarray(kernel)
    if kernel.shape != (f.bandwidth,):
        raise BandwidthMismatch(
            f"kernel has {kernel.shape[0] if kernel.ndim else 0} degrees, signal has {f.bandwidth}"
        )
    ls, _ = _lm_arrays(f.bandwidth)
    mult = kernel * degree_norm(f.bandwidth)
    return HarmonicCoefficients(f.bandwidth, f.coeffs * mult[ls])


# ---------------------------------------------------------------------------
# rotations


@functools.lru_cache(maxsize=None)
def _jy_eig(l):
    m = np.arange(-l, l + 1, dtype=np.float64)
    jp = np.zeros((2 * l + 1, 2 * l + 1))
    # J+ |m> = sqrt(l(l+1) - m(m+1)) |m+1>
    jp[np.arange(1, 2 * l + 1), np.arange(2 * l)] = np.sqrt(l * (l + 1) - m[:-1] * (m[:-1] + 1))
    jy = (jp - jp.T) / 2j
    vals, vecs = np.linalg.eigh(jy)
    return vals, vecs


def wigner_d(l, beta):
    """Small Wigner matrix ``d^l_{m m'}(beta)``, rows/cols ordered ``m = -l..l``."""
    if l == 0:
        return np.ones((1, 1))
    vals, vecs = _jy_eig(l)
    d = (vecs * np.exp(-1j * beta * vals)) @ vecs.conj().T
    return d.real


def wigner_D(l, alpha, beta, gamma):
    """``D^l_{m m'} = exp(-i m alpha) d^l_{m m'}(beta) exp(-i m' gamma)``."""
    m = np.arange(-l, l + 1)
    return np.exp(-1j * m * alpha)[:, None] * wigner_d(l, beta) * np.exp(-1j * m * gamma)[None, :]


def euler_to_matrix(alpha, beta, gamma):
    """ZYZ rotation matrix ``Rz(alpha) Ry(beta) Rz(gamma)``."""

    def rz(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    c, s = math.cos(beta), math.sin(beta)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return rz(alpha) @ ry @ rz(gamma)


def matrix_to_euler(R):
    """Inverse of :func:`euler_to_matrix` (ZYZ), ``beta`` in ``[0, pi]``."""
    R = np.asarray(R)
    beta = math.acos(max(-1.0, min(1.0, R[2, 2])))
    if abs(math.sin(beta)) < 1e-12:
        # gimbal lock: put everything in alpha
        alpha = math.atan2(R[1, 0], R[0, 0]) if R[2, 2] > 0 else math.atan2(-R[1, 0], -R[0, 0])
        return alpha, beta, 0.0
    alpha = math.atan2(R[1, 2], R[0, 2])
    gamma = math.atan2(R[2, 1], -R[2, 0])
    return alpha, beta, gamma


@dataclass(frozen=True)
class RotationSpec:
    """A rotation as ZYZ Euler angles, optionally flagged as an exact grid shift.

    With ``exact_shift`` set, only ``beta = gamma = 0`` and ``alpha`` a multiple
    of ``2 pi / n`` are accepted; the grid is then rolled without resampling.
    """

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    exact_shift: bool = False

    def __post_init__(self):
        if not all(math.isfinite(a) for a in (self.alpha, self.beta, self.gamma)):
            raise ValueError("rotation angles must be finite")
        if self.exact_shift and (self.beta != 0.0 or self.gamma != 0.0):
            raise InvalidExactShift("exact shift requires beta = gamma = 0")

    @classmethod
    def shift(cls, m, n):
        return cls(alpha=2.0 * np.pi * m / n, exact_shift=True)

    def shift_cells(self, n):
        k = self.alpha * n / (2.0 * np.pi)
        m = round(k)
        if abs(k - m) > 1e-9:
            raise InvalidExactShift(f"alpha={self.alpha} is not a multiple of 2pi/{n}")
        return int(m) % n

    def matrix(self):
        return euler_to_matrix(self.alpha, self.beta, self.gamma)


def rotate_coefficients(coeffs, alpha, beta, gamma):
    """Coefficients of ``f(R^{-1} x)`` for ``R = Rz(alpha) Ry(beta) Rz(gamma)``."""
    out = np.empty_like(coeffs.coeffs)
    for l in range(coeffs.bandwidth):
        sl = slice(l * l, (l + 1) * (l + 1))
        out[sl] = wigner_D(l, alpha, beta, gamma) @ coeffs.coeffs[sl]
    return HarmonicCoefficients(coeffs.bandwidth, out)


def rotate_signal(grid, spec, bandwidth=None):
    """Rotate a grid signal: ``out(x) = grid(R^{-1} x)``.

    Exact-shift specs roll the azimuth axis (bit-exact).  Otherwise the grid
    is band-limited at ``bandwidth`` (default ``n // 2``), its spectrum rotated
    with Wigner matrices and resynthesised.
    """
    grid = np.asarray(grid)
    n = grid.shape[-1]
    if spec.exact_shift:
        return np.roll(grid, spec.shift_cells(n), axis=0)
    B = n // 2 if bandwidth is None else bandwidth
    c = sht_forward(grid, B)
    rotated = rotate_coefficients(c, spec.alpha, spec.beta, spec.gamma)
    return sht_inverse(rotated, n, real=not np.iscomplexobj(grid))


def evaluate(coeffs, theta, phi):
    """Evaluate the expansion at arbitrary points (azimuth ``theta``, polar ``phi``)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    out = np.zeros(np.broadcast(theta, phi).shape, dtype=np.complex128)
    for l in range(coeffs.bandwidth):
        for m in range(-l, l + 1):
            c = coeffs.coeffs[lm_index(l, m)]
            if c != 0:
                out += c * sph_harm_y(l, m, phi, theta)
    return out


def cartesian_to_angles(xyz):
    """Unit (or any nonzero) vectors to (azimuth in [0, 2pi), polar in [0, pi])."""
    xyz = np.asarray(xyz, dtype=np.float64)
    r = np.linalg.norm(xyz, axis=-1)
    theta = np.mod(np.arctan2(xyz[..., 1], xyz[..., 0]), 2.0 * np.pi)
    phi = np.arccos(np.clip(xyz[..., 2] / r, -1.0, 1.0))
    return theta, phi


def angles_to_cartesian(theta, phi):
    theta = np.asarray(theta)
    phi = np.asarray(phi)
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=-1
    )


# ---------------------------------------------------------------------------
# SO(3) correlation (reference implementation, small bandwidths only)


def so3_euler_grid(resolution):
    """Euler samples: alpha, gamma at ``2 pi k / r``; beta at ``pi (k + 1/2) / r``."""
    k = np.arange(resolution)
    return 2.0 * np.pi * k / resolution, np.pi * (k + 0.5) / resolution, 2.0 * np.pi * k / resolution


def _check_so3_inputs(f, h):
    if f.bandwidth != h.bandwidth:
        raise BandwidthMismatch(f"{f.bandwidth} != {h.bandwidth}")
    if f.bandwidth > SO3_MAX_BANDWIDTH:
        raise BandwidthTooHigh(f"so3 correlation limited to B <= {SO3_MAX_BANDWIDTH}")


def so3_correlate(f, h, resolution):
    """``g(R) = integral f(x) conj(h(R^{-1} x)) dx`` on the Euler grid.

    Returns an array ``[alpha, beta, gamma]`` of shape ``(r, r, r)``.  Rotating
    ``f`` by ``Q`` left-shifts the result: ``g'(R) = g(Q^{-1} R)``.
    """
    _check_so3_inputs(f, h)
    alphas, betas, gammas = so3_euler_grid(resolution)
    B = f.bandwidth
    ms = np.arange(-(B - 1), B)
    T = np.zeros((len(betas), 2 * B - 1, 2 * B - 1), dtype=np.complex128)
    for l in range(B):
        fl = f.coeffs[l * l : (l + 1) ** 2]
        hl = np.conj(h.coeffs[l * l : (l + 1) ** 2])
        sl = slice(B - 1 - l, B + l)
        outer = np.outer(fl, hl)
        for jb, beta in enumerate(betas):
            T[jb, sl, sl] += outer * wigner_d(l, beta)
    ea = np.exp(1j * np.outer(alphas, ms))
    eg = np.exp(1j * np.outer(gammas, ms))
    return np.einsum("am,bmn,cn->abc", ea, T, eg)


def so3_correlate_at(f, h, eulers):
    """Same correlation evaluated at arbitrary ``(alpha, beta, gamma)`` triples."""
    _check_so3_inputs(f, h)
    out = np.zeros(len(eulers), dtype=np.complex128)
    for k, (a, b, g) in enumerate(eulers):
        total = 0.0j
        for l in range(f.bandwidth):
            sl = slice(l * l, (l + 1) ** 2)
            total += f.coeffs[sl] @ np.conj(wigner_D(l, a, b, g)) @ np.conj(h.coeffs[sl])
        out[k] = total
    return out
