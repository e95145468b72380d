import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import sph_harm_y

from semsphere import harmonics as H
from semsphere.errors import BandwidthMismatch, BandwidthTooHigh, InvalidExactShift, ResolutionTooLow


def random_real_coeffs(rng, B):
    """Conjugate-symmetric coefficients of a real band-limited signal."""
    c = np.zeros(B * B, dtype=complex)
    for l in range(B):
        c[H.lm_index(l, 0)] = rng.normal()
        for m in range(1, l + 1):
            v = rng.normal() + 1j * rng.normal()
            c[H.lm_index(l, m)] = v
            c[H.lm_index(l, -m)] = (-1) ** m * np.conj(v)
    return H.HarmonicCoefficients(B, c)


def random_grid(rng, n, B):
    return H.sht_inverse(random_real_coeffs(rng, B), n)


def sphere_integral(grid):
    return float(np.sum(H.grid_weights(grid.shape[-1]) * grid))


class TestQuadrature:
    def test_weights_integrate_area(self):
        for n in (4, 8, 16, 64):
            assert H.quadrature_weights(n).sum() * n == pytest.approx(4 * np.pi, rel=1e-12)

    def test_exact_for_polynomials(self):
        # integral of cos^2(phi) over the sphere is 4 pi / 3
        _, phi = H.grid_angles(16)
        grid = np.tile(np.cos(phi) ** 2, (16, 1))
        assert sphere_integral(grid) == pytest.approx(4 * np.pi / 3, rel=1e-12)


class TestForward:
    def test_constant(self):
        c = H.sht_forward(np.ones((16, 16)), 8)
        assert c[0, 0] == pytest.approx(math.sqrt(4 * math.pi), abs=1e-6)
        assert np.abs(c.coeffs[1:]).max() < 1e-9

    def test_y10(self):
        theta, phi = H.grid_angles(16)
        T, P = np.meshgrid(theta, phi, indexing="ij")
        c = H.sht_forward(sph_harm_y(1, 0, P, T).real, 8)
        assert c[1, 0] == pytest.approx(1.0, abs=1e-6)
        others = np.delete(c.coeffs, H.lm_index(1, 0))
        assert np.abs(others).max() < 1e-9

    def test_zero(self):
        assert not np.any(H.sht_forward(np.zeros((8, 8)), 4).coeffs)

    def test_bandwidth_too_high(self):
        with pytest.raises(BandwidthTooHigh):
            H.sht_forward(np.zeros((8, 8)), 5)

    def test_conjugate_symmetric_for_real(self, rng):
        assert H.sht_forward(rng.normal(size=(16, 16)), 8).is_conjugate_symmetric()

    def test_linear(self, rng):
        a, b = rng.normal(size=(2, 16, 16))
        lhs = H.sht_forward(2 * a - 3 * b, 8).coeffs
        rhs = 2 * H.sht_forward(a, 8).coeffs - 3 * H.sht_forward(b, 8).coeffs
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestInverse:
    def test_zero(self):
        assert not np.any(H.sht_inverse(H.HarmonicCoefficients.zeros(4), 8))

    def test_constant(self):
        c = H.HarmonicCoefficients.from_dict(4, {(0, 0): math.sqrt(4 * math.pi)})
        np.testing.assert_allclose(H.sht_inverse(c, 8), 1.0, atol=1e-6)

    def test_resolution_too_low(self):
        with pytest.raises(ResolutionTooLow):
            H.sht_inverse(H.HarmonicCoefficients.zeros(8), 15)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([(8, 4), (16, 8), (32, 16), (16, 5)]))
    def test_roundtrip_and_parseval(self, seed, shape):
        n, B = shape
        c = random_real_coeffs(np.random.default_rng(seed), B)
        grid = H.sht_inverse(c, n)
        assert np.isrealobj(grid)
        back = H.sht_forward(grid, B)
        np.testing.assert_allclose(back.coeffs, c.coeffs, atol=1e-9)
        energy = sphere_integral(grid**2)
        assert energy == pytest.approx(np.sum(np.abs(c.coeffs) ** 2), rel=1e-9)

    def test_evaluate_matches_grid(self, rng):
        c = random_real_coeffs(rng, 4)
        theta, phi = H.grid_angles(8)
        T, P = np.meshgrid(theta, phi, indexing="ij")
        np.testing.assert_allclose(H.evaluate(c, T, P).real, H.sht_inverse(c, 8), atol=1e-12)


class TestRealLayout:
    def test_matches_complex_path(self, rng):
        grids = rng.normal(size=(3, 16, 16))
        real = H.analyze_real(grids, 8)
        for g, r in zip(grids, real):
            full = H.sht_forward(g, 8)
            for l in range(8):
                for m in range(l + 1):
                    assert r[l, m] == pytest.approx(full[l, m], abs=1e-12)
        back = H.synthesize_real(real, 16)
        for r, b in zip(real, back):
            c = np.zeros(64, dtype=complex)
            for l in range(8):
                for m in range(-l, l + 1):
                    c[H.lm_index(l, m)] = r[l, m] if m >= 0 else (-1) ** m * np.conj(r[l, -m])
            np.testing.assert_allclose(b, H.sht_inverse(H.HarmonicCoefficients(8, c), 16), atol=1e-12)

    def test_inner_product(self, rng):
        g1, g2 = rng.normal(size=(2, 16, 16))
        u, v = H.analyze_real(np.stack([g1, g2]), 8)
        full = np.vdot(H.sht_forward(g1, 8).coeffs, H.sht_forward(g2, 8).coeffs).real
        assert H.real_layout_inner(u, v).sum() == pytest.approx(full, rel=1e-10)


class TestConvolution:
    def test_identity_kernel(self, rng):
        f = random_real_coeffs(rng, 6)
        out = H.s2_convolve_zonal(f, 1.0 / H.degree_norm(6))
        np.testing.assert_allclose(out.coeffs, f.coeffs, atol=1e-12)

    def test_degree_zero_kernel_is_mean(self, rng):
        grid = random_grid(rng, 16, 8)
        h = np.zeros(8)
        h[0] = 1.0 / math.sqrt(4 * math.pi)
        out = H.sht_inverse(H.s2_convolve_zonal(H.sht_forward(grid, 8), h), 16)
        mean = sphere_integral(grid) / (4 * math.pi)
        np.testing.assert_allclose(out, mean, atol=1e-9)

    def test_mismatch(self):
        with pytest.raises(BandwidthMismatch):
            H.s2_convolve_zonal(H.HarmonicCoefficients.zeros(4), np.ones(3))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        f = random_real_coeffs(rng, 6)
        h = rng.normal(size=6)
        a, b, g = rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        lhs = H.s2_convolve_zonal(H.rotate_coefficients(f, a, b, g), h)
        rhs = H.rotate_coefficients(H.s2_convolve_zonal(f, h), a, b, g)
        np.testing.assert_allclose(lhs.coeffs, rhs.coeffs, atol=1e-9)


class TestRotation:
    def test_identity(self, rng):
        grid = rng.normal(size=(8, 8))
        np.testing.assert_array_equal(H.rotate_signal(grid, H.RotationSpec.shift(0, 8)), grid)

    def test_exact_shift_columns(self):
        grid = np.repeat(np.arange(4.0)[:, None], 4, axis=1)
        out = H.rotate_signal(grid, H.RotationSpec.shift(1, 4))
        assert out[:, 0].tolist() == [3.0, 0.0, 1.0, 2.0]

    def test_bad_exact_shift(self):
        with pytest.raises(InvalidExactShift):
            H.RotationSpec(alpha=0.1, beta=0.2, exact_shift=True)
        with pytest.raises(InvalidExactShift):
            H.rotate_signal(np.zeros((4, 4)), H.RotationSpec(alpha=0.1, exact_shift=True))

    def test_z_composition(self, rng):
        grid = random_grid(rng, 16, 8)
        two = H.rotate_signal(H.rotate_signal(grid, H.RotationSpec(0.3)), H.RotationSpec(0.9))
        one = H.rotate_signal(grid, H.RotationSpec(1.2))
        assert np.linalg.norm(two - one) / np.linalg.norm(one) < 1e-6

    def test_grid_shift_matches_wigner(self, rng):
        grid = random_grid(rng, 16, 8)
        spec = H.RotationSpec.shift(3, 16)
        general = H.rotate_signal(grid, H.RotationSpec(spec.alpha))
        np.testing.assert_allclose(H.rotate_signal(grid, spec), general, atol=1e-9)

    def test_rotated_signal_pointwise(self, rng):
        c = random_real_coeffs(rng, 4)
        a, b, g = 0.4, 1.1, -0.7
        R = H.euler_to_matrix(a, b, g)
        x = H.angles_to_cartesian(rng.uniform(0, 2 * np.pi, 20), rng.uniform(0, np.pi, 20))
        rot = H.rotate_coefficients(c, a, b, g)
        t1, p1 = H.cartesian_to_angles(x)
        t0, p0 = H.cartesian_to_angles(x @ R)  # R^{-1} x
        np.testing.assert_allclose(H.evaluate(rot, t1, p1), H.evaluate(c, t0, p0), atol=1e-10)

    def test_euler_roundtrip(self, rng):
        for _ in range(20):
            a, b, g = rng.uniform(-np.pi, np.pi), rng.uniform(0.01, np.pi - 0.01), rng.uniform(-np.pi, np.pi)
            R = H.euler_to_matrix(a, b, g)
            np.testing.assert_allclose(H.euler_to_matrix(*H.matrix_to_euler(R)), R, atol=1e-12)


def brute_correlation(f, h, R, n=24):
    """``integral f(x) conj(h(R^{-1} x)) dx`` by grid quadrature."""
    theta, phi = H.grid_angles(n)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    x = H.angles_to_cartesian(T, P)
    t0, p0 = H.cartesian_to_angles(x @ R)
    vals = H.evaluate(f, T, P) * np.conj(H.evaluate(h, t0, p0))
    return np.sum(H.grid_weights(n) * vals)


class TestSO3:
    def test_constant(self):
        y00 = H.HarmonicCoefficients.from_dict(1, {(0, 0): 1.0})
        g = H.so3_correlate(y00, y00, 4)
        np.testing.assert_allclose(g, 1.0, atol=1e-12)
        assert brute_correlation(y00, y00, H.euler_to_matrix(0.3, 1.0, 2.0)) == pytest.approx(1.0, abs=1e-3)

    def test_zero_kernel(self, rng):
        f = random_real_coeffs(rng, 4)
        assert not np.any(H.so3_correlate(f, H.HarmonicCoefficients.zeros(4), 4))

    def test_matches_quadrature(self, rng):
        f, h = random_real_coeffs(rng, 4), random_real_coeffs(rng, 4)
        a, b, g = H.so3_euler_grid(6)
        grid = H.so3_correlate(f, h, 6)
        for ia, ib, ig in [(0, 0, 0), (1, 2, 3), (5, 5, 1), (2, 4, 0)]:
            R = H.euler_to_matrix(a[ia], b[ib], g[ig])
            assert abs(grid[ia, ib, ig] - brute_correlation(f, h, R)) < 1e-3

    def test_equivariance(self, rng):
        f, h = random_real_coeffs(rng, 4), random_real_coeffs(rng, 4)
        Q = (0.7, 1.3, -0.4)
        fq = H.rotate_coefficients(f, *Q)
        QR = H.euler_to_matrix(*Q)
        eulers = [tuple(rng.uniform(0, [2 * np.pi, np.pi, 2 * np.pi])) for _ in range(20)]
        shifted = [H.matrix_to_euler(QR.T @ H.euler_to_matrix(*e)) for e in eulers]
        lhs = H.so3_correlate_at(fq, h, eulers)
        rhs = H.so3_correlate_at(f, h, shifted)
        assert np.abs(lhs - rhs).max() < 1e-3

    def test_grid_alpha_shift(self, rng):
        f, h = random_real_coeffs(rng, 4), random_real_coeffs(rng, 4)
        alpha = H.so3_euler_grid(8)[0][3]
        g = H.so3_correlate(f, h, 8)
        g2 = H.so3_correlate(H.rotate_coefficients(f, alpha, 0, 0), h, 8)
        np.testing.assert_allclose(g2, np.roll(g, 3, axis=0), atol=1e-9)

    def test_limits(self):
        with pytest.raises(BandwidthTooHigh):
            H.so3_correlate(H.HarmonicCoefficients.zeros(9), H.HarmonicCoefficients.zeros(9), 4)
        with pytest.raises(BandwidthMismatch):
            H.so3_correlate(H.HarmonicCoefficients.zeros(3), H.HarmonicCoefficients.zeros(4), 4)
