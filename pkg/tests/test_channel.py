import numpy as np
import pytest

from hfce.channel import (MaterialModel, PathParams, PathSet, direction_vector,
                          far_field_response, load_absorption_csv, los_path_gain,
                          near_field_response, nlos_path_gain, path_gains,
                          reflection_coefficient, sample_paths, select_response,
                          subcarrier_frequencies, synthesize_channel,
                          wideband_channel)
from hfce.errors import ConfigError, DegenerateChannelError
from hfce.geometry import SPEED_OF_LIGHT, element_positions
from hfce.scenario import baseline_scenario, toy_scenario

BASE = baseline_scenario()
CFG = BASE.array


def reflection_oracle(phi_in, n_t, sigma, f):
    """Second, independent complex-arithmetic evaluation of the coefficient."""
    import cmath
    phi_ref = cmath.asin(cmath.sin(phi_in) / n_t)
    fres = (cmath.cos(phi_in) - n_t * cmath.cos(phi_ref)) / \
           (cmath.cos(phi_in) + n_t * cmath.cos(phi_ref))
    rough = cmath.exp(-(8 * np.pi**2 * f**2 * sigma**2 * np.cos(phi_in)**2)
                      / SPEED_OF_LIGHT**2)
    return fres * rough


class TestDirectionVector:
    def test_boresight(self):
        assert direction_vector(0.0, 0.0) == pytest.approx([0, 0, 1])

    def test_in_plane(self):
        assert direction_vector(np.pi / 2, 0.0) == pytest.approx([1, 0, 0])

    def test_diagonal(self):
        t = direction_vector(np.pi / 4, np.pi / 4)
        assert t == pytest.approx([0.5, 0.5, np.sqrt(2) / 2])

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = direction_vector(rng.uniform(-np.pi / 2, np.pi / 2),
                                 rng.uniform(-np.pi, np.pi))
            assert np.linalg.norm(t) == pytest.approx(1.0, abs=1e-15)


class TestResponses:
    def test_unit_modulus(self):
        for resp in (near_field_response(0.3, 0.5, 12.0, CFG),
                     far_field_response(0.3, 0.5, 30.0, CFG)):
            assert np.abs(resp) == pytest.approx(np.ones(CFG.num_elements))

    def test_near_field_first_entry_phase(self):
        # AE at the origin sees exactly the source range r; the huge phase
        # argument (~1e5 rad) leaves ~1e-11 of representation noise
        r = 12.0
        resp = near_field_response(0.4, 0.9, r, CFG)
        expected = np.exp(-2j * np.pi * (CFG.carrier_hz / SPEED_OF_LIGHT) * r)
        assert resp[0] == pytest.approx(expected, abs=1e-9)

    def test_near_field_matches_direct_evaluation(self):
        r, az, el = 15.0, -0.7, 0.3
        resp = near_field_response(az, el, r, CFG)
        pos = element_positions(CFG)
        t = direction_vector(el, az)
        for i in (0, 1, 100, 1023):
            d = np.linalg.norm(pos[i] - r * t)
            assert resp[i] == pytest.approx(
                np.exp(-2j * np.pi * CFG.carrier_hz / SPEED_OF_LIGHT * d), abs=1e-9)

    def test_far_field_boresight_uniform(self):
        r = 30.0
        resp = far_field_response(0.0, 0.0, r, CFG)
        expected = np.exp(-2j * np.pi * (CFG.carrier_hz / SPEED_OF_LIGHT) * r)
        assert resp == pytest.approx(np.full(CFG.num_elements, expected), rel=1e-12)

    def test_far_field_relative_phase(self):
        az, el, r = 0.8, 0.6, 30.0
        resp = far_field_response(az, el, r, CFG)
        rel = np.angle(resp[1] * np.conj(resp[0]))
        expected = 2 * np.pi * (CFG.carrier_hz / SPEED_OF_LIGHT) * \
            CFG.ae_spacing * np.sin(el) * np.sin(az)
        assert rel == pytest.approx(np.angle(np.exp(1j * expected)), abs=1e-9)

    def test_near_far_convergence(self):
        # brute-force comparison over all elements at r = 1e4 m
        worst = 0.0
        for az, el in [(0.3, 0.7), (-1.2, 0.2), (2.5, -0.9)]:
            nf = near_field_response(az, el, 1e4, CFG)
            ff = far_field_response(az, el, 1e4, CFG)
            worst = max(worst, np.abs(np.angle(nf * np.conj(ff))).max())
        assert worst < 1e-2

    def test_select_threshold(self):
        z = 20.0
        near = select_response(0.3, 0.5, z - 1e-6, z, CFG)
        far = select_response(0.3, 0.5, z, z, CFG)
        assert np.allclose(near, near_field_response(0.3, 0.5, z - 1e-6, CFG))
        assert np.allclose(far, far_field_response(0.3, 0.5, z, CFG))

    def test_invalid_distance(self):
        with pytest.raises(ValueError):
            near_field_response(0.0, 0.0, 0.0, CFG)


class TestGains:
    def test_los_degenerate_normalization(self):
        # r=1, k_abs=0, f = c/(4 pi) makes the prefactor exactly 1
        assert los_path_gain(1.0, SPEED_OF_LIGHT / (4 * np.pi), 0.0) == \
            pytest.approx(1.0, rel=1e-15)

    def test_los_table_values(self):
        val = los_path_gain(30.0, 300e9, 0.0033)
        oracle = SPEED_OF_LIGHT / (4 * np.pi * 300e9 * 30) * np.exp(-0.0495)
        assert val == pytest.approx(oracle, rel=1e-15)
        assert val == pytest.approx(2.525e-6, rel=1e-3)

    def test_los_inverse_distance(self):
        assert los_path_gain(2.0, 1e9, 0.0) == \
            pytest.approx(0.5 * los_path_gain(1.0, 1e9, 0.0), rel=1e-15)

    def test_reflection_index_matched(self):
        assert reflection_coefficient(0.3, 1.0, 0.0, 300e9) == \
            pytest.approx(0.0, abs=1e-15)

    def test_reflection_normal_incidence(self):
        n_t = 2.24 - 0.025j
        val = reflection_coefficient(0.0, n_t, 0.0, 300e9)
        assert val == pytest.approx((1 - n_t) / (1 + n_t), rel=1e-12)

    def test_reflection_against_oracle(self):
        n_t, sigma, f = 2.24 - 0.025j, 8.8e-5, 300e9
        for phi in (0.0, np.pi / 8, np.pi / 4, 1.4):
            assert reflection_coefficient(phi, n_t, sigma, f) == \
                pytest.approx(reflection_oracle(phi, n_t, sigma, f), rel=1e-12)

    def test_reflection_domain(self):
        with pytest.raises(ValueError):
            reflection_coefficient(np.pi / 2, 2.0, 0.0, 300e9)
        with pytest.raises(ValueError):
            reflection_coefficient(-0.1, 2.0, 0.0, 300e9)

    def test_nlos_gain(self):
        assert nlos_path_gain(0.0, 1.0) == 0.0
        assert nlos_path_gain(1.0 + 0j, 2.5e-6) == pytest.approx(2.5e-6)
        assert nlos_path_gain(0.3, 2.5e-6) == pytest.approx(7.5e-7)


class TestSamplePaths:
    def test_baseline_structure(self):
        rng = np.random.default_rng(0)
        ps = sample_paths(BASE, rng)
        assert len(ps) == 5
        assert ps.paths[0].is_los and ps.paths[0].distance_m == 30.0
        assert ps.paths[0].delay_s == 100e-9
        for p in ps.paths[1:]:
            assert not p.is_los
            assert 10.0 <= p.distance_m <= 25.0
            assert 100e-9 <= p.delay_s <= 110e-9
            assert 0.0 <= p.incidence <= np.pi / 2

    def test_variable_l(self):
        from dataclasses import replace
        sc = replace(BASE, num_paths_min=2, num_paths_max=7)
        rng = np.random.default_rng(1)
        counts = np.array([len(sample_paths(sc, rng)) for _ in range(4000)])
        assert set(counts) == {2, 3, 4, 5, 6, 7}
        hist = np.bincount(counts, minlength=8)[2:8] / counts.size
        assert np.all(np.abs(hist - 1 / 6) < 0.03)

    def test_determinism(self):
        a = sample_paths(BASE, np.random.default_rng(42))
        b = sample_paths(BASE, np.random.default_rng(42))
        assert a.paths == b.paths
        assert np.array_equal(a.gains, b.gains)

    def test_marginals(self):
        # KS-style range/mean checks over many draws
        rng = np.random.default_rng(3)
        az, el, r, tau = [], [], [], []
        for _ in range(3000):
            ps = sample_paths(BASE, rng)
            for p in ps.paths:
                az.append(p.azimuth)
                el.append(p.elevation)
            for p in ps.paths[1:]:
                r.append(p.distance_m)
                tau.append(p.delay_s)
        az, el, r, tau = map(np.asarray, (az, el, r, tau))
        assert -np.pi <= az.min() and az.max() <= np.pi
        assert abs(az.mean()) < 0.05
        assert -np.pi / 2 <= el.min() and el.max() <= np.pi / 2
        assert abs(el.mean()) < 0.03
        assert 10 <= r.min() and r.max() <= 25
        assert abs(r.mean() - 17.5) < 0.15
        assert abs(tau.mean() - 105e-9) < 0.2e-9

    def test_empty_range_rejected(self):
        from dataclasses import replace
        sc = replace(BASE, scatter_min_m=25.0, scatter_max_m=25.0)
        with pytest.raises(ConfigError):
            sample_paths(sc, np.random.default_rng(0))


def _los_only_pathset(az=0.2, el=0.4, r=30.0, tau=100e-9, gain=2.5e-6):
    ps = PathSet((PathParams(az, el, r, tau, is_los=True),))
    ps.gains = np.array([gain])
    return ps


class TestSynthesis:
    def test_normalization(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            ps = sample_paths(BASE, rng)
            h = synthesize_channel(ps, CFG.carrier_hz, CFG, BASE.rayleigh_m())
            assert np.linalg.norm(h) ** 2 == pytest.approx(CFG.num_elements,
                                                           rel=1e-12)

    def test_single_path_closed_form(self):
        ps = _los_only_pathset()
        h = synthesize_channel(ps, CFG.carrier_hz, CFG, BASE.rayleigh_m())
        resp = far_field_response(0.2, 0.4, 30.0, CFG)
        phase = np.exp(-2j * np.pi * CFG.carrier_hz * 100e-9)
        expected = resp * phase  # unit-modulus: normalization removes the gain
        assert np.allclose(h, expected, rtol=1e-10)
        assert ps.gamma == pytest.approx(1.0 / (2.5e-6), rel=1e-12)

    def test_exact_cancellation_degenerates(self):
        p = PathParams(0.2, 0.4, 30.0, 100e-9, is_los=True)
        q = PathParams(0.2, 0.4, 30.0, 100e-9)
        ps = PathSet((p, q))
        ps.gains = np.array([1.0, -1.0])
        with pytest.raises(DegenerateChannelError):
            synthesize_channel(ps, CFG.carrier_hz, CFG, BASE.rayleigh_m())

    def test_all_far_when_beyond_z(self):
        # construction flag says no near-field content; verify against a
        # far-field-only manual superposition
        rng = np.random.default_rng(5)
        ps = sample_paths(BASE, rng)
        z = 9.0  # all sampled distances are >= 10
        assert not ps.near_field_mask(z).any()
        h = synthesize_channel(ps, CFG.carrier_hz, CFG, z)
        manual = np.zeros(CFG.num_elements, dtype=complex)
        for p, g in zip(ps.paths, ps.gains):
            manual += g * np.exp(-2j * np.pi * CFG.carrier_hz * p.delay_s) * \
                far_field_response(p.azimuth, p.elevation, p.distance_m, CFG)
        manual *= np.sqrt(CFG.num_elements) / np.linalg.norm(manual)
        assert np.allclose(h, manual, rtol=1e-12)


class TestWideband:
    def test_subcarrier_grid(self):
        f = subcarrier_frequencies(300e9, 32, 15e9)
        assert f[0] == pytest.approx(300e9 - 15.5 * (15e9 / 32))
        assert f[-1] == pytest.approx(300e9 + 15.5 * (15e9 / 32))
        assert f[-1] - 300e9 == pytest.approx(7.266e9, rel=1e-3)

    def test_k1_degenerates_to_narrowband(self):
        rng = np.random.default_rng(2)
        ps = sample_paths(BASE, rng)
        wb = wideband_channel(ps, BASE, 1, 15e9)
        assert wb.values.shape == (1, CFG.num_elements)
        assert wb.subcarrier_hz[0] == CFG.carrier_hz
        nb = synthesize_channel(ps, CFG.carrier_hz, CFG, BASE.rayleigh_m(),
                                material=BASE.material)
        assert np.allclose(wb.values[0], nb, rtol=1e-14)

    def test_rows_match_per_frequency_synthesis(self):
        rng = np.random.default_rng(4)
        ps = sample_paths(BASE, rng)
        wb = wideband_channel(ps, BASE, 8, 15e9)
        for k in range(8):
            row = synthesize_channel(ps, wb.subcarrier_hz[k], CFG,
                                     BASE.rayleigh_m(), material=BASE.material)
            assert np.allclose(wb.values[k], row, rtol=1e-13)

    def test_row_normalization(self):
        rng = np.random.default_rng(6)
        ps = sample_paths(BASE, rng)
        wb = wideband_channel(ps, BASE, 16, 15e9)
        norms = np.linalg.norm(wb.values, axis=1) ** 2
        assert norms == pytest.approx(np.full(16, CFG.num_elements), rel=1e-12)


class TestMaterial:
    def test_scalar_absorption(self):
        m = MaterialModel()
        assert m.k_abs_at(1e9) == 0.0033
        assert m.k_abs_at(1e12) == 0.0033

    def test_table_interpolation_and_range(self):
        m = MaterialModel(absorption_freq_hz=(200e9, 400e9),
                          absorption_k=(0.002, 0.004))
        assert m.k_abs_at(300e9) == pytest.approx(0.003)
        with pytest.raises(ConfigError):
            m.k_abs_at(100e9)
        with pytest.raises(ConfigError):
            m.k_abs_at(500e9)

    def test_wideband_out_of_table_range_fails(self):
        from dataclasses import replace
        m = MaterialModel(absorption_freq_hz=(299e9, 301e9),
                          absorption_k=(0.0033, 0.0033))
        sc = replace(BASE, material=m)
        ps = sample_paths(sc, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            wideband_channel(ps, sc, 32, 15e9)  # spans +-7.3 GHz

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "abs.csv"
        path.write_text("frequency_hz,k_abs_per_m\n2e11,0.002\n4e11,0.004\n")
        freqs, ks = load_absorption_csv(path)
        assert freqs == (2e11, 4e11)
        assert ks == (0.002, 0.004)

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "abs.csv"
        path.write_text("f,k\n1,2\n")
        with pytest.raises(ConfigError):
            load_absorption_csv(path)

    def test_gains_depend_on_frequency(self):
        rng = np.random.default_rng(8)
        ps = sample_paths(BASE, rng)
        g_lo = path_gains(ps, 295e9, BASE.material)
        g_hi = path_gains(ps, 305e9, BASE.material)
        assert np.all(g_lo > g_hi)  # spreading loss grows with f
