import numpy as np
import pytest

from hfce.channel import sample_paths, synthesize_channel, wideband_channel
from hfce.errors import ShapeError
from hfce.measurement import (Observation, complex_awgn, complex_to_real,
                              generate_combiner, noise_variance, observe,
                              real_expand, real_to_complex)
from hfce.scenario import baseline_scenario, toy_scenario

BASE = baseline_scenario()
TOY = toy_scenario()


class TestRealComplex:
    def test_basic(self):
        assert np.array_equal(complex_to_real(np.array([1 + 2j])), [1.0, 2.0])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=64) + 1j * rng.normal(size=64)
        assert np.array_equal(real_to_complex(complex_to_real(v)), v)

    def test_odd_length_rejected(self):
        with pytest.raises(ShapeError):
            real_to_complex(np.zeros(5))

    def test_expansion_commutes_with_matvec(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        v = rng.normal(size=4) + 1j * rng.normal(size=4)
        lhs = real_expand(w) @ complex_to_real(v)
        rhs = complex_to_real(w @ v)
        assert np.allclose(lhs, rhs, rtol=1e-14)


class TestCombiner:
    def test_block_structure(self):
        op = generate_combiner(BASE.array, 16, np.random.default_rng(0))
        s, sbar = 4, 256
        for p in range(16):
            for si in range(s):
                row = op.combiners[p, si]
                block = row[si * sbar:(si + 1) * sbar]
                assert np.all(block != 0)
                assert np.count_nonzero(row) == sbar
                # single-bit entries
                assert np.allclose(np.abs(block), 1 / np.sqrt(sbar))

    def test_column_norms(self):
        # each per-pilot combiner column (= receive row) has unit l2 norm
        op = generate_combiner(BASE.array, 4, np.random.default_rng(1))
        norms = np.linalg.norm(op.combiners, axis=2)
        assert norms == pytest.approx(np.ones((4, 4)))

    def test_table1_shapes(self):
        op = generate_combiner(BASE.array, 128, np.random.default_rng(2))
        assert op.stacked.shape == (512, 1024)
        assert op.real.shape == (1024, 2048)

    def test_sign_balance(self):
        op = generate_combiner(BASE.array, 128, np.random.default_rng(3))
        signs = np.sign(op.combiners[op.combiners != 0].real)
        assert abs(signs.mean()) < 0.01

    def test_real_expansion_sparsity(self):
        op = generate_combiner(TOY.array, 4, np.random.default_rng(4))
        re_nz = op.stacked.real != 0
        expected = np.block([[re_nz, np.zeros_like(re_nz, dtype=bool)],
                             [np.zeros_like(re_nz, dtype=bool), re_nz]])
        assert np.array_equal(op.real != 0, expected)


class TestObserve:
    def _channel(self, seed=0):
        ps = sample_paths(BASE, np.random.default_rng(seed))
        return synthesize_channel(ps, BASE.array.carrier_hz, BASE.array,
                                  BASE.rayleigh_m())

    def test_noiseless(self):
        op = generate_combiner(BASE.array, 8, np.random.default_rng(0))
        h = self._channel()
        obs = observe(h, op, snr_db=np.inf)
        assert np.allclose(obs.y, complex_to_real(op.stacked @ h), rtol=1e-14)
        assert obs.noise_var == 0.0

    def test_snr_convention(self):
        assert noise_variance(0.0) == 1.0
        assert noise_variance(10.0) == pytest.approx(0.1)
        assert noise_variance(20.0) == pytest.approx(0.01)

    def test_determinism(self):
        op = generate_combiner(BASE.array, 8, np.random.default_rng(0))
        h = self._channel()
        a = observe(h, op, 10.0, np.random.default_rng(99))
        b = observe(h, op, 10.0, np.random.default_rng(99))
        assert np.array_equal(a.y, b.y)

    def test_linearity_noiseless(self):
        op = generate_combiner(BASE.array, 8, np.random.default_rng(0))
        h1, h2 = self._channel(1), self._channel(2)
        lhs = observe(2.0 * h1 + 3.0 * h2, op, np.inf).y
        rhs = 2.0 * observe(h1, op, np.inf).y + 3.0 * observe(h2, op, np.inf).y
        assert np.allclose(lhs, rhs, rtol=1e-12)

    def test_shape_mismatch(self):
        op = generate_combiner(BASE.array, 8, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            observe(np.ones(13, dtype=complex), op, 10.0,
                    np.random.default_rng(0))

    def test_wideband_same_operator_per_row(self):
        ps = sample_paths(BASE, np.random.default_rng(3))
        wb = wideband_channel(ps, BASE, 4, 15e9)
        op = generate_combiner(BASE.array, 8, np.random.default_rng(0))
        obs = observe(wb, op, snr_db=np.inf)
        assert obs.y.shape == (4, 2 * 4 * 8)
        for k in range(4):
            assert np.allclose(obs.y[k], complex_to_real(op.stacked @ wb.values[k]),
                               rtol=1e-13)

    def test_wideband_noise_independent_per_row(self):
        ps = sample_paths(BASE, np.random.default_rng(3))
        wb = wideband_channel(ps, BASE, 4, 15e9)
        op = generate_combiner(BASE.array, 8, np.random.default_rng(0))
        obs = observe(wb, op, 0.0, np.random.default_rng(5))
        clean = observe(wb, op, np.inf).y
        noise = obs.y - clean
        # rows get fresh draws; identical rows would mean a reused stream
        assert not np.allclose(noise[0], noise[1])

    def test_noise_statistics(self):
        # per-real-component variance of CN(0, 1) is 1/2, within 1%
        rng = np.random.default_rng(7)
        n = complex_awgn(rng, 500_000, 1.0)
        assert np.var(n.real) == pytest.approx(0.5, rel=0.01)
        assert np.var(n.imag) == pytest.approx(0.5, rel=0.01)
        assert abs(np.mean(n.real * n.imag)) < 2e-3

    def test_noise_is_combined_not_added(self):
        # with a noiseless channel of zeros, y is the combined noise; its
        # covariance reflects W^H, not white noise
        op = generate_combiner(TOY.array, 2, np.random.default_rng(0))
        h = np.zeros(TOY.array.num_elements, dtype=complex)
        rng = np.random.default_rng(11)
        ys = np.stack([observe(h, op, 0.0, rng).y for _ in range(20000)])
        # combined complex variance per output = sigma^2 * ||w_row||^2 = 1
        var = ys.var(axis=0)
        assert var == pytest.approx(np.full(ys.shape[1], 0.5), rel=0.06)
