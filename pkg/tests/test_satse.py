import numpy as np
import pytest

from scdnn.autodiff import Graph, ShapeError, Tensor, grad_check
from scdnn.layers import cross_entropy, linear
from scdnn.satse import (
    GAMMA_MIN,
    PHI_MAX,
    SatseBlock,
    effective_bins,
    hard_mask,
    satse_forward,
    satse_param_report,
    soft_mask,
)


def brute_force_pipeline(x, phi, gamma, weight, lam_low, lam_high, mode):
    """Independent per-sample pipeline oracle built on explicit loops."""
    b, c, length = x.shape
    out = np.zeros_like(x)
    j = np.arange(length, dtype=float)
    eff = np.minimum(j, length - j) if mode == "symmetric" else j
    high = 1.0 / (1.0 + np.exp(np.clip(gamma * (-eff + phi * length), -700, 700)))
    low = 1.0 - high
    for n in range(b):
        for k in range(c):
            spec = np.array(
                [
                    sum(
                        x[n, k, t] * np.exp(-2j * np.pi * t * jj / length)
                        for t in range(length)
                    )
                    for jj in range(length)
                ]
            )
            def inv(s):
                return np.array(
                    [
                        sum(
                            s[jj] * np.exp(2j * np.pi * t * jj / length)
                            for jj in range(length)
                        )
                        / length
                        for t in range(length)
                    ]
                )
            f_low = inv(weight[k] * (low * spec)).real
            f_high = inv(weight[k] * (high * spec)).real
            out[n, k] = x[n, k] + lam_low * f_low + lam_high * f_high
    return out


class TestMasks:
    def test_complement_to_machine_precision(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-50, 150, size=5000)
        phi = rng.uniform(0.01, 0.99)
        gamma = rng.uniform(0.01, 50)
        low = soft_mask(x, phi, gamma, 100, "low", "literal")
        high = soft_mask(x, phi, gamma, 100, "high", "literal")
        assert np.abs(low + high - 1.0).max() <= 1e-15

    def test_half_at_cutoff(self):
        for length in (10, 37, 512):
            for phi in (0.1, 0.4, 0.77):
                v = soft_mask(phi * length, phi, 3.3, length, "high", "literal")
                assert v == pytest.approx(0.5, abs=1e-12)

    def test_steep_slope_passes_low_bins(self):
        phi, length = 0.6, 100
        v = soft_mask(phi * length - 10, phi, 1000.0, length, "low", "literal")
        assert v > 1.0 - 1e-9

    def test_hard_mask_examples(self):
        assert hard_mask(2, 0.5, 10, "low", "literal") == 1.0
        assert hard_mask(2, 0.5, 10, "high", "literal") == 0.0
        assert hard_mask(9, 0.5, 10, "low", "literal") == 0.0
        assert hard_mask(9, 0.5, 10, "high", "literal") == 1.0

    def test_hard_equals_rounded_steep_soft_away_from_cutoff(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            length = int(rng.integers(4, 200))
            phi = rng.uniform(0.05, 0.95)
            j = np.arange(length)
            keep = np.abs(j - phi * length) >= 1.0
            for side in ("low", "high"):
                soft = soft_mask(j, phi, 1e4, length, side, "literal")
                hard = hard_mask(j, phi, length, side, "literal")
                assert np.array_equal(np.round(soft[keep]), hard[keep])

    def test_symmetric_bins_mirror(self):
        eff = effective_bins(10, "symmetric")
        np.testing.assert_array_equal(eff, [0, 1, 2, 3, 4, 5, 4, 3, 2, 1])
        np.testing.assert_array_equal(effective_bins(5, "literal"),
                                      [0, 1, 2, 3, 4])

    def test_bad_side_and_mode_rejected(self):
        with pytest.raises(ValueError):
            soft_mask(1, 0.5, 1.0, 8, "middle")
        with pytest.raises(ValueError):
            effective_bins(8, "folded")


class TestSatseForward:
    def test_zero_gains_is_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4, 20))
        for mode in ("symmetric", "literal"):
            block = SatseBlock(4, 20, mask_index_mode=mode)
            out = satse_forward(Tensor(x), block)
            assert np.abs(out.data - x).max() < 1e-12

    def test_unit_weight_unit_gains_doubles_input(self):
        rng = np.random.default_rng(3)
        for mode in ("symmetric", "literal"):
            for _ in range(5):
                b, c, length = rng.integers(1, 5), rng.integers(1, 9), rng.integers(2, 65)
                x = rng.normal(size=(b, c, length))
                block = SatseBlock(int(c), int(length), lambda_init=1.0,
                                   phi_init=float(rng.uniform(0.05, 0.95)),
                                   gamma_init=float(rng.uniform(0.1, 20)),
                                   mask_index_mode=mode)
                out = block.forward(Tensor(x))
                assert np.abs(out.data - 2 * x).max() < 1e-8

    def test_matches_brute_force_pipeline(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 12))
        for mode in ("symmetric", "literal"):
            block = SatseBlock(3, 12, phi_init=0.3, gamma_init=2.0,
                               lambda_init=0.0, mask_index_mode=mode)
            block.lambda_low.data[...] = 0.8
            block.lambda_high.data[...] = -0.4
            w = rng.normal(size=(3, 12)) + 1j * rng.normal(size=(3, 12))
            block.weight_re.data[:] = w.real
            block.weight_im.data[:] = w.imag
            expect = brute_force_pipeline(x, 0.3, 2.0, w, 0.8, -0.4, mode)
            out = block.forward(Tensor(x))
            np.testing.assert_allclose(out.data, expect, atol=1e-9)

    def test_cosine_low_pass_selectivity(self):
        # single tone at bin 3 of L=32; a cutoff above the tone passes it
        # through the low branch (output ~ 2f), a cutoff below blocks it
        # (output ~ f)
        length = 32
        t = np.arange(length)
        x = np.cos(2 * np.pi * 3 * t / length)[None, None, :]

        def run(phi):
            block = SatseBlock(1, length, phi_init=phi, gamma_init=1000.0,
                               mask_index_mode="symmetric")
            block.lambda_low.data[...] = 1.0
            block.lambda_high.data[...] = 0.0
            return block.forward(Tensor(x)).data

        np.testing.assert_allclose(run(0.25), 2 * x, atol=1e-6)
        np.testing.assert_allclose(run(0.05), x, atol=1e-6)
        # cross-checked against the loop oracle
        w = np.ones((1, length), dtype=complex)
        np.testing.assert_allclose(
            run(0.25),
            brute_force_pipeline(x, 0.25, 1000.0, w, 1.0, 0.0, "symmetric"),
            atol=1e-9,
        )

    def test_role_swap_is_bit_identical(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 3, 16)))
        block = SatseBlock(3, 16, phi_init=0.3, gamma_init=1.7)
        block.lambda_low.data[...] = 0.45
        block.lambda_high.data[...] = -1.2
        block.weight_im.data += rng.normal(size=(3, 16)) * 0.3
        plain = block.forward(x, swap_roles=False).data
        swapped = block.forward(x, swap_roles=True).data
        assert np.array_equal(plain, swapped)

    def test_symmetric_mode_keeps_branches_real(self):
        from scdnn.spectral import dft, idft
        rng = np.random.default_rng(6)
        for length in (16, 33):
            x = rng.normal(size=length)
            spec = dft(x)
            bins = effective_bins(length, "symmetric")
            mask = soft_mask(bins, 0.3, 2.5, length, "low", "literal")
            rec = idft(spec * mask)
            assert np.abs(rec.imag).max() < 1e-9

    def test_shape_mismatch_rejected(self):
        block = SatseBlock(3, 16)
        with pytest.raises(ShapeError, match="satse"):
            block.forward(Tensor(np.zeros((1, 3, 8))))

    def test_output_shape_preserved(self):
        block = SatseBlock(2, 10)
        out = block.forward(Tensor(np.random.default_rng(7).normal(size=(4, 2, 10))))
        assert out.data.shape == (4, 2, 10)


class TestSatseGradients:
    def test_all_parameters_differentiate(self):
        rng = np.random.default_rng(8)
        block = SatseBlock(4, 16, phi_init=0.35, gamma_init=1.2)
        block.lambda_low.data[...] = 0.6
        block.lambda_high.data[...] = 0.3
        block.weight_re.data += rng.normal(size=(4, 16)) * 0.1
        block.weight_im.data += rng.normal(size=(4, 16)) * 0.1
        x = rng.normal(size=(2, 4, 16))
        head_w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        head_b = Tensor(rng.normal(size=3), requires_grad=True)
        labels = rng.integers(0, 3, size=2)
        # time-mixing weights: plain averaging would read only the zeroth
        # frequency bin and leave most of W with an exactly-zero gradient
        mix = Tensor(rng.normal(size=(1, 1, 16)))

        def build(p, i):
            h = block.forward(i["x"]) * mix
            feats = h.mean(axis=2)
            return cross_entropy(linear(feats, p["head_w"], p["head_b"]), labels)

        params = dict(block.parameters())
        params.update({"head_w": head_w, "head_b": head_b})
        rep = grad_check(Graph(build, params), {"x": x})
        assert rep.passed, rep

    def test_literal_mode_differentiates_too(self):
        rng = np.random.default_rng(9)
        block = SatseBlock(2, 9, phi_init=0.4, gamma_init=0.9,
                           mask_index_mode="literal")
        block.lambda_low.data[...] = 0.5
        block.lambda_high.data[...] = 0.25
        x = rng.normal(size=(2, 2, 9))
        w = rng.normal(size=(2, 2, 9))

        def build(p, i):
            return (block.forward(i["x"]) * Tensor(w)).sum()

        rep = grad_check(Graph(build, block.parameters()), {"x": x})
        assert rep.passed, rep


class TestParamReport:
    def test_fresh_block_reports_defaults(self):
        rep = satse_param_report(SatseBlock(4, 16))
        assert rep["phi"] == 0.4
        assert rep["gamma"] == 0.5
        assert rep["lambda_low"] == 0.0
        assert rep["lambda_high"] == 0.0
        assert rep["weight_norms"]["l2"] == pytest.approx(np.sqrt(64))

    def test_clamp_bounds(self):
        block = SatseBlock(2, 8)
        block.phi.data[...] = 1.2
        block.gamma.data[...] = -5.0
        block.clamp()
        rep = block.report()
        assert rep["phi"] == PHI_MAX == 0.999
        assert rep["gamma"] == GAMMA_MIN == 1e-3

    def test_fixed_phi_not_clamped_or_trained(self):
        block = SatseBlock(2, 8, phi_init=0.2, train_phi=False)
        block.clamp()
        assert block.report()["phi"] == 0.2
        assert not block.phi.requires_grad
