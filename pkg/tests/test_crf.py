"""Gated mean-field fusion: energies, gates, reference and unrolled paths."""

import dataclasses

import numpy as np
import pytest

from agcrf.crf import (FLAG, PLAG, PLAIN_CRF, AgCrfParams, GateAssignment,
                       compare_variants, expected_pairwise_potential,
                       gate_expectation, mean_field_update, pairwise_energy,
                       reference_message, run_reference_inference,
                       run_unrolled_inference, total_energy, unary_energy)
from agcrf.oracle import (direct_pairwise_potential, finite_diff_grad,
                          fixed_point_residual, max_rel_err)
from agcrf.tensor import ConvKernel, ShapeError, Tape, Tensor


def _scales(rng, s=2, c=2, h=5, w=5, spread=1.0):
    return [Tensor(spread * rng.standard_normal((c, h, w))) for _ in range(s)]


class TestUnaryEnergy:
    def test_equal_maps_score_zero(self):
        f = Tensor(np.random.default_rng(0).standard_normal((2, 3, 3)))
        assert unary_energy(f, f, 0.1) == 0.0

    def test_single_pixel_pinned_value(self):
        # weight 2, deviation vector (1, 0): -(2/2) * 1 = -1
        h = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1))
        f = Tensor(np.zeros((2, 1, 1)))
        assert unary_energy(h, f, 2.0) == -1.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        h, f = Tensor(rng.standard_normal((3, 4, 4))), Tensor(rng.standard_normal((3, 4, 4)))
        w = 0.7
        direct = 0.0
        for c in range(3):
            for y in range(4):
                for x in range(4):
                    direct -= 0.5 * w * (h.data[c, y, x] - f.data[c, y, x]) ** 2
        assert abs(unary_energy(h, f, w) - direct) < 1e-9

    def test_nonpositive_weight_rejected(self):
        f = Tensor(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            unary_energy(f, f, 0.0)
        with pytest.raises(ValueError):
            unary_energy(f, f, -1.0)


class TestPairwiseEnergy:
    def test_zero_vectors_leave_the_constant(self):
        kmat = np.random.default_rng(2).standard_normal((3, 3))
        kmat[-1, -1] = 1.0
        assert pairwise_energy(np.zeros(2), np.zeros(2), kmat) == 1.0

    def test_identity_coupling_unit_vectors(self):
        kmat = np.eye(3)
        kmat[-1, -1] = 1.0
        e1 = np.array([1.0, 0.0])
        assert pairwise_energy(e1, e1, kmat) == 2.0

    def test_matches_block_decomposition(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            c = int(rng.integers(1, 5))
            kmat = rng.standard_normal((c + 1, c + 1))
            kmat[-1, -1] = 1.0
            h_r, h_e = rng.standard_normal(c), rng.standard_normal(c)
            blocks = (h_r @ kmat[:c, :c] @ h_e + h_r @ kmat[:c, -1]
                      + kmat[-1, :c] @ h_e + 1.0)
            assert abs(pairwise_energy(h_r, h_e, kmat) - blocks) < 1e-12

    def test_constant_block_must_be_one(self):
        kmat = np.eye(3) * 2.0
        with pytest.raises(ValueError):
            pairwise_energy(np.zeros(2), np.zeros(2), kmat)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            pairwise_energy(np.zeros(2), np.zeros(3), np.eye(3))


class TestTotalEnergy:
    def test_closed_gates_leave_pure_unary(self):
        rng = np.random.default_rng(4)
        params = AgCrfParams.random([1, 1], rng, scale=0.5)
        feats = _scales(rng, 2, 1, 3, 3)
        hidden = _scales(rng, 2, 1, 3, 3)
        closed = GateAssignment.constant(params, 3, 3, 0.0)
        expected = sum(unary_energy(h, f, 0.1) for h, f in zip(hidden, feats))
        assert abs(total_energy(hidden, closed, feats, params) - expected) < 1e-12

    def test_hidden_at_features_closed_gates_zero(self):
        rng = np.random.default_rng(5)
        params = AgCrfParams.random([2, 2], rng)
        feats = _scales(rng, 2, 2, 3, 3)
        closed = GateAssignment.constant(params, 3, 3, 0.0)
        assert total_energy(feats, closed, feats, params) == 0.0

    def test_hand_expansion_1x1_kernels(self):
        """S=2, 1-channel, 2x2 image, 1x1 kernels: four scalar terms per pair."""
        rng = np.random.default_rng(6)
        params = AgCrfParams.random([1, 1], rng, scale=0.8, kernel_size=1)
        feats = _scales(rng, 2, 1, 2, 2)
        hidden = _scales(rng, 2, 1, 2, 2)
        open_g = GateAssignment.constant(params, 2, 2, 1.0)
        by_hand = 0.0
        for s in range(2):
            d = hidden[s].data - feats[s].data
            by_hand += -0.05 * (d * d).sum()  # a = 0.1 default
        for (e, r) in ((1, 0), (0, 1)):
            L = params.pairwise[(e, r)].values[0, 0, 0, 0]
            u = params.lin_emit[(e, r)].values[0, 0, 0, 0]
            v = params.lin_recv[(e, r)].values[0, 0, 0, 0]
            for y in range(2):
                for x in range(2):
                    hr = hidden[r].data[0, y, x]
                    he = hidden[e].data[0, y, x]
                    by_hand += hr * L * he + hr * u + he * v + 1.0
        got = total_energy(hidden, open_g, feats, params)
        assert abs(got - by_hand) < 1e-12

    def test_emitter_side_expansion_3x3(self):
        """Independent walk from the emitter pixels over a 3x3 footprint."""
        rng = np.random.default_rng(7)
        params = AgCrfParams.random([1, 1], rng, scale=0.6)
        feats = _scales(rng, 2, 1, 2, 2)
        hidden = _scales(rng, 2, 1, 2, 2)
        open_g = GateAssignment.constant(params, 2, 2, 1.0)
        by_hand = sum(unary_energy(h, f, 0.1) for h, f in zip(hidden, feats))
        for (e, r) in ((1, 0), (0, 1)):
            kern = params.pairwise[(e, r)]
            u = params.lin_emit[(e, r)].values.sum(axis=1)
            v = params.lin_recv[(e, r)].values.sum(axis=1)
            for jy in range(2):          # emitter pixel
                for jx in range(2):
                    he = hidden[e].data[0, jy, jx]
                    for ky in range(3):  # receiver pixel i = j - (offset - center)
                        for kx in range(3):
                            iy, ix = jy - (ky - 1), jx - (kx - 1)
                            if not (0 <= iy < 2 and 0 <= ix < 2):
                                continue
                            hr = hidden[r].data[0, iy, ix]
                            by_hand += (hr * kern.values[0, 0, ky, kx] * he
                                        + hr * u[0, ky, kx]
                                        + he * v[0, ky, kx] + 1.0)
        got = total_energy(hidden, open_g, feats, params)
        assert abs(got - by_hand) < 1e-10


class TestExpectedPotential:
    def test_zero_state_zero_map(self):
        rng = np.random.default_rng(8)
        params = AgCrfParams.random([2, 2], rng)
        zeros = [Tensor(np.zeros((2, 4, 4))) for _ in range(2)]
        m = expected_pairwise_potential(zeros, params, 0, 1)
        np.testing.assert_array_equal(m.data, 0.0)

    def test_zero_kernels_zero_map(self):
        params = AgCrfParams.zeros([2, 2])
        state = _scales(np.random.default_rng(9), 2, 2, 4, 4)
        m = expected_pairwise_potential(state, params, 0, 1)
        np.testing.assert_array_equal(m.data, 0.0)

    def test_conv_realization_matches_direct_sum(self):
        rng = np.random.default_rng(10)
        for trial in range(15):
            c = int(rng.integers(1, 4))
            h = int(rng.integers(2, 8))
            params = AgCrfParams.random([c, c], rng, scale=0.5)
            state = _scales(rng, 2, c, h, h)
            for (e, r) in params.pairs():
                fast = expected_pairwise_potential(state, params, e, r)
                slow = direct_pairwise_potential(state, params, e, r)
                err = np.abs(fast.data - slow).max()
                assert err < 1e-6, f"trial {trial} pair {(e, r)}: {err:.2e}"


class TestGateExpectation:
    def test_zero_potential_is_half(self):
        m = Tensor(np.zeros((1, 3, 3)))
        np.testing.assert_array_equal(gate_expectation(m).data, 0.5)

    def test_negative_sign_limits(self):
        m = Tensor(np.array([[[1e3, -1e3]]]))
        a = gate_expectation(m, sign=-1.0).data
        assert a[0, 0, 0] < 1e-12 and a[0, 0, 1] > 1 - 1e-12
        assert 0 < a[0, 0, 0] and a[0, 0, 1] < 1  # open interval even saturated

    def test_sign_symmetry(self):
        m = Tensor(np.random.default_rng(11).standard_normal((1, 4, 4)) * 3)
        total = gate_expectation(m, 1.0).data + gate_expectation(m, -1.0).data
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_bad_sign_rejected(self):
        with pytest.raises(ValueError):
            gate_expectation(Tensor(np.zeros((1, 1, 1))), sign=0.5)


class TestMeanFieldUpdate:
    def test_no_incoming_returns_features(self):
        f = Tensor(np.random.default_rng(12).standard_normal((2, 3, 3)))
        np.testing.assert_array_equal(mean_field_update(f, 0.1, []).data, f.data)

    def test_closed_gate_returns_features(self):
        rng = np.random.default_rng(13)
        f = Tensor(rng.standard_normal((2, 3, 3)))
        msg = Tensor(rng.standard_normal((2, 3, 3)))
        closed = Tensor(np.zeros((1, 3, 3)))
        out = mean_field_update(f, 0.1, [(closed, msg)])
        np.testing.assert_array_equal(out.data, f.data)

    def test_open_gate_divides_by_weight(self):
        # a = 0.1 turns one open-gated message into f + 10 * m
        rng = np.random.default_rng(14)
        f = Tensor(rng.standard_normal((1, 2, 2)))
        msg = Tensor(rng.standard_normal((1, 2, 2)))
        open_g = Tensor(np.ones((1, 2, 2)))
        out = mean_field_update(f, 0.1, [(open_g, msg)])
        np.testing.assert_allclose(out.data, f.data + 10.0 * msg.data, atol=1e-12)

    def test_zero_weight_rejected(self):
        f = Tensor(np.zeros((1, 2, 2)))
        with pytest.raises(ValueError):
            mean_field_update(f, 0.0, [])


class TestReferenceInference:
    def test_zero_kernels_fixed_point_and_half_gates(self):
        rng = np.random.default_rng(15)
        params = AgCrfParams.zeros([2, 2], iterations=3)
        feats = _scales(rng, 2, 2, 4, 4)
        state = run_reference_inference(feats, params)
        for h, f in zip(state.hidden, feats):
            np.testing.assert_array_equal(h.data, f.data)
        for alpha in state.gates.values():
            np.testing.assert_array_equal(alpha.data, 0.5)

    def test_two_scale_symmetry_simultaneous(self):
        """Matched pair parameters and identical features keep the two
        hidden means equal after every order-free sweep."""
        rng = np.random.default_rng(16)
        params = AgCrfParams.random([2, 2], rng, scale=0.05)
        for kern_table in (params.pairwise, params.lin_emit, params.lin_recv):
            kern_table[(1, 0)].values[...] = kern_table[(0, 1)].values
        f = Tensor(rng.standard_normal((2, 5, 5)))
        feats = [f, Tensor(f.data.copy())]
        for sweeps in (1, 2, 4):
            state = run_reference_inference(feats, params, sweeps=sweeps,
                                            schedule="simultaneous")
            np.testing.assert_allclose(state.hidden[0].data, state.hidden[1].data,
                                       atol=1e-12)

    def test_converged_fixed_point_residual(self):
        rng = np.random.default_rng(17)
        params = AgCrfParams.random([2, 2], rng, scale=0.5).contraction_scaled(0.4)
        feats = _scales(rng, 2, 2, 5, 5)
        state = run_reference_inference(feats, params, sweeps=60)
        assert fixed_point_residual(feats, params, state) < 1e-8

    def test_gate_feature_consistency_at_fixed_point(self):
        rng = np.random.default_rng(18)
        params = AgCrfParams.random([2, 2], rng, scale=0.5).contraction_scaled(0.4)
        feats = _scales(rng, 2, 2, 4, 4)
        state = run_reference_inference(feats, params, sweeps=60)
        for (e, r) in params.pairs():
            m = expected_pairwise_potential(state.hidden, params, e, r)
            fresh = gate_expectation(m, params.gate_sign)
            np.testing.assert_allclose(state.gates[(e, r)].data, fresh.data,
                                       atol=1e-8)

    def test_forced_closed_gates_reproduce_features_exactly(self):
        rng = np.random.default_rng(19)
        params = AgCrfParams.random([2, 2], rng, scale=1.0)
        feats = _scales(rng, 2, 2, 4, 4)
        state = run_reference_inference(feats, params, sweeps=3, force_gate=0.0)
        for h, f in zip(state.hidden, feats):
            assert (h.data == f.data).all()

    def test_non_flag_variant_rejected(self):
        params = AgCrfParams.zeros([1, 1], variant=PLAG)
        feats = [Tensor(np.zeros((1, 2, 2)))] * 2
        with pytest.raises(ValueError):
            run_reference_inference(feats, params)

    def test_misaligned_scales_rejected(self):
        params = AgCrfParams.zeros([1, 1])
        feats = [Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 3)))]
        with pytest.raises(ShapeError):
            run_reference_inference(feats, params)


class TestUnrolledInference:
    def test_plain_crf_zero_kernels_passthrough(self):
        rng = np.random.default_rng(20)
        params = AgCrfParams.zeros([2, 3], variant=PLAIN_CRF)
        feats = [Tensor(rng.standard_normal((2, 4, 4))),
                 Tensor(rng.standard_normal((3, 4, 4)))]
        state = run_unrolled_inference(feats, params)
        for h, f in zip(state.hidden, feats):
            np.testing.assert_array_equal(h.data, f.data)

    def test_flag_gate_preactivation_without_linear_kernels(self):
        """With zero linear kernels the first-step gate is exactly
        sigmoid(features * bilinear message)."""
        rng = np.random.default_rng(21)
        params = AgCrfParams.random([2, 2], rng, scale=0.5)
        for kern_table in (params.lin_emit, params.lin_recv):
            for kern in kern_table.values():
                kern.values[...] = 0.0
        feats = _scales(rng, 2, 2, 4, 4)
        state = run_unrolled_inference(feats, params)
        for (e, r) in params.pairs():
            msg = np.zeros_like(feats[r].data)
            kern = params.pairwise[(e, r)]
            from agcrf.tensor import conv2d
            msg = conv2d(feats[e], kern).data
            pre = (feats[r].data * msg)
            expect = 1.0 / (1.0 + np.exp(-pre))
            np.testing.assert_allclose(state.gates[(e, r)].data, expect, atol=1e-12)

    def test_forced_closed_gates_reproduce_features_exactly(self):
        rng = np.random.default_rng(22)
        params = AgCrfParams.random([2, 2, 2], rng, scale=1.0)
        feats = _scales(rng, 3, 2, 4, 4)
        state = run_unrolled_inference(feats, params, force_gate=0.0)
        for h, f in zip(state.hidden, feats):
            assert (h.data == f.data).all()

    def test_plain_crf_equals_flag_with_gates_forced_open(self):
        rng = np.random.default_rng(23)
        plain = AgCrfParams.random([2, 2], rng, scale=0.4, variant=PLAIN_CRF,
                                   iterations=2)
        flag = dataclasses.replace(plain.copy(), variant=FLAG)
        feats = _scales(rng, 2, 2, 5, 5)
        a = run_unrolled_inference(feats, plain)
        b = run_unrolled_inference(feats, flag, force_gate=1.0)
        for ha, hb in zip(a.hidden, b.hidden):
            np.testing.assert_array_equal(ha.data, hb.data)

    def test_plain_crf_trace_differs_only_in_gate_section(self):
        """Shared message and update op sequences, byte for byte."""
        rng = np.random.default_rng(24)
        plain = AgCrfParams.random([2, 2], rng, scale=0.4, variant=PLAIN_CRF)
        flag = dataclasses.replace(plain.copy(), variant=FLAG)
        feats = _scales(rng, 2, 2, 4, 4)
        traces = {}
        for name, p in (("plain", plain), ("flag", flag)):
            tape = Tape()
            run_unrolled_inference(feats, p, tape)
            traces[name] = tape.trace()
        for section in ("message", "update"):
            a = [t for t in traces["plain"] if t.startswith(section + "|")]
            b = [t for t in traces["flag"] if t.startswith(section + "|")]
            assert a == b, f"{section} sections diverge"
        gates_plain = [t for t in traces["plain"] if t.startswith("gate|")]
        gates_flag = [t for t in traces["flag"] if t.startswith("gate|")]
        assert gates_plain == [] and gates_flag != []

    def test_unary_scaling_multiplies_messages(self):
        # unrolled update is f + a * sum(gated msg): doubling a doubles the shift
        rng = np.random.default_rng(25)
        params = AgCrfParams.random([1, 1], rng, scale=0.5, variant=PLAIN_CRF)
        feats = _scales(rng, 2, 1, 3, 3)
        base = run_unrolled_inference(feats, params)
        doubled = dataclasses.replace(params.copy(), unary=(0.2, 0.2))
        big = run_unrolled_inference(feats, doubled)
        for s in range(2):
            shift_base = base.hidden[s].data - feats[s].data
            shift_big = big.hidden[s].data - feats[s].data
            np.testing.assert_allclose(shift_big, 2.0 * shift_base, atol=1e-12)

    def test_gradients_match_finite_differences(self):
        """Scalar head over the refined scales, checked for every kernel and
        a learnable 1x1 unary, 5 seeded instances."""
        for seed in range(5):
            rng = np.random.default_rng(300 + seed)
            params = AgCrfParams.random([2, 2], rng, scale=0.3,
                                        variant=(FLAG, PLAG)[seed % 2])
            if seed == 4:  # one instance exercises the learned unary
                unary = []
                for c in (2, 2):
                    vals = 0.1 * np.eye(c).reshape(c, c, 1, 1)
                    unary.append(ConvKernel(vals, stride=1, padding=0))
                params = dataclasses.replace(params, unary=tuple(unary))
            feats = _scales(rng, 2, 2, 4, 4)
            weights = [rng.standard_normal((2, 4, 4)) for _ in range(2)]

            kernels = [params.pairwise[p] for p in params.pairs()]
            kernels += [params.lin_emit[p] for p in params.pairs()]
            kernels += [params.lin_recv[p] for p in params.pairs()]
            if seed == 4:
                kernels += list(params.unary)

            tape = Tape()
            state = run_unrolled_inference(feats, params, tape)
            seeds = {h: w for h, w in zip(state.hidden, weights)}
            grads = tape.backward(seeds)

            def value():
                st = run_unrolled_inference(feats, params)
                return float(sum((h.data * w).sum()
                                 for h, w in zip(st.hidden, weights)))

            fd = finite_diff_grad(value, [k.values for k in kernels])
            for kern, fd_grad in zip(kernels, fd):
                rel = max_rel_err(grads[kern], fd_grad)
                assert rel < 1e-3, f"seed {seed}: rel err {rel:.2e}"


class TestVariantSemantics:
    def test_first_step_agreement_at_feature_init(self):
        rng = np.random.default_rng(26)
        params = AgCrfParams.random([2, 2], rng, scale=0.5)
        plag = dataclasses.replace(params.copy(), variant=PLAG)
        feats = _scales(rng, 2, 2, 4, 4)
        report = compare_variants(feats, params, plag, rng=np.random.default_rng(0))
        assert report.first_gate_gap < 1e-12

    def test_zero_kernels_both_variants_passthrough(self):
        params = AgCrfParams.zeros([2, 2])
        plag = dataclasses.replace(params.copy(), variant=PLAG)
        feats = _scales(np.random.default_rng(27), 2, 2, 4, 4)
        for p in (params, plag):
            state = run_unrolled_inference(feats, p)
            for h, f in zip(state.hidden, feats):
                np.testing.assert_array_equal(h.data, f.data)

    def test_observed_gate_invariant_latent_gate_not(self):
        """Perturbing the hidden-state init moves the latent variant's
        first-step gates and leaves the observed variant's untouched."""
        rng = np.random.default_rng(28)
        for seed in range(5):
            r = np.random.default_rng(400 + seed)
            flag = AgCrfParams.random([2, 2], r, scale=0.5)
            plag = dataclasses.replace(flag.copy(), variant=PLAG)
            feats = _scales(r, 2, 2, 4, 4)
            report = compare_variants(feats, flag, plag,
                                      rng=np.random.default_rng(seed))
            assert report.plag_gate_shift == 0.0
            assert report.flag_gate_shift > 1e-8

    def test_gates_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(29)
        params = AgCrfParams.random([2, 2], rng, scale=3.0)
        feats = _scales(rng, 2, 2, 4, 4, spread=50.0)
        state = run_unrolled_inference(feats, params)
        for alpha in state.gates.values():
            assert (alpha.data > 0.0).all() and (alpha.data < 1.0).all()
