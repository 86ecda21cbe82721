import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlppnn.kernelnet import (
    DegeneratePattern,
    Exponential,
    KernelMlp,
    MlpKernel,
    NearestOnly,
    combine_field,
    kernel_half_width,
    mlp_backprop,
    mlp_forward,
    model_from_text,
    model_to_text,
    pnn_combine,
    pnn_output_grad,
    seq_nn,
)
from mlppnn.projection import NeighborArray, NeighborField


def random_net(seed, hidden=25, span=1.0):
    rng = np.random.default_rng(seed)
    return KernelMlp.from_flat(rng.uniform(-span, span, 3 * hidden + 1))


def neighbors(values, distances, flags=None):
    values = np.asarray(values, dtype=float)
    distances = np.asarray(distances, dtype=float)
    if flags is None:
        flags = np.zeros(values.shape, dtype=bool)
    return NeighborArray(values=values, distances=distances, flags=np.asarray(flags, bool))


class TableKernel:
    """Test stub: maps each known distance to a fixed weight."""

    def __init__(self, table):
        self.table = dict(table)

    def weights(self, d):
        d = np.asarray(d, dtype=float)
        return np.vectorize(lambda v: self.table[round(float(v), 9)])(d).astype(float)


class TestMlpForward:
    def test_zero_network_outputs_zero(self):
        net = KernelMlp.from_flat(np.zeros(76))
        assert mlp_forward(net, 0.0) == 0.0
        assert mlp_forward(net, 3.7) == 0.0

    def test_bias_passthrough(self):
        flat = np.zeros(76)
        flat[-1] = 0.7
        net = KernelMlp.from_flat(flat)
        for d in (0.0, 1.0, 8.5):
            assert mlp_forward(net, d) == 0.7

    def test_matches_independent_evaluation(self):
        net = random_net(0)
        d = 1.0
        want = net.out_b + sum(
            net.out_w[j] * math.tanh(net.hidden_w[j] * d + net.hidden_b[j]) for j in range(25)
        )
        assert mlp_forward(net, d) == pytest.approx(want, rel=1e-12)

    def test_vectorized_matches_scalar(self):
        net = random_net(1)
        ds = np.linspace(0, 9, 13)
        vec = mlp_forward(net, ds)
        for i, d in enumerate(ds):
            assert vec[i] == pytest.approx(mlp_forward(net, float(d)), rel=1e-15)

    def test_flat_layout_order(self):
        # [w0, b0, ..., w24, b24, out_w..., out_b]
        flat = np.arange(76, dtype=float)
        net = KernelMlp.from_flat(flat)
        assert net.hidden_w[0] == 0.0 and net.hidden_b[0] == 1.0
        assert net.hidden_w[24] == 48.0 and net.hidden_b[24] == 49.0
        assert net.out_w[0] == 50.0 and net.out_b == 75.0
        assert np.array_equal(net.to_flat(), flat)


class TestPnnCombine:
    def test_equal_weights_give_mean(self):
        na = neighbors([10, 20, 30], [0.5, 1.0, 2.0])
        assert pnn_combine(na, TableKernel({0.5: 1.0, 1.0: 1.0, 2.0: 1.0})) == pytest.approx(20.0)

    def test_single_sample_normalizes_away_weight(self):
        na = neighbors([42.0], [1.3])
        assert pnn_combine(na, TableKernel({1.3: 0.25})) == pytest.approx(42.0)

    def test_hand_weighted_case(self):
        # (2*100 + 1*40) / 3 = 80
        na = neighbors([100, 40], [1.0, 2.0])
        assert pnn_combine(na, TableKernel({1.0: 2.0, 2.0: 1.0})) == pytest.approx(80.0)

    def test_flagged_samples_dropped(self):
        na = neighbors([10.0, 9999.0], [1.0, 0.5], flags=[False, True])
        assert pnn_combine(na, Exponential(1.0)) == pytest.approx(10.0)

    def test_all_flagged_samples_still_used(self):
        na = neighbors([10.0, 30.0], [1.0, 1.0], flags=[True, True])
        out = pnn_combine(na, TableKernel({1.0: 1.0}))
        assert out == pytest.approx(20.0)

    def test_degenerate_denominator_falls_back_to_nearest(self):
        na = neighbors([5.0, 77.0, 9.0], [2.0, 0.25, 1.0])
        zero = TableKernel({2.0: 0.0, 0.25: 0.0, 1.0: 0.0})
        assert pnn_combine(na, zero) == 77.0

    def test_degenerate_fallback_skips_flagged(self):
        na = neighbors([5.0, 77.0], [2.0, 0.25], flags=[False, True])
        zero = TableKernel({2.0: 0.0, 0.25: 0.0})
        assert pnn_combine(na, zero) == 5.0

    def test_cancelling_weights_hit_guard(self):
        na = neighbors([50.0, 60.0], [1.0, 2.0])
        cancel = TableKernel({1.0: 1.0, 2.0: -1.0})
        assert pnn_combine(na, cancel) == 50.0   # nearest sample value

    @given(
        st.lists(
            st.tuples(st.floats(0, 255), st.floats(0, 8.99)), min_size=1, max_size=10
        )
    )
    @settings(max_examples=150, deadline=None)
    def test_positive_kernel_is_convex_combination(self, pairs):
        vals = [p[0] for p in pairs]
        dists = [p[1] for p in pairs]
        na = neighbors(vals, dists)
        out = pnn_combine(na, Exponential(1.5))
        assert min(vals) - 1e-9 <= out <= max(vals) + 1e-9

    @given(st.permutations(list(range(6))))
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariance_is_bitwise(self, perm):
        rng = np.random.default_rng(17)
        vals = rng.uniform(0, 255, 6)
        dists = rng.uniform(0.01, 6, 6)   # distinct with probability one
        base = pnn_combine(neighbors(vals, dists), Exponential(1.0))
        p = np.asarray(perm)
        out = pnn_combine(neighbors(vals[p], dists[p]), Exponential(1.0))
        assert out == base   # exact float equality, not approx

    @given(st.floats(-3, 3), st.floats(-100, 100))
    @settings(max_examples=80, deadline=None)
    def test_affine_equivariance(self, a, c):
        rng = np.random.default_rng(23)
        vals = rng.uniform(0, 255, 5)
        dists = rng.uniform(0.1, 5, 5)
        na = neighbors(vals, dists)
        base = pnn_combine(na, Exponential(2.0))
        mapped = pnn_combine(neighbors(a * vals + c, dists), Exponential(2.0))
        assert mapped == pytest.approx(a * base + c, rel=1e-9, abs=1e-7)

    @given(st.floats(-50, 50).filter(lambda c: abs(c) > 1e-3))
    @settings(max_examples=60, deadline=None)
    def test_weight_scaling_invariance(self, c):
        class Scaled:
            def __init__(self, base, k):
                self.base, self.k = base, k

            def weights(self, d):
                return self.k * self.base.weights(d)

        rng = np.random.default_rng(29)
        na = neighbors(rng.uniform(0, 255, 7), rng.uniform(0.1, 6, 7))
        a = pnn_combine(na, Exponential(1.2))
        b = pnn_combine(na, Scaled(Exponential(1.2), c))
        assert b == pytest.approx(a, rel=1e-12)


class TestSeqNn:
    def test_unique_minimum(self):
        assert seq_nn(neighbors([5, 9, 7], [0.8, 0.1, 0.5])) == 9.0

    def test_tie_breaks_to_lowest_index(self):
        assert seq_nn(neighbors([3, 4], [0.2, 0.2])) == 3.0

    def test_single_sample(self):
        assert seq_nn(neighbors([8.0], [2.0])) == 8.0

    def test_flagged_nearest_skipped(self):
        assert seq_nn(neighbors([3, 4], [0.1, 0.5], flags=[True, False])) == 4.0

    @given(
        st.lists(st.floats(0, 255), min_size=1, max_size=8),
        st.randoms(use_true_random=False),
    )
    @settings(max_examples=100, deadline=None)
    def test_equals_nearest_only_combine(self, vals, rnd):
        dists = [rnd.uniform(0, 9) for _ in vals]
        flags = [rnd.random() < 0.3 for _ in vals]
        na = neighbors(vals, dists, flags)
        assert seq_nn(na) == pnn_combine(na, NearestOnly())


class TestOutputGrad:
    def test_zero_residual_gives_zero_grad(self):
        na = neighbors([10, 20], [1, 2])
        y = np.array([1.0, 1.0])
        g = pnn_output_grad(na, y, output=15.0, target=15.0)
        assert not g.any()

    def test_single_sample_grad_is_zero(self):
        na = neighbors([42.0], [1.0])
        g = pnn_output_grad(na, np.array([0.37]), output=42.0, target=7.0)
        assert g[0] == 0.0

    def test_degenerate_denominator_raises(self):
        na = neighbors([1.0, 2.0], [1, 2])
        with pytest.raises(DegeneratePattern):
            pnn_output_grad(na, np.array([0.5e-9, -0.45e-9]), output=1.0, target=0.0)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            g = rng.uniform(0, 255, n)
            y = rng.uniform(0.2, 2.0, n) * rng.choice([-1.0, 1.0], n)
            if abs(y.sum()) < 0.3:
                y[0] += 1.0
            t = float(rng.uniform(0, 255))
            na = neighbors(g, rng.uniform(0.1, 8, n))

            def err(yv):
                return 0.5 * ((g * yv).sum() / yv.sum() - t) ** 2

            o = (g * y).sum() / y.sum()
            grad = pnn_output_grad(na, y, output=o, target=t)
            for s in range(n):
                h = 1e-6 * max(1.0, abs(y[s]))
                yp, ym = y.copy(), y.copy()
                yp[s] += h
                ym[s] -= h
                fd = (err(yp) - err(ym)) / (2 * h)
                assert grad[s] == pytest.approx(fd, rel=1e-6, abs=1e-8)


class TestBackprop:
    def test_zero_residual_zero_gradient(self):
        # constant samples and matching target: o == t for any net with nonzero sum
        na = neighbors([100.0, 100.0], [0.5, 1.5])
        flat = np.zeros(76)
        flat[-1] = 1.0
        pat = type("P", (), {"samples": na, "target": 100.0})
        loss, grad, skipped = mlp_backprop(KernelMlp.from_flat(flat), pat)
        assert loss == 0.0 and not grad.any() and not skipped

    def test_sum_over_patterns_is_linear(self):
        net = random_net(5)
        rng = np.random.default_rng(6)
        na = neighbors(rng.uniform(0, 255, 5), rng.uniform(0, 5, 5))
        pat = type("P", (), {"samples": na, "target": 120.0})
        loss, grad, _ = mlp_backprop(net, pat)
        total = grad + grad
        assert np.allclose(total, 2 * grad) and total is not grad

    def test_degenerate_pattern_skipped_with_fallback_loss(self):
        flat = np.zeros(76)   # all weights zero: sum of y is 0
        net = KernelMlp.from_flat(flat)
        na = neighbors([50.0, 90.0], [1.0, 0.25])
        pat = type("P", (), {"samples": na, "target": 90.0})
        loss, grad, skipped = mlp_backprop(net, pat)
        assert skipped and not grad.any()
        assert loss == 0.0   # fallback output is the nearest sample = target

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            net = random_net(100 + trial)
            n = int(rng.integers(2, 9))
            na = neighbors(rng.uniform(0, 255, n), rng.uniform(0, 6, n))
            pat = type("P", (), {"samples": na, "target": float(rng.uniform(0, 255))})
            loss, grad, skipped = mlp_backprop(net, pat)
            assert not skipped
            x0 = net.to_flat()
            h = 1e-5
            for i in range(0, 76, 7):   # spot-check a spread of parameters
                xp, xm = x0.copy(), x0.copy()
                xp[i] += h
                xm[i] -= h
                lp = mlp_backprop(KernelMlp.from_flat(xp), pat)[0]
                lm = mlp_backprop(KernelMlp.from_flat(xm), pat)[0]
                fd = (lp - lm) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestHalfWidth:
    def test_exponential_closed_form(self):
        for w in (0.5, 1.0, 2.0, 3.7):
            assert kernel_half_width(Exponential(w)) == pytest.approx(
                w * math.log(2), abs=1e-5
            )

    def test_constant_kernel_never_crosses(self):
        flat = np.zeros(76)
        flat[-1] = 0.7
        assert kernel_half_width(MlpKernel(KernelMlp.from_flat(flat))) == 9.0

    def test_custom_d_max(self):
        assert kernel_half_width(Exponential(100.0), d_max=2.0) == 2.0

    def test_zero_at_origin_rejected(self):
        flat = np.zeros(76)
        with pytest.raises(ValueError):
            kernel_half_width(MlpKernel(KernelMlp.from_flat(flat)))

    def test_nearest_only_rejected(self):
        with pytest.raises(ValueError):
            kernel_half_width(NearestOnly())

    def test_negative_kernel_uses_ratio(self):
        # sign of the kernel must not matter, only the relative drop
        flat = np.zeros(76)
        flat[-1] = -2.0
        flat[0] = 1.0    # w0
        flat[50] = 1.0   # out_w0: k(d) = tanh(d) - 2, k(0) = -2, half at tanh(d) = -1+... never
        k = MlpKernel(KernelMlp.from_flat(flat))
        w_neg = kernel_half_width(k)
        assert w_neg > 0


class TestModelFile:
    def test_round_trip_is_exact(self):
        net = random_net(11)
        text = model_to_text(net, noise_sigma=10.0, scale=3, frames=25)
        again, meta = model_from_text(text)
        assert np.array_equal(again.to_flat(), net.to_flat())
        assert meta.noise_sigma == 10.0 and meta.scale == 3 and meta.frames == 25
        assert meta.distance_units == "hr"

    def test_header_format(self):
        net = KernelMlp.from_flat(np.zeros(76))
        lines = model_to_text(net, 0.0, 3, 25).splitlines()
        assert lines[0] == "MLPPNN 1"
        assert lines[1] == "hidden=25 distance_units=hr noise_sigma=0.0 scale=3 frames=25"
        assert len(lines) == 2 + 76

    @pytest.mark.parametrize(
        "text",
        [
            "WRONG 1\nhidden=25 distance_units=hr noise_sigma=0.0 scale=3 frames=25\n",
            "MLPPNN 1\nhidden=25 distance_units=lr noise_sigma=0.0 scale=3 frames=25\n",
            "MLPPNN 1\nhidden=25 distance_units=hr scale=3 frames=25\n" + "0.0\n" * 76,
            "MLPPNN 1\nhidden=25 distance_units=hr noise_sigma=0.0 scale=3 frames=25\n0.0\n",
        ],
    )
    def test_malformed_models_rejected(self, text):
        with pytest.raises(ValueError):
            model_from_text(text)


class TestCombineField:
    def _field(self, seed, h=6, w=5, n=4):
        rng = np.random.default_rng(seed)
        return NeighborField(
            values=rng.uniform(0, 255, (h, w, n)),
            distances=rng.uniform(0, 6, (h, w, n)),
            flags=rng.random((h, w, n)) < 0.2,
        )

    def test_matches_per_node_combine(self):
        field = self._field(1)
        net = random_net(2)
        kernel = MlpKernel(net)
        img = combine_field(field, kernel)
        for v in range(field.values.shape[0]):
            for u in range(field.values.shape[1]):
                assert img[v, u] == pnn_combine(field.at(u, v), kernel)

    def test_nearest_only_matches_seq_nn(self):
        field = self._field(3)
        img = combine_field(field, NearestOnly())
        for v in range(field.values.shape[0]):
            for u in range(field.values.shape[1]):
                assert img[v, u] == seq_nn(field.at(u, v))

    def test_threads_and_blocking_are_bitwise_irrelevant(self):
        field = self._field(4, h=40, w=9, n=6)
        kernel = Exponential(1.0)
        a = combine_field(field, kernel, threads=1)
        b = combine_field(field, kernel, threads=3)
        c = combine_field(field, kernel, threads=1, block_rows=7)
        assert np.array_equal(a, b) and np.array_equal(a, c)
