import math

import numpy as np
import pytest

from rerank_lab import autograd as ag
from rerank_lab.autograd import (
    KernelBank,
    NonFiniteError,
    Tensor,
    gradient_check,
    parameter,
)
from rerank_lab.checkpoint import load_checkpoint, save_checkpoint
from rerank_lab.optim import AdamState, OptimizerConfig, adam_step


def scalarize(t: Tensor) -> Tensor:
    """Reduce any tensor to a scalar with a fixed weighting for grad checks."""
    flat = ag.reshape(t, (t.data.size,))
    weights = parameter(np.linspace(0.5, 1.5, t.data.size).astype(np.float32).reshape(-1, 1))
    weights.requires_grad = False
    return ag.linear(flat, weights)


class TestTensorBasics:
    def test_rejects_more_than_four_axes(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_backward_requires_scalar(self):
        t = parameter(np.ones(3))
        with pytest.raises(ValueError):
            t.backward()

    def test_float32_default(self):
        assert Tensor([1, 2, 3]).data.dtype == np.float32

    def test_non_finite_result_is_hard_error(self):
        x = parameter(np.array([1.0], dtype=np.float32))
        with pytest.raises(NonFiniteError):
            ag.scale(x, float("inf"))


class TestElementwiseGradients:
    def test_linear_gradcheck(self, rng):
        for _ in range(10):
            x = parameter(rng.normal(size=(4, 5)).astype(np.float32))
            w = parameter(rng.normal(size=(5, 3)).astype(np.float32))
            b = parameter(rng.normal(size=3).astype(np.float32))
            result = gradient_check(lambda: scalarize(ag.linear(x, w, b)), [x, w, b])
            assert result.max_relative_error < 1e-4

    def test_relu_gradcheck_away_from_kink(self, rng):
        for _ in range(10):
            data = rng.normal(size=(6,)).astype(np.float32)
            data[np.abs(data) < 0.01] = 0.5  # keep inputs > h away from 0
            x = parameter(data)
            result = gradient_check(lambda: scalarize(ag.relu(x)), [x])
            assert result.max_relative_error < 1e-6

    def test_tanh_gradcheck(self, rng):
        for _ in range(10):
            x = parameter(rng.normal(size=(7,)).astype(np.float32))
            result = gradient_check(lambda: scalarize(ag.tanh(x)), [x])
            assert result.max_relative_error < 1e-4

    def test_add_scale_concat_reshape_gradcheck(self, rng):
        for _ in range(10):
            a = parameter(rng.normal(size=(3, 2)).astype(np.float32))
            b = parameter(rng.normal(size=(3, 2)).astype(np.float32))

            def fn():
                s = ag.add(a, b)
                s = ag.scale(s, 1.7)
                c = ag.concat([s, a], axis=1)
                return scalarize(ag.reshape(c, (12,)))

            assert gradient_check(fn, [a, b]).max_relative_error < 1e-4

    def test_relu_and_tanh_values(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0], dtype=np.float32))
        np.testing.assert_array_equal(ag.relu(x).data, [0.0, 0.0, 2.0])
        np.testing.assert_allclose(ag.tanh(x).data, np.tanh([-1.0, 0.0, 2.0]), atol=1e-6)

    def test_linear_identity(self):
        x = Tensor(np.array([1.0, 2.0], dtype=np.float32))
        w = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.zeros(2, dtype=np.float32))
        np.testing.assert_array_equal(ag.linear(x, w, b).data, x.data)


class TestEmbeddingLookup:
    def test_gather_and_scatter(self, rng):
        table = parameter(rng.normal(size=(6, 3)).astype(np.float32))
        out = ag.embedding_lookup(table, [2, 2, 5])
        np.testing.assert_array_equal(out.data[0], table.data[2])
        scalarize(out).backward()
        # Row 2 used twice, row 5 once, everything else untouched.
        assert table.grad is not None
        assert np.all(table.grad[[0, 1, 3, 4]] == 0)
        assert np.any(table.grad[2] != 0) and np.any(table.grad[5] != 0)

    def test_frozen_row_gets_no_gradient(self, rng):
        table = parameter(rng.normal(size=(4, 2)).astype(np.float32))
        out = ag.embedding_lookup(table, [0, 1, 0], frozen=(0,))
        scalarize(out).backward()
        assert np.all(table.grad[0] == 0)
        assert np.any(table.grad[1] != 0)

    def test_gradcheck(self, rng):
        for _ in range(10):
            table = parameter(rng.normal(size=(5, 4)).astype(np.float32))
            ids = [1, 3, 3, 4]
            result = gradient_check(
                lambda: scalarize(ag.embedding_lookup(table, ids)), [table]
            )
            assert result.max_relative_error < 1e-4


class TestCosineMatchMatrix:
    def test_self_cosine_is_one(self):
        q = Tensor(np.array([[3.0, 4.0]], dtype=np.float32))
        d = Tensor(np.array([[3.0, 4.0]], dtype=np.float32))
        assert ag.cosine_match_matrix(q, d).data[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_is_zero(self):
        q = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
        d = Tensor(np.array([[0.0, 2.0]], dtype=np.float32))
        assert ag.cosine_match_matrix(q, d).data[0, 0] == pytest.approx(0.0, abs=1e-7)

    def test_hand_value(self):
        q = Tensor(np.array([[1.0, 0.0]], dtype=np.float32))
        d = Tensor(np.array([[1.0, 1.0]], dtype=np.float32))
        assert ag.cosine_match_matrix(q, d).data[0, 0] == pytest.approx(
            1 / math.sqrt(2), abs=1e-6
        )

    def test_masked_and_zero_norm_rows_are_exactly_zero(self):
        q = Tensor(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]], dtype=np.float32))
        d = Tensor(np.array([[1.0, 0.0], [2.0, 2.0]], dtype=np.float32))
        m = ag.cosine_match_matrix(q, d, q_mask=np.array([True, True, False]))
        assert np.all(m.data[1] == 0.0)  # zero-norm row
        assert np.all(m.data[2] == 0.0)  # masked row
        assert m.data[0, 0] != 0.0

    def test_dim_mismatch_errors(self):
        with pytest.raises(ValueError):
            ag.cosine_match_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_gradcheck(self, rng):
        for _ in range(10):
            q = parameter(rng.normal(size=(3, 4)).astype(np.float32))
            d = parameter(rng.normal(size=(5, 4)).astype(np.float32))
            q_mask = np.array([True, True, False])
            d_mask = np.array([True, False, True, True, True])

            def fn():
                return scalarize(ag.cosine_match_matrix(q, d, q_mask, d_mask))

            assert gradient_check(fn, [q, d]).max_relative_error < 1e-4

    def test_masked_positions_get_zero_gradient(self, rng):
        q = parameter(rng.normal(size=(2, 3)).astype(np.float32))
        d = parameter(rng.normal(size=(3, 3)).astype(np.float32))
        q_mask = np.array([True, False])
        d_mask = np.array([True, True, False])
        scalarize(ag.cosine_match_matrix(q, d, q_mask, d_mask)).backward()
        assert np.all(q.grad[1] == 0)
        assert np.all(d.grad[2] == 0)


class TestKernelBank:
    def test_default_layout(self):
        bank = KernelBank.default()
        assert bank.count == 11
        np.testing.assert_allclose(
            bank.means,
            [-0.9, -0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
        )
        np.testing.assert_allclose(bank.sigmas, [0.1] * 11)

    def test_configurable_exact_match_sigma(self):
        bank = KernelBank.default(exact_sigma=0.001)
        assert bank.sigmas[-1] == pytest.approx(0.001)

    def test_requires_exactly_one_exact_match_kernel(self):
        with pytest.raises(ValueError):
            KernelBank(np.array([0.5, 0.7]), np.array([0.1, 0.1]))
        with pytest.raises(ValueError):
            KernelBank(np.array([1.0, 1.0]), np.array([0.1, 0.1]))

    def test_widths_must_be_positive(self):
        with pytest.raises(ValueError):
            KernelBank(np.array([1.0]), np.array([0.0]))


class TestGaussianKernelPool:
    def test_single_entry_gaussian_value(self):
        bank = KernelBank(np.array([0.3, 1.0]), np.array([0.1, 0.1]))
        m = Tensor(np.array([[0.5]], dtype=np.float32))
        phi = ag.gaussian_kernel_pool(m, bank)
        recovered = math.exp(float(phi.data[0])) - ag.KERNEL_POOL_EPS
        assert recovered == pytest.approx(math.exp(-2.0), abs=1e-7)

    def test_row_of_exact_mu_counts_columns(self):
        bank = KernelBank(np.array([0.4, 1.0]), np.array([0.1, 0.1]))
        m = Tensor(np.full((1, 7), 0.4, dtype=np.float32))
        phi = ag.gaussian_kernel_pool(m, bank)
        assert math.exp(float(phi.data[0])) - ag.KERNEL_POOL_EPS == pytest.approx(7.0, rel=1e-6)

    def test_exact_match_kernel_counts_matches_on_binary_matrix(self):
        bank = KernelBank(np.array([1.0]), np.array([0.1]))
        one = ag.gaussian_kernel_pool(Tensor(np.array([[1.0]], dtype=np.float32)), bank)
        assert math.exp(float(one.data[0])) - ag.KERNEL_POOL_EPS == pytest.approx(1.0, rel=1e-6)
        # An M=0 entry contributes exp(-50) ~ 2e-22, invisible next to a match.
        counting = ag.gaussian_kernel_pool(
            Tensor(np.array([[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]], dtype=np.float32)), bank
        )
        assert math.exp(float(counting.data[0])) - ag.KERNEL_POOL_EPS == pytest.approx(
            3.0, rel=1e-6
        )
        # With no match at all, the guarded log bottoms out at ln(eps).
        zero = ag.gaussian_kernel_pool(Tensor(np.array([[0.0]], dtype=np.float32)), bank)
        assert float(zero.data[0]) == pytest.approx(math.log(ag.KERNEL_POOL_EPS), abs=1e-5)

    def test_document_permutation_invariance(self, rng):
        bank = KernelBank.default()
        values = rng.uniform(-1, 1, size=(4, 9)).astype(np.float32)
        phi = ag.gaussian_kernel_pool(Tensor(values), bank)
        permuted = values[:, rng.permutation(9)]
        phi_perm = ag.gaussian_kernel_pool(Tensor(permuted), bank)
        # Equal up to float32 summation-order noise.
        np.testing.assert_allclose(phi.data, phi_perm.data, rtol=1e-6, atol=1e-5)

    def test_masked_query_rows_contribute_nothing(self, rng):
        bank = KernelBank.default()
        values = rng.uniform(-1, 1, size=(3, 5)).astype(np.float32)
        q_mask = np.array([True, False, True])
        phi = ag.gaussian_kernel_pool(Tensor(values), bank, q_mask=q_mask)
        reduced = ag.gaussian_kernel_pool(Tensor(values[[0, 2]]), bank)
        np.testing.assert_allclose(phi.data, reduced.data, rtol=1e-6)

    def test_all_masked_query_errors(self):
        bank = KernelBank.default()
        with pytest.raises(ValueError):
            ag.gaussian_kernel_pool(
                Tensor(np.zeros((2, 2), dtype=np.float32)), bank,
                q_mask=np.array([False, False]),
            )

    def test_gradcheck(self, rng):
        bank = KernelBank.default()
        for _ in range(10):
            m = parameter(rng.uniform(-1, 1, size=(3, 6)).astype(np.float32))
            d_mask = np.array([True, True, False, True, True, True])

            def fn():
                return scalarize(ag.gaussian_kernel_pool(m, bank, d_mask=d_mask))

            # Probing raw match entries against sigma=0.1 kernels needs a step
            # well below the kernel width.
            assert gradient_check(fn, [m], h=1e-4).max_relative_error < 1e-3

    def test_kernel_pool_plus_linear_gradcheck(self, rng):
        bank = KernelBank.default()
        for _ in range(10):
            q = parameter(rng.normal(size=(3, 5)).astype(np.float32))
            d = parameter(rng.normal(size=(7, 5)).astype(np.float32))
            w = parameter(rng.normal(size=(bank.count, 1)).astype(np.float32))

            def fn():
                m = ag.cosine_match_matrix(q, d)
                return ag.linear(ag.gaussian_kernel_pool(m, bank), w)

            assert gradient_check(fn, [q, d, w]).max_relative_error < 1e-3


class TestConv:
    def test_conv1d_width_one_is_matmul(self, rng):
        x = Tensor(rng.normal(size=(5, 3)).astype(np.float32))
        w = Tensor(rng.normal(size=(1, 3, 2)).astype(np.float32))
        out = ag.conv1d(x, w)
        np.testing.assert_allclose(out.data, x.data @ w.data[0], atol=1e-6)

    def test_conv1d_start_aligned_windows(self):
        x = Tensor(np.array([[1.0], [2.0], [4.0]], dtype=np.float32))
        w = Tensor(np.ones((2, 1, 1), dtype=np.float32))
        out = ag.conv1d(x, w)
        # Window i covers rows i, i+1; the last window sees zero padding.
        np.testing.assert_allclose(out.data[:, 0], [3.0, 6.0, 4.0], atol=1e-6)

    def test_conv1d_gradcheck(self, rng):
        for _ in range(10):
            x = parameter(rng.normal(size=(6, 3)).astype(np.float32))
            w = parameter(rng.normal(size=(3, 3, 2)).astype(np.float32))
            b = parameter(rng.normal(size=2).astype(np.float32))
            result = gradient_check(lambda: scalarize(ag.conv1d(x, w, b)), [x, w, b])
            assert result.max_relative_error < 1e-3

    def test_conv2d_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(4, 5, 1)).astype(np.float32))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        w[1, 1, 0, 0] = 1.0  # centered delta kernel
        out = ag.conv2d(x, Tensor(w))
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_conv2d_shape_is_preserved(self, rng):
        x = Tensor(rng.normal(size=(7, 4, 3)).astype(np.float32))
        w = Tensor(rng.normal(size=(3, 3, 3, 5)).astype(np.float32))
        assert ag.conv2d(x, w).data.shape == (7, 4, 5)

    def test_conv2d_gradcheck(self, rng):
        for _ in range(10):
            x = parameter(rng.normal(size=(4, 3, 2)).astype(np.float32))
            w = parameter(rng.normal(size=(3, 3, 2, 2)).astype(np.float32))
            b = parameter(rng.normal(size=2).astype(np.float32))
            result = gradient_check(lambda: scalarize(ag.conv2d(x, w, b)), [x, w, b])
            assert result.max_relative_error < 1e-3


class TestDynamicMaxPool:
    def test_identity_when_sizes_match(self, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)).astype(np.float32))
        np.testing.assert_array_equal(ag.dynamic_max_pool(x, 3, 4).data, x.data)

    def test_global_max(self):
        x = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]], dtype=np.float32))
        assert ag.dynamic_max_pool(x, 1, 1).data[0, 0, 0] == 4.0

    def test_three_rows_into_two_regions(self):
        # Boundaries round(i*3/2) = 0, 2, 3 -> regions rows {0,1} and {2}.
        x = Tensor(np.array([[[1.0]], [[5.0]], [[2.0]]], dtype=np.float32))
        out = ag.dynamic_max_pool(x, 2, 1)
        np.testing.assert_array_equal(out.data[:, 0, 0], [5.0, 2.0])

    def test_upsampling_duplicates_rows(self):
        x = Tensor(np.array([[[3.0]]], dtype=np.float32))
        out = ag.dynamic_max_pool(x, 2, 2)
        np.testing.assert_array_equal(out.data[:, :, 0], [[3.0, 3.0], [3.0, 3.0]])

    def test_output_shape_contract(self, rng):
        for h, w in [(1, 1), (2, 7), (30, 3), (9, 9)]:
            x = Tensor(rng.normal(size=(h, w, 2)).astype(np.float32))
            assert ag.dynamic_max_pool(x, 5, 2).data.shape == (5, 2, 2)

    def test_invalid_output_sizes(self):
        x = Tensor(np.zeros((2, 2, 1), dtype=np.float32))
        with pytest.raises(ValueError):
            ag.dynamic_max_pool(x, 0, 1)

    def test_gradcheck(self, rng):
        for _ in range(10):
            x = parameter(rng.normal(size=(5, 4, 2)).astype(np.float32) * 3)
            result = gradient_check(lambda: scalarize(ag.dynamic_max_pool(x, 2, 2)), [x])
            assert result.max_relative_error < 1e-4


class TestMarginRankingLoss:
    def test_outside_margin_is_zero(self):
        loss = ag.margin_ranking_loss(Tensor([2.5]), Tensor([0.5]), margin=1.0)
        assert loss.item() == 0.0

    def test_equal_scores_give_margin(self):
        loss = ag.margin_ranking_loss(Tensor([0.7]), Tensor([0.7]), margin=1.0)
        assert loss.item() == 1.0

    def test_hand_value(self):
        loss = ag.margin_ranking_loss(Tensor([0.2]), Tensor([0.5]), margin=1.0)
        assert loss.item() == pytest.approx(1.3, abs=1e-6)

    def test_gradients_inside_and_outside(self):
        pos, neg = parameter(np.array([0.2])), parameter(np.array([0.5]))
        ag.margin_ranking_loss(pos, neg).backward()
        assert pos.grad[0] == -1.0 and neg.grad[0] == 1.0

        pos, neg = parameter(np.array([3.0])), parameter(np.array([0.0]))
        ag.margin_ranking_loss(pos, neg).backward()
        assert pos.grad is None or np.all(pos.grad == 0)

    def test_gradcheck(self, rng):
        for _ in range(10):
            a = float(rng.uniform(-2, 2))
            b = float(rng.uniform(-2, 2))
            if abs(1.0 - (a - b)) < 0.01:  # keep away from the hinge kink
                a += 0.5
            pos, neg = parameter(np.array([a])), parameter(np.array([b]))
            result = gradient_check(lambda: ag.margin_ranking_loss(pos, neg), [pos, neg])
            assert result.max_relative_error < 1e-6


class TestNoNanOnBoundedInputs:
    def test_ops_stay_finite(self, rng):
        for _ in range(5):
            x = Tensor(rng.uniform(-10, 10, size=(4, 6)).astype(np.float32))
            w = Tensor(rng.uniform(-10, 10, size=(6, 2)).astype(np.float32))
            ag.linear(x, w)
            ag.relu(x)
            ag.tanh(x)
            m = ag.cosine_match_matrix(x, Tensor(rng.uniform(-10, 10, size=(3, 6)).astype(np.float32)))
            phi = ag.gaussian_kernel_pool(m, KernelBank.default())
            assert np.isfinite(phi.data).all()
            # Each of the 4 query rows contributes a log bounded below by ln(eps).
            assert phi.data.min() >= 4 * math.log(ag.KERNEL_POOL_EPS)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = parameter(np.array([1.0, -2.0], dtype=np.float32))
        before = p.data.copy()
        state = AdamState.for_params([p])
        for _ in range(5):
            adam_step([p], [np.zeros(2, dtype=np.float32)], state, OptimizerConfig())
        np.testing.assert_array_equal(p.data, before)

    def test_single_step_hand_value(self):
        p = parameter(np.array([0.0], dtype=np.float32))
        state = AdamState.for_params([p])
        adam_step([p], [np.ones(1, dtype=np.float32)], state, OptimizerConfig())
        # m_hat = v_hat = 1 at t=1, so the step is -lr / (1 + eps).
        assert p.data[0] == pytest.approx(-0.001, abs=1e-9)

    def test_parameters_update_independently(self, rng):
        a = parameter(rng.normal(size=3).astype(np.float32))
        b = parameter(rng.normal(size=3).astype(np.float32))
        b_before = b.data.copy()
        state = AdamState.for_params([a, b])
        adam_step(
            [a, b],
            [np.ones(3, dtype=np.float32), np.zeros(3, dtype=np.float32)],
            state,
            OptimizerConfig(),
        )
        np.testing.assert_array_equal(b.data, b_before)
        assert np.all(a.data != 0)

    def test_non_finite_gradient_errors(self):
        p = parameter(np.zeros(2, dtype=np.float32))
        state = AdamState.for_params([p])
        with pytest.raises(NonFiniteError):
            adam_step([p], [np.array([np.nan, 0.0], dtype=np.float32)], state, OptimizerConfig())

    def test_zero_learning_rate_is_identity(self, rng):
        p = parameter(rng.normal(size=4).astype(np.float32))
        before = p.data.copy()
        state = AdamState.for_params([p])
        for _ in range(3):
            adam_step([p], [rng.normal(size=4).astype(np.float32)], state,
                      OptimizerConfig(learning_rate=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_negative_learning_rate_rejected(self):
        with pytest.raises(ValueError):
            OptimizerConfig(learning_rate=-0.1)

    def test_deterministic(self, rng):
        grads = [rng.normal(size=3).astype(np.float32) for _ in range(4)]

        def run():
            p = parameter(np.zeros(3, dtype=np.float32))
            state = AdamState.for_params([p])
            for g in grads:
                adam_step([p], [g], state, OptimizerConfig())
            return p.data.copy()

        np.testing.assert_array_equal(run(), run())


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        tensors = {
            "embedding": rng.normal(size=(4, 3)).astype(np.float32),
            "w_out": rng.normal(size=(3, 1)).astype(np.float32),
            "scalar": np.float32(2.5).reshape(()),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tensors, step=17)
        loaded, step = load_checkpoint(path)
        assert step == 17
        assert set(loaded) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], np.asarray(tensors[name], dtype=np.float32))

    def test_same_state_same_bytes(self, tmp_path, rng):
        tensors = {"a": rng.normal(size=(2, 2)).astype(np.float32)}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, dict(tensors), step=3)
        save_checkpoint(p2, dict(reversed(list(tensors.items()))), step=3)
        assert p1.read_bytes() == p2.read_bytes()
