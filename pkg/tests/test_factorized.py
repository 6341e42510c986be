import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrhyper.rng import make_rng
from lrhyper.tensor import outer_product_4
from lrhyper.factorized import (
    LayerDims,
    cp_rank_for_budget,
    tucker_rank_for_budget,
    cp_init,
    tucker_init,
    cp_reconstruct_full,
    cp_reconstruct_slice,
    tucker_reconstruct_slice,
    cp_normalize,
    param_count,
    dense_equivalent_count,
    single_dense_count,
)


def random_cp(dims, rank, seed):
    rng = make_rng(seed)
    k = cp_init(dims, rank, rng)
    # randomize A away from the all-ones init so slices differ
    return type(k)(
        dims=k.dims, rank=k.rank, A=rng.normal(size=k.A.shape), B=k.B, C=k.C,
        D=k.D, bias=k.bias,
    )


dims_strategy = st.builds(
    LayerDims,
    m_count=st.sampled_from([1, 3, 7, 15, 31]),
    c_in=st.integers(1, 64),
    c_out=st.integers(1, 64),
    k_flat=st.sampled_from([1, 4, 9, 27]),
)


class TestLayerDims:
    def test_rejects_non_power_minus_one(self):
        with pytest.raises(ValueError):
            LayerDims(m_count=4, c_in=2, c_out=2, k_flat=1)

    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            LayerDims(m_count=3, c_in=0, c_out=2, k_flat=1)


class TestCpRankForBudget:
    def test_brats_inner_layer(self):
        dims = LayerDims(15, 32, 64, 27)
        assert cp_rank_for_budget(dims) == 400

    def test_degenerate_clamps_to_one(self):
        assert cp_rank_for_budget(LayerDims(1, 1, 1, 1)) == 1

    def test_linear_layer_drops_kernel_mode(self):
        assert cp_rank_for_budget(LayerDims(3, 64, 128, 1)) == 42

    @settings(max_examples=200, deadline=None)
    @given(dims_strategy)
    def test_tightness(self, dims):
        r = cp_rank_for_budget(dims)
        denom = dims.m_count + dims.c_in + dims.c_out
        if dims.k_flat > 1:
            denom += dims.k_flat
        budget = dims.c_in * dims.c_out * dims.k_flat
        if budget // denom >= 1:
            assert denom * r <= budget
            assert denom * (r + 1) > budget


class TestTuckerRankForBudget:
    def test_brats_inner_layer(self):
        dims = LayerDims(15, 32, 64, 27)
        r = tucker_rank_for_budget(dims)
        assert r == 11
        assert 15 * 27 * r * r + 96 * r + 954 <= 55296

    def test_degenerate_clamps_to_one(self):
        assert tucker_rank_for_budget(LayerDims(1, 1, 1, 1)) == 1

    def test_infeasible_budget_raises(self):
        # huge model count with tiny channels: discriminant goes negative
        with pytest.raises(ValueError):
            tucker_rank_for_budget(LayerDims(255, 2, 2, 9))

    def test_matches_integer_search_oracle(self):
        rng = make_rng(100)
        checked = 0
        while checked < 50:
            dims = LayerDims(
                m_count=int(rng.choice([3, 7, 15])),
                c_in=int(rng.integers(8, 128)),
                c_out=int(rng.integers(8, 128)),
                k_flat=int(rng.choice([4, 9, 27])),
            )
            m, ci, co, k = dims.m_count, dims.c_in, dims.c_out, dims.k_flat
            disc = (ci + co) ** 2 - 4 * m * k * (m * m + k * k - k * ci * co)
            if disc < 0:
                continue
            budget = ci * co * k
            cost = lambda r: m * k * r * r + (ci + co) * r + m * m + k * k
            best = 0
            while cost(best + 1) <= budget:
                best += 1
            if best < 1:
                continue
            assert tucker_rank_for_budget(dims) == best
            checked += 1


class TestCpInit:
    def test_model_factor_is_ones_and_bias_zero(self):
        k = cp_init(LayerDims(7, 4, 5, 9), 3, make_rng(0))
        np.testing.assert_array_equal(k.A, np.ones((7, 3)))
        np.testing.assert_array_equal(k.bias, np.zeros((7, 5)))

    def test_reproducible(self):
        k1 = cp_init(LayerDims(3, 4, 5, 9), 6, make_rng(5))
        k2 = cp_init(LayerDims(3, 4, 5, 9), 6, make_rng(5))
        for name in ("B", "C", "D"):
            np.testing.assert_array_equal(getattr(k1, name), getattr(k2, name))

    def test_linear_kernel_has_no_d_factor(self):
        k = cp_init(LayerDims(3, 4, 5, 1), 2, make_rng(0))
        assert k.D is None
        assert param_count(k) == (3 + 4 + 5) * 2 + 3 * 5


class TestCpReconstruct:
    def test_basis_vectors_give_one_hot(self):
        dims = LayerDims(3, 4, 5, 2)
        k = cp_init(dims, 1, make_rng(0))
        k = type(k)(
            dims=dims, rank=1,
            A=np.eye(3, 1), B=np.eye(4, 1), C=np.eye(5, 1), D=np.eye(2, 1),
            bias=k.bias,
        )
        full = cp_reconstruct_full(k)
        assert full.sum() == 1.0
        assert full[0, 0, 0, 0] == 1.0

    def test_full_matches_brute_force_sum(self):
        dims = LayerDims(3, 4, 5, 2)
        k = random_cp(dims, 3, seed=21)
        want = np.zeros((3, 4, 5, 2))
        for r in range(3):
            want += outer_product_4(k.A[:, r], k.B[:, r], k.C[:, r], k.D[:, r])
        np.testing.assert_allclose(cp_reconstruct_full(k), want, rtol=1e-12)

    def test_zero_model_row_zeroes_slice(self):
        dims = LayerDims(3, 4, 5, 2)
        k = random_cp(dims, 3, seed=22)
        a = k.A.copy()
        a[1] = 0.0
        k = type(k)(dims=dims, rank=3, A=a, B=k.B, C=k.C, D=k.D, bias=k.bias)
        np.testing.assert_array_equal(cp_reconstruct_slice(k, 2), 0.0)

    def test_slice_equals_full_row(self):
        for seed in range(100):
            dims = LayerDims(7, 3, 4, 2)
            k = random_cp(dims, 4, seed=seed)
            full = cp_reconstruct_full(k)
            for m in range(1, 8):
                np.testing.assert_allclose(
                    cp_reconstruct_slice(k, m), full[m - 1], rtol=1e-10, atol=1e-12
                )

    def test_all_ones_model_factor_gives_identical_slices(self):
        dims = LayerDims(7, 3, 4, 2)
        k = cp_init(dims, 1, make_rng(12))
        s1 = cp_reconstruct_slice(k, 1)
        for m in range(2, 8):
            np.testing.assert_array_equal(cp_reconstruct_slice(k, m), s1)

    def test_index_out_of_range(self):
        k = cp_init(LayerDims(3, 2, 2, 2), 1, make_rng(0))
        with pytest.raises(IndexError):
            cp_reconstruct_slice(k, 4)
        with pytest.raises(IndexError):
            cp_reconstruct_slice(k, 0)


class TestTuckerReconstruct:
    def test_identity_factors_one_hot_core(self):
        dims = LayerDims(3, 4, 5, 2)
        k = tucker_init(dims, 2, make_rng(0))
        g = np.zeros_like(k.G)
        g[1, 0, 1, 0] = 1.0
        k = type(k)(
            dims=dims, rank=2, A=np.eye(3), G=g, B=k.B, C=k.C, D=np.eye(2),
            bias=k.bias,
        )
        got = tucker_reconstruct_slice(k, 2)
        want = np.einsum("i,o->io", k.B[:, 0], k.C[:, 1])[:, :, None] * np.array([1.0, 0.0])
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_matches_loop_oracle(self):
        dims = LayerDims(3, 4, 5, 2)
        rng = make_rng(31)
        k = tucker_init(dims, 2, rng)
        k = type(k)(
            dims=dims, rank=2, A=rng.normal(size=(3, 3)), G=k.G, B=k.B, C=k.C,
            D=rng.normal(size=(2, 2)), bias=k.bias,
        )
        got = tucker_reconstruct_slice(k, 3)
        want = np.zeros((4, 5, 2))
        for i in range(4):
            for o in range(5):
                for l in range(2):
                    acc = 0.0
                    for mu in range(3):
                        for r in range(2):
                            for s in range(2):
                                for kk in range(2):
                                    acc += (
                                        k.A[2, mu] * k.G[mu, r, s, kk]
                                        * k.B[i, r] * k.C[o, s] * k.D[l, kk]
                                    )
                    want[i, o, l] = acc
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_zero_core_zero_slice(self):
        dims = LayerDims(3, 4, 5, 2)
        k = tucker_init(dims, 2, make_rng(0))
        k = type(k)(
            dims=dims, rank=2, A=k.A, G=np.zeros_like(k.G), B=k.B, C=k.C, D=k.D,
            bias=k.bias,
        )
        np.testing.assert_array_equal(tucker_reconstruct_slice(k, 1), 0.0)


class TestCpNormalize:
    def test_preserves_reconstruction(self):
        k = random_cp(LayerDims(7, 5, 6, 4), 5, seed=41)
        before = cp_reconstruct_full(k)
        after = cp_reconstruct_full(cp_normalize(k))
        np.testing.assert_allclose(after, before, rtol=1e-10, atol=1e-12)

    def test_unit_columns_after(self):
        k = cp_normalize(random_cp(LayerDims(7, 5, 6, 4), 5, seed=42))
        for f in (k.B, k.C, k.D):
            np.testing.assert_allclose(np.linalg.norm(f, axis=0), 1.0, atol=1e-12)

    def test_idempotent(self):
        k1 = cp_normalize(random_cp(LayerDims(7, 5, 6, 4), 5, seed=43))
        k2 = cp_normalize(k1)
        np.testing.assert_allclose(k2.A, k1.A, rtol=1e-12)

    def test_scale_absorption(self):
        k = random_cp(LayerDims(3, 5, 6, 4), 2, seed=44)
        b_scaled = k.B.copy()
        b_scaled[:, 1] *= 10.0
        ks = type(k)(dims=k.dims, rank=2, A=k.A, B=b_scaled, C=k.C, D=k.D, bias=k.bias)
        n1 = cp_normalize(ks)
        a_scaled = k.A.copy()
        a_scaled[:, 1] *= 10.0
        n2 = cp_normalize(
            type(k)(dims=k.dims, rank=2, A=a_scaled, B=k.B, C=k.C, D=k.D, bias=k.bias)
        )
        np.testing.assert_allclose(n1.A, n2.A, rtol=1e-12)
        np.testing.assert_allclose(n1.B, n2.B, rtol=1e-12)


class TestParamCounts:
    def test_brats_cp_kernel_count(self):
        dims = LayerDims(15, 32, 64, 27)
        k = cp_init(dims, 400, make_rng(0))
        assert param_count(k) == (15 + 32 + 64 + 27) * 400 + 15 * 64
        assert param_count(k) == 56160

    def test_dense_single_model(self):
        dims = LayerDims(15, 32, 64, 27)
        assert single_dense_count(dims) == 55296 + 64
        assert dense_equivalent_count(dims) == 15 * 55296 + 15 * 64

    def test_factorized_at_budget_rank_fits_one_dense_model(self):
        for seed in range(20):
            rng = make_rng(seed)
            dims = LayerDims(
                m_count=int(rng.choice([3, 7, 15])),
                c_in=int(rng.integers(4, 64)),
                c_out=int(rng.integers(4, 64)),
                k_flat=int(rng.choice([9, 27])),
            )
            r = cp_rank_for_budget(dims)
            weight_budget = dims.c_in * dims.c_out * dims.k_flat
            denom = dims.m_count + dims.c_in + dims.c_out + dims.k_flat
            if weight_budget // denom >= 1:
                k = cp_init(dims, r, make_rng(0))
                assert param_count(k) - dims.m_count * dims.c_out <= weight_budget

    def test_tucker_count_matches_buffer_walk(self):
        dims = LayerDims(7, 8, 12, 9)
        r = tucker_rank_for_budget(dims)
        k = tucker_init(dims, r, make_rng(0))
        walked = sum(
            getattr(k, f).size for f in ("A", "G", "B", "C", "D", "bias")
        )
        assert param_count(k) == walked
