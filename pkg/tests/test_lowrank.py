import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nncompress.errors import ParameterError
from nncompress.harness.metrics import count_params
from nncompress.lowrank import (
    FactorizationPlan, choose_ranks, dematricize, factorize_layer, factorized_param_count,
    matricize, matricize_index, rank_constrain_model,
)
from nncompress.nn import BatchNorm, build_model, forward
from nncompress.tensor import Rng


def _conv_model(rng, c=2, n=4, d=3):
    spec = [{"type": "conv", "out": n, "kernel": d}, {"type": "relu"},
            {"type": "conv", "out": 3, "kernel": 1}, {"type": "flatten"},
            {"type": "dense", "out": "classes"}]
    model = build_model(spec, (c, 5, 5), 3, rng)
    model.layers[0].params["bias"] = rng.normal(n)
    return model


class TestMatricize:
    def test_hand_index(self):
        assert matricize_index(2, 3, 1, 2, d=3) == (6, 4)
        assert matricize_index(1, 1, 1, 1, d=5) == (1, 1)

    def test_entrywise_layout(self, rng):
        w = rng.normal((2, 3, 3, 4))
        m = matricize(w)
        assert m.shape == (6, 12)
        for c in range(2):
            for r in range(3):
                for s in range(3):
                    for n in range(4):
                        j1, j2 = matricize_index(c + 1, r + 1, s + 1, n + 1, 3)
                        assert m[j1 - 1, j2 - 1] == w[c, r, s, n]

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5))
    def test_round_trip(self, c, d, n):
        w = Rng(c * 100 + d * 10 + n).normal((c, d, d, n))
        np.testing.assert_array_equal(dematricize(matricize(w), c, d, n), w)

    def test_rejects_non_square(self):
        with pytest.raises(ParameterError):
            matricize(np.zeros((2, 3, 1, 2)))
        with pytest.raises(ParameterError):
            dematricize(np.zeros((5, 5)), 2, 3, 2)


class TestFactorize:
    def test_rank_one_is_exact(self, rng):
        a, b = rng.normal(6), rng.normal(9)
        w = dematricize(np.outer(a, b), 2, 3, 3)
        pair = factorize_layer(w, 1)
        np.testing.assert_allclose(pair.recompose(), w, atol=1e-12)
        assert pair.truncation_error() < 1e-12

    def test_kernel_shapes_and_split(self, rng):
        pair = factorize_layer(rng.normal((2, 3, 3, 5)), 4)
        assert pair.v_kernel.shape == (2, 3, 1, 4)
        assert pair.h_kernel.shape == (4, 1, 3, 5)
        # sqrt(s) in each factor: column norms of V and H agree
        v_norms = np.linalg.norm(pair.v_kernel.reshape(6, 4), axis=0)
        h_norms = np.linalg.norm(pair.h_kernel.reshape(4, 15), axis=1)
        np.testing.assert_allclose(v_norms, h_norms, rtol=1e-10)
        np.testing.assert_allclose(v_norms ** 2, pair.singular_values[:4], rtol=1e-10)

    def test_eckart_young(self, rng):
        w = rng.normal((2, 3, 3, 2))
        pair = factorize_layer(w, 2)
        s = np.linalg.svd(matricize(w), compute_uv=False)
        err = np.linalg.norm(matricize(pair.recompose()) - matricize(w))
        assert err == pytest.approx(np.sqrt(np.sum(s[2:] ** 2)), rel=1e-9)
        assert err == pytest.approx(pair.truncation_error(), rel=1e-9)

    def test_error_shrinks_with_rank(self, rng):
        w = rng.normal((3, 3, 3, 4))
        errs = [np.linalg.norm(factorize_layer(w, k).recompose() - w) for k in range(1, 10)]
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-12

    def test_numpy_svd_route_agrees(self, rng):
        def np_svd(m):
            from nncompress.tensor import SvdResult
            u, s, vt = np.linalg.svd(m, full_matrices=False)
            return SvdResult(u, s, vt.T)

        w = rng.normal((2, 3, 3, 4))
        ours = factorize_layer(w, 3).recompose()
        theirs = factorize_layer(w, 3, svd_fn=np_svd).recompose()
        np.testing.assert_allclose(ours, theirs, atol=1e-10)

    def test_rank_bounds(self, rng):
        with pytest.raises(ParameterError):
            factorize_layer(rng.normal((2, 3, 3, 2)), 7)
        with pytest.raises(ParameterError):
            factorize_layer(rng.normal((2, 3, 3, 2)), 0)


class TestRankConstrain:
    def test_full_rank_is_equivalent(self, rng):
        model = _conv_model(rng)
        new = rank_constrain_model(model, FactorizationPlan({0: 6}))
        x = rng.normal((4, 2, 5, 5))
        np.testing.assert_allclose(forward(new, x), forward(model, x), atol=1e-10)
        assert isinstance(new.layers[2], BatchNorm)
        assert new.layers[0].params.get("bias") is None
        np.testing.assert_array_equal(new.layers[1].params["bias"], model.layers[0].params["bias"])

    def test_empty_plan_is_copy(self, rng):
        model = _conv_model(rng)
        new = rank_constrain_model(model, FactorizationPlan())
        x = rng.normal((2, 2, 5, 5))
        np.testing.assert_array_equal(forward(new, x), forward(model, x))
        assert new.layers[0] is not model.layers[0]

    def test_param_count(self, rng):
        model = _conv_model(rng, c=2, n=4, d=3)
        new = rank_constrain_model(model, FactorizationPlan({0: 2}))
        before, after = count_params(model), count_params(new)
        assert before.total - after.total == 2 * 3 * 3 * 4 - (2 * 3 * 2 + 2 * 3 * 4)
        assert after.aux - before.aux == 2 * 4  # identity BN scale and shift
        assert factorized_param_count(2, 3, 4, 2) == 12 + 24 + 4 + 8

    def test_one_by_one_is_skipped(self, rng):
        model = _conv_model(rng)
        new = rank_constrain_model(model, FactorizationPlan({2: 3}))
        assert len(new.layers) == len(model.layers)
        assert choose_ranks(model).ranks.keys() == {0}

    @pytest.mark.parametrize("plan", [{1: 1}, {0: 99}, {42: 1}])
    def test_bad_plans(self, rng, plan):
        with pytest.raises(ParameterError):
            rank_constrain_model(_conv_model(rng), FactorizationPlan(plan))

    def test_plan_dict_round_trip(self):
        plan = FactorizationPlan({3: 2, 0: 5})
        assert FactorizationPlan.from_dict(plan.to_dict()).ranks == plan.ranks


class TestChooseRanks:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.3, 0.5, 0.8, 0.9, 0.99, 1.0]))
    def test_matches_prefix_scan(self, seed, energy):
        model = _conv_model(Rng(seed), c=3, n=5)
        plan = choose_ranks(model, energy)
        assert list(plan.ranks) == [0]
        s = np.linalg.svd(matricize(model.layers[0].params["weight"]), compute_uv=False)
        total = np.sum(s ** 2)
        k = 1
        while np.sum(s[:k] ** 2) < energy * total * (1 - 1e-12):
            k += 1
        assert plan.ranks[0] == k

    def test_low_rank_kernel(self, rng):
        w = dematricize(np.outer(rng.normal(6), rng.normal(12)), 2, 3, 4)
        model = _conv_model(rng)
        model.layers[0].params["weight"] = w
        assert choose_ranks(model, 1.0).ranks[0] == 1

    def test_invalid_energy(self, rng):
        with pytest.raises(ParameterError):
            choose_ranks(_conv_model(rng), 0.0)
