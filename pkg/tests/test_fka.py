import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mccl.errors import ContractError
from mccl.fka import (
    ClassFeatureSets,
    CompactnessSelection,
    PrototypeBank,
    class_feature_sets,
    outlier_loss,
    p2p_loss,
    p2p_similarities,
    p2p_similarity,
    pseudo_label_grid,
    select_compact,
    select_intra,
    select_outliers,
    update_prototypes,
)
from mccl.gradcheck import grad_check
from mccl.tensor import Tensor, cosine_matrix


def random_instance(rng, B=None, C=None, p=4, Z=3):
    """Small FKA instance: feature sets total at most 64 positions."""
    B = B or int(rng.integers(1, 5))
    C = C or int(rng.integers(2, 6))
    F_w = np.maximum(rng.normal(size=(B, C, p, p)), 0) + 0.01 * rng.random((B, C, p, p))
    F_s = F_w + 0.3 * rng.normal(size=F_w.shape)
    logits = rng.normal(size=(B, Z, 4 * p, 4 * p)) * 2
    p_w = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    protos = rng.normal(size=(Z, C))
    init = rng.random(Z) < 0.8
    return F_w, F_s, p_w, protos, init


def library_outlier_loss(F_w, F_s, p_w, protos, init, n_r, n_d):
    sets = class_feature_sets(F_w, Tensor(F_s), p_w)
    bank = PrototypeBank(protos.copy(), init.copy())
    return outlier_loss(select_compact(sets, bank, n_r, n_d)).item()


class TestPointToPoint:
    def test_self_similarity(self):
        F = np.abs(np.random.default_rng(0).normal(size=(3, 2, 2))) + 0.1
        assert p2p_similarity(Tensor(F), F).item() == pytest.approx(1.0, abs=1e-15)

    def test_antipodal(self):
        F = np.random.default_rng(1).normal(size=(3, 2, 2))
        assert p2p_similarity(Tensor(F), -F).item() == pytest.approx(-1.0, abs=1e-15)

    def test_two_positions_half(self):
        F_s = np.array([[[1.0, 1.0]], [[0.0, 0.0]]])   # C=2, p=1, q=2: vectors (1,0), (1,0)
        F_w = np.array([[[2.0, 0.0]], [[0.0, 3.0]]])   # vectors (2,0), (0,3)
        assert p2p_similarity(Tensor(F_s), F_w).item() == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            p2p_similarity(Tensor(np.ones((2, 2, 2))), np.ones((2, 2, 3)))

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        F_s, F_w = rng.normal(size=(3, 5, 4, 4)), rng.normal(size=(3, 5, 4, 4))
        np.testing.assert_allclose(p2p_similarities(Tensor(F_s), F_w).data, oracles.p2p(F_s, F_w), atol=1e-12)

    @pytest.mark.parametrize("sims,expected", [([1.0, 1.0], 0.0), ([0.0, 0.0], 1.0), ([1.0, 0.0], 0.5)])
    def test_loss_examples(self, sims, expected):
        assert p2p_loss(sims).item() == pytest.approx(expected)

    def test_loss_empty_batch(self):
        with pytest.raises(ContractError):
            p2p_loss([])

    def test_orthogonal_everywhere(self):
        F_s = np.zeros((1, 2, 2, 2)); F_s[:, 0] = 1.0
        F_w = np.zeros((1, 2, 2, 2)); F_w[:, 1] = 1.0
        assert p2p_loss(p2p_similarities(Tensor(F_s), F_w)).item() == pytest.approx(1.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_loss_range(self, seed):
        rng = np.random.default_rng(seed)
        F_s, F_w = rng.normal(size=(2, 3, 2, 2)), rng.normal(size=(2, 3, 2, 2))
        val = p2p_loss(p2p_similarities(Tensor(F_s), F_w)).item()
        assert -1e-12 <= val <= 2 + 1e-12

    def test_no_gradient_into_weak_branch(self):
        rng = np.random.default_rng(4)
        F_s = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        F_w = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True)
        p2p_loss(p2p_similarities(F_s, F_w)).backward()
        assert F_w.grad is None and F_s.grad is not None

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        F_s = Tensor(rng.normal(size=(2, 4, 3, 3)))
        F_w = rng.normal(size=(2, 4, 3, 3))
        assert grad_check(lambda: p2p_loss(p2p_similarities(F_s, F_w)), [F_s]) <= 1e-4


class TestClassFeatureSets:
    def test_uniform_prediction_goes_to_class_zero(self):
        F = np.random.default_rng(0).random((3, 2, 2))
        sets = class_feature_sets(F, Tensor(F), np.full((4, 8, 8), 0.25))
        assert sets.count(0) == 4 and all(sets.count(k) == 0 for k in (1, 2, 3))

    def test_partition(self):
        rng = np.random.default_rng(1)
        F_w, F_s, p_w, *_ = random_instance(rng, B=3)
        sets = class_feature_sets(F_w, Tensor(F_s), p_w)
        assert sum(sets.count(k) for k in range(3)) == 3 * 16
        for k in sets.positions:
            assert len(sets.weak[k]) == sets.strong[k].shape[0]

    def test_hand_built_gather(self):
        # 2×2 grid, C=2, H=W=8 predictions; labels taken at pixels (0,0), (0,4), (4,0), (4,4)
        F_w = np.arange(8, dtype=float).reshape(2, 2, 2)
        F_s = F_w + 100
        p_w = np.zeros((3, 8, 8))
        p_w[2, :4, :4] = 1     # cell (0,0) -> class 2
        p_w[0, :4, 4:] = 1     # cell (0,1) -> class 0
        p_w[1, 4:, :] = 1      # cells (1,0), (1,1) -> class 1
        sets = class_feature_sets(F_w, Tensor(F_s), p_w)
        np.testing.assert_array_equal(sets.weak[2], [[0, 4]])
        np.testing.assert_array_equal(sets.weak[0], [[1, 5]])
        np.testing.assert_array_equal(sets.weak[1], [[2, 6], [3, 7]])
        np.testing.assert_array_equal(sets.strong[1].data, [[102, 106], [103, 107]])
        np.testing.assert_array_equal(sets.positions[1], [2, 3])

    def test_nearest_downsample_pixel(self):
        p_w = np.zeros((1, 2, 8, 8)); p_w[0, 0] = 1
        p_w[0, :, 4, 4] = (0, 1)
        p_w[0, :, 5, 5] = (0, 1)   # not a sampled pixel
        grid = pseudo_label_grid(p_w, (2, 2))
        np.testing.assert_array_equal(grid[0], [[0, 0], [0, 1]])

    def test_indivisible_grid(self):
        with pytest.raises(ContractError):
            pseudo_label_grid(np.ones((1, 2, 6, 6)), (4, 4))


class TestSelection:
    def test_small_set_is_kept_whole(self):
        W = np.random.default_rng(0).random((3, 2))
        assert len(select_intra(W, np.ones(2), 5)) == 3
        assert select_outliers(Tensor(W), np.ones(2), 5).shape[0] == 3

    def test_intra_example(self):
        cands = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        got = select_intra(cands, np.array([1.0, 0.0]), 2)
        np.testing.assert_array_equal(got, [[1, 0], [1, 1]])

    def test_outlier_example(self):
        cands = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        got = select_outliers(Tensor(cands), np.array([1.0, 0.0]), 1)
        np.testing.assert_array_equal(got.data, [[-1, 0]])

    def test_empty_set(self):
        assert len(select_intra(np.zeros((0, 3)), np.ones(3), 4)) == 0

    def test_uninitialised_means_skip(self):
        assert select_intra(np.ones((2, 2)), np.ones(2), 1, initialized=False) is None
        assert select_outliers(Tensor(np.ones((2, 2))), np.ones(2), 1, initialized=False) is None

    def test_ties_break_on_lower_position(self):
        cands = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [3.0, 0.0]])
        got = select_intra(cands, np.array([1.0, 0.0]), 2)
        np.testing.assert_array_equal(got, [[1, 0], [2, 0]])

    def test_identical_candidates_loss_is_order_free(self):
        cands = np.tile([[0.3, 0.7]], (5, 1))
        sel = CompactnessSelection({0: np.array([[1.0, 0.0]])}, {0: select_outliers(Tensor(cands), np.ones(2), 2)})
        expected = 1 - 0.3 / np.hypot(0.3, 0.7)
        assert outlier_loss(sel).item() == pytest.approx(expected, abs=1e-14)

    @given(st.integers(0, 100_000), st.integers(1, 8), st.integers(1, 8))
    @settings(max_examples=100, deadline=None)
    def test_boundary_property(self, seed, n_r, n_d):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(int(rng.integers(1, 20)), 3))
        rho = rng.normal(size=3)
        cos = cosine_matrix(feats, rho[None])[:, 0]
        intra = select_intra(feats, rho, n_r)
        outl = select_outliers(Tensor(feats), rho, n_d).data
        in_cos = np.sort(cosine_matrix(intra, rho[None])[:, 0])
        out_cos = np.sort(cosine_matrix(outl, rho[None])[:, 0])
        # members carry exactly the top (bottom) cosines, so none is beaten by a non-member
        srt = np.sort(cos)
        np.testing.assert_allclose(in_cos, srt[len(srt) - len(intra):], atol=1e-15)
        np.testing.assert_allclose(out_cos, srt[:len(outl)], atol=1e-15)


class TestOutlierLoss:
    def test_perfect_alignment(self):
        intra = np.array([[1.0, 0.0], [0.0, 2.0]])
        outl = Tensor(np.array([[0.0, 5.0], [3.0, 0.0]]))
        sel = CompactnessSelection({1: intra}, {1: outl})
        assert outlier_loss(sel).item() == pytest.approx(0.0, abs=1e-15)

    def test_single_orthogonal(self):
        sel = CompactnessSelection({0: np.array([[1.0, 0.0]])}, {0: Tensor(np.array([[0.0, 1.0]]))})
        assert outlier_loss(sel).item() == pytest.approx(1.0)

    def test_no_eligible_class(self):
        assert outlier_loss(CompactnessSelection({}, {})).item() == 0.0

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        F_w, F_s, p_w, protos, init = random_instance(rng)
        n_r, n_d = int(rng.integers(1, 10)), int(rng.integers(1, 20))
        got = library_outlier_loss(F_w, F_s, p_w, protos, init, n_r, n_d)
        ref = oracles.outlier_loss(F_w, F_s, p_w, protos, init, n_r, n_d)
        assert abs(got - ref) <= 1e-10

    def test_gradient_only_reaches_outliers(self):
        rng = np.random.default_rng(7)
        F_w, F_s, p_w, protos, init = random_instance(rng, B=2)
        init[:] = True
        S = Tensor(F_s, requires_grad=True)
        W = Tensor(F_w, requires_grad=True)
        sets = class_feature_sets(W, S, p_w)
        sel = select_compact(sets, PrototypeBank(protos, init), 2, 3)
        outlier_loss(sel).backward()
        assert W.grad is None
        flat = S.grad.transpose(0, 2, 3, 1).reshape(-1, S.shape[1])
        assert 0 < np.count_nonzero(np.abs(flat).sum(axis=1)) <= 3 * 3

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(100 + seed)
        F_w, F_s, p_w, protos, init = random_instance(rng, B=2)
        init[:] = True
        S = Tensor(F_s)
        bank = PrototypeBank(protos, init)

        def f():
            return outlier_loss(select_compact(class_feature_sets(F_w, S, p_w), bank, 3, 4))
        assert grad_check(f, [S], max_coords=40, seed=seed) <= 1e-4


class TestPrototypes:
    def test_first_observation_initialises(self):
        bank = PrototypeBank.empty(3, 2)
        sets = ClassFeatureSets(3, {1: np.arange(2)}, {1: np.array([[1.0, 3.0], [3.0, 5.0]])}, {})
        new = update_prototypes(bank, sets)
        np.testing.assert_array_equal(new.prototypes[1], [2.0, 4.0])
        assert new.initialized.tolist() == [False, True, False]
        assert not bank.initialized[1]  # input bank untouched

    def test_single_ema_step(self):
        bank = PrototypeBank(np.zeros((1, 1)), np.array([True]), 0.99)
        sets = ClassFeatureSets(1, {0: np.arange(1)}, {0: np.ones((1, 1))}, {})
        assert update_prototypes(bank, sets).prototypes[0, 0] == pytest.approx(0.01, abs=1e-17)

    def test_absent_class_unchanged(self):
        bank = PrototypeBank(np.ones((2, 2)), np.array([True, True]))
        sets = ClassFeatureSets(2, {0: np.arange(1)}, {0: np.zeros((1, 2))}, {})
        np.testing.assert_array_equal(update_prototypes(bank, sets).prototypes[1], [1, 1])

    def test_uninitialised_class_contributes_no_loss(self):
        rng = np.random.default_rng(2)
        F_w, F_s, p_w, protos, _ = random_instance(rng, B=2)
        none = np.zeros(3, dtype=bool)
        assert library_outlier_loss(F_w, F_s, p_w, protos, none, 4, 4) == 0.0

    @pytest.mark.parametrize("rho0,mu", [(0.0, 1.0), (3.0, -2.0), (-0.5, 0.25)])
    def test_geometric_decay(self, rho0, mu):
        bank = PrototypeBank(np.array([[rho0]]), np.array([True]), 0.99)
        sets = ClassFeatureSets(1, {0: np.arange(1)}, {0: np.array([[mu]])}, {})
        for t in range(1, 101):
            bank = update_prototypes(bank, sets)
            expected = 0.99**t * abs(rho0 - mu)
            assert abs(abs(bank.prototypes[0, 0] - mu) - expected) <= 1e-14 * max(1.0, abs(rho0 - mu))
