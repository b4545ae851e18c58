import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftkit import adapters as ad
from peftkit import linalg, tasks
from peftkit.errors import DimensionError
from peftkit.harness.gradcheck import check_model, randomize_point
from peftkit.linalg import Rng


class TestTeacherStudent:
    def test_planted_identity(self):
        w = linalg.gaussian_init(Rng(9), 10, 7, 0.5)
        data, _ = tasks.gen_teacher_student(Rng(1), 10, 7, 2, linalg.frob_norm(w), 0.0, 100,
                                            noise_std=0.0, w_base=w)
        np.testing.assert_allclose(data.y_train, data.x_train @ w, rtol=0, atol=1e-12)
        np.testing.assert_allclose(data.y_val, data.x_val @ w, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("b_star", [-2.5, 0.0, 0.3, 7.0])
    def test_planted_direction_has_unit_norm(self, b_star):
        _, t = tasks.gen_teacher_student(Rng(2), 16, 12, 2, 3.0, b_star, 20)
        assert abs(linalg.frob_norm(t.u_hat) - 1.0) <= 1e-12
        assert np.linalg.matrix_rank(t.u_hat) <= 2
        w_hat = t.w_base / linalg.frob_norm(t.w_base)
        assert abs(linalg.frob_norm(t.w_target - t.a_star * w_hat) - abs(b_star)) <= 1e-12
        np.testing.assert_allclose(t.u_factors[0] @ t.u_factors[1], t.u_hat, atol=1e-14)

    def test_deterministic(self):
        a, ta = tasks.gen_teacher_student(Rng(5), 8, 6, 2, 1.0, 1.0, 50)
        b, tb = tasks.gen_teacher_student(Rng(5), 8, 6, 2, 1.0, 1.0, 50)
        for f in ("x_train", "y_train", "x_val", "y_val"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()
        assert ta.u_hat.tobytes() == tb.u_hat.tobytes()

    def test_split_and_noise(self):
        data, t = tasks.gen_teacher_student(Rng(3), 8, 6, 1, 1.0, 1.0, 1000, noise_std=0.1)
        assert data.n_train == 800 and data.x_val.shape == (200, 8)
        resid = data.y_train - data.x_train @ t.w_target
        assert np.std(resid) == pytest.approx(0.1, rel=0.05)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            tasks.gen_teacher_student(Rng(0), 4, 3, 4, 1.0, 1.0, 10)
        with pytest.raises(ValueError):
            tasks.gen_teacher_student(Rng(0), 4, 3, 1, 1.0, 1.0, 10, noise_std=-1)
        with pytest.raises(DimensionError):
            tasks.gen_teacher_student(Rng(0), 4, 3, 1, 1.0, 1.0, 10, w_base=np.ones((3, 4)))


class TestBlobs:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(2, 7), st.integers(10, 300))
    def test_balanced(self, seed, classes, samples):
        data = tasks.gen_gaussian_blobs(Rng(seed), 3, classes, samples)
        counts = np.bincount(np.concatenate([data.y_train, data.y_val]), minlength=classes)
        assert np.all(np.abs(counts - samples / classes) <= 1)

    def test_deterministic(self):
        a = tasks.gen_gaussian_blobs(Rng(4), 5, 3, 90)
        b = tasks.gen_gaussian_blobs(Rng(4), 5, 3, 90)
        assert a.x_train.tobytes() == b.x_train.tobytes()
        assert a.y_val.tobytes() == b.y_val.tobytes()
        assert a.is_classification

    def test_least_squares_probe_separates_two_classes(self):
        data = tasks.gen_gaussian_blobs(Rng(0), 8, 2, 1000, radius=5.0, std=1.0)
        x = np.hstack([data.x_train, np.ones((data.n_train, 1))])
        onehot = np.eye(2)[data.y_train]
        w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
        acc = np.mean(np.argmax(x @ w, axis=1) == data.y_train)
        assert acc >= 0.99

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            tasks.gen_gaussian_blobs(Rng(0), 4, 1, 10)


class TestLosses:
    def test_mse_perfect(self):
        y = np.arange(6.0).reshape(2, 3)
        loss, grad = tasks.mse(y.copy(), y)
        assert loss == 0.0 and not grad.any()

    def test_mse_value(self):
        loss, grad = tasks.mse(np.array([[1.0, 3.0]]), np.array([[0.0, 0.0]]))
        assert loss == 5.0
        np.testing.assert_array_equal(grad, [[1.0, 3.0]])

    @pytest.mark.parametrize("k", [2, 3, 10])
    def test_uniform_cross_entropy(self, k):
        loss, _ = tasks.cross_entropy(np.full((4, k), 1.7), np.arange(4) % k)
        assert loss == pytest.approx(math.log(k), rel=1e-14)

    def test_cross_entropy_stable_for_large_logits(self):
        loss, grad = tasks.cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(grad).all()

    def test_shape_checks(self):
        with pytest.raises(DimensionError):
            tasks.mse(np.ones((2, 3)), np.ones((3, 2)))
        with pytest.raises(DimensionError):
            tasks.cross_entropy(np.ones((2, 3)), np.zeros(3, dtype=int))


class TestModel:
    def test_perfect_fit_gives_zero_gradients(self):
        model = tasks.build_model("map", Rng(0), [4, 3], 1)
        x = linalg.gaussian_init(Rng(1), 5, 4, 1.0)
        loss, grads = model.loss_and_grad(x, model.predict(x))
        assert loss == 0.0
        assert all(not g.any() for g in grads.values())

    @pytest.mark.parametrize("kind", list(ad.Kind), ids=lambda k: k.value)
    @pytest.mark.parametrize("loss", ["mse", "xent"])
    def test_mlp_matches_finite_differences(self, kind, loss):
        rng = Rng(11)
        model = tasks.build_model(kind, rng, [6, 5, 3], 2, loss=loss)
        for layer in model.layers:
            randomize_point(layer, rng)
        x = linalg.gaussian_init(rng, 4, 6, 1.0)
        y = np.array([0, 2, 1, 2]) if loss == "xent" else linalg.gaussian_init(rng, 4, 3, 1.0)
        report = check_model(model, x, y)
        assert len(report) == len(model.params())
        assert max(report.values()) < 1e-5, report

    def test_three_layer_composition(self):
        rng = Rng(12)
        model = tasks.build_model("dora", rng, [5, 4, 4, 2], 2, loss="xent")
        for layer in model.layers:
            randomize_point(layer, rng)
        x = linalg.gaussian_init(rng, 3, 5, 1.0)
        assert max(check_model(model, x, np.array([0, 1, 1])).values()) < 1e-5

    def test_shapes_must_chain(self):
        a = ad.init_adapter("lora", Rng(0), ad.FrozenBase.from_weight(np.ones((4, 3))), 1)
        b = ad.init_adapter("lora", Rng(0), ad.FrozenBase.from_weight(np.ones((4, 2))), 1)
        with pytest.raises(DimensionError):
            tasks.Model([a, b])
        with pytest.raises(DimensionError):
            tasks.loss_and_grad(tasks.Model([a]), (np.ones((2, 5)), np.ones((2, 3))))

    def test_param_names_and_counts(self):
        model = tasks.build_model("map", Rng(0), [6, 5, 3], 2)
        assert set(model.params()) == {f"{i}.{k}" for i in (0, 1) for k in ("a", "b", "alpha", "beta")}
        assert model.trainable_count() == ad.param_count("map", 6, 5, 2) + ad.param_count("map", 5, 3, 2)
        assert len(model.map_scalars()) == 2

    def test_rank_capped_per_layer(self):
        model = tasks.build_model("lora", Rng(0), [6, 5, 2], 4)
        assert [l.r for l in model.layers] == [4, 2]

    def test_evaluate_reports_accuracy(self):
        model = tasks.build_model("lora", Rng(0), [3, 2], 1, loss="xent")
        out = model.evaluate(np.eye(3), np.array([0, 1, 0]))
        assert set(out) == {"loss", "accuracy"}


@pytest.mark.parametrize("seed", range(3))
def test_convex_scalar_subproblem_recovers_planted_values(seed):
    data, t = tasks.gen_teacher_student(Rng(seed), 16, 12, 2, 3.7, -0.8, 512, noise_std=0.0)
    alpha, beta, _ = tasks.fit_planted_scalars(data, t)
    assert abs(alpha - t.a_star) <= 1e-6
    assert abs(beta - t.b_star) <= 1e-6
