"""Regularizer values, Fisher estimation, alignment, and nearest-mean rules."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from adacl.errors import (
    ConfigurationError,
    NumericFailureError,
    ShapeError,
    ValidationError,
)
from adacl.network import Layer, ModelState, expand_head, features, forward, init_model
from adacl.strategies import (
    FisherDiagonal,
    LossSpec,
    TeacherSnapshot,
    composite_loss,
    composite_loss_and_grads,
    cross_entropy,
    estimate_fisher,
    ewc_penalty,
    exemplar_means,
    kd_loss,
    nme_classify,
    nme_predict,
    snapshot_teacher,
    wa_align,
)


def one_weight_model(value):
    return ModelState(
        layers=[Layer(np.array([[float(value)]]), np.zeros(1))],
        activation="relu",
        class_labels=[0],
    )


def brute_force_kl(student, teacher, tau):
    """Independent KD oracle: softened distributions via direct exponentials."""
    total = 0.0
    for s_row, t_row in zip(student, teacher):
        p = np.exp(np.asarray(t_row) / tau)
        p = p / p.sum()
        q = np.exp(np.asarray(s_row) / tau)
        q = q / q.sum()
        total += float((p * (np.log(p) - np.log(q))).sum())
    return total / len(student)


class TestKdLoss:
    def test_identical_logits_give_zero(self):
        logits = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]])
        for tau in (1.0, 2.0, 5.0):
            assert kd_loss(logits, logits, tau, [0, 1, 2]) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value_reduces_to_tanh_half(self):
        """Student (2,0), teacher (0,2), tau 2: softened logits differ by 1,
        the distributions are mirror images, and the KL collapses to
        (p1-p0)*log(p1/p0) = tanh(1/2)."""
        value = kd_loss(np.array([[2.0, 0.0]]), np.array([[0.0, 2.0]]), 2.0, [0, 1])
        assert value == pytest.approx(np.tanh(0.5), abs=1e-12)

    def test_matches_brute_force_on_random_batches(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n, c = rng.integers(1, 6), rng.integers(2, 5)
            student = rng.normal(size=(n, c)) * 3
            teacher = rng.normal(size=(n, c)) * 3
            tau = float(rng.uniform(0.5, 4.0))
            got = kd_loss(student, teacher, tau, list(range(c)))
            assert got == pytest.approx(brute_force_kl(student, teacher, tau), abs=1e-10)
            assert got >= -1e-12

    def test_column_restriction(self):
        rng = np.random.default_rng(1)
        student_full = rng.normal(size=(4, 5))
        teacher_old = rng.normal(size=(4, 3))
        got = kd_loss(student_full, teacher_old, 2.0, [0, 1, 2])
        assert got == pytest.approx(brute_force_kl(student_full[:, :3], teacher_old, 2.0))

    def test_rejects_bad_shapes_and_temperature(self):
        with pytest.raises(ShapeError):
            kd_loss(np.zeros((2, 4)), np.zeros((2, 3)), 2.0, [0, 1])
        with pytest.raises(ConfigurationError):
            kd_loss(np.zeros((2, 2)), np.zeros((2, 2)), 0.0, [0, 1])
        with pytest.raises(ValidationError):
            kd_loss(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, [])


class TestEwc:
    def test_scalar_hand_case(self):
        """F=2, anchor=1, current=3: penalty = 2*(3-1)^2 = 8."""
        current = one_weight_model(3.0)
        snapshot = TeacherSnapshot(
            model=one_weight_model(1.0),
            fisher=FisherDiagonal([(np.array([[2.0]]), np.zeros(1))]),
        )
        assert ewc_penalty(current, snapshot) == pytest.approx(8.0, abs=1e-15)

    def test_zero_at_anchor(self):
        model = init_model([3, 4, 2], "tanh", seed=0)
        fisher = estimate_fisher(model, np.eye(3), np.array([0, 1, 0]))
        snap = snapshot_teacher(model, fisher)
        assert ewc_penalty(model, snap) == 0.0

    def test_new_head_rows_are_not_anchored(self):
        teacher = init_model([3, 4, 2], "tanh", seed=0)
        fisher = estimate_fisher(teacher, np.eye(3), np.array([0, 1, 0]))
        snap = snapshot_teacher(teacher, fisher)
        student = expand_head(teacher, [2, 3], seed=1)
        base = ewc_penalty(student, snap)
        student.layers[-1].weight[2:] += 5.0
        assert ewc_penalty(student, snap) == pytest.approx(base)
        student.layers[-1].weight[0, 0] += 1.0
        assert ewc_penalty(student, snap) > base

    def test_rejects_missing_fisher_and_bad_shapes(self):
        model = one_weight_model(1.0)
        with pytest.raises(ConfigurationError):
            ewc_penalty(model, TeacherSnapshot(model=one_weight_model(1.0)))
        other = init_model([2, 2], "relu", seed=0)
        fisher = FisherDiagonal([(np.zeros((2, 2)), np.zeros(2))])
        with pytest.raises((ShapeError, ValidationError)):
            ewc_penalty(model, TeacherSnapshot(model=other, fisher=fisher))


class TestEstimateFisher:
    def test_hand_case_linear_softmax(self):
        """Zero-weight 2-class logistic on x=(1,2), y=0: per-class gradient
        rows are +-0.5*x, so the squared gradient is 0.25*x^2 everywhere."""
        model = ModelState(
            layers=[Layer(np.zeros((2, 2)), np.zeros(2))],
            activation="relu",
            class_labels=[0, 1],
        )
        fisher = estimate_fisher(model, np.array([[1.0, 2.0]]), np.array([0]))
        fw, fb = fisher.diagonals[0]
        assert_allclose(fw, [[0.25, 1.0], [0.25, 1.0]], atol=1e-15)
        assert_allclose(fb, [0.25, 0.25], atol=1e-15)

    def test_matches_per_example_loop(self):
        """Vectorized estimate equals the naive mean of squared per-example grads."""
        from adacl.network import backprop
        from adacl.network import softmax as sm

        model = init_model([3, 5, 3], "tanh", seed=4)
        rng = np.random.default_rng(2)
        X = rng.normal(size=(7, 3))
        y = rng.integers(0, 3, size=7)
        fisher = estimate_fisher(model, X, y)

        sums = [
            (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers
        ]
        for i in range(len(X)):
            logits = forward(model, X[i : i + 1])
            g = sm(logits)
            g[0, y[i]] -= 1.0
            grads = backprop(model, X[i : i + 1], g)
            for (sw, sb), (gw, gb) in zip(sums, grads):
                sw += gw**2
                sb += gb**2
        for (fw, fb), (sw, sb) in zip(fisher.diagonals, sums):
            assert_allclose(fw, sw / len(X), atol=1e-12)
            assert_allclose(fb, sb / len(X), atol=1e-12)

    def test_order_invariance_is_exact(self):
        model = init_model([4, 6, 3], "relu", seed=1)
        rng = np.random.default_rng(3)
        X = rng.normal(size=(20, 4))
        y = rng.integers(0, 3, size=20)
        perm = rng.permutation(20)
        a = estimate_fisher(model, X, y)
        b = estimate_fisher(model, X[perm], y[perm])
        for (aw, ab), (bw, bb) in zip(a.diagonals, b.diagonals):
            assert_array_equal(aw, bw)
            assert_array_equal(ab, bb)

    def test_subsample_is_order_invariant(self):
        model = init_model([4, 6, 3], "relu", seed=1)
        rng = np.random.default_rng(4)
        X = rng.normal(size=(30, 4))
        y = rng.integers(0, 3, size=30)
        perm = rng.permutation(30)
        a = estimate_fisher(model, X, y, sample_count=10)
        b = estimate_fisher(model, X[perm], y[perm], sample_count=10)
        for (aw, _), (bw, _) in zip(a.diagonals, b.diagonals):
            assert_array_equal(aw, bw)

    def test_duplication_leaves_estimate_unchanged(self):
        model = init_model([3, 4, 2], "tanh", seed=2)
        rng = np.random.default_rng(5)
        X = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, size=8)
        a = estimate_fisher(model, X, y)
        b = estimate_fisher(model, np.vstack([X, X]), np.concatenate([y, y]))
        for (aw, ab), (bw, bb) in zip(a.diagonals, b.diagonals):
            assert_allclose(aw, bw, atol=1e-12)
            assert_allclose(ab, bb, atol=1e-12)

    def test_confident_correct_model_has_tiny_fisher(self):
        model = ModelState(
            layers=[Layer(50.0 * np.eye(2), np.zeros(2))],
            activation="relu",
            class_labels=[0, 1],
        )
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        fisher = estimate_fisher(model, X, np.array([0, 1]))
        assert fisher.diagonals[0][0].max() < 1e-20


class TestCompositeLoss:
    def setup_models(self):
        teacher = init_model([3, 6, 2], "tanh", seed=0)
        student = expand_head(teacher, [2, 3], seed=1)
        rng = np.random.default_rng(6)
        X = rng.normal(size=(10, 3))
        y = rng.integers(0, 4, size=10)
        return teacher, student, X, y

    def test_none_equals_cross_entropy(self):
        _, student, X, y = self.setup_models()
        assert composite_loss(student, X, y, LossSpec()) == pytest.approx(
            cross_entropy(student, X, y), abs=1e-15
        )

    def test_zero_weight_matches_plain_loss(self):
        teacher, student, X, y = self.setup_models()
        snap = snapshot_teacher(teacher)
        spec = LossSpec(strategy="lwf", reg_weight=0.0, snapshot=snap)
        assert composite_loss(student, X, y, spec) == pytest.approx(
            composite_loss(student, X, y, LossSpec()), abs=1e-15
        )

    def test_weight_scales_linearly(self):
        teacher, student, X, y = self.setup_models()
        snap = snapshot_teacher(teacher)
        base = composite_loss(student, X, y, LossSpec())
        for strategy, s in (("lwf", snap), ("ewc", snapshot_teacher(
            teacher, estimate_fisher(teacher, X, np.clip(y, 0, 1))
        ))):
            l1 = composite_loss(student, X, y, LossSpec(strategy, 1.0, s))
            l2 = composite_loss(student, X, y, LossSpec(strategy, 2.0, s))
            assert l2 - base == pytest.approx(2.0 * (l1 - base), rel=1e-10)

    def test_kd_term_matches_kd_loss(self):
        teacher, student, X, y = self.setup_models()
        snap = snapshot_teacher(teacher)
        spec = LossSpec(strategy="icarl", reg_weight=3.0, snapshot=snap)
        expected = cross_entropy(student, X, y) + 3.0 * kd_loss(
            forward(student, X), forward(teacher, X), spec.temperature, [0, 1]
        )
        assert composite_loss(student, X, y, spec) == pytest.approx(expected, abs=1e-12)

    def test_missing_snapshot_is_a_configuration_error(self):
        _, student, X, y = self.setup_models()
        for strategy in ("lwf", "icarl", "wa", "ewc"):
            with pytest.raises(ConfigurationError):
                composite_loss(student, X, y, LossSpec(strategy, 1.0, None))

    def test_unknown_labels_rejected(self):
        _, student, X, y = self.setup_models()
        with pytest.raises(ValidationError):
            composite_loss(student, X, np.full_like(y, 99), LossSpec())


class TestWaAlign:
    def test_hand_case_halves_new_row(self):
        model = ModelState(
            layers=[Layer(np.array([[2.0, 0.0], [0.0, 4.0]]), np.array([0.3, -0.3]))],
            activation="relu",
            class_labels=[0, 1],
        )
        aligned = wa_align(model, [0], [1])
        assert_allclose(aligned.layers[-1].weight, [[2.0, 0.0], [0.0, 2.0]], atol=1e-15)
        assert_array_equal(aligned.layers[-1].bias, model.layers[-1].bias)
        assert_array_equal(aligned.layers[-1].weight[0], model.layers[-1].weight[0])

    def test_means_match_after_alignment(self):
        model = init_model([4, 6, 5], "relu", seed=7)
        aligned = wa_align(model, [0, 1, 2], [3, 4])
        head = aligned.layers[-1].weight
        old_mean = np.linalg.norm(head[:3], axis=1).mean()
        new_mean = np.linalg.norm(head[3:], axis=1).mean()
        assert new_mean == pytest.approx(old_mean, rel=1e-12)

    def test_only_new_rows_change(self):
        model = init_model([4, 6, 5], "tanh", seed=8)
        aligned = wa_align(model, [0, 1], [2, 3, 4])
        assert_array_equal(aligned.layers[0].weight, model.layers[0].weight)
        assert_array_equal(aligned.layers[-1].weight[:2], model.layers[-1].weight[:2])

    def test_degenerate_new_rows_raise(self):
        model = ModelState(
            layers=[Layer(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2))],
            activation="relu",
            class_labels=[0, 1],
        )
        with pytest.raises(NumericFailureError):
            wa_align(model, [0], [1])

    def test_rejects_overlap_and_range(self):
        model = init_model([3, 4, 3], "relu", seed=0)
        with pytest.raises(ValidationError):
            wa_align(model, [0, 1], [1, 2])
        with pytest.raises(ShapeError):
            wa_align(model, [0], [5])


class TestNme:
    def test_trivial_query(self):
        means = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 1.0])}
        assert nme_classify(np.array([0.9, 0.1]), means) == 0

    def test_tie_breaks_to_lowest_label(self):
        means = {5: np.array([0.0, 1.0]), 3: np.array([1.0, 0.0])}
        assert nme_classify(np.array([1.0, 1.0]), means) == 3

    def test_predict_matches_brute_force(self):
        model = init_model([3, 5, 2], "tanh", seed=9)
        rng = np.random.default_rng(7)
        means = {
            lbl: (lambda v: v / np.linalg.norm(v))(rng.normal(size=5))
            for lbl in (0, 1, 4)
        }
        X = rng.normal(size=(12, 3))
        got = nme_predict(model, X, means)
        feats = features(model, X)
        for i in range(len(X)):
            f = feats[i] / np.linalg.norm(feats[i])
            best = min(sorted(means), key=lambda l: float(np.linalg.norm(f - means[l])))
            assert got[i] == best

    def test_exemplar_means_single_exemplar(self):
        """With one exemplar per class the mean is its normalized feature."""
        model = init_model([3, 4, 2], "tanh", seed=10)
        rows = {0: np.array([[1.0, 2.0, 3.0]]), 1: np.array([[-1.0, 0.5, 0.0]])}
        means = exemplar_means(model, rows)
        for lbl, x in rows.items():
            f = features(model, x)[0]
            assert_allclose(means[lbl], f / np.linalg.norm(f), atol=1e-12)

    def test_nme_single_exemplar_equal_to_query_is_perfect(self):
        """Each query's normalized feature is exactly its class mean."""
        from adacl.training import evaluate_accuracy

        model = init_model([4, 6, 3], "tanh", seed=11)
        rng = np.random.default_rng(8)
        X = rng.normal(size=(3, 4))
        y = np.array([0, 1, 2])
        means = exemplar_means(model, {i: X[i : i + 1] for i in range(3)})
        acc = evaluate_accuracy(model, X, y, mode="nme", class_means=means)
        assert acc == 100.0
