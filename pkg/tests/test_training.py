import numpy as np
import pytest

from placerec import (
    GeoTag,
    SgdConfig,
    SyntheticPlaceSpec,
    encode,
    encode_batch,
    finite_difference_gradients,
    generate_synthetic_dataset,
    gradient_check,
    init_normal,
    mine_tuples,
    sample_feature_pool,
    train,
    triplet_loss,
    tuple_forward_backward,
    tuple_loss,
)
from placerec.training import split_views_for_eval, tuple_loss_forward

from conftest import random_feature_set, random_model
from oracles import tuple_loss_reference


class TestTripletLoss:
    def test_equal_distances(self):
        assert triplet_loss(0.4, 0.4, 0.1) == pytest.approx(0.1)

    def test_hinge_inactive(self):
        assert triplet_loss(0.25, 0.5, 0.125) == 0.0
        assert triplet_loss(0.25, 0.375, 0.125) == 0.0

    def test_direct_substitution(self):
        assert triplet_loss(0.5, 0.3, 0.1) == pytest.approx(0.3)


class TestTupleLoss:
    def test_identical_negatives(self, rng):
        q, p = rng.normal(size=4), rng.normal(size=4)
        n = rng.normal(size=4)
        negs = np.stack([n, n, n])
        single = triplet_loss(
            float(np.sum((q - p) ** 2)), float(np.sum((q - n) ** 2)), 0.1
        )
        assert tuple_loss(q, p, negs, 0.1) == pytest.approx(single)

    def test_mean_of_two(self):
        # one active triplet with loss 0.2, one inactive: mean is 0.1
        q = np.array([0.0, 0.0])
        p = np.array([0.5, 0.0])  # dq_p = 0.25
        near = np.array([0.25, 0.0])  # dq_n = 0.0625 -> loss 0.25-0.0625+0.0125=0.2
        far = np.array([2.0, 0.0])  # dq_n = 4 -> inactive
        assert tuple_loss(q, p, np.stack([near, far]), 0.0125) == pytest.approx(0.1)

    def test_random_matches_reference(self, rng):
        for _ in range(20):
            q, p = rng.normal(size=5), rng.normal(size=5)
            negs = rng.normal(size=(int(rng.integers(1, 6)), 5))
            expected = tuple_loss_reference(q, p, list(negs), 0.1)
            assert tuple_loss(q, p, negs, 0.1) == pytest.approx(expected, abs=1e-12)


class TestMining:
    def config(self, **kwargs):
        defaults = dict(n_neg=2, rng_seed=0)
        defaults.update(kwargs)
        return SgdConfig(**defaults)

    def test_single_positive_forced(self, rng):
        ids = ["a", "b", "c"]
        descriptors = rng.normal(size=(3, 4))
        tags = [GeoTag(0, 0), GeoTag(5, 0), GeoTag(100, 0)]
        tuples, skipped = mine_tuples(ids, descriptors, tags, self.config(n_neg=1))
        by_query = {t.query_id: t for t in tuples}
        assert by_query["a"].positive_id == "b"
        assert by_query["a"].negative_ids == ("c",)

    def test_tie_broken_by_id(self):
        ids = ["q", "z", "y", "x"]
        descriptors = np.zeros((4, 3))  # all equidistant
        tags = [GeoTag(0, 0), GeoTag(1, 0), GeoTag(100, 0), GeoTag(200, 0)]
        tuples, _ = mine_tuples(ids, descriptors, tags, self.config(n_neg=2))
        tup = next(t for t in tuples if t.query_id == "q")
        assert tup.negative_ids == ("x", "y")

    def test_skipped_queries_counted(self, rng):
        ids = ["a", "b"]
        descriptors = rng.normal(size=(2, 4))
        tags = [GeoTag(0, 0), GeoTag(500, 0)]  # nobody has a positive
        tuples, skipped = mine_tuples(ids, descriptors, tags, self.config())
        assert tuples == []
        assert skipped == 2

    def test_hardest_negatives_match_full_sort(self, rng):
        m = 30
        ids = [f"i{k:02d}" for k in range(m)]
        descriptors = rng.normal(size=(m, 6))
        tags = [GeoTag(0, 0), GeoTag(3, 0)] + [
            GeoTag(100.0 + 10 * k, 0.0) for k in range(m - 2)
        ]
        config = self.config(n_neg=5)
        tuples, _ = mine_tuples(ids, descriptors, tags, config)
        tup = next(t for t in tuples if t.query_id == "i00")
        # oracle: full sort over definite negatives by (distance, id)
        dists = np.linalg.norm(descriptors - descriptors[0], axis=1)
        candidates = [
            (float(dists[k]), ids[k]) for k in range(m) if tags[k].distance_to(tags[0]) > 25.0
        ]
        expected = tuple(image_id for _, image_id in sorted(candidates)[:5])
        assert tup.negative_ids == expected

    def test_positive_beyond_radius_not_used(self, rng):
        ids = ["a", "b", "c"]
        descriptors = rng.normal(size=(3, 4))
        tags = [GeoTag(0, 0), GeoTag(11, 0), GeoTag(100, 0)]  # b outside 10 m
        tuples, skipped = mine_tuples(ids, descriptors, tags, self.config(n_neg=1))
        assert all(t.query_id != "a" for t in tuples)
        assert skipped >= 1


class TestBackward:
    def test_inactive_hinge_zero_gradients(self, rng):
        model = random_model(rng, clusters=3, shadows=1, depth=6, perturb=0.1)
        query = random_feature_set(rng, depth=6, image_id="q")
        # positive identical to the query, negative far: hinge inactive iff
        # 0 - dq_n + margin <= 0
        negative = random_feature_set(rng, depth=6, image_id="n")
        f_q = encode(query, model).values
        f_n = encode(negative, model).values
        assert np.sum((f_q - f_n) ** 2) > 0.1
        loss, grads = tuple_forward_backward(query, query, [negative], model, margin=0.1)
        assert loss == 0.0
        for g in grads:
            np.testing.assert_array_equal(g, 0.0)

    def test_matches_finite_differences_small_instance(self, rng):
        model = random_model(rng, clusters=4, shadows=2, depth=8, scale=5.0, perturb=0.2)
        query = random_feature_set(rng, grid=6, depth=8, image_id="q")
        positive = random_feature_set(rng, grid=6, depth=8, image_id="p")
        negatives = [random_feature_set(rng, grid=6, depth=8, image_id=f"n{i}") for i in range(2)]
        loss, analytic = tuple_forward_backward(query, positive, negatives, model, 0.1)
        assert loss > 0  # this seed has an active hinge
        assert any(np.any(g) for g in analytic)  # active hinge => nonzero gradient
        numeric = finite_difference_gradients(query, positive, negatives, model, 0.1)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
            assert np.max(np.abs(a - n) / denom) < 1e-5

    def test_bias_translation_direction_is_flat(self, rng):
        # shifting every bias by the same constant changes no softmax, so the
        # directional derivative along the all-ones bias direction is zero
        model = random_model(rng, clusters=4, shadows=2, depth=6, perturb=0.3)
        query = random_feature_set(rng, depth=6, image_id="q")
        positive = random_feature_set(rng, depth=6, image_id="p")
        negatives = [random_feature_set(rng, depth=6, image_id="n")]
        loss, grads = tuple_forward_backward(query, positive, negatives, model, 0.1)
        assert loss > 0
        assert abs(float(grads.biases.sum())) < 1e-8

    def test_gradient_check_report(self):
        report = gradient_check(seed=3, trials=3)
        assert report.passed
        assert report.max_rel_error < 1e-5

    def test_loss_decreases_along_gradient(self, rng):
        # plain gradient step with a tiny rate cannot increase the loss
        model = random_model(rng, clusters=3, shadows=2, depth=6, perturb=0.3)
        query = random_feature_set(rng, depth=6, image_id="q")
        positive = random_feature_set(rng, depth=6, image_id="p")
        negatives = [random_feature_set(rng, depth=6, image_id="n")]
        before, grads = tuple_forward_backward(query, positive, negatives, model, 0.1)
        assert before > 0
        lr = 1e-6
        stepped = model.with_parameters(
            model.affine_weights - lr * grads.weights,
            model.affine_biases - lr * grads.biases,
            model.residual_centroids - lr * grads.residuals,
        )
        after = tuple_loss_forward(query, positive, negatives, stepped, 0.1)
        assert after <= before + 1e-12


def tiny_dataset(seed=5):
    spec = SyntheticPlaceSpec(
        num_places=12, views_per_place=4, depth=8, height=4, width=4,
        informative_fraction=0.3, clutter_noise_scale=0.04,
        view_noise_scale=0.12, rng_seed=seed,
    )
    sets, tags = generate_synthetic_dataset(spec)
    train_sets, train_tags = sets[: 9 * 4], tags[: 9 * 4]
    val_sets, val_tags = sets[9 * 4 :], tags[9 * 4 :]
    return train_sets, train_tags, val_sets, val_tags


class TestTrain:
    def make_model(self, train_sets, seed=5, k=4, s=2):
        pool, _ = sample_feature_pool(train_sets, seed=seed)
        return init_normal(pool, k=k, s=s, seed=seed)

    def test_zero_learning_rate_keeps_parameters(self):
        train_sets, train_tags, val_sets, val_tags = tiny_dataset()
        model = self.make_model(train_sets)
        # learning_rate must be positive per config; approximate zero instead
        config = SgdConfig(learning_rate=1e-300, epochs=1, n_neg=2, rng_seed=1)
        result = train(train_sets, train_tags, val_sets, val_tags, model, config)
        np.testing.assert_array_equal(result.model.affine_weights, model.affine_weights)
        np.testing.assert_array_equal(result.model.affine_biases, model.affine_biases)
        np.testing.assert_array_equal(
            result.model.residual_centroids, model.residual_centroids
        )

    def test_recall_not_below_init(self):
        train_sets, train_tags, val_sets, val_tags = tiny_dataset()
        model = self.make_model(train_sets)
        config = SgdConfig(epochs=3, n_neg=3, rng_seed=1)
        result = train(train_sets, train_tags, val_sets, val_tags, model, config)
        assert result.best_val_recall1 >= result.history[0].val_recall1

    def test_deterministic_trajectories(self):
        train_sets, train_tags, val_sets, val_tags = tiny_dataset()
        model = self.make_model(train_sets)
        config = SgdConfig(epochs=2, n_neg=2, rng_seed=9)
        a = train(train_sets, train_tags, val_sets, val_tags, model, config)
        b = train(train_sets, train_tags, val_sets, val_tags, model, config)
        assert len(a.history) == len(b.history)
        for ha, hb in zip(a.history, b.history):
            assert (ha.epoch, ha.val_recall1, ha.learning_rate) == (
                hb.epoch, hb.val_recall1, hb.learning_rate
            )
            assert ha.mean_loss == hb.mean_loss or (
                np.isnan(ha.mean_loss) and np.isnan(hb.mean_loss)
            )
        np.testing.assert_array_equal(a.model.affine_weights, b.model.affine_weights)

    def test_history_and_lr_schedule(self):
        train_sets, train_tags, val_sets, val_tags = tiny_dataset()
        model = self.make_model(train_sets, k=3, s=0)
        config = SgdConfig(epochs=7, lr_halving_period=2, n_neg=2, rng_seed=2,
                           early_stop_patience=100)
        result = train(train_sets, train_tags, val_sets, val_tags, model, config)
        lrs = [h.learning_rate for h in result.history[1:]]
        assert lrs == [0.01, 0.01, 0.005, 0.005, 0.0025, 0.0025, 0.00125]

    def test_training_never_mutates_features(self):
        train_sets, train_tags, val_sets, val_tags = tiny_dataset()
        before = [fs.features.copy() for fs in train_sets]
        model = self.make_model(train_sets)
        config = SgdConfig(epochs=1, n_neg=2, rng_seed=3)
        train(train_sets, train_tags, val_sets, val_tags, model, config)
        for fs, snapshot in zip(train_sets, before):
            np.testing.assert_array_equal(fs.features, snapshot)


class TestOptimizerState:
    def test_round_trip(self, tmp_path):
        from placerec import Gradients, load_optimizer_state, save_optimizer_state

        rng = np.random.default_rng(8)
        state = Gradients(
            weights=rng.normal(size=(3, 3, 5)),
            biases=rng.normal(size=(3, 3)),
            residuals=rng.normal(size=(3, 5)),
        )
        path = tmp_path / "m.srlm.opt"
        save_optimizer_state(path, state)
        back = load_optimizer_state(path)
        for a, b in zip(state, back):
            np.testing.assert_array_equal(a, b)

    def test_train_returns_final_buffers(self):
        train_sets, train_tags, val_sets, val_tags = tiny_dataset()
        pool, _ = sample_feature_pool(train_sets, seed=5)
        model = init_normal(pool, k=4, s=2, seed=5)
        config = SgdConfig(epochs=1, n_neg=2, rng_seed=1)
        result = train(train_sets, train_tags, val_sets, val_tags, model, config)
        assert result.optimizer_state is not None
        assert result.optimizer_state.weights.shape == model.affine_weights.shape
        assert any(np.any(g) for g in result.optimizer_state)


class TestSplitViewsForEval:
    def test_half_views_become_queries(self):
        _, _, val_sets, val_tags = tiny_dataset()
        db, queries = split_views_for_eval(val_sets, val_tags)
        assert len(db) + len(queries) == len(val_sets)
        assert len(queries) == 3 * 2  # 3 places, 4 views each, half query
        assert not set(db) & set(queries)
