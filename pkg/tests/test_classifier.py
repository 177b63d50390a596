import numpy as np
import pytest

from spinn import classifier, encoder, oracles, ops
from spinn import transitions as tr
from spinn.classifier import ClassifierConfig, LossWeights, PairBatch
from spinn.encoder import EncoderConfig


class TestPairFeatures:
    def test_identical_inputs(self):
        v = np.array([1.0, -2.0, 0.5])
        feats, _ = classifier.pair_features(v, v)
        assert np.array_equal(feats[0], np.concatenate([v, v, np.zeros(3), v * v]))

    def test_zero_premise(self):
        h = np.array([2.0, 3.0])
        feats, _ = classifier.pair_features(np.zeros(2), h)
        assert np.array_equal(feats[0], np.concatenate([np.zeros(2), h, -h, np.zeros(2)]))

    def test_matches_direct_formula(self):
        rng = ops.make_rng(0)
        hp, hh = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        feats, _ = classifier.pair_features(hp, hh)
        expected = np.concatenate([hp, hh, hp - hh, hp * hh], axis=1)
        assert np.array_equal(feats, expected)

    def test_width_mismatch(self):
        with pytest.raises(ops.ShapeError):
            classifier.pair_features(np.zeros(3), np.zeros(4))

    def test_backward_matches_finite_differences(self):
        rng = ops.make_rng(1)
        hp, hh = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
        up = rng.standard_normal((2, 16))

        def loss():
            feats, _ = classifier.pair_features(hp, hh)
            return float(np.sum(feats * up))

        feats, cache = classifier.pair_features(hp, hh)
        d_hp, d_hh = classifier.pair_features_backward(cache, up)
        for arr, grad in ((hp, d_hp), (hh, d_hh)):
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-6
                fp = loss()
                flat[i] = orig - 1e-6
                fm = loss()
                flat[i] = orig
                nflat[i] = (fp - fm) / 2e-6
            assert np.max(np.abs(numeric - grad)) < 1e-8


def head_setup(dim=4, layers=2, mlp_dim=8, seed=0):
    config = ClassifierConfig(mlp_layers=layers, mlp_dim=mlp_dim)
    store = ops.ParamStore()
    stats = {}
    classifier.init_classifier_params(dim, config, ops.make_rng(seed), store, stats)
    return config, store, stats


class TestClassify:
    def test_zero_params_uniform(self):
        config, store, stats = head_setup()
        for name in store.names():
            store.value(name)[...] = 0.0
        _, probs, _ = classifier.classify(np.ones((3, 16)), store, stats, config)
        assert np.allclose(probs, 1.0 / 3.0, atol=1e-12)

    def test_distribution_sums_to_one(self):
        config, store, stats = head_setup(seed=2)
        x = ops.make_rng(3).standard_normal((10, 16))
        _, probs, _ = classifier.classify(x, store, stats, config)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) <= 1e-12

    def test_two_layer_matches_hand_forward(self):
        config, store, stats = head_setup(dim=1, layers=2, mlp_dim=3, seed=4)
        x = ops.make_rng(5).standard_normal((2, 4))
        logits, probs, _ = classifier.classify(x, store, stats, config)

        def bn(v, g, b, m, var):
            return g * (v - m) / np.sqrt(var + 1e-5) + b

        y = x
        for i in range(2):
            y = bn(y, store.value(f"cls.bn{i}.gamma"), store.value(f"cls.bn{i}.beta"),
                   stats[f"cls.bn{i}.mean"], stats[f"cls.bn{i}.var"])
            y = np.maximum(y @ store.value(f"cls.{i}.W") + store.value(f"cls.{i}.b"), 0)
        y = bn(y, store.value("cls.bn_out.gamma"), store.value("cls.bn_out.beta"),
               stats["cls.bn_out.mean"], stats["cls.bn_out.var"])
        expected = y @ store.value("cls.out.W") + store.value("cls.out.b")
        assert np.allclose(logits, expected, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        config, store, stats = head_setup(dim=2, layers=1, mlp_dim=5, seed=6)
        rng = ops.make_rng(7)
        x = rng.standard_normal((3, 8))
        up = rng.standard_normal((3, 3))

        def loss():
            logits, _, _ = classifier.classify(x, store, stats, config)
            return float(np.sum(logits * up))

        logits, _, cache = classifier.classify(x, store, stats, config)
        store.zero_grads()
        d_x = classifier.classify_backward(cache, up, store, config)
        numeric = oracles.finite_diff_grad(loss, store, h=1e-5)
        analytic = {n: store.grad(n).copy() for n in store.names()}
        assert oracles.grad_mismatch(analytic, numeric, floor=1e-2) <= 1e-5
        num_x = np.zeros_like(x)
        flat, nflat = x.reshape(-1), num_x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = loss()
            flat[i] = orig - 1e-5
            fm = loss()
            flat[i] = orig
            nflat[i] = (fp - fm) / 2e-5
        assert np.max(np.abs(num_x - d_x)) < 1e-6


def toy_pair_batch(rng, enc_config, batch=3, n_target=4):
    def side():
        embeds = np.zeros((batch, n_target, encoder.GLOVE_DIM))
        mask = np.zeros((batch, n_target), bool)
        acts = []
        for lane in range(batch):
            n = 1 + int(rng.integers(n_target))
            tokens, a = tr.tree_to_transitions(tr.random_tree(n, rng))
            _, padded = tr.pad_and_crop(tokens, a, n_target)
            embeds[lane, :n] = rng.standard_normal((n, encoder.GLOVE_DIM)) * 0.1
            mask[lane, :n] = True
            acts.append(padded)
        return embeds, mask, np.stack(acts)

    ep, mp, ap = side()
    eh, mh, ah = side()
    labels = rng.integers(0, 3, size=batch)
    return PairBatch(ep, mp, ap, eh, mh, ah, labels)


def build_model(variant="full", dim=4, dt=3, layers=1, mlp_dim=6, seed=0):
    enc_config = EncoderConfig(variant=variant, dim=dim,
                               tracking_dim=dt if variant != "pi_nt" else None)
    cls_config = ClassifierConfig(mlp_layers=layers, mlp_dim=mlp_dim)
    store, stats = classifier.init_pair_model(enc_config, cls_config, ops.make_rng(seed))
    return enc_config, cls_config, store, stats


class TestTotalLoss:
    def test_uniform_predictions_give_ln3(self):
        enc_config, cls_config, store, stats = build_model(seed=1)
        for name in store.names():
            if name.startswith("cls."):
                store.value(name)[...] = 0.0
        rng = ops.make_rng(2)
        batch = toy_pair_batch(rng, enc_config)
        result = classifier.total_loss(batch, store, stats, enc_config, cls_config,
                                       LossWeights(), mode="eval", need_backward=False)
        assert abs(result.label_loss - np.log(3.0)) <= 1e-12

    def test_perfect_predictions_zero_loss(self):
        # drive the logits by hand through the xent path
        labels = np.array([0, 1, 2])
        hot = np.full((3, 3), -1e3)
        hot[np.arange(3), labels] = 1e3
        loss, _, _ = ops.softmax_xent(hot, labels)
        assert loss <= 1e-12

    def test_label_validation(self):
        enc_config, cls_config, store, stats = build_model(seed=3)
        batch = toy_pair_batch(ops.make_rng(4), enc_config)
        batch.labels[0] = 7
        with pytest.raises(ValueError):
            classifier.total_loss(batch, store, stats, enc_config, cls_config,
                                  LossWeights(), mode="eval", need_backward=False)

    def test_total_is_hand_sum_of_parts(self):
        enc_config, cls_config, store, stats = build_model(seed=5)
        batch = toy_pair_batch(ops.make_rng(6), enc_config)
        weights = LossWeights(alpha=3.9, l2=1e-4)
        result = classifier.total_loss(batch, store, stats, enc_config, cls_config,
                                       weights, mode="eval", need_backward=False)
        assert result.l2_loss == pytest.approx(1e-4 * store.l2_norm_sq(), rel=1e-12)
        assert result.total == pytest.approx(
            result.label_loss + 3.9 * result.transition_loss + result.l2_loss,
            rel=1e-12)
        assert result.n_supervised > 0

    def test_alpha_zero_keeps_head_gradient_zero(self):
        enc_config, cls_config, store, stats = build_model(seed=7)
        batch = toy_pair_batch(ops.make_rng(8), enc_config)
        store.zero_grads()
        classifier.total_loss(batch, store, stats, enc_config, cls_config,
                              LossWeights(alpha=0.0), mode="eval", need_backward=True)
        assert np.all(store.grad("trans.W") == 0.0)
        assert np.all(store.grad("trans.b") == 0.0)

    def test_pad_steps_excluded_from_supervision(self):
        logits = np.zeros((1, 5, 2))
        gold = np.array([[tr.PAD, tr.PAD, tr.SHIFT, tr.SHIFT, tr.REDUCE]], np.int8)
        loss, d_logits, acc, n = classifier.supervised_transition_stats(logits, gold)
        assert n == 3
        assert np.all(d_logits[0, :2] == 0.0)
        assert loss == pytest.approx(np.log(2.0))

    def test_l2_gradient(self):
        enc_config, cls_config, store, stats = build_model(seed=9)
        batch = toy_pair_batch(ops.make_rng(10), enc_config)
        lam = 1e-3
        store.zero_grads()
        classifier.total_loss(batch, store, stats, enc_config, cls_config,
                              LossWeights(l2=lam), mode="eval", need_backward=True)
        with_l2 = store.grad("comp.W").copy()
        store.zero_grads()
        classifier.total_loss(batch, store, stats, enc_config, cls_config,
                              LossWeights(l2=0.0), mode="eval", need_backward=True)
        without = store.grad("comp.W").copy()
        assert np.allclose(with_l2 - without, 2 * lam * store.value("comp.W"),
                           atol=1e-12)

    @pytest.mark.parametrize("variant,dt,alpha", [("pi_nt", 0, 0.0),
                                                  ("pi", 3, 0.0),
                                                  ("full", 3, 1.7)])
    def test_objective_gradients_vs_finite_differences(self, variant, dt, alpha):
        enc_config, cls_config, store, stats = build_model(
            variant=variant, dim=4, dt=dt, layers=1, mlp_dim=5, seed=11)
        batch = toy_pair_batch(ops.make_rng(12), enc_config, batch=2, n_target=3)
        weights = LossWeights(alpha=alpha, l2=1e-4)

        def loss():
            return classifier.total_loss(batch, store, stats, enc_config,
                                         cls_config, weights, mode="eval",
                                         need_backward=False).total

        store.zero_grads()
        classifier.total_loss(batch, store, stats, enc_config, cls_config,
                              weights, mode="eval", need_backward=True)
        analytic = {n: store.grad(n).copy() for n in store.names()}
        numeric = oracles.finite_diff_grad(loss, store, h=1e-4)
        err = oracles.grad_mismatch(analytic, numeric, floor=1e-2)
        assert err <= 1e-4, f"worst relative error {err} ({variant})"

    def test_free_running_accuracy(self):
        gold = np.array([[tr.PAD, tr.SHIFT, tr.SHIFT, tr.REDUCE]], np.int8)
        executed = np.array([[tr.SHIFT, tr.SHIFT, tr.REDUCE, tr.REDUCE]], np.int8)
        acc = classifier.free_running_transition_accuracy(executed, gold)
        assert acc == pytest.approx(2.0 / 3.0)
