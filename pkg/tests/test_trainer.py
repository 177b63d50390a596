import numpy as np
import pytest

from spinn import data, ops, toydata, trainer
from spinn.trainer import TrainConfig


class TestRmsprop:
    def test_zero_gradient_leaves_params(self):
        store = ops.ParamStore()
        store.add("w", np.array([[1.0, -2.0]]))
        trainer.rmsprop_step(store, lr=0.1)
        assert np.array_equal(store.value("w"), [[1.0, -2.0]])

    def test_two_steps_match_hand_calculation(self):
        store = ops.ParamStore()
        store.add("w", np.array([[0.0]]))
        lr, rho, eps = 0.5, 0.9, 1e-6
        # step 1: rms = 0.1; theta -= lr / sqrt(0.1 + eps)
        store.accumulate("w", np.array([[1.0]]))
        trainer.rmsprop_step(store, lr, rho, eps)
        rms1 = 0.1
        theta1 = -lr * 1.0 / np.sqrt(rms1 + eps)
        assert store.value("w")[0, 0] == pytest.approx(theta1, rel=1e-12)
        # step 2: rms = 0.9*0.1 + 0.1 = 0.19
        store.accumulate("w", np.array([[1.0]]))
        trainer.rmsprop_step(store, lr, rho, eps)
        rms2 = rho * rms1 + (1 - rho)
        theta2 = theta1 - lr / np.sqrt(rms2 + eps)
        assert store.value("w")[0, 0] == pytest.approx(theta2, rel=1e-12)
        assert np.all(store.grad("w") == 0.0)

    def test_sign_symmetry(self):
        def run(sign):
            store = ops.ParamStore()
            store.add("w", np.array([[0.0]]))
            store.accumulate("w", np.array([[sign * 3.0]]))
            trainer.rmsprop_step(store, lr=0.2)
            return store.value("w")[0, 0]

        assert run(1.0) == -run(-1.0)

    def test_clip_norm(self):
        store = ops.ParamStore()
        store.add("w", np.zeros((1, 2)))
        store.accumulate("w", np.array([[3.0, 4.0]]))  # norm 5
        trainer.rmsprop_step(store, lr=1.0, clip_norm=1.0)
        unclipped = ops.ParamStore()
        unclipped.add("w", np.zeros((1, 2)))
        unclipped.accumulate("w", np.array([[0.6, 0.8]]))
        trainer.rmsprop_step(unclipped, lr=1.0)
        assert np.allclose(store.value("w"), unclipped.value("w"))


class TestSchedule:
    def test_values(self):
        assert trainer.lr_schedule(2e-3, 0) == 2e-3
        assert trainer.lr_schedule(2e-3, 9999) == 2e-3
        assert trainer.lr_schedule(2e-3, 10000) == pytest.approx(0.75 * 2e-3)
        assert trainer.lr_schedule(2e-3, 25000) == pytest.approx(0.5625 * 2e-3)


class TestVariantDefaults:
    def test_full_defaults(self):
        config = TrainConfig(variant="full")
        assert config.lr == 2e-3
        assert config.l2 == 3e-5
        assert config.alpha == 3.9
        assert config.keep_embed == 0.86
        assert config.keep_mlp == 0.94
        assert config.mlp_layers == 1
        assert config.encoder_config().tracking_dim == 79

    def test_pi_defaults(self):
        config = TrainConfig(variant="pi")
        assert config.lr == 7e-3
        assert config.encoder_config().tracking_dim == 61
        assert config.mlp_layers == 2

    def test_batch_size_floor(self):
        with pytest.raises(ops.ConfigError):
            TrainConfig(variant="full", batch_size=1)


def toy_setup(n_pairs=64, seed=0):
    rows = toydata.make_corpus(n_pairs, seed=seed)
    examples = []
    from spinn import transitions as tr
    for row in rows:
        pt, pa = tr.parse_to_transitions(row["sentence1_binary_parse"])
        ht, ha = tr.parse_to_transitions(row["sentence2_binary_parse"])
        examples.append(data.ExamplePair(pt, pa, ht, ha,
                                         data.LABEL_TO_INT[row["gold_label"]]))
    table = data.EmbeddingTable.random(toydata.vocabulary(), seed=seed)
    return examples, table


def tiny_config(**kwargs):
    defaults = dict(variant="full", dim=8, tracking_dim=4, n_tokens=12,
                    mlp_layers=1, mlp_dim=8, batch_size=8, max_steps=12,
                    eval_interval=6, seed=3, lr=2e-3)
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestCheckpoint:
    def test_round_trip_exact(self, tmp_path):
        examples, table = toy_setup(32)
        config = tiny_config(max_steps=6)
        result = trainer.train(examples[:24], examples[24:], table, config,
                               tmp_path / "run")
        ckpt = trainer.load_checkpoint(result.last_path)
        _, enc_config, cls_config, store, stats = ckpt.build_model()
        assert ckpt.step == 6
        reloaded = trainer.load_checkpoint(result.last_path)
        for (n1, a1), (n2, a2) in zip(ckpt.values, reloaded.values):
            assert n1 == n2
            assert np.array_equal(a1, a2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.spnn"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(trainer.TrainError, match="magic"):
            trainer.load_checkpoint(path)

    def test_rng_state_round_trip(self):
        rng = ops.make_rng(42)
        rng.random(17)  # advance
        raw = trainer._pack_rng(rng)
        restored = trainer._unpack_rng(raw)
        assert np.array_equal(rng.random(5), restored.random(5))


class TestTraining:
    def test_determinism_same_seed_identical_checkpoints(self, tmp_path):
        examples, table = toy_setup(48)
        config = tiny_config(max_steps=8, eval_interval=4)
        r1 = trainer.train(examples[:40], examples[40:], table, config,
                           tmp_path / "a")
        r2 = trainer.train(examples[:40], examples[40:], table, config,
                           tmp_path / "b")
        a = open(r1.last_path, "rb").read()
        b = open(r2.last_path, "rb").read()
        assert a == b
        assert open(r1.best_path, "rb").read() == open(r2.best_path, "rb").read()

    def test_resume_equals_uninterrupted(self, tmp_path):
        examples, table = toy_setup(48)
        full_cfg = tiny_config(max_steps=8, eval_interval=4)
        full = trainer.train(examples[:40], examples[40:], table, full_cfg,
                             tmp_path / "full")
        half_cfg = tiny_config(max_steps=4, eval_interval=4)
        half = trainer.train(examples[:40], examples[40:], table, half_cfg,
                             tmp_path / "half")
        resumed_cfg = tiny_config(max_steps=8, eval_interval=4)
        resumed = trainer.train(examples[:40], examples[40:], table, resumed_cfg,
                                tmp_path / "resumed", resume=half.last_path)
        assert (open(full.last_path, "rb").read()
                == open(resumed.last_path, "rb").read())

    def test_resume_config_mismatch(self, tmp_path):
        examples, table = toy_setup(48)
        run = trainer.train(examples[:40], examples[40:], table,
                            tiny_config(max_steps=4, eval_interval=4),
                            tmp_path / "base")
        with pytest.raises(trainer.TrainError, match="config"):
            trainer.train(examples[:40], examples[40:], table,
                          tiny_config(max_steps=8, eval_interval=4, seed=9),
                          tmp_path / "bad", resume=run.last_path)

    def test_loss_decreases_early(self, tmp_path):
        examples, table = toy_setup(64)
        wins = 0
        for seed in range(5):
            config = tiny_config(seed=seed, max_steps=50, eval_interval=50,
                                 batch_size=8, lr=3e-3)
            enc_config = config.encoder_config()
            cls_config = config.classifier_config()
            from spinn import classifier as cls
            store, stats = cls.init_pair_model(enc_config, cls_config,
                                               ops.make_rng(seed))
            prepared = data.PreparedDataset(examples, table, config.n_tokens)
            fixed = prepared.slice(np.arange(8))
            pair = trainer.to_pair_batch(fixed, table)
            rng = ops.make_rng(seed + 1)
            first = cls.total_loss(pair, store, stats, enc_config, cls_config,
                                   config.loss_weights(), mode="train", rng=rng,
                                   need_backward=True)
            trainer.rmsprop_step(store, config.lr)
            losses = [first.total]
            for _ in range(49):
                res = cls.total_loss(pair, store, stats, enc_config, cls_config,
                                     config.loss_weights(), mode="train", rng=rng,
                                     need_backward=True)
                trainer.rmsprop_step(store, config.lr)
                losses.append(res.total)
            if losses[-1] < losses[0]:
                wins += 1
        assert wins >= 4

    def test_nan_abort_diagnoses(self, tmp_path):
        examples, table = toy_setup(48)
        # an infinite learning rate drives parameters to +-inf on step one,
        # so the next forward pass hits non-finite values and must abort
        config = tiny_config(max_steps=30, eval_interval=30, lr=float("inf"))
        with pytest.raises(trainer.TrainError, match="step"):
            trainer.train(examples[:40], examples[40:], table, config,
                          tmp_path / "nan")

    def test_eval_report_fields(self, tmp_path):
        examples, table = toy_setup(48)
        config = tiny_config(max_steps=4, eval_interval=4)
        run = trainer.train(examples[:40], examples[40:], table, config,
                            tmp_path / "run")
        ckpt = trainer.load_checkpoint(run.best_path)
        _, enc_config, cls_config, store, stats = ckpt.build_model()
        dev = data.PreparedDataset(examples[40:], table, config.n_tokens)
        report = trainer.evaluate(dev, table, store, stats, enc_config,
                                  cls_config, config.loss_weights())
        assert 0.0 <= report.accuracy <= 1.0
        assert set(report.per_label_accuracy) == {"entailment", "contradiction",
                                                  "neutral"}
        assert ">=20" in report.length_buckets
        assert report.transition_accuracy is not None  # full variant
        lines = report.lines()
        assert any("transition_accuracy" in line for line in lines)
