import numpy as np
import pytest

from fedapt_sim.apt import CLASS_SHARED, CLASS_SPECIFIC, AdaptiveNet, Prompt
from fedapt_sim.encoders import (
    EncoderConfig,
    build_aligned,
    build_random,
    class_text_features,
    encode_images,
)
from fedapt_sim.numerics import (
    InvalidArgumentError,
    finite_diff_grad,
    grad_rel_error,
    named_stream,
)
from fedapt_sim.training import (
    Banks,
    EmptyClientError,
    LocalLearner,
    UnsupConfig,
    classification_loss_and_grad,
    domain_loss_and_grad,
    init_banks,
    inter_sample_loss,
    intra_sample_loss,
    local_train,
    pseudo_label_stage,
    stage2_batch_loss_and_grads,
    supervised_loss,
    unsupervised_stage2_step,
)
from fedapt_sim.world import WorldConfig, class_prototypes, generate_world

from conftest import make_batch

TAU = 0.07


def _learner(pair, rng, mode=CLASS_SPECIFIC, n_domains=2, lr=0.1, bs=8, epochs=1):
    cfg = pair.config
    shape = (cfg.num_classes, cfg.prompt_len, cfg.embed_dim) if mode == CLASS_SPECIFIC \
        else (cfg.prompt_len, cfg.embed_dim)
    return LocalLearner(
        prompt=Prompt(mode=mode, values=0.3 * rng.standard_normal(shape)),
        adaptive=AdaptiveNet(phi=0.3 * rng.standard_normal((cfg.feature_dim, n_domains))),
        key=rng.random((cfg.prompt_len, cfg.embed_dim)),
        domain=int(rng.integers(n_domains)),
        learning_rate=lr,
        batch_size=bs,
        local_epochs=epochs,
    )


class TestSupervisedLoss:
    def test_perfect_prediction_zero_loss(self, tiny_pair):
        # with a near-zero temperature the top class saturates to probability 1
        rng = named_stream(20, "train")
        feats, _ = make_batch(tiny_pair, rng)
        prompt = Prompt(mode=CLASS_SPECIFIC, values=0.3 * rng.standard_normal((3, 2, 8)))
        key = np.zeros((2, 8))
        text = class_text_features(tiny_pair, prompt.values)
        labels = (feats @ text.T).argmax(axis=1)
        loss, _ = classification_loss_and_grad(tiny_pair, prompt, key, feats, labels, 1e-5)
        assert loss < 1e-12

    def test_zero_phi_gives_log_k(self, tiny_pair):
        rng = named_stream(21, "train")
        feats, _ = make_batch(tiny_pair, rng)
        loss, _ = domain_loss_and_grad(np.zeros((16, 2)), feats, 0)
        assert loss == pytest.approx(np.log(2), abs=1e-15)

    def test_decomposes_exactly(self, tiny_pair):
        rng = named_stream(22, "train")
        learner = _learner(tiny_pair, rng)
        feats, labels = make_batch(tiny_pair, rng)
        total, _, _ = supervised_loss(tiny_pair, learner, feats, labels, TAU)
        l_c, _ = classification_loss_and_grad(
            tiny_pair, learner.prompt, learner.key, feats, labels, TAU
        )
        l_q, _ = domain_loss_and_grad(learner.adaptive.phi, feats, learner.domain)
        assert abs(total - (l_c + l_q)) < 1e-12

    def test_gradients_match_finite_differences(self, tiny_pair):
        rng = named_stream(23, "train")
        for _ in range(20):
            learner = _learner(tiny_pair, rng)
            feats, labels = make_batch(tiny_pair, rng)
            _, grad_p, grad_phi = supervised_loss(tiny_pair, learner, feats, labels, TAU)

            def loss_of_prompt(values):
                lp = Prompt(mode=CLASS_SPECIFIC, values=values)
                return classification_loss_and_grad(
                    tiny_pair, lp, learner.key, feats, labels, TAU
                )[0]

            def loss_of_phi(phi):
                return domain_loss_and_grad(phi, feats, learner.domain)[0]

            assert grad_rel_error(grad_p, finite_diff_grad(loss_of_prompt,
                                                           learner.prompt.values.copy())) < 1e-4
            assert grad_rel_error(grad_phi, finite_diff_grad(loss_of_phi,
                                                             learner.adaptive.phi.copy())) < 1e-4

    def test_label_out_of_range(self, tiny_pair):
        rng = named_stream(24, "train")
        learner = _learner(tiny_pair, rng)
        feats, labels = make_batch(tiny_pair, rng)
        with pytest.raises(InvalidArgumentError):
            supervised_loss(tiny_pair, learner, feats, labels + 10, TAU)

    def test_requires_class_specific(self, tiny_pair):
        rng = named_stream(25, "train")
        learner = _learner(tiny_pair, rng, mode=CLASS_SHARED)
        feats, labels = make_batch(tiny_pair, rng)
        with pytest.raises(InvalidArgumentError):
            supervised_loss(tiny_pair, learner, feats, labels, TAU)


class TestPseudoLabelStage:
    def test_impossible_threshold_skips(self, tiny_pair):
        rng = named_stream(26, "train")
        learner = _learner(tiny_pair, rng, mode=CLASS_SHARED)
        before = learner.prompt.values.copy()
        xs = rng.standard_normal((6, 8))
        zs_text = class_text_features(tiny_pair, np.zeros((2, 8)))
        cfg = UnsupConfig(confidence_threshold=1.0 + 1e-9)
        ran = pseudo_label_stage(tiny_pair, learner, xs, cfg, zs_text, TAU, rng)
        assert ran is False
        np.testing.assert_array_equal(learner.prompt.values, before)

    def test_confident_correct_model_zero_gradient(self, tiny_pair):
        # zero prompt == pseudo-labeler; tau small enough that the runner-up
        # probability underflows to exactly 0, so the CE gradient is exactly 0
        rng = named_stream(27, "train")
        learner = _learner(tiny_pair, rng, mode=CLASS_SHARED)
        learner.prompt = Prompt(mode=CLASS_SHARED, values=np.zeros((2, 8)))
        learner.key = np.zeros((2, 8))
        before = learner.prompt.values.copy()
        zs_text = class_text_features(tiny_pair, np.zeros((2, 8)))
        pool = rng.standard_normal((60, 8))
        cos = encode_images(tiny_pair, pool) @ zs_text.T
        gaps = np.sort(cos, axis=1)
        xs = pool[(gaps[:, -1] - gaps[:, -2]) > 0.08][:6]
        assert len(xs) == 6
        cfg = UnsupConfig(confidence_threshold=0.99, augment_strength=0.0, stage1_rounds=3)
        ran = pseudo_label_stage(tiny_pair, learner, xs, cfg, zs_text, 1e-4, rng)
        assert ran is True
        np.testing.assert_array_equal(learner.prompt.values, before)

    def test_pseudo_gradient_matches_finite_differences(self, tiny_pair):
        # class-shared cross-entropy on augmented inputs against fixed pseudo-labels
        rng = named_stream(28, "train")
        for _ in range(20):
            values = 0.3 * rng.standard_normal((2, 8))
            key = rng.random((2, 8))
            aug_feats, pseudo = make_batch(tiny_pair, rng)
            _, grad = classification_loss_and_grad(
                tiny_pair, Prompt(mode=CLASS_SHARED, values=values), key,
                aug_feats, pseudo, TAU,
            )

            def loss(v):
                return classification_loss_and_grad(
                    tiny_pair, Prompt(mode=CLASS_SHARED, values=v), key,
                    aug_feats, pseudo, TAU,
                )[0]

            assert grad_rel_error(grad, finite_diff_grad(loss, values.copy())) < 1e-4

    def test_improves_over_zero_shot_on_separable_world(self):
        # five epochs of self-training beat the zero-shot oracle it started from
        wc = WorldConfig(num_domains=1, num_classes=6, input_dim=32,
                         samples_per_domain=120, domain_shift_strength=0.6,
                         feature_noise=0.15, seed=11)
        train, test = generate_world(wc)
        pair = build_aligned(EncoderConfig(input_dim=32, num_classes=6, seed=11),
                             class_prototypes(wc))
        rng = named_stream(11, "stage1")
        learner = LocalLearner(
            prompt=Prompt(mode=CLASS_SHARED, values=0.02 * rng.standard_normal((4, 16))),
            adaptive=AdaptiveNet(phi=np.zeros((32, 1))),
            key=np.zeros((4, 16)),
            domain=0, learning_rate=0.05, batch_size=32, local_epochs=1,
        )
        xs = np.stack([s.x for s in train])
        zs_text = class_text_features(pair, np.zeros((4, 16)))
        tau = pair.config.clip_temperature

        test_feats = encode_images(pair, np.stack([s.x for s in test]))
        test_labels = np.array([s.label for s in test])
        zero_shot_acc = ((test_feats @ zs_text.T).argmax(1) == test_labels).mean()

        cfg = UnsupConfig(confidence_threshold=0.8, stage1_rounds=5, augment_strength=0.1)
        assert pseudo_label_stage(pair, learner, xs, cfg, zs_text, tau, rng)
        tuned_text = class_text_features(
            pair, np.tile(learner.prompt.values * (1 + learner.key), (6, 1, 1))
        )
        tuned_acc = ((test_feats @ tuned_text.T).argmax(1) == test_labels).mean()
        assert tuned_acc >= zero_shot_acc


class TestInterSampleLoss:
    @staticmethod
    def _banks(rng, m=6, n_cls=3, d=16):
        feats = rng.standard_normal((m, d))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        return Banks(features=feats, scores=rng.dirichlet(np.ones(n_cls), m))

    def test_hand_value(self):
        # one neighbor aligned with z, one background orthogonal: loss -1
        feats = np.eye(3)
        scores = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        banks = Banks(features=feats, scores=scores)
        # make sample 1 the nearest neighbor of sample 0
        banks.features[1] = banks.features[0]
        loss, grad = inter_sample_loss(
            banks, 0, np.array([1.0, 0.0]), UnsupConfig(num_neighbors=1, lam=1.0)
        )
        assert loss == pytest.approx(-1.0, abs=1e-12)
        np.testing.assert_allclose(grad, [-1.0, 1.0], atol=1e-12)

    def test_attraction_only(self):
        rng = named_stream(30, "train")
        banks = self._banks(rng)
        z = np.array([0.5, 0.25, 0.25])
        banks.scores[:] = z  # all neighbors equal to z
        cfg = UnsupConfig(num_neighbors=3, lam=0.0)
        loss, _ = inter_sample_loss(banks, 0, z, cfg)
        assert loss == pytest.approx(-3 * float(z @ z), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = named_stream(31, "train")
        for _ in range(20):
            banks = self._banks(rng)
            cfg = UnsupConfig(num_neighbors=int(rng.integers(1, 4)), lam=float(rng.uniform(0, 2)))
            z = rng.dirichlet(np.ones(3))
            idx = int(rng.integers(6))
            _, grad = inter_sample_loss(banks, idx, z, cfg)
            fd = finite_diff_grad(lambda v: inter_sample_loss(banks, idx, v, cfg)[0], z.copy())
            assert grad_rel_error(grad, fd) < 1e-4

    def test_neighbor_count_bound(self):
        rng = named_stream(32, "train")
        banks = self._banks(rng, m=4)
        with pytest.raises(InvalidArgumentError):
            inter_sample_loss(banks, 0, np.ones(3) / 3, UnsupConfig(num_neighbors=4))


class TestIntraSampleLoss:
    def test_identity_is_zero(self):
        z = np.array([0.2, 0.5, 0.3])
        loss, _ = intra_sample_loss(z, z.copy())
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        loss, _ = intra_sample_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
        assert loss == pytest.approx(np.log(2), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = named_stream(33, "train")
        for _ in range(20):
            z_hat = rng.dirichlet(np.ones(4))
            z_bank = rng.dirichlet(np.ones(4))
            _, grad = intra_sample_loss(z_hat, z_bank)
            fd = finite_diff_grad(lambda v: intra_sample_loss(v, z_bank)[0], z_hat.copy())
            assert grad_rel_error(grad, fd) < 1e-4

    def test_negative_entries_raise(self):
        with pytest.raises(InvalidArgumentError):
            intra_sample_loss(np.array([-0.1, 1.1]), np.array([0.5, 0.5]))


class TestStage2:
    @staticmethod
    def _setup(pair, rng, m=10):
        learner = _learner(pair, rng, mode=CLASS_SHARED, lr=0.05)
        xs = rng.standard_normal((m, pair.config.input_dim))
        banks = init_banks(pair, learner.prompt, learner.key, xs, TAU)
        return learner, xs, banks

    def test_chain_gradients_match_finite_differences(self, tiny_pair):
        rng = named_stream(34, "train")
        for _ in range(20):
            learner, xs, banks = self._setup(tiny_pair, rng)
            idxs = rng.choice(10, size=4, replace=False)
            feats = encode_images(tiny_pair, xs[idxs])
            aug_feats = encode_images(tiny_pair, xs[idxs] + 0.05 * rng.standard_normal((4, 8)))
            cfg = UnsupConfig(num_neighbors=3, lam=0.7)
            _, _, grad_p, grad_phi = stage2_batch_loss_and_grads(
                tiny_pair, learner, banks, idxs, feats, aug_feats, cfg, TAU
            )

            def total_of_prompt(values):
                probe = LocalLearner(
                    prompt=Prompt(mode=CLASS_SHARED, values=values),
                    adaptive=learner.adaptive, key=learner.key, domain=learner.domain,
                )
                parts, _, _, _ = stage2_batch_loss_and_grads(
                    tiny_pair, probe, banks, idxs, feats, aug_feats, cfg, TAU
                )
                return parts["total"]

            def total_of_phi(phi):
                probe = LocalLearner(
                    prompt=learner.prompt,
                    adaptive=AdaptiveNet(phi=phi), key=learner.key, domain=learner.domain,
                )
                parts, _, _, _ = stage2_batch_loss_and_grads(
                    tiny_pair, probe, banks, idxs, feats, aug_feats, cfg, TAU
                )
                return parts["total"]

            fd_p = finite_diff_grad(total_of_prompt, learner.prompt.values.copy())
            fd_phi = finite_diff_grad(total_of_phi, learner.adaptive.phi.copy())
            assert grad_rel_error(grad_p, fd_p) < 1e-4
            assert grad_rel_error(grad_phi, fd_phi) < 1e-4

    def test_pure_attraction_loss_decreases(self, tiny_pair):
        rng = named_stream(35, "train")
        learner, xs, banks = self._setup(tiny_pair, rng)
        cfg = UnsupConfig(num_neighbors=9, lam=0.0, augment_strength=0.0)
        idxs = np.arange(10)
        losses = [
            unsupervised_stage2_step(tiny_pair, learner, banks, xs, idxs, cfg, TAU, rng)
            for _ in range(10)
        ]
        assert losses[-1] < losses[0]

    def test_bank_rows_refreshed_to_fresh_encodings(self, tiny_pair):
        rng = named_stream(36, "train")
        learner, xs, banks = self._setup(tiny_pair, rng)
        idxs = np.array([1, 4, 7])
        block = np.tile(learner.prompt.values * (1 + learner.key), (3, 1, 1))
        from fedapt_sim.encoders import text_features_with_vjp
        from fedapt_sim.numerics import softmax

        text, _ = text_features_with_vjp(tiny_pair, block)
        feats = encode_images(tiny_pair, xs[idxs])
        expected_scores = softmax(feats @ text.T, TAU)
        unsupervised_stage2_step(
            tiny_pair, learner, banks, xs, idxs,
            UnsupConfig(num_neighbors=3, augment_strength=0.1), TAU, rng,
        )
        np.testing.assert_array_equal(banks.features[idxs], feats)
        np.testing.assert_array_equal(banks.scores[idxs], expected_scores)

    def test_no_augment_zero_intra(self, tiny_pair):
        rng = named_stream(37, "train")
        learner, xs, banks = self._setup(tiny_pair, rng)
        cfg = UnsupConfig(num_neighbors=3, augment_strength=0.0)
        for _ in range(5):
            idxs = rng.choice(10, size=4, replace=False)
            feats = encode_images(tiny_pair, xs[idxs])
            block = np.tile(learner.prompt.values * (1 + learner.key), (3, 1, 1))
            from fedapt_sim.encoders import text_features_with_vjp
            from fedapt_sim.numerics import softmax

            text, _ = text_features_with_vjp(tiny_pair, block)
            banks.features[idxs] = feats
            banks.scores[idxs] = softmax(feats @ text.T, TAU)
            parts, _, _, _ = stage2_batch_loss_and_grads(
                tiny_pair, learner, banks, idxs, feats, feats, cfg, TAU
            )
            assert parts["intra"] == pytest.approx(0.0, abs=1e-12)
            unsupervised_stage2_step(tiny_pair, learner, banks, xs, idxs, cfg, TAU, rng)

    def test_score_rows_stay_distributions(self, tiny_pair):
        rng = named_stream(38, "train")
        learner, xs, banks = self._setup(tiny_pair, rng)
        for _ in range(5):
            idxs = rng.choice(10, size=5, replace=False)
            unsupervised_stage2_step(
                tiny_pair, learner, banks, xs, idxs,
                UnsupConfig(num_neighbors=3), TAU, rng,
            )
        np.testing.assert_allclose(banks.scores.sum(axis=1), np.ones(10), atol=1e-9)
        np.testing.assert_allclose(
            np.linalg.norm(banks.features, axis=1), np.ones(10), atol=1e-9
        )


class TestLocalTrain:
    @staticmethod
    def _samples(rng, pair, n=24, n_domains=2):
        from fedapt_sim.world import Sample

        return [
            Sample(x=rng.standard_normal(pair.config.input_dim),
                   label=int(rng.integers(pair.config.num_classes)),
                   domain=int(rng.integers(n_domains)))
            for _ in range(n)
        ]

    def test_empty_dataset_raises(self, tiny_pair):
        rng = named_stream(40, "train")
        learner = _learner(tiny_pair, rng)
        with pytest.raises(EmptyClientError):
            local_train(tiny_pair, learner, [], "supervised", UnsupConfig(), TAU, rng)

    def test_zero_epochs_unchanged(self, tiny_pair):
        rng = named_stream(41, "train")
        for mode in ("supervised", "unsupervised"):
            prompt_mode = CLASS_SPECIFIC if mode == "supervised" else CLASS_SHARED
            learner = _learner(tiny_pair, rng, mode=prompt_mode, epochs=0)
            before_p = learner.prompt.values.copy()
            before_phi = learner.adaptive.phi.copy()
            zs = class_text_features(tiny_pair, np.zeros((2, 8)))
            local_train(tiny_pair, learner, self._samples(rng, tiny_pair), mode,
                        UnsupConfig(), TAU, rng, zs)
            np.testing.assert_array_equal(learner.prompt.values, before_p)
            np.testing.assert_array_equal(learner.adaptive.phi, before_phi)

    def test_deterministic(self, tiny_pair):
        rng = named_stream(42, "train")
        samples = self._samples(rng, tiny_pair)
        results = []
        for _ in range(2):
            learner = _learner(tiny_pair, named_stream(43, "train"), epochs=2, bs=8)
            local_train(tiny_pair, learner, samples, "supervised", UnsupConfig(), TAU,
                        named_stream(44, "train"))
            results.append((learner.prompt.values.copy(), learner.adaptive.phi.copy()))
        np.testing.assert_array_equal(results[0][0], results[1][0])
        np.testing.assert_array_equal(results[0][1], results[1][1])

    def test_supervised_loss_decreases_on_separable_world(self):
        wc = WorldConfig(num_domains=1, num_classes=5, input_dim=32,
                         samples_per_domain=60, domain_shift_strength=0.0,
                         feature_noise=0.2, seed=13)
        train, _ = generate_world(wc)
        pair = build_aligned(EncoderConfig(input_dim=32, num_classes=5, seed=13),
                             class_prototypes(wc))
        rng = named_stream(13, "lt")
        learner = LocalLearner(
            prompt=Prompt(mode=CLASS_SPECIFIC, values=0.02 * rng.standard_normal((5, 4, 16))),
            adaptive=AdaptiveNet(phi=np.zeros((32, 1))),
            key=np.zeros((4, 16)),
            domain=0, learning_rate=0.05, batch_size=16, local_epochs=1,
        )
        feats = encode_images(pair, np.stack([s.x for s in train]))
        labels = np.array([s.label for s in train])
        tau = pair.config.clip_temperature
        before, _, _ = supervised_loss(pair, learner, feats, labels, tau)
        local_train(pair, learner, train, "supervised", UnsupConfig(), tau, rng)
        after, _, _ = supervised_loss(pair, learner, feats, labels, tau)
        assert after < before

    def test_key_never_changes(self, tiny_pair):
        rng = named_stream(45, "train")
        learner = _learner(tiny_pair, rng, epochs=2)
        key_before = learner.key.copy()
        local_train(tiny_pair, learner, self._samples(rng, tiny_pair), "supervised",
                    UnsupConfig(), TAU, rng)
        np.testing.assert_array_equal(learner.key, key_before)

    def test_unsupervised_end_to_end_runs(self, tiny_pair):
        rng = named_stream(46, "train")
        learner = _learner(tiny_pair, rng, mode=CLASS_SHARED, epochs=1, bs=8, lr=0.02)
        zs = class_text_features(tiny_pair, np.zeros((2, 8)))
        loss = local_train(tiny_pair, learner, self._samples(rng, tiny_pair),
                           "unsupervised", UnsupConfig(num_neighbors=3), TAU, rng, zs)
        assert np.isfinite(loss)
