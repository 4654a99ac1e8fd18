"""Model assembly: fusion kinds, attention pooling, activation maps, and the
heatmap export formats."""

import numpy as np
import pytest

from qghc import data as synth
from qghc.autodiff import backward, leaf, no_grad
from qghc.model import (AttentionHead, ImageEncoder, ModelConfig, VQAModel,
                        attention_pool, cam_map, model_cam, model_forward,
                        upsample_nearest, write_pgm)
from qghc.nn import global_avg_pool, softmax_lastaxis, weighted_spatial_sum
from qghc.tensor import Rng, ShapeError, Tensor
from qghc.training import cross_entropy

TOY = dict(channels=16, encoder_channels=(8, 12), embed_dim=8, gru_hidden=12,
           predictor_hidden=10, groups=2, modules=2)


def _node(values, dtype=np.float32):
    return leaf(Tensor(np.asarray(values, dtype=dtype)), requires_grad=False)


def tiny_batch(seed=0, n=4):
    ds = synth.generate_dataset(seed, n)
    return ds.images, ds.tokens, ds.answers.astype(np.int64)


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(fusion="bilinear")
        with pytest.raises(ValueError):
            ModelConfig(head="max")
        with pytest.raises(ValueError):
            ModelConfig(answer_words=("only",))

    def test_feature_dims_by_fusion(self):
        assert ModelConfig(**TOY, fusion="qghc").feature_dim() == 16
        assert ModelConfig(**TOY, fusion="qghc+concat").feature_dim() == 28
        assert ModelConfig(**TOY, fusion="concat").feature_dim() == 28
        assert ModelConfig(**TOY, fusion="blind").feature_dim() == 12

    def test_all_fusion_head_combinations_constructible(self):
        for fusion in ("qghc", "qghc+concat", "concat", "blind"):
            for head in ("gap", "attention"):
                VQAModel(ModelConfig(**TOY, fusion=fusion, head=head), seed=0)


class TestImageEncoder:
    def test_spatial_reduction_by_four(self):
        enc = ImageEncoder("enc", (8, 12), 16, Rng(0))
        x = _node(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
        with no_grad():
            out = enc.forward(x, train=False)
        assert out.shape == (2, 16, 8, 8)

    def test_indivisible_spatial_rejected(self):
        enc = ImageEncoder("enc", (8, 12), 16, Rng(0))
        with pytest.raises(ShapeError):
            enc.forward(_node(np.ones((1, 3, 30, 30))), train=False)

    def test_gradient_reaches_first_conv(self):
        enc = ImageEncoder("enc", (8, 12), 16, Rng(1), dtype=np.float64)
        x = _node(np.random.default_rng(1).normal(size=(2, 3, 8, 8)), np.float64)
        from qghc.autodiff import sum_all
        loss = sum_all(enc.forward(x, train=True))
        grads = backward(loss)
        assert np.abs(grads.raw(enc.conv1.kernel.node)).max() > 0.0


class TestForwardPaths:
    def test_blind_ignores_image(self):
        model = VQAModel(ModelConfig(**TOY, fusion="blind"), seed=1)
        images, tokens, _ = tiny_batch()
        other_images = np.zeros_like(images)
        a = model_forward(images, tokens, model).logits.array
        b = model_forward(other_images, tokens, model).logits.array
        assert a.tobytes() == b.tobytes()

    def test_qghc_depends_on_question(self):
        model = VQAModel(ModelConfig(**TOY, fusion="qghc"), seed=1)
        _nudge_classifier(model)
        images, tokens, _ = tiny_batch()
        flipped = tokens.copy()
        flipped[:, :] = tokens[::-1, :]
        a = model_forward(images, tokens, model).logits.array
        b = model_forward(images, flipped, model).logits.array
        assert np.abs(a - b).max() > 0.0

    def test_probabilities_sum_to_one(self):
        model = VQAModel(ModelConfig(**TOY, fusion="qghc"), seed=2)
        images, tokens, _ = tiny_batch()
        dist = model_forward(images, tokens, model)
        np.testing.assert_allclose(dist.probabilities.array.sum(axis=1), 1.0,
                                   atol=1e-5)

    def test_eval_forward_deterministic(self):
        model = VQAModel(ModelConfig(**TOY, fusion="qghc"), seed=3)
        images, tokens, _ = tiny_batch()
        a = model_forward(images, tokens, model).logits.array
        b = model_forward(images, tokens, model).logits.array
        assert a.tobytes() == b.tobytes()

    def test_n0_gap_is_question_invariant_but_concat_is_not(self):
        # With no dynamic groups the only question path is classifier concat.
        images, tokens, _ = tiny_batch()
        flipped = tokens[::-1, :].copy()
        plain = VQAModel(ModelConfig(**TOY, fusion="qghc", dynamic_groups=0), seed=4)
        a = model_forward(images, tokens, plain).logits.array
        b = model_forward(images, flipped, plain).logits.array
        assert a.tobytes() == b.tobytes()

        cat = VQAModel(ModelConfig(**TOY, fusion="qghc+concat", dynamic_groups=0), seed=4)
        _nudge_classifier(cat)
        a = model_forward(images, tokens, cat).logits.array
        b = model_forward(images, flipped, cat).logits.array
        assert np.abs(a - b).max() > 0.0

    def test_training_step_changes_loss(self):
        from qghc.training import Adam, TrainConfig, train_epoch
        ds = synth.generate_dataset(3, 64)
        model = VQAModel(ModelConfig(**TOY, fusion="qghc"), seed=5)
        cfg = TrainConfig(epochs=1, batch_size=32, lr=1e-3, seed=0)
        opt = Adam(model.parameters(), lr=cfg.lr)
        loss0, _ = train_epoch(model, ds, cfg, opt, 0)
        loss1, _ = train_epoch(model, ds, cfg, opt, 1)
        assert loss1 < loss0


def _nudge_classifier(model):
    """Give the zero-initialized final layer nonzero weights so question
    effects reach the logits in untrained models."""
    rng = np.random.default_rng(99)
    w = model.fc2.weight
    w.assign(rng.normal(scale=0.3, size=w.shape))


class TestAttention:
    def test_zero_scores_reduce_to_global_average(self):
        head = AttentionHead("head", 6, 5, Rng(0))
        head.score_conv.kernel.assign(np.zeros(head.score_conv.kernel.shape))
        f = _node(np.random.default_rng(1).normal(size=(2, 6, 3, 3)))
        f_q = _node(np.random.default_rng(2).normal(size=(2, 5)))
        with no_grad():
            pooled = attention_pool(f, f_q, head).array
            from qghc.nn import add_channel_bias_map
            enriched = add_channel_bias_map(f, head.proj.forward(f_q))
            gap = global_avg_pool(enriched).array
        assert np.abs(pooled - gap).max() < 1e-6

    def test_saturated_softmax_picks_one_location(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(1, 4, 9)).astype(np.float32)
        scores = np.zeros((1, 9), dtype=np.float32)
        scores[0, 5] = 100.0
        with no_grad():
            weights = softmax_lastaxis(_node(scores))
            out = weighted_spatial_sum(_node(f), weights).array
        np.testing.assert_allclose(out[0], f[0, :, 5], atol=1e-3)

    def test_weights_sum_to_one(self):
        head = AttentionHead("head", 6, 5, Rng(4))
        f = _node(np.random.default_rng(5).normal(size=(3, 6, 4, 4)))
        f_q = _node(np.random.default_rng(6).normal(size=(3, 5)))
        from qghc.autodiff import reshape
        from qghc.nn import add_channel_bias_map
        with no_grad():
            enriched = add_channel_bias_map(f, head.proj.forward(f_q))
            scores = reshape(head.score_conv.forward(enriched), (3, 16))
            weights = softmax_lastaxis(scores).array
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-5)

    def test_attention_model_forward(self):
        model = VQAModel(ModelConfig(**TOY, fusion="qghc", head="attention"), seed=6)
        images, tokens, answers = tiny_batch()
        logits = model.forward(images, tokens, train=True)
        loss = cross_entropy(logits, answers)
        grads = backward(loss)
        for p in model.attention.parameters():
            assert grads.raw(p.node).shape == tuple(p.shape)


class TestCam:
    def test_flat_features_give_flat_map(self):
        f = np.ones((2, 3, 4, 4), dtype=np.float32)
        w = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
        raw, normalized = cam_map(f, w, answer=2)
        assert np.allclose(raw, raw[:, :1, :1])       # constant over space
        assert np.all(normalized == 0.0)              # degenerate span maps to 0

    def test_spike_localized(self):
        f = np.zeros((1, 2, 4, 4), dtype=np.float32)
        f[0, 1, 2, 3] = 5.0
        w = np.asarray([[0.0], [1.0]], dtype=np.float32)
        raw, normalized = cam_map(f, w, answer=0)
        assert np.unravel_index(np.argmax(raw[0]), (4, 4)) == (2, 3)
        assert normalized[0, 2, 3] == 1.0

    def test_linear_in_features(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(2, 3, 4, 4)).astype(np.float64)
        w = rng.normal(size=(3, 4)).astype(np.float64)
        raw1, _ = cam_map(f, w, 1)
        raw2, _ = cam_map(2.5 * f, w, 1)
        np.testing.assert_allclose(raw2, 2.5 * raw1, rtol=1e-12)

    def test_pooled_map_equals_linear_logit_contribution(self):
        model = VQAModel(ModelConfig(**TOY, fusion="qghc"), seed=7)
        _nudge_classifier(model)
        images, tokens, _ = tiny_batch()
        with no_grad():
            _, fmap = model.forward(images, tokens, train=False, return_features=True)
        weights = model.linearized_classifier_weights()
        answer = 3
        raw, _ = cam_map(fmap.array, weights, answer)
        pooled = fmap.array.mean(axis=(2, 3))
        expected = pooled @ weights[:, answer]
        np.testing.assert_allclose(raw.mean(axis=(1, 2)), expected, atol=1e-5)

    def test_answer_out_of_range(self):
        f = np.ones((1, 2, 2, 2), dtype=np.float32)
        w = np.ones((2, 4), dtype=np.float32)
        with pytest.raises(IndexError):
            cam_map(f, w, 4)

    def test_blind_model_has_no_feature_map(self):
        model = VQAModel(ModelConfig(**TOY, fusion="blind"), seed=8)
        images, tokens, _ = tiny_batch()
        with pytest.raises(ValueError):
            model_cam(model, images, tokens, 0)


class TestHeatmapExport:
    def test_upsample_nearest(self):
        hm = np.asarray([[1.0, 2.0], [3.0, 4.0]])
        up = upsample_nearest(hm, 2)
        assert up.shape == (4, 4)
        assert up[0, 0] == up[1, 1] == 1.0
        assert up[3, 3] == 4.0

    def test_pgm_header_and_payload(self, tmp_path):
        path = tmp_path / "map.pgm"
        gray = np.linspace(0, 1, 32 * 32).reshape(32, 32)
        write_pgm(path, gray)
        raw = path.read_bytes()
        header, rest = raw.split(b"\n", 1)
        assert header == b"P5"
        dims, rest = rest.split(b"\n", 1)
        assert dims == b"32 32"
        maxval, payload = rest.split(b"\n", 1)
        assert maxval == b"255"
        assert len(payload) == 32 * 32
        assert payload[0] == 0 and payload[-1] == 255

    def test_uniform_map_gives_uniform_gray(self, tmp_path):
        path = tmp_path / "flat.pgm"
        write_pgm(path, np.full((8, 8), 0.5))
        payload = path.read_bytes().split(b"\n", 3)[3]
        assert len(set(payload)) == 1
