import numpy as np
import pytest

from semiseg import autodiff as ad
from semiseg.autodiff import Tape, Tensor
from semiseg.embeddings import hash_embed
from semiseg.errors import DimensionError
from semiseg.matching import MatchResult, hungarian_match
from semiseg.segmentor import (LossWeights, ModelConfig, ModelWeights, batch_loss, compute_loss, decode, forward,
                               infer, match_cost, match_prediction)
from semiseg.synth import InstanceAnnotation, SceneSpec, generate_scene

from oracles import brute_force_assignment, finite_difference, relative_error, scalar_bce, scalar_ce, scalar_dice

SPEC = SceneSpec(height=16, width=16, max_size=6)


def _model(semantic=True, dim=8, queries=4, seed=0):
    cfg = ModelConfig(SPEC.vocab.N, queries=queries, dim=dim, semantic=semantic)
    return ModelWeights.init(cfg, hash_embed(SPEC.vocab, 8, 0), np.random.default_rng(seed))


class TestForward:
    @pytest.mark.parametrize("semantic", [True, False])
    def test_shapes(self, semantic):
        w = _model(semantic)
        img = generate_scene(SPEC, 0).image
        pred = forward(np.stack([img, img]), w)
        assert pred.class_probs.shape == (2, 4, 5)
        assert pred.mask_logits.shape == (2, 4, 16, 16)
        assert pred.query_features.shape == (2, 4, 8)
        np.testing.assert_allclose(pred.class_probs.data.sum(-1), 1.0, atol=1e-6)

    def test_single_image_promoted(self):
        w = _model()
        img = generate_scene(SPEC, 1).image
        a = forward(img, w)
        b = forward(img[None], w)
        assert a.class_probs.data.tobytes() == b.class_probs.data.tobytes()

    def test_duplicate_queries_duplicate_predictions(self):
        w = _model()
        w["queries"].data[3] = w["queries"].data[1]
        pred = forward(generate_scene(SPEC, 2).image, w)
        np.testing.assert_array_equal(pred.class_probs.data[0, 1], pred.class_probs.data[0, 3])
        np.testing.assert_array_equal(pred.mask_logits.data[0, 1], pred.mask_logits.data[0, 3])

    def test_bad_input(self):
        with pytest.raises(DimensionError):
            forward(np.zeros((1, 4, 16, 16), np.float32), _model())

    def test_semantic_off_has_no_projection(self):
        w = _model(semantic=False)
        assert w.group("projection") == [] and "embeddings" not in w.names()
        assert w.group("classifier") == ["classifier.weight", "classifier.bias"]

    def test_embeddings_frozen_by_default(self):
        w = _model()
        assert "embeddings" not in w.trainable() and not w["embeddings"].requires_grad

    def test_infer_matches_forward(self):
        w = _model()
        imgs = np.stack([generate_scene(SPEC, s).image for s in range(3)])
        out = infer(imgs, w, batch_size=2)
        pred = forward(imgs, w)
        for b, (p, l) in enumerate(out):
            np.testing.assert_allclose(p, pred.probs_np(b), atol=1e-6)
            np.testing.assert_allclose(l, pred.logits_np(b), atol=1e-5)

    def test_query_gradient(self):
        w = _model().copy(dtype=np.float64)
        s = generate_scene(SPEC, 3)

        def loss():
            return batch_loss(forward(s.image[None], w), [s.instances])

        with Tape():
            out = loss()
        out.backward()
        q = w["queries"]
        rng = np.random.default_rng(0)
        for flat in rng.choice(q.data.size, 10, replace=False):
            idx = np.unravel_index(flat, q.shape)
            num = finite_difference(lambda: loss().item(), q.data, idx)
            assert relative_error(float(q.grad[idx]), num) < 1e-4


def _instances(rng, n, H=4, W=5, n_classes=4):
    out = []
    for _ in range(n):
        m = rng.random((H, W)) < 0.5
        m[0, 0] = True
        out.append(InstanceAnnotation(int(rng.integers(1, n_classes)), m))
    return out


class TestLoss:
    def test_empty_gt_is_background_ce(self):
        rng = np.random.default_rng(0)
        probs = ad.softmax(Tensor(rng.normal(size=(5, 4))))
        logits = Tensor(rng.normal(size=(5, 3, 3)))
        match = hungarian_match(np.zeros((5, 0)))
        loss = compute_loss(probs, logits, [], match)
        assert loss.item() == pytest.approx(scalar_ce(probs.data, [0] * 5), abs=1e-9)

    def test_perfect_fit(self):
        rng = np.random.default_rng(1)
        gt = _instances(rng, 2)
        probs = np.zeros((3, 4))
        probs[0, gt[0].class_id] = probs[1, gt[1].class_id] = probs[2, 0] = 1.0
        logits = np.full((3, 4, 5), -40.0)
        logits[0][gt[0].mask] = 40.0
        logits[1][gt[1].mask] = 40.0
        match = match_prediction(probs, logits, gt)
        assert match.pairs == [(0, 0), (1, 1)]
        assert compute_loss(Tensor(probs), Tensor(logits), gt, match).item() <= 1e-3

    def test_scalar_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            gt = _instances(rng, 2)
            probs = ad.softmax(Tensor(rng.normal(size=(4, 4)))).data
            logits = rng.normal(scale=2, size=(4, 4, 5))
            match = match_prediction(probs, logits, gt)
            qi, gi = match.query_indices, match.gt_indices
            targets = [0] * 4
            for a, b in zip(qi, gi):
                targets[a] = gt[b].class_id
            flat_l = logits.reshape(4, -1)[qi]
            flat_t = np.stack([gt[b].mask.reshape(-1) for b in gi])
            expected = scalar_ce(probs, targets) + scalar_bce(flat_l, flat_t) + scalar_dice(flat_l, flat_t)
            got = compute_loss(Tensor(probs), Tensor(logits), gt, match).item()
            assert got == pytest.approx(expected, abs=1e-5)

    def test_match_cost_matches_scalar_terms(self):
        rng = np.random.default_rng(3)
        gt = _instances(rng, 3)
        probs = ad.softmax(Tensor(rng.normal(size=(5, 4)))).data
        logits = rng.normal(size=(5, 4, 5))
        cost = match_cost(probs, logits, [g.class_id for g in gt], [g.mask for g in gt])
        for i in range(5):
            for j in range(3):
                ce = scalar_ce(probs[i:i + 1], [gt[j].class_id])
                dice = scalar_dice(logits[i:i + 1].reshape(1, -1), gt[j].mask.reshape(1, -1))
                assert cost[i, j] == pytest.approx(ce + dice, abs=1e-9)
        match = hungarian_match(cost)
        assert sum(cost[a, b] for a, b in match.pairs) == pytest.approx(brute_force_assignment(cost))

    def test_weights_scale_terms(self):
        rng = np.random.default_rng(4)
        gt = _instances(rng, 1)
        probs = Tensor(ad.softmax(Tensor(rng.normal(size=(2, 4)))).data)
        logits = Tensor(rng.normal(size=(2, 4, 5)))
        m = MatchResult([(1, 0)], [0])
        zero = compute_loss(probs, logits, gt, m, LossWeights(ce=0, bce=0, dice=0))
        assert zero.item() == 0.0
        only_ce = compute_loss(probs, logits, gt, m, LossWeights(bce=0, dice=0)).item()
        assert only_ce == pytest.approx(scalar_ce(probs.data, [0, gt[0].class_id]), abs=1e-9)

    def test_batch_loss_is_mean(self):
        w = _model()
        samples = [generate_scene(SPEC, s) for s in range(3)]
        pred = forward(np.stack([s.image for s in samples]), w)
        total = batch_loss(pred, [s.instances for s in samples]).item()
        parts = [batch_loss(forward(s.image, w), [s.instances]).item() for s in samples]
        assert total == pytest.approx(np.mean(parts), rel=1e-5)
        sub = batch_loss(pred, [samples[2].instances], index=[2]).item()
        assert sub == pytest.approx(parts[2], rel=1e-5)


class TestDecode:
    def test_all_background(self):
        probs = np.tile([0.9, 0.05, 0.05], (3, 1))
        assert decode(probs, np.ones((3, 2, 2))) == []

    def test_background_argmax_kept_above_floor(self):
        probs = np.array([[0.6, 0.3, 0.1]])
        dets = decode(probs, np.ones((1, 2, 2)), 0.05)
        assert [(d.class_id, d.score) for d in dets] == [(1, pytest.approx(0.3))]

    def test_single_detection(self):
        probs = np.array([[0.05, 0.05, 0.9], [0.8, 0.1, 0.1]])
        logits = np.full((2, 3, 3), -1.0)
        logits[0, 1, 1] = 2.0
        dets = decode(probs, logits, 0.05, "a")
        assert len(dets) == 1
        d = dets[0]
        assert (d.image_id, d.class_id, d.score) == ("a", 2, pytest.approx(0.9)) and d.mask.sum() == 1

    def test_empty_mask_and_floor_dropped(self):
        probs = np.array([[0.1, 0.9, 0.0], [0.3, 0.35, 0.35]])
        logits = np.stack([np.full((2, 2), -1.0), np.ones((2, 2))])
        # query 0 has an empty mask; query 1 survives only while its score exceeds the floor
        assert [d.score for d in decode(probs, logits, 0.05)] == [0.35]
        assert decode(probs, logits, 0.35) == []
        assert len(decode(probs, logits, 0.3)) == 1

    def test_binarization_idempotent(self):
        rng = np.random.default_rng(0)
        probs = ad.softmax(Tensor(rng.normal(size=(6, 4)) * 3)).data
        logits = rng.normal(size=(6, 5, 5))
        first = decode(probs, logits)
        again = decode(probs, np.where(logits > 0, 20.0, -20.0))
        assert [(d.class_id, d.score, d.mask.tobytes()) for d in first] == \
               [(d.class_id, d.score, d.mask.tobytes()) for d in again]

    def test_monotone_transform_keeps_order(self):
        rng = np.random.default_rng(1)
        probs = ad.softmax(Tensor(rng.normal(size=(8, 4)) * 3)).data
        logits = np.abs(rng.normal(size=(8, 4, 4)))
        base = decode(probs, logits, 0.0)
        alt = decode(probs ** 3, logits, 0.0)
        order = lambda ds: [d.class_id for d in sorted(ds, key=lambda d: -d.score)]
        assert order(base) == order(alt)
