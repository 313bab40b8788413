import math

import numpy as np
import pytest

from proseco import objectives as O
from proseco import tensor as T
from proseco.boxes import BoxN, iou
from proseco.config import RunConfig
from proseco.detector import ProposalBatch
from proseco.errors import DegenerateError
from proseco.matching import MatchAssignment
from proseco.tensor import Tensor, grad_check
from proseco.verify import boxes_off_kinks, random_batch, random_matching, toy_config

from oracles import loop_locnce, loop_locsce


def identity(b, n):
    return [MatchAssignment([(j, j) for j in range(n)], 0.0) for _ in range(b)]


def orthonormal_pair():
    z = np.eye(2)[None]
    boxes = np.array([[[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]])
    return ProposalBatch(Tensor(z), Tensor(boxes)), ProposalBatch(Tensor(z), Tensor(boxes))


class TestTeacherRelations:
    def test_two_by_two_single_entry(self):
        out = O.teacher_relations(np.ones((2, 2, 4)) / 2, 0.07)
        v = out.values.data
        assert np.all((v == 1.0).sum(axis=1) == 1) and np.allclose(v.sum(axis=1), 1.0)
        # row (0,0) may only see (1,1)
        assert v[0, 3] == 1.0

    def test_two_by_three_uniform(self):
        # (N_b - 1) * (N - 1) = 2 unmasked columns per row
        v = O.teacher_relations(np.ones((2, 3, 4)) / 2, 0.07).values.data
        assert np.all(((v > 0).sum(axis=1)) == 2)
        np.testing.assert_allclose(v[v > 0], 0.5, atol=1e-7)

    def test_matches_scalar_softmax(self, rng):
        z = random_batch(rng, 3, 3).embeddings.data.astype(np.float64)
        v = O.teacher_relations(z, 0.07).values.data
        flat = z.reshape(9, -1)
        for r in range(9):
            allowed = [c for c in range(9) if c // 3 != r // 3 and c % 3 != r % 3]
            logits = np.array([flat[r] @ flat[c] / 0.07 for c in allowed])
            p = np.exp(logits - logits.max())
            np.testing.assert_allclose(v[r, allowed], p / p.sum(), atol=1e-6)

    def test_fully_masked_row(self):
        with pytest.raises(DegenerateError):
            O.teacher_relations(np.ones((1, 1, 2)), 0.07)

    def test_single_image_as_written_is_degenerate(self):
        with pytest.raises(DegenerateError):
            O.teacher_relations(np.ones((1, 3, 2)), 0.07)

    def test_self_only_mask(self):
        v = O.teacher_relations(np.ones((1, 3, 2)), 0.07, mode="self_only").values.data
        np.testing.assert_allclose(v, (1 - np.eye(3)) / 2, atol=1e-7)


class TestCrossSimilarities:
    def test_uniform(self):
        v = O.cross_similarities(np.ones((2, 3, 4)), np.ones((2, 3, 4)), 0.1).values.data
        np.testing.assert_allclose(v, 1 / 6, atol=1e-7)

    def test_orthonormal(self):
        z = np.eye(2)[None]
        v = O.cross_similarities(z, z, 0.1).values.data
        e = math.exp(10)
        np.testing.assert_allclose(v[0], [e / (e + 1), 1 / (e + 1)], atol=1e-7)
        assert v[0, 0] == pytest.approx(0.9999546, abs=1e-7)

    def test_denominator_covers_whole_batch(self, rng):
        t, s = random_batch(rng, 4, 3), random_batch(rng, 4, 3)
        v = O.cross_similarities(t.embeddings, s.embeddings, 0.1).values.data
        assert v.shape == (12, 12)
        assert np.all(v > 0)
        np.testing.assert_allclose(v.sum(axis=1), 1.0, atol=1e-5)


class TestLocsceTarget:
    def test_delta_one_is_diagonal_indicator(self, rng):
        ious = np.stack([O.pairwise_iou(random_batch(rng, 1, 4).boxes.data[0]) for _ in range(2)])
        p = rng.random((8, 8))
        w = O.locsce_target(p, ious, 0.3, 1.0)
        np.testing.assert_allclose(w, 0.3 * np.eye(8) + 0.7 * p, atol=1e-12)

    def test_overlap_block(self):
        ious = np.array([[[1.0, 0.8], [0.8, 1.0]]])
        np.testing.assert_array_equal(O.locsce_target(None, ious, 1.0, 0.5), np.ones((2, 2)))

    def test_lambda_zero_is_relations_bitwise(self, rng):
        p = rng.random((6, 6))
        ious = np.stack([np.eye(3)] * 2)
        assert np.array_equal(O.locsce_target(p, ious, 0.0, 0.5), p)

    def test_cross_image_pairs_have_no_positive(self):
        ious = np.ones((2, 2, 2))
        w = O.locsce_target(None, ious, 1.0, 0.5)
        assert np.all(w[:2, 2:] == 0) and np.all(w[2:, :2] == 0)

    def test_non_negative(self, rng):
        w = O.locsce_target(rng.random((4, 4)), rng.random((2, 2, 2)), 0.5, 0.3)
        assert np.all(w >= 0)


class TestLosses:
    def test_locsce_orthonormal_value(self):
        t, s = orthonormal_pair()
        cfg = toy_config(1, 2, lambda_sce=1.0, delta=1.0, tau=0.1)
        want = -math.log(math.exp(10) / (math.exp(10) + 1))
        assert O.locsce_loss(t, s, identity(1, 2), cfg).item() == pytest.approx(want, abs=1e-7)
        assert want == pytest.approx(4.54e-5, rel=1e-3)

    def test_infonce_orthonormal_value(self):
        t, s = orthonormal_pair()
        cfg = toy_config(1, 2, tau=0.1)
        want = -math.log(math.exp(10) / (math.exp(10) + 1))
        assert O.infonce_loss(t, s, identity(1, 2), cfg).item() == pytest.approx(want, abs=1e-7)

    def test_infonce_equals_locsce_lambda_one_delta_one(self, rng):
        t, s = random_batch(rng, 2, 4), random_batch(rng, 2, 4)
        sigma = random_matching(rng, 2, 4)
        cfg = toy_config(2, 4, lambda_sce=1.0, delta=1.0)
        assert O.infonce_loss(t, s, sigma, cfg).item() == pytest.approx(O.locsce_loss(t, s, sigma, cfg).item(), abs=1e-6)

    @pytest.mark.parametrize("b,n,lam,mode", [(2, 3, 0.5, "as_written"), (3, 2, 0.2, "as_written"),
                                              (1, 4, 0.5, "self_only"), (2, 4, 1.0, "as_written")])
    def test_locsce_against_loop_oracle(self, rng, b, n, lam, mode):
        t, s = random_batch(rng, b, n), random_batch(rng, b, n)
        # make some teacher boxes overlap so the gate fires
        t.boxes.data[:, 1] = t.boxes.data[:, 0] + np.float32(0.01)
        sigma = random_matching(rng, b, n)
        cfg = toy_config(b, n, lambda_sce=lam, delta=0.5, relation_mask=mode)
        with T.precision(np.float64):
            got = O.locsce_loss(t, s, sigma, cfg).item()
        want = loop_locsce(t.embeddings.data, s.embeddings.data, t.boxes.data, sigma, cfg.tau, cfg.tau_t,
                           lam, 0.5, mode)
        assert got == pytest.approx(want, abs=1e-6)

    def test_locnce_against_loop_oracle(self, rng):
        t, s = random_batch(rng, 3, 4), random_batch(rng, 3, 4)
        t.boxes.data[:, 2] = t.boxes.data[:, 3]
        sigma = random_matching(rng, 3, 4)
        cfg = toy_config(3, 4, delta=0.5)
        want = loop_locnce(t.embeddings.data, s.embeddings.data, t.boxes.data, sigma, cfg.tau, 0.5)
        assert O.locnce_loss(t, s, sigma, cfg).item() == pytest.approx(want, abs=1e-5)

    def test_locnce_duplicates_count_twice(self, rng):
        t, s = random_batch(rng, 1, 3), random_batch(rng, 1, 3)
        t.boxes.data[0] = [[0.2, 0.2, 0.2, 0.2], [0.2, 0.2, 0.2, 0.2], [0.9, 0.9, 0.1, 0.1]]
        sigma = identity(1, 3)
        cfg = toy_config(1, 3, delta=0.5)
        assert O.iou_gates(t.boxes, 0.5)[0].sum(axis=1).tolist() == [2, 2, 1]
        log_p = np.log(O.cross_similarities(t.embeddings, s.embeddings, cfg.tau).values.data.astype(np.float64))
        want = -(log_p[0, 0] + log_p[0, 1] + log_p[1, 0] + log_p[1, 1] + log_p[2, 2]) / 3
        assert O.locnce_loss(t, s, sigma, cfg).item() == pytest.approx(want, abs=1e-5)

    def test_delta_one_reductions(self, rng):
        for _ in range(20):
            b, n = int(rng.choice([1, 2, 4])), int(rng.choice([2, 4, 8]))
            t, s = random_batch(rng, b, n), random_batch(rng, b, n)
            sigma = random_matching(rng, b, n)
            cfg = toy_config(b, n, delta=1.0, lambda_sce=float(rng.uniform()))
            with T.precision(np.float64):
                assert O.locnce_loss(t, s, sigma, cfg).item() == pytest.approx(
                    O.infonce_loss(t, s, sigma, cfg).item(), abs=1e-6)
                assert O.sce_loss(t, s, sigma, cfg).item() == O.locsce_loss(t, s, sigma, cfg, delta=1.0).item()

    @pytest.mark.parametrize("kind", ["locsce", "sce", "infonce", "locnce"])
    def test_non_negative_at_lambda_one(self, rng, kind):
        for _ in range(10):
            t, s = random_batch(rng, 2, 4), random_batch(rng, 2, 4)
            cfg = toy_config(2, 4, lambda_sce=1.0, loss_kind=kind)
            assert O.contrastive_loss(t, s, random_matching(rng, 2, 4), cfg).item() >= 0

    @pytest.mark.parametrize("kind", ["locsce", "infonce", "locnce"])
    def test_teacher_detached(self, rng, kind):
        t = random_batch(rng, 2, 3, requires_grad=True)
        s = random_batch(rng, 2, 3, requires_grad=True)
        cfg = toy_config(2, 3, loss_kind=kind)
        O.contrastive_loss(t, s, random_matching(rng, 2, 3), cfg).backward()
        assert t.embeddings.grad is None and t.boxes.grad is None
        assert s.embeddings.grad is not None and np.abs(s.embeddings.grad).sum() > 0

    def test_gate_monotone_in_delta(self, rng):
        boxes = random_batch(rng, 3, 6).boxes
        counts = [int(O.iou_gates(boxes, d).sum()) for d in np.linspace(0.05, 1.0, 20)]
        assert counts == sorted(counts, reverse=True)
        assert counts[-1] == 18

    def test_locsce_gradient(self, rng):
        t = random_batch(rng, 2, 2)
        sigma = random_matching(rng, 2, 2)
        cfg = toy_config(2, 2)
        z0 = random_batch(rng, 2, 2).embeddings

        def f(z):
            return O.locsce_loss(t, ProposalBatch(T.l2_normalize(z), t.boxes), sigma, cfg)

        assert grad_check(f, z0, step=1e-4) < 1e-2

    def test_infonce_descent(self, rng):
        """Gradient steps on the student direction strictly lower InfoNCE."""
        t = random_batch(rng, 2, 3)
        sigma = random_matching(rng, 2, 3)
        cfg = toy_config(2, 3)
        u = Tensor(rng.normal(size=(2, 3, 8)), requires_grad=True)
        losses = []
        for _ in range(50):
            u.grad = None
            loss = O.infonce_loss(t, ProposalBatch(T.l2_normalize(u), t.boxes), sigma, cfg)
            loss.backward()
            losses.append(loss.item())
            u.data = u.data - np.float32(0.05) * u.grad
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestGlobalLoss:
    def test_arithmetic(self, rng, monkeypatch):
        monkeypatch.setitem(O.CONTRASTIVE, "locsce", lambda *a: Tensor(0.5))
        s = random_batch(rng, 2, 3)
        ss = [s.boxes.data[i] for i in range(2)]
        cfg = RunConfig(batch_size=2, num_queries=3, num_ss_boxes=3)
        total, contrast, coord, giou = O.global_loss(s, s, identity(2, 3), identity(2, 3), ss, cfg)
        assert coord.item() == 0.0 and giou.item() == pytest.approx(0.0, abs=1e-6)
        assert total.item() == pytest.approx(1.0, abs=1e-6)

    def test_defaults_from_config(self):
        cfg = RunConfig()
        assert (cfg.lambda_contrast, cfg.lambda_coord, cfg.lambda_giou) == (2.0, 5.0, 2.0)

    def test_box_terms_match_manual_sum(self, rng):
        s = random_batch(rng, 2, 4)
        ss = [boxes_off_kinks(rng, 3, s.boxes.data[i, :3]) for i in range(2)]
        sigma_box = [MatchAssignment([(j, j) for j in range(3)], 0.0) for _ in range(2)]
        cfg = toy_config(2, 4, num_ss_boxes=3)
        _, _, coord, giou = O.global_loss(s, s, identity(2, 4), sigma_box, ss, cfg)
        l1 = sum(np.abs(s.boxes.data[i, j].astype(float) - ss[i][j]).sum() for i in range(2) for j in range(3))
        gl = sum(1 - (iou(BoxN(*map(float, s.boxes.data[i, j])), BoxN(*map(float, ss[i][j])))
                      - _enclosing_penalty(s.boxes.data[i, j], ss[i][j])) for i in range(2) for j in range(3))
        assert coord.item() == pytest.approx(5 * l1 / 6, abs=1e-5)
        assert giou.item() == pytest.approx(2 * gl / 6, abs=1e-5)

    def test_box_gradient_reaches_student_boxes(self, rng):
        s = random_batch(rng, 1, 3, requires_grad=True)
        ss = [boxes_off_kinks(rng, 2, s.boxes.data[0, :2])]
        cfg = toy_config(1, 3, num_ss_boxes=2)
        sigma_box = [MatchAssignment([(0, 0), (1, 1)], 0.0)]
        total, *_ = O.global_loss(s, s, identity(1, 3), sigma_box, ss, cfg)
        total.backward()
        assert np.all(s.boxes.grad[0, 2] == 0) and np.abs(s.boxes.grad[0, :2]).sum() > 0


def _enclosing_penalty(a, b):
    a, b = BoxN(*map(float, a)), BoxN(*map(float, b))
    ca, cb = a.to_corners(), b.to_corners()
    hull = (max(ca[2], cb[2]) - min(ca[0], cb[0])) * (max(ca[3], cb[3]) - min(ca[1], cb[1]))
    inter_w = max(0.0, min(ca[2], cb[2]) - max(ca[0], cb[0]))
    inter_h = max(0.0, min(ca[3], cb[3]) - max(ca[1], cb[1]))
    union = a.w * a.h + b.w * b.h - inter_w * inter_h
    return (hull - union) / hull
