import math

import numpy as np
import pytest
import torch

from src.core.errors import ContractError, DimensionError
from src.core.gradcheck import check_gradients
from src.core.tensor import Tape, Tensor
from src.training.losses import candidate_scores, distill_kl, infonce_loss, own_candidate_columns


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestInfoNCE:
    def test_uniform_logits_give_log_pool_size(self):
        q = Tensor(np.zeros((1, 4)), dtype=np.float64)
        pos = Tensor(np.zeros((1, 4)), dtype=np.float64)
        neg = Tensor(np.zeros((7, 4)), dtype=np.float64)
        loss = infonce_loss(q, pos, neg, in_batch=False, tau=0.02).item()
        assert loss == pytest.approx(math.log(8), abs=1e-6)

    def test_in_batch_pool_matches_torch_cross_entropy(self, rng):
        q, pos, neg = _unit_rows(rng, 4, 8), _unit_rows(rng, 4, 8), _unit_rows(rng, 8, 8)
        ours = infonce_loss(Tensor(q), Tensor(pos), Tensor(neg), in_batch=True, tau=0.05).item()
        logits = torch.tensor(q) @ torch.cat([torch.tensor(pos), torch.tensor(neg)]).T / 0.05
        reference = torch.nn.functional.cross_entropy(logits, torch.arange(4)).item()
        assert ours == pytest.approx(reference, abs=1e-9)

    def test_own_pool_ignores_other_items(self, rng):
        q, pos, neg = _unit_rows(rng, 3, 6), _unit_rows(rng, 3, 6), _unit_rows(rng, 6, 6)
        ours = infonce_loss(Tensor(q), Tensor(pos), Tensor(neg), in_batch=False, tau=0.1).item()
        per_item = []
        for b in range(3):
            candidates = np.vstack([pos[b], neg[2 * b : 2 * b + 2]])
            logits = torch.tensor(candidates @ q[b] / 0.1)
            per_item.append(-torch.log_softmax(logits, dim=0)[0].item())
        assert ours == pytest.approx(float(np.mean(per_item)), abs=1e-9)

    def test_tau_prescaling_identity(self, rng):
        q, pos = _unit_rows(rng, 5, 8), _unit_rows(rng, 5, 8)
        tau = 0.02
        direct = infonce_loss(Tensor(q), Tensor(pos), tau=tau).item()
        prescaled = infonce_loss(Tensor(q / tau), Tensor(pos), tau=1.0).item()
        assert direct == pytest.approx(prescaled, abs=1e-9)

    def test_gradients(self, rng):
        q = Tensor(_unit_rows(rng, 4, 6), dtype=np.float64)
        pos = Tensor(_unit_rows(rng, 4, 6), dtype=np.float64)
        neg = Tensor(_unit_rows(rng, 8, 6), dtype=np.float64)
        for in_batch in (True, False):
            error = check_gradients(lambda: infonce_loss(q, pos, neg, in_batch=in_batch, tau=0.5), [q, pos, neg])
            assert error < 1e-4

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            infonce_loss(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))))
        with pytest.raises(DimensionError):
            infonce_loss(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))))

    def test_tau_must_be_positive(self):
        with pytest.raises(ContractError):
            infonce_loss(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))), tau=0.0)


class TestDistillation:
    def test_zero_when_student_matches_teacher(self, rng):
        scores = rng.normal(size=(4, 8))
        assert abs(distill_kl(Tensor(scores, dtype=np.float64), scores, tau=0.02).item()) < 1e-9

    def test_matches_torch_kl(self, rng):
        student, teacher = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        ours = distill_kl(Tensor(student, dtype=np.float64), teacher, tau=0.5).item()
        reference = torch.nn.functional.kl_div(
            torch.log_softmax(torch.tensor(student) / 0.5, dim=-1),
            torch.softmax(torch.tensor(teacher) / 0.5, dim=-1),
            reduction="batchmean",
        ).item()
        assert ours == pytest.approx(reference, abs=1e-9)

    def test_gradient_matches_torch(self, rng):
        student, teacher = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        s = Tensor(student, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(distill_kl(s, teacher, tau=0.3))
        st = torch.tensor(student, requires_grad=True)
        torch.nn.functional.kl_div(
            torch.log_softmax(st / 0.3, dim=-1), torch.softmax(torch.tensor(teacher) / 0.3, dim=-1), reduction="batchmean"
        ).backward()
        np.testing.assert_allclose(s.grad, st.grad.numpy(), atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            distill_kl(Tensor(np.ones((2, 3))), np.ones((2, 4)))


def test_candidate_scores_pick_own_columns(rng):
    q, pos, neg = _unit_rows(rng, 2, 4), _unit_rows(rng, 2, 4), _unit_rows(rng, 4, 4)
    scores = candidate_scores(Tensor(q), Tensor(pos), Tensor(neg)).data
    assert scores.shape == (2, 3)
    np.testing.assert_allclose(scores[1], [q[1] @ pos[1], q[1] @ neg[2], q[1] @ neg[3]], atol=1e-12)
    np.testing.assert_array_equal(own_candidate_columns(2, 2), [[0, 2, 3], [1, 4, 5]])
