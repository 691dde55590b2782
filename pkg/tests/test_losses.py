import math

import pytest
import torch

from dlcbench.errors import ConfigError, DimensionError
from dlcbench.losses import loss_aux, loss_ce, loss_kd_ce, loss_kd_kl


def logits_for_probs(probs):
    """Logits whose softmax equals the given distribution."""
    return torch.log(torch.tensor([probs]))


def test_ce_uniform_logits_is_log_c():
    for c in (2, 5, 10):
        logits = torch.zeros(3, c)
        labels = torch.tensor([0, 1, c - 1])
        assert abs(float(loss_ce(logits, labels)) - math.log(c)) < 1e-6


def test_ce_confident_correct_goes_to_zero():
    logits = torch.tensor([[30.0, 0.0]])
    assert float(loss_ce(logits, torch.tensor([0]))) < 1e-6


def test_ce_hand_case():
    value = float(loss_ce(torch.tensor([[1.0, 0.0]]), torch.tensor([0])))
    assert abs(value - 0.31326168) < 1e-3


def test_ce_label_out_of_range():
    with pytest.raises(DimensionError):
        loss_ce(torch.zeros(1, 3), torch.tensor([3]))


def test_kd_ce_uniform_equals_entropy():
    for c in (2, 4):
        logits = torch.zeros(2, c)
        assert abs(float(loss_kd_ce(logits, logits)) - math.log(c)) < 1e-6


def test_kd_ce_matching_one_hot_goes_to_zero():
    teacher = torch.tensor([[40.0, 0.0]])
    assert float(loss_kd_ce(teacher, teacher)) < 1e-6


def test_kd_ce_hand_case():
    student = logits_for_probs([0.25, 0.75])
    teacher = logits_for_probs([0.5, 0.5])
    assert abs(float(loss_kd_ce(student, teacher)) - 0.8369882) < 1e-3


def test_kd_ce_width_mismatch():
    with pytest.raises(DimensionError):
        loss_kd_ce(torch.zeros(1, 3), torch.zeros(1, 2))


@pytest.mark.parametrize("tau", [1.0, 2.0, 4.0])
def test_kd_kl_zero_at_equality(tau):
    logits = torch.randn(4, 6, generator=torch.Generator().manual_seed(0))
    assert abs(float(loss_kd_kl(logits, logits, tau))) < 1e-7


def test_kd_kl_hand_case():
    student = logits_for_probs([0.25, 0.75])
    teacher = logits_for_probs([0.5, 0.5])
    expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    value = float(loss_kd_kl(student, teacher, tau=1.0))
    assert abs(value - expected) < 1e-6
    assert abs(value - 0.1438) < 1e-3


@pytest.mark.parametrize("seed", range(6))
def test_kd_kl_non_negative(seed):
    gen = torch.Generator().manual_seed(seed)
    student = torch.randn(5, 7, generator=gen) * 3
    teacher = torch.randn(5, 7, generator=gen) * 3
    for tau in (0.5, 1.0, 2.0):
        assert float(loss_kd_kl(student, teacher, tau)) >= -1e-7


def test_kd_kl_rejects_bad_tau():
    with pytest.raises(ConfigError):
        loss_kd_kl(torch.zeros(1, 2), torch.zeros(1, 2), tau=0.0)


def test_aux_current_task_perfect_predictions():
    # samples of classes 4 and 5 with confident aux predictions at slots 1, 2
    logits = torch.tensor([[0.0, 40.0, 0.0], [0.0, 0.0, 40.0]])
    labels = torch.tensor([4, 5])
    assert float(loss_aux(logits, labels, current_task_classes=(4, 5))) < 1e-6


def test_aux_replay_maps_to_old_slot():
    logits = torch.tensor([[40.0, 0.0, 0.0]])
    labels = torch.tensor([1])  # an old class, not in the current task
    assert float(loss_aux(logits, labels, current_task_classes=(4, 5))) < 1e-6


def test_aux_mixed_batch_is_mean_of_terms():
    a = torch.tensor([[1.0, 0.5, -0.2]])
    b = torch.tensor([[0.3, 2.0, 0.1]])
    la = float(loss_aux(a, torch.tensor([0]), (4, 5)))     # replay sample
    lb = float(loss_aux(b, torch.tensor([4]), (4, 5)))     # current-task sample
    both = float(loss_aux(torch.cat([a, b]), torch.tensor([0, 4]), (4, 5)))
    assert abs(both - 0.5 * (la + lb)) < 1e-6


def test_aux_width_mismatch():
    with pytest.raises(DimensionError):
        loss_aux(torch.zeros(1, 2), torch.tensor([4]), (4, 5))
