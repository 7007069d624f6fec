import math

import numpy as np
import pytest
import torch

from whatamithinking.numlesa import (
    DomainError,
    Empty,
    LossBreakdown,
    LossLog,
    UncertaintyWeights,
    combined_fixed,
    combined_uncertainty,
    grad_ratio,
    mlm_loss,
    number_loss_logscaled,
    number_loss_mse,
    read_loss_log,
    stationary_sigmas,
)


def _positions(*flags):
    return torch.tensor([list(flags)], dtype=torch.bool)


class TestClosedForms:
    def test_uniform_logits_give_log_vocab(self):
        vocab_size = 37
        logits = torch.zeros(1, 4, vocab_size, dtype=torch.float64)
        loss = mlm_loss(logits, torch.tensor([3, 9]), _positions(False, True, False, True))
        assert loss.item() == pytest.approx(math.log(vocab_size), abs=1e-12)

    def test_mse(self):
        f2 = torch.tensor([[1.0, 5.0, 3.0]], dtype=torch.float64)
        y2 = torch.tensor([3.0, 1.0], dtype=torch.float64)
        loss = number_loss_mse(f2, y2, _positions(True, True, False))
        assert loss.item() == pytest.approx(10.0)

    def test_mse_single(self):
        f2 = torch.tensor([[1.0]], dtype=torch.float64)
        y2 = torch.tensor([3.0], dtype=torch.float64)
        assert number_loss_mse(f2, y2, _positions(True)).item() == pytest.approx(4.0)

    def test_logscaled_unit(self):
        f2 = torch.tensor([[math.e - 1]], dtype=torch.float64)
        y2 = torch.tensor([0.0], dtype=torch.float64)
        assert number_loss_logscaled(f2, y2, _positions(True)).item() == pytest.approx(1.0)

    def test_logscaled_exact_prediction(self):
        f2 = torch.tensor([[120.0, 37.5]], dtype=torch.float64)
        y2 = torch.tensor([120.0, 37.5], dtype=torch.float64)
        assert number_loss_logscaled(f2, y2, _positions(True, True)).item() == 0.0

    def test_fixed(self):
        assert combined_fixed(2.0, 4.0) == 3.0

    def test_uncertainty_at_unit_sigmas(self):
        assert combined_uncertainty(1.0, 2.0, 1.0, 1.0) == pytest.approx(2.0)

    def test_uncertainty_tensor_and_float_agree(self):
        expected = combined_uncertainty(0.7, 3.0, 0.5, 2.0)
        actual = combined_uncertainty(
            torch.tensor(0.7), torch.tensor(3.0), torch.tensor(0.5), torch.tensor(2.0)
        )
        assert actual.item() == pytest.approx(expected, abs=1e-12)


class TestDomain:
    def test_no_masked_positions(self):
        with pytest.raises(DomainError):
            mlm_loss(torch.zeros(1, 2, 5), torch.tensor([], dtype=torch.long), _positions(False, False))

    def test_prediction_at_or_below_minus_one(self):
        f2 = torch.tensor([[-1.0]], dtype=torch.float64)
        with pytest.raises(DomainError):
            number_loss_logscaled(f2, torch.tensor([1.0]), _positions(True))

    def test_negative_target(self):
        f2 = torch.tensor([[1.0]], dtype=torch.float64)
        with pytest.raises(DomainError):
            number_loss_logscaled(f2, torch.tensor([-2.0]), _positions(True))

    @pytest.mark.parametrize("sigmas", [(0.0, 1.0), (1.0, -1.0)])
    def test_sigmas_must_be_positive(self, sigmas):
        with pytest.raises(DomainError):
            combined_uncertainty(1.0, 1.0, *sigmas)

    def test_positions_must_be_boolean(self):
        with pytest.raises(TypeError):
            number_loss_mse(torch.zeros(1, 2), torch.zeros(1), torch.tensor([[0, 1]]))


class TestGradRatio:
    def test_known_value(self):
        assert grad_ratio(9.0, 4.0) == pytest.approx(math.log(2) / 50)

    @pytest.mark.parametrize("f2, y2", [(9.0, 4.0), (0.5, 120.0), (37.0, 36.5), (2.0, 0.0)])
    def test_matches_autodiff(self, f2, y2):
        prediction = torch.tensor([[f2]], dtype=torch.float64, requires_grad=True)
        target = torch.tensor([y2], dtype=torch.float64)
        (mse_grad,) = torch.autograd.grad(number_loss_mse(prediction, target, _positions(True)), prediction)
        (log_grad,) = torch.autograd.grad(
            number_loss_logscaled(prediction, target, _positions(True)), prediction
        )
        expected = abs(log_grad.item()) / abs(mse_grad.item())
        assert abs(grad_ratio(f2, y2) - expected) < 1e-8

    def test_equal_prediction_is_empty(self):
        assert grad_ratio(3.0, 3.0) is Empty

    def test_limit_near_target(self):
        y2 = 4.0
        assert grad_ratio(y2 + 1e-7, y2) == pytest.approx(1 / (y2 + 1) ** 2, rel=1e-5)

    def test_monotone_in_distance(self):
        ratios = [grad_ratio(f2, 1.0) for f2 in (2.0, 5.0, 20.0, 100.0, 1000.0)]
        assert ratios == sorted(ratios, reverse=True)

    def test_outliers_are_damped(self):
        # an outlier pulls on the plain squared loss far harder than on the log-scaled one
        errors = np.logspace(1, 4, 20)
        ratios = [1 / grad_ratio(100.0 + error, 100.0) for error in errors]
        assert max(ratios) > 1e3

    def test_domain(self):
        with pytest.raises(DomainError):
            grad_ratio(-1.0, 3.0)


class TestUncertaintyWeights:
    def test_starts_at_unit_sigmas(self):
        weights = UncertaintyWeights()
        assert [_.item() for _ in weights.sigmas()] == [1.0, 1.0]
        assert weights(torch.tensor(1.0), torch.tensor(2.0)).item() == pytest.approx(2.0)

    @pytest.mark.parametrize("l1, l2", [(0.5, 2.0), (2.0, 0.3)])
    def test_converges_to_stationary_point(self, l1, l2):
        weights = UncertaintyWeights()
        optimizer = torch.optim.SGD(weights.parameters(), lr=0.1)
        for _ in range(2000):
            optimizer.zero_grad()
            weights(torch.tensor(l1), torch.tensor(l2)).backward()
            optimizer.step()
        expected = stationary_sigmas(l1, l2)
        for actual, target in zip(weights.sigmas(), expected):
            assert abs(actual.item() - target) < 1e-3

    def test_stationary_point_is_a_minimum(self):
        s1, s2 = stationary_sigmas(0.8, 1.7)
        best = combined_uncertainty(0.8, 1.7, s1, s2)
        for d1, d2 in ((0.05, 0.0), (-0.05, 0.0), (0.0, 0.05), (0.0, -0.05)):
            assert combined_uncertainty(0.8, 1.7, s1 + d1, s2 + d2) > best


class TestLossLog:
    def test_write_then_read(self, tmp_path):
        path = tmp_path / "loss.jsonl"
        breakdown = LossBreakdown(l1=2.0, l2=4.0, l_tilde2=0.5, combined=1.25)
        with LossLog(path) as log:
            log.write(0, breakdown, stage="prefinetune", seed=3)
            log.write(1, breakdown, stage="prefinetune", seed=3)
        records = read_loss_log(path)
        assert [_["step"] for _ in records] == [0, 1]
        assert records[0]["combined"] == 1.25
        assert records[0]["stage"] == "prefinetune"

    def test_appends(self, tmp_path):
        path = tmp_path / "loss.jsonl"
        breakdown = LossBreakdown(l1=1.0, l2=1.0, l_tilde2=1.0, combined=1.0)
        for step in range(2):
            with LossLog(path) as log:
                log.write(step, breakdown)
        assert len(read_loss_log(path)) == 2

    def test_keep_through_drops_later_steps(self, tmp_path):
        path = tmp_path / "loss.jsonl"
        breakdown = LossBreakdown(l1=1.0, l2=1.0, l_tilde2=1.0, combined=1.0)
        with LossLog(path) as log:
            for step in range(1, 6):
                log.write(step, breakdown)
        with LossLog(path, keep_through=3) as log:
            log.write(4, breakdown)
        assert [_["step"] for _ in read_loss_log(path)] == [1, 2, 3, 4]

    def test_keep_through_without_a_log(self, tmp_path):
        with LossLog(tmp_path / "loss.jsonl", keep_through=3):
            pass
        assert read_loss_log(tmp_path / "loss.jsonl") == []

    def test_breakdown_finiteness(self):
        assert LossBreakdown(l1=1.0, l2=1.0, l_tilde2=1.0, combined=1.0).is_finite()
        assert not LossBreakdown(l1=math.nan, l2=1.0, l_tilde2=1.0, combined=1.0).is_finite()
