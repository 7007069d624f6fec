import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from whatamithinking.numlesa import (
    MIN_GRAD_COORDS,
    DomainError,
    Example,
    NonScalarError,
    ShapeError,
    add,
    assert_finite,
    collate,
    encode_notes,
    backward,
    build_model,
    classify_objective,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    mask_for_mlm,
    matmul,
    pretrain_objective,
    row_softmax,
    scale,
    transpose,
)


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestShapes:
    def test_matmul_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc_info:
            matmul(_rand(2, 3), _rand(4, 5))
        assert exc_info.value.left == (2, 3)
        assert exc_info.value.right == (4, 5)

    def test_matmul_batch_broadcast(self):
        assert matmul(_rand(2, 1, 3, 4), _rand(5, 4, 6)).shape == (2, 5, 3, 6)
        with pytest.raises(ShapeError):
            matmul(_rand(2, 3, 4), _rand(3, 4, 5))

    def test_add(self):
        with pytest.raises(ShapeError):
            add(_rand(2, 3), _rand(4))

    def test_scale_rows(self):
        a = _rand(2, 3, 4)
        factor = _rand(2, 3, seed=1)
        torch.testing.assert_close(scale(a, factor), a * factor[..., None])
        with pytest.raises(ShapeError):
            scale(a, _rand(3))

    def test_transpose_needs_a_matrix(self):
        with pytest.raises(ShapeError):
            transpose(_rand(3))


class TestKernels:
    def test_row_softmax_masks_columns(self):
        a = _rand(3, 4)
        mask = torch.tensor([True, True, False, True])
        probs = row_softmax(a, mask)
        assert torch.all(probs[:, 2] == 0)
        torch.testing.assert_close(probs.sum(-1), torch.ones(3, dtype=torch.float64))

    def test_layer_norm_matches_torch(self):
        x = _rand(2, 5)
        w, b = _rand(5, seed=1), _rand(5, seed=2)
        torch.testing.assert_close(layer_norm(x, w, b), F.layer_norm(x, (5,), w, b, 1e-12))
        with pytest.raises(ShapeError):
            layer_norm(x, _rand(4))

    def test_l2_normalize(self):
        x = torch.tensor([[3.0, 4.0], [0.0, 0.0]], dtype=torch.float64)
        out = l2_normalize(x)
        torch.testing.assert_close(out[0], torch.tensor([0.6, 0.8], dtype=torch.float64))
        assert torch.all(out[1] == 0)

    def test_assert_finite(self):
        with pytest.raises(DomainError):
            assert_finite(torch.tensor([1.0, math.nan]), "x")


class TestBackward:
    def test_non_scalar(self):
        x = _rand(3).requires_grad_()
        with pytest.raises(NonScalarError):
            backward(x * 2, {"x": x})

    def test_only_reachable_parameters(self):
        x = _rand(3).requires_grad_()
        y = _rand(3, seed=1).requires_grad_()
        grads = backward((x**2).sum(), {"x": x, "y": y})
        assert set(grads) == {"x"}
        torch.testing.assert_close(grads["x"], 2 * x.detach())


class TestGradCheck:
    @pytest.mark.parametrize(
        "op",
        [
            lambda a, b: matmul(a, b).sum(),
            lambda a, b: (row_softmax(a) * b).sum(),
            lambda a, b: (layer_norm(a) * b).sum(),
            lambda a, b: gelu(a * b).sum(),
            lambda a, b: (l2_normalize(a, dim=-2) * b).sum(),
            lambda a, b: scale(a, b[:, 0]).pow(2).sum(),
        ],
    )
    def test_ops(self, op):
        a = _rand(4, 4).requires_grad_()
        b = _rand(4, 4, seed=1).requires_grad_()
        error = grad_check(lambda: op(a, b), {"a": a, "b": b}, n_coords=32)
        assert error < 1e-6

    def test_detects_wrong_gradient(self):
        a = _rand(3).requires_grad_()
        wrong = {"a": torch.zeros(3, dtype=torch.float64)}
        assert grad_check(lambda: (a**2).sum() + a.sum() * 3, {"a": a}, analytic=wrong) > 0.5

    @pytest.mark.parametrize("mode", ["plain", "lesa_xval"])
    @pytest.mark.parametrize("objective", ["pretrain", "classify"])
    def test_full_model(self, model_config, corpus, vocab, mode, objective):
        model = build_model(model_config.with_mode(mode), vocab, seed=0)
        examples = encode_notes(corpus[:2], vocab, model.config.max_length, with_labels=True)
        if objective == "pretrain":
            rng = np.random.default_rng(0)
            batch = collate([Example(seq=mask_for_mlm(_.seq, 0.3, rng)) for _ in examples])

            def loss():
                return pretrain_objective(model, batch)[0]

        else:
            batch = collate(examples)

            def loss():
                return classify_objective(model, batch)[0]

        params = dict(model.named_parameters())
        assert grad_check(loss, params, n_coords=MIN_GRAD_COORDS) < 1e-4

    def test_too_few_coordinates(self):
        a = _rand(8, 8).requires_grad_()
        with pytest.raises(ValueError):
            grad_check(lambda: (a**2).sum(), {"a": a}, n_coords=MIN_GRAD_COORDS - 1)

    def test_small_parameters_are_checked_whole(self):
        a = _rand(2, 3).requires_grad_()
        assert grad_check(lambda: (a**3).sum(), {"a": a}, n_coords=4) < 1e-6
