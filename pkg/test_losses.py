"""
Tests for the Sobel structural loss, Gram style loss and LossEvaluator.

Run from your project root:
    pytest test_losses.py
"""

import os
import sys

import pytest
import torch

# Add backend to path so imports work
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'backend'))

from components.errors import DimensionMismatchError, ValidationError
from components.losses import (
    LossEvaluator,
    content_loss,
    gram_matrix,
    luminance,
    sobel_edges,
    style_loss,
)


def step_edge(size: int = 5) -> torch.Tensor:
    image = torch.zeros(size, size, dtype=torch.float64)
    image[:, size // 2:] = 1.0
    return image


def test_sobel_zero_on_constant_image():
    edges = sobel_edges(torch.full((3, 8, 8), 0.4)).data
    assert torch.allclose(edges, torch.zeros(8, 8), atol=1e-6)


def test_sobel_matches_hand_convolution_on_step_edge():
    edges = sobel_edges(step_edge()).data
    expected = torch.zeros(5, 5, dtype=torch.float64)
    expected[:, 1] = 4.0
    expected[:, 2] = 4.0
    assert torch.equal(edges, expected)


def test_sobel_rejects_tiny_images():
    with pytest.raises(DimensionMismatchError):
        sobel_edges(torch.zeros(2, 5))


def test_luminance_weights_sum_to_one():
    gray = luminance(torch.full((3, 4, 4), 0.5))
    assert torch.allclose(gray, torch.full((4, 4), 0.5))
    with pytest.raises(DimensionMismatchError):
        luminance(torch.zeros(4, 4, 4))


def test_content_loss_identical_is_zero():
    image = torch.rand(3, 16, 16)
    assert content_loss(image, image) == 0.0


def test_content_loss_constant_vs_step_edge():
    generated = torch.full((5, 5), 0.3, dtype=torch.float64)
    assert content_loss(generated, step_edge()) == pytest.approx(40 / 25)


def test_content_loss_requires_equal_resolution():
    with pytest.raises(DimensionMismatchError):
        content_loss(torch.rand(3, 8, 8), torch.rand(3, 8, 9))


def test_gram_symmetric_and_psd():
    torch.manual_seed(0)
    for _ in range(100):
        features = torch.randn(6, 4, 5, dtype=torch.float64)
        gram = gram_matrix(features).data
        assert torch.allclose(gram, gram.T)
        assert torch.linalg.eigvalsh(gram).min() > -1e-10


def test_gram_normalization():
    features = torch.ones(2, 3, 4)
    normalized = gram_matrix(features)
    assert normalized.normalization == 24.0
    assert torch.allclose(normalized.data, torch.full((2, 2), 12 / 24))
    raw = gram_matrix(features, normalize=False)
    assert torch.allclose(raw.data, torch.full((2, 2), 12.0))
    assert normalized.channels == 2


def test_style_loss_zero_for_identical_features():
    feats = {'relu1_1': torch.rand(4, 6, 6), 'relu2_1': torch.rand(8, 3, 3)}
    assert style_loss(feats, feats) == 0.0


def test_style_loss_invariant_to_spatial_permutation():
    torch.manual_seed(1)
    style = {'relu1_1': torch.rand(4, 6, 6, dtype=torch.float64)}
    generated = torch.rand(4, 6, 6, dtype=torch.float64)
    perm = torch.randperm(36)
    shuffled = generated.reshape(4, 36)[:, perm].reshape(4, 6, 6)
    a = style_loss({'relu1_1': generated}, style)
    b = style_loss({'relu1_1': shuffled}, style)
    assert a == pytest.approx(b, rel=1e-9)


def test_style_loss_layer_mismatch():
    with pytest.raises(DimensionMismatchError):
        style_loss({'relu1_1': torch.rand(2, 3, 3)}, {'relu2_1': torch.rand(2, 3, 3)})


class MeanPoolExtractor:
    """Stand-in VGG: each 'layer' is the image average-pooled by a different factor."""

    def __call__(self, images, layers):
        images = images if images.dim() == 4 else images.unsqueeze(0)
        out = {}
        for i, name in enumerate(layers):
            out[name] = torch.nn.functional.avg_pool2d(images, 2 ** i) if i else images
        return out


def test_loss_evaluator_switches():
    extractor = MeanPoolExtractor()
    content = torch.rand(3, 8, 8)
    style = torch.rand(3, 8, 8)

    both = LossEvaluator(extractor, ['relu1_1', 'relu2_1'])
    both.set_style(style)
    assert both.content(content, content) == 0.0
    assert both.style(style) == 0.0
    assert both.style(content) > 0.0

    neither = LossEvaluator(extractor, ['relu1_1'], use_sobel=False, use_gram=False)
    neither.set_style(style)
    assert neither.content(content, content) is None
    assert neither.style(content) is None


def test_loss_evaluator_needs_style_first():
    evaluator = LossEvaluator(MeanPoolExtractor(), ['relu1_1'])
    with pytest.raises(ValidationError):
        evaluator.style(torch.rand(3, 8, 8))


def test_for_style_binds_a_copy():
    shared = LossEvaluator(MeanPoolExtractor(), ['relu1_1'])
    style_a, style_b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    bound_a = shared.for_style(style_a)
    bound_b = shared.for_style(style_b)
    assert bound_a.style(style_a) == 0.0
    assert bound_b.style(style_b) == 0.0
    assert bound_a.style(style_b) > 0.0
    with pytest.raises(ValidationError):
        shared.style(style_a)


def test_loss_evaluator_from_config():
    config = {'losses': {'style_layers': ['relu1_1'], 'gram_normalize': False,
                         'use_sobel': True, 'use_gram': False}}
    evaluator = LossEvaluator.from_config(config, MeanPoolExtractor())
    assert evaluator.normalize is False
    assert evaluator.use_gram is False
