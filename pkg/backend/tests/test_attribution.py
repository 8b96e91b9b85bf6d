import numpy as np
import pytest
import torch

from app.engine.attribution import SEGMENTS, attribution_map, mask_mass, segment_tokens, template_filler
from app.middleware.error_handler import ParameterError


@pytest.fixture
def image(semantic) -> np.ndarray:
    return semantic.images[0]


@pytest.mark.parametrize("segment", ["domain-specific", "domain-agnostic"])
def test_attribution_map_shape_and_range(prompt_params, encoder, image, segment):
    saliency = attribution_map(prompt_params, encoder, image, 0, segment)
    assert saliency.shape == (16, 16)
    assert saliency.dtype == np.float32
    assert saliency.min() >= 0.0
    assert saliency.max() == pytest.approx(1.0)


def test_attribution_is_deterministic(prompt_params, encoder, image):
    a = attribution_map(prompt_params, encoder, image, 1)
    b = attribution_map(prompt_params, encoder, image, 1)
    np.testing.assert_array_equal(a, b)


def test_segment_tokens_keep_the_full_layout(prompt_params, encoder):
    image = torch.rand(1, 3, 16, 16)
    full = prompt_params.assemble_batch(image, 0)
    for segment in SEGMENTS:
        assert segment_tokens(prompt_params, encoder, image, 0, segment).shape == full.shape == (1, 4 + 10 + 5 + 10 + 2, 16)


def test_dropped_segments_become_template_tokens_in_place(prompt_params, encoder):
    image = torch.rand(1, 3, 16, 16)
    full = prompt_params.assemble_batch(image, 1).detach()
    layout = prompt_params.segment_layout(1)

    specific = segment_tokens(prompt_params, encoder, image, 1, "domain-specific")
    torch.testing.assert_close(specific[0, layout["domain"]], prompt_params.domain_prompts[1].detach())
    for name in ("instance", "global"):
        part = specific[0, layout[name]]
        torch.testing.assert_close(part, template_filler(encoder, part.shape[0]))

    agnostic = segment_tokens(prompt_params, encoder, image, 1, "domain-agnostic")
    torch.testing.assert_close(agnostic[0, layout["instance"]], full[0, layout["instance"]])
    torch.testing.assert_close(agnostic[0, layout["global"]], full[0, layout["global"]])
    torch.testing.assert_close(agnostic[0, layout["domain"]], template_filler(encoder, 5))

    for tokens in (specific, agnostic):
        torch.testing.assert_close(tokens[0, layout["prefix"]], full[0, layout["prefix"]])
        torch.testing.assert_close(tokens[0, layout["suffix"]], full[0, layout["suffix"]])


def test_segment_and_domain_are_checked(prompt_params, encoder, image):
    with pytest.raises(ParameterError):
        segment_tokens(prompt_params, encoder, torch.rand(1, 3, 16, 16), 0, "weather")
    with pytest.raises(ParameterError):
        attribution_map(prompt_params, encoder, image, 2)


def test_mask_mass():
    saliency = np.array([[1.0, 1.0], [0.0, 0.0]], dtype=np.float32)
    left = np.array([[True, False], [True, False]])
    assert mask_mass(saliency, left) == pytest.approx(0.5)
    assert mask_mass(np.zeros((2, 2), dtype=np.float32), left) == 0.0
