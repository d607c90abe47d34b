"""
Tests for KV swap, correspondence injection and the sampling hooks.

Run from your project root:
    pytest test_injection.py
"""

import os
import sys

import pytest
import torch

# Add backend to path so imports work
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'backend'))

from components.backbone.hooks import AttentionContext, HookRegistry
from components.correspondence import CorrespondenceMap
from components.errors import ConfigError, DimensionMismatchError, InvalidLocatorError
from components.injection import (
    CorrespondenceInjectionHook,
    InjectionConfig,
    KVSwapHook,
    StyleBank,
    attention_weights,
    build_injection_hooks,
    inject_correspondence,
    injection_active,
    kv_swap_attention,
    sampling_to_inversion_step,
    select_target_blocks,
)

BLOCK = 'up_blocks.3.attentions.0.transformer_blocks.0.attn1'


def context(phase, step, timestep, output, query=None, key=None, value=None, grid=(2, 2)):
    heads, tokens, d = output.shape
    return AttentionContext(
        block=BLOCK, phase=phase, step=step, timestep=timestep,
        query=query if query is not None else torch.randn(heads, tokens, d),
        key=key if key is not None else torch.randn(heads, tokens, d),
        value=value if value is not None else torch.randn(heads, tokens, d),
        output=output, heads=heads, grid=grid, scale=d ** -0.5,
    )


# ----------------------------------------------------------------------------
# arithmetic
# ----------------------------------------------------------------------------

def test_w_zero_leaves_features_bitwise_unchanged():
    feat = torch.randn(4, 3, 3)
    out = inject_correspondence(feat, torch.randn(4, 3, 3), CorrespondenceMap.identity((3, 3)), 0.0)
    assert torch.equal(out, feat)
    assert out is not feat


def test_injection_is_linear_in_w():
    torch.manual_seed(0)
    feat, attn = torch.randn(8, 4, 4, dtype=torch.float64), torch.randn(8, 2, 2, dtype=torch.float64)
    targets = torch.randint(0, 2, (4, 4, 2))
    mapping = CorrespondenceMap(targets, torch.rand(4, 4, dtype=torch.float64), target_grid=(2, 2))
    once = inject_correspondence(feat, attn, mapping, 0.6) - feat
    twice = inject_correspondence(feat, attn, mapping, 1.2) - feat
    assert torch.allclose(twice, 2 * once, atol=1e-6)


def test_injection_gathers_matched_location():
    feat = torch.zeros(1, 1, 2)
    attn = torch.tensor([[[10.0, 20.0]]])
    mapping = CorrespondenceMap(torch.tensor([[[0, 1], [0, 0]]]), torch.tensor([[0.5, 1.0]]),
                                target_grid=(1, 2))
    assert inject_correspondence(feat, attn, mapping, 1.0).flatten().tolist() == [20.0, 10.0]
    modulated = inject_correspondence(feat, attn, mapping, 1.0, modulate=True)
    assert modulated.flatten().tolist() == [10.0, 10.0]


def test_injection_shape_checks():
    mapping = CorrespondenceMap.identity((2, 2))
    with pytest.raises(DimensionMismatchError):
        inject_correspondence(torch.zeros(3, 2, 2), torch.zeros(4, 2, 2), mapping, 1.0)
    with pytest.raises(DimensionMismatchError):
        inject_correspondence(torch.zeros(3, 3, 3), torch.zeros(3, 2, 2), mapping, 1.0)


def test_kv_swap_gamma_one_is_plain_attention():
    torch.manual_seed(1)
    q, k, v = torch.randn(2, 5, 4), torch.randn(2, 7, 4), torch.randn(2, 7, 4)
    expected = torch.softmax(q @ k.transpose(1, 2) / 2.0, dim=-1) @ v
    assert torch.allclose(kv_swap_attention(q, k, v, gamma=1.0), expected, atol=1e-6)


def test_lower_gamma_sharpens_attention():
    torch.manual_seed(2)
    q, k = torch.randn(1, 6, 8), torch.randn(1, 6, 8)

    def entropy(p):
        return -(p * p.clamp_min(1e-12).log()).sum(-1).mean()

    assert entropy(attention_weights(q, k, gamma=0.5)) < entropy(attention_weights(q, k, gamma=1.0))


def test_kv_swap_rejects_mismatched_heads():
    with pytest.raises(DimensionMismatchError):
        kv_swap_attention(torch.randn(2, 3, 4), torch.randn(2, 3, 5), torch.randn(2, 3, 5), 0.7)


def test_injection_config_validation():
    with pytest.raises(ConfigError):
        InjectionConfig(gamma=0)
    with pytest.raises(ConfigError):
        InjectionConfig(w=-1)
    with pytest.raises(ConfigError):
        InjectionConfig(start_step=0)
    with pytest.raises(ConfigError):
        InjectionConfig(target_blocks=())


def test_injection_gate_and_step_mapping():
    config = InjectionConfig(start_step=49, total_steps=50)
    assert [k for k in range(1, 51) if injection_active(k, config)] == [49, 50]
    assert sampling_to_inversion_step(1, 50) == 50
    assert sampling_to_inversion_step(50, 50) == 1


# ----------------------------------------------------------------------------
# hooks
# ----------------------------------------------------------------------------

def test_style_bank_keeps_outputs_only_for_injection_steps():
    config = InjectionConfig(start_step=49, total_steps=50, target_blocks=(BLOCK,))
    bank = StyleBank.for_injection(config)
    registry = HookRegistry(bank.hooks())
    for step, t in ((1, 1), (2, 21), (3, 41)):
        registry.dispatch(context('invert', step, t, torch.randn(2, 4, 3)))
    assert len(bank) == 3
    assert bank.output(BLOCK, 1) is not None
    assert bank.output(BLOCK, 21) is not None
    assert bank.output(BLOCK, 41) is None
    assert bank.grid(BLOCK) == (2, 2)


def test_kv_swap_hook_uses_banked_keys_and_values():
    bank = StyleBank([BLOCK], total_steps=50)
    key, value = torch.randn(2, 4, 3), torch.randn(2, 4, 3)
    HookRegistry(bank.hooks()).dispatch(context('invert', 3, 41, torch.randn(2, 4, 3), key=key, value=value))

    hook = KVSwapHook(bank, gamma=0.7)
    query = torch.randn(2, 4, 3)
    ctx = context('sample', 48, 41, torch.randn(2, 4, 3), query=query)
    out = HookRegistry([hook]).dispatch(ctx)
    assert torch.allclose(out, kv_swap_attention(query, key, value, 0.7, 3 ** -0.5))
    assert hook.calls == {(BLOCK, 48): 1}

    with pytest.raises(InvalidLocatorError):
        HookRegistry([hook]).dispatch(context('sample', 1, 999, torch.zeros(2, 4, 3)))


def test_correspondence_hook_adds_matched_style_output_after_start_step():
    config = InjectionConfig(w=0.5, start_step=49, total_steps=50, target_blocks=(BLOCK,))
    bank = StyleBank.for_injection(config)
    style_out = torch.randn(2, 4, 3)
    HookRegistry(bank.hooks()).dispatch(context('invert', 2, 21, style_out))

    hook = CorrespondenceInjectionHook(bank, CorrespondenceMap.identity((2, 2)), config)
    registry = HookRegistry([hook])

    current = torch.randn(2, 4, 3)
    early = registry.dispatch(context('sample', 48, 21, current.clone()))
    assert torch.equal(early, current)
    assert hook.applied == 0

    late = registry.dispatch(context('sample', 49, 21, current.clone()))
    assert torch.allclose(late, current + 0.5 * style_out, atol=1e-6)
    assert hook.applied == 1


def test_build_injection_hooks_drops_injection_at_w_zero():
    bank = StyleBank([BLOCK], total_steps=50)
    mapping = CorrespondenceMap.identity((2, 2))
    off = build_injection_hooks(bank, mapping, InjectionConfig(w=0.0, target_blocks=(BLOCK,)))
    on = build_injection_hooks(bank, mapping, InjectionConfig(w=0.6, target_blocks=(BLOCK,)))
    assert [type(h) for h in off] == [KVSwapHook]
    assert [type(h) for h in on] == [KVSwapHook, CorrespondenceInjectionHook]


def test_select_target_blocks():
    shapes = {'up_blocks.1.a': (1280, 16, 16), 'up_blocks.2.a': (640, 32, 32), 'up_blocks.2.b': (640, 32, 32)}
    assert select_target_blocks(shapes, (32, 32)) == ('up_blocks.2.a', 'up_blocks.2.b')
    assert select_target_blocks(shapes, (32, 32), ['up_blocks.1.a']) == ('up_blocks.1.a',)
    assert select_target_blocks(shapes, (8, 8)) == tuple(shapes)


def test_correspondence_hook_requires_banked_output_when_active():
    config = InjectionConfig(w=0.5, start_step=49, total_steps=50, target_blocks=(BLOCK,))
    hook = CorrespondenceInjectionHook(StyleBank.for_injection(config), CorrespondenceMap.identity((2, 2)), config)
    registry = HookRegistry([hook])
    current = torch.randn(2, 4, 3)
    assert torch.equal(registry.dispatch(context('sample', 10, 801, current.clone())), current)
    with pytest.raises(InvalidLocatorError):
        registry.dispatch(context('sample', 49, 21, current.clone()))
