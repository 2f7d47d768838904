import pytest
import torch

from mdpr.layers import PooledHead
from mdpr.soft_branch import (
    AttentionGenerator,
    SoftBranch,
    bap,
    generate_attention,
    guided_attention,
    softmax_attention,
)


def test_uniform_logits_give_one_third():
    stack = softmax_attention(torch.zeros(2, 3, 4, 4), stage=5)
    assert torch.allclose(stack.maps, torch.full_like(stack.maps, 1 / 3))
    assert stack.foreground.shape == (2, 2, 4, 4)
    assert stack.background.shape == (2, 4, 4)
    assert stack.count == 2


def test_per_pixel_normalization():
    gen = AttentionGenerator(8, 3)
    stack = generate_attention(torch.randn(2, 8, 6, 3), gen)
    total = stack.foreground.sum(dim=1) + stack.background
    assert (total - 1).abs().max() < 1e-5
    assert stack.maps.min() >= 0 and stack.maps.max() <= 1


def test_softmax_saturation():
    raw = torch.zeros(1, 3, 2, 2)
    raw[0, 1, 0, 0] = 20.0
    stack = softmax_attention(raw, stage=5)
    assert stack.maps[0, 1, 0, 0] > 1 - 1e-6
    assert stack.maps[0, 0, 0, 0] < 1e-6 and stack.maps[0, 2, 0, 0] < 1e-6


def _heads(in_ch, dim, k, tied=False):
    if tied:
        return torch.nn.ModuleList([PooledHead(in_ch, dim)] * k)
    return torch.nn.ModuleList(PooledHead(in_ch, dim) for _ in range(k))


def test_bap_all_ones_mask_is_plain_head():
    heads = _heads(8, 5, 2).eval()
    c = torch.rand(3, 8, 4, 2)
    hat, _ = bap(torch.ones(3, 2, 4, 2), c, heads)
    for k, head in enumerate(heads):
        assert torch.allclose(hat[:, k], head.pool(head.embed(c)))


def test_bap_all_zero_mask_annihilates():
    heads = _heads(8, 5, 2).eval()
    for head in heads:
        # keep the embedding of a zero map at zero
        torch.nn.init.zeros_(head.embed[1].bias)
    hat, _ = bap(torch.zeros(3, 2, 4, 2), torch.rand(3, 8, 4, 2), heads)
    assert hat.abs().max() < 1e-5


def test_bap_identical_maps_tied_heads():
    heads = _heads(8, 5, 2, tied=True).eval()
    a = torch.rand(3, 1, 4, 2).expand(3, 2, 4, 2)
    hat, post = bap(a, torch.rand(3, 8, 4, 2), heads)
    assert torch.allclose(hat[:, 0], hat[:, 1])
    assert torch.allclose(post[:, 0], post[:, 1])


def test_bap_spatial_mismatch():
    with pytest.raises(ValueError):
        bap(torch.rand(1, 2, 4, 2), torch.rand(1, 8, 4, 3), _heads(8, 5, 2))


def test_bap_heads_disjoint_gradients():
    heads = _heads(8, 5, 2)
    hat, _ = bap(torch.rand(4, 2, 4, 2), torch.rand(4, 8, 4, 2), heads)
    hat[:, 0].sum().backward()
    assert all(p.grad is None or not p.grad.any() for p in heads[1].parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in heads[0].parameters())


def test_guidance_changes_generator_input_channels():
    k = 3
    with_g = SoftBranch(6, 10, 4, k, use_guidance=True)
    without = SoftBranch(6, 10, 4, k, use_guidance=False)
    assert with_g.gen4.in_channels - without.gen4.in_channels == k + 1
    out = without(torch.randn(2, 6, 4, 2), torch.randn(2, 10, 4, 2))
    assert (out.a4.maps.sum(dim=1) - 1).abs().max() < 1e-5


def test_guided_attention_resizes_a5():
    gen4 = AttentionGenerator(10 + 3, 2)
    a5 = softmax_attention(torch.randn(2, 3, 2, 1), stage=5)
    a4, c4_hat = guided_attention(torch.randn(2, 6, 4, 2), a5, torch.nn.Conv2d(6, 10, 1), gen4)
    assert a4.maps.shape == (2, 3, 4, 2)
    assert c4_hat.shape == (2, 10, 4, 2)
    assert a4.stage == 4


def test_stage4_losses_reach_stage5_generator_through_saturated_background():
    torch.manual_seed(1)
    branch = SoftBranch(6, 10, 4, 2, use_guidance=True).double().eval()
    with torch.no_grad():
        branch.gen5.bn.bias[-1] = 10.0
    c4 = torch.randn(2, 6, 4, 2, dtype=torch.float64)
    c5 = torch.randn(2, 10, 4, 2, dtype=torch.float64)
    weights = torch.randn(2, 3, 4, 2, dtype=torch.float64)

    def stage4_objective():
        a5 = generate_attention(c5, branch.gen5)
        a4, _ = guided_attention(c4, a5, branch.guide, branch.gen4)
        return (a4.maps * weights).sum(), a5

    value, a5 = stage4_objective()
    assert a5.background.min() > 0.99
    value.backward()
    param = branch.gen5.conv1.weight
    grad = param.grad.clone()
    idx = tuple(int(i) for i in (grad.abs() == grad.abs().max()).nonzero()[0])
    assert grad[idx] != 0

    h = 1e-5
    with torch.no_grad():
        param[idx] += h
        up, _ = stage4_objective()
        param[idx] -= 2 * h
        down, _ = stage4_objective()
        param[idx] += h
    fd = (up - down) / (2 * h)
    assert fd.item() == pytest.approx(grad[idx].item(), rel=1e-3)


def test_forward_soft_dims_paper_sizes():
    branch = SoftBranch(16, 32, 512, 2)
    out = branch(torch.randn(3, 16, 8, 4), torch.randn(3, 32, 8, 4))
    assert out.post["bap5"].shape == (3, 2, 512)
    assert out.post["bap4"].shape == (3, 2, 512)
    assert out.pre["bap5"].shape == (3, 2, 512)
    assert out.post["f_soft_g4"].shape == (3, 512)
    assert out.post["f_soft_g5"].shape == (3, 512)
    assert all(torch.isfinite(v).all() for v in out.post.values())


def test_forward_soft_four_maps():
    branch = SoftBranch(16, 32, 512, 4)
    out = branch(torch.randn(2, 16, 8, 4), torch.randn(2, 32, 8, 4))
    assert out.post["bap5"].shape == (2, 4, 512)
    for heads in (branch.bap5_heads, branch.bap4_heads):
        ids = [{id(p) for p in h.parameters()} for h in heads]
        assert all(ids[i].isdisjoint(ids[j]) for i in range(4) for j in range(i + 1, 4))


def test_identity_mask_matches_global_head_when_tied():
    branch = SoftBranch(6, 10, 4, 2).eval()
    branch.bap5_heads[0].load_state_dict(branch.g5_head.state_dict())
    c5 = torch.rand(2, 10, 4, 2)
    hat, post = bap(torch.ones(2, 2, 4, 2), c5, branch.bap5_heads)
    _, pre, bn = branch.g5_head(c5)
    assert torch.allclose(hat[:, 0], pre)
    assert torch.allclose(post[:, 0], bn)
