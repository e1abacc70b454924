"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from sedsr.core import sefb
from sedsr.core.exceptions import ConfigurationError, ContractError
from sedsr.core.semantic_extractor import SemanticMap
from sedsr.core.sefb import (
    ChannelAttentionFusion, ConcatFusion, SemanticFusionBlock, SpatialAttentionFusion, align_semantics, attention,
    build_fusion_block, fuse_variant, sefb_forward, tokenize, untokenize,
)


def naive_attention(q, k, v, num_heads):
    """逐元素的双循环参考实现（Python 浮点）"""
    b, n_q, d = q.shape
    n_kv = k.shape[1]
    d_k = d // num_heads
    q, k, v = q.tolist(), k.tolist(), v.tolist()
    out = [[[0.0] * d for _ in range(n_q)] for _ in range(b)]
    for bi in range(b):
        for h in range(num_heads):
            cols = range(h * d_k, (h + 1) * d_k)
            for i in range(n_q):
                logits = [sum(q[bi][i][c] * k[bi][j][c] for c in cols) / math.sqrt(d_k) for j in range(n_kv)]
                top = max(logits)
                weights = [math.exp(x - top) for x in logits]
                total = sum(weights)
                for j in range(n_kv):
                    for c in cols:
                        out[bi][i][c] += weights[j] / total * v[bi][j][c]
    return torch.tensor(out, dtype=torch.float64)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


# ----------------------------------------------------------------------------
# 注意力
# ----------------------------------------------------------------------------

def test_attention_single_key_broadcasts_value(gen):
    q = torch.randn(2, 5, 8, generator=gen)
    k = torch.randn(2, 1, 8, generator=gen)
    v = torch.randn(2, 1, 8, generator=gen)
    out = attention(q, k, v, num_heads=2)
    assert torch.allclose(out, v.expand(2, 5, 8), atol=1e-6)


def test_attention_identical_keys_average_values(gen):
    q = torch.randn(1, 3, 8, generator=gen)
    k = torch.randn(1, 1, 8, generator=gen).expand(1, 6, 8).contiguous()
    v = torch.randn(1, 6, 8, generator=gen)
    out = attention(q, k, v, num_heads=4)
    assert torch.allclose(out, v.mean(dim=1, keepdim=True).expand(1, 3, 8), atol=1e-6)


def random_attention_case(seed):
    """B≤2、N≤16、d≤16 的随机用例"""
    g = torch.Generator().manual_seed(seed)
    b = 1 + seed % 2
    n_q = int(torch.randint(1, 17, (1,), generator=g))
    n_kv = int(torch.randint(1, 17, (1,), generator=g))
    heads = (1, 2, 4)[seed % 3]
    d = heads * int(torch.randint(1, 16 // heads + 1, (1,), generator=g))
    tensors = [torch.randn(b, n, d, generator=g) for n in (n_q, n_kv, n_kv)]
    return (*tensors, heads)


@pytest.mark.parametrize("seed", range(100))
def test_attention_matches_naive_oracle(seed):
    q, k, v, heads = random_attention_case(seed)
    out = attention(q, k, v, num_heads=heads).double()
    assert torch.allclose(out, naive_attention(q, k, v, heads), rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_attention_weights_are_a_distribution(seed):
    """V 取单位阵时输出即注意力权重：非负且每行和为 1"""
    g = torch.Generator().manual_seed(seed)
    n_kv = 3 + seed
    q = torch.randn(2, 5, n_kv, generator=g) * 3
    k = torch.randn(2, n_kv, n_kv, generator=g) * 3
    v = torch.eye(n_kv).expand(2, n_kv, n_kv)
    weights = attention(q, k, v, num_heads=1)
    assert (weights >= 0).all()
    assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 5), atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_attention_invariant_to_key_order(seed):
    """K、V 按同一排列重排 token 不改变输出"""
    q, k, v, heads = random_attention_case(seed)
    perm = torch.randperm(k.shape[1], generator=torch.Generator().manual_seed(seed + 1))
    assert torch.allclose(attention(q, k, v, heads), attention(q, k[:, perm], v[:, perm], heads), atol=1e-6)


def test_attention_chunking_is_exact(gen, monkeypatch):
    q = torch.randn(2, 10, 8, generator=gen)
    k = torch.randn(2, 7, 8, generator=gen)
    v = torch.randn(2, 7, 8, generator=gen)
    full = attention(q, k, v, 2)
    monkeypatch.setattr(sefb, "QUERY_CHUNK", 3)
    chunked = attention(q, k, v, 2)
    assert torch.allclose(full, chunked, atol=1e-6)


def test_attention_half_precision_keeps_dtype(gen):
    q = torch.randn(1, 4, 8, generator=gen)
    k = torch.randn(1, 4, 8, generator=gen)
    v = torch.randn(1, 4, 8, generator=gen)
    out = attention(q.bfloat16(), k.bfloat16(), v.bfloat16(), 2)
    assert out.dtype == torch.bfloat16
    assert torch.isfinite(out.float()).all()


def test_attention_contract_errors(gen):
    q = torch.randn(1, 4, 8, generator=gen)
    with pytest.raises(ContractError):
        attention(q, torch.randn(1, 4, 6), torch.randn(1, 4, 6), 2)
    with pytest.raises(ContractError):
        attention(q, q, q, 3)
    with pytest.raises(ContractError):
        attention(q[0], q[0], q[0], 2)


def test_tokenize_round_trip(gen):
    x = torch.randn(2, 5, 3, 4, generator=gen)
    tokens = tokenize(x)
    assert tokens.shape == (2, 12, 5)
    assert torch.equal(untokenize(tokens, (3, 4)), x)


# ----------------------------------------------------------------------------
# 语义对齐
# ----------------------------------------------------------------------------

def test_align_identity_returns_input(gen):
    s = SemanticMap(torch.randn(1, 4, 3, 3, generator=gen), 3, "toy/layer3")
    assert align_semantics(s, (3, 3)) is s


def test_align_constant_map():
    s = torch.full((1, 2, 2, 2), 0.7)
    out = align_semantics(s, (5, 9))
    assert out.shape == (1, 2, 5, 9)
    assert torch.allclose(out, torch.full_like(out, 0.7), atol=1e-6)


def test_align_matches_bilinear_oracle():
    """align_corners=False：src = (dst + 0.5)·scale − 0.5，负坐标截断到 0"""
    s = torch.tensor([[0.0, 1.0], [0.0, 1.0]]).view(1, 1, 2, 2)
    out = align_semantics(s, (2, 4))

    def oracle(j, in_size=2, out_size=4):
        src = max((j + 0.5) * in_size / out_size - 0.5, 0.0)
        x0 = min(int(math.floor(src)), in_size - 1)
        x1 = min(x0 + 1, in_size - 1)
        lam = src - x0
        row = [0.0, 1.0]
        return (1 - lam) * row[x0] + lam * row[x1]

    expected = torch.tensor([oracle(j) for j in range(4)])
    assert torch.allclose(out[0, 0, 0], expected, atol=1e-6)
    assert torch.allclose(out[0, 0, 1], expected, atol=1e-6)
    assert torch.allclose(expected, torch.tensor([0.0, 0.25, 0.75, 1.0]))


def test_align_preserves_semantic_map_type(gen):
    s = SemanticMap(torch.randn(1, 4, 2, 2, generator=gen), 2, "toy/layer2")
    out = align_semantics(s, (4, 4))
    assert isinstance(out, SemanticMap)
    assert out.source_id == "toy/layer2"
    with pytest.raises(ContractError):
        align_semantics(s, (0, 4))


# ----------------------------------------------------------------------------
# SeFB
# ----------------------------------------------------------------------------

def reference_sefb(block, f, s):
    """由已验证子操作拼接的直线参考实现"""
    s = F.interpolate(s, size=f.shape[-2:], mode="bilinear", align_corners=False)
    x = F.group_norm(s, block.group_norm.num_groups, block.group_norm.weight, block.group_norm.bias,
                     block.group_norm.eps)
    x = x.flatten(2).transpose(1, 2)
    x = F.layer_norm(x, (s.shape[1],), block.norm_semantic.weight, block.norm_semantic.bias, block.norm_semantic.eps)
    qkv = x @ block.qkv.weight.T + block.qkv.bias
    d = block.embed_dim
    q0, k0, v0 = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    x = naive_attention(q0, k0, v0, block.num_heads).float() @ block.sa_out.weight.T + block.sa_out.bias
    q = F.layer_norm(x, (d,), block.norm_query.weight, block.norm_query.bias, block.norm_query.eps)

    k = F.conv2d(f, block.k_conv.weight, block.k_conv.bias).flatten(2).transpose(1, 2)
    v = F.conv2d(f, block.v_conv.weight, block.v_conv.bias).flatten(2).transpose(1, 2)
    a = naive_attention(q, k, v, block.num_heads).float()
    a = F.gelu(F.layer_norm(a, (d,), block.norm_out.weight, block.norm_out.bias, block.norm_out.eps))
    a = a.transpose(1, 2).reshape(f.shape[0], d, *f.shape[-2:])
    img = F.conv2d(f, block.img_conv.weight, block.img_conv.bias, padding=1)
    return F.conv2d(torch.cat([a, img], dim=1), block.fuse.weight, block.fuse.bias)


def _randomize_norms(block, gen):
    with torch.no_grad():
        for module in block.modules():
            if isinstance(module, (torch.nn.LayerNorm, torch.nn.GroupNorm)):
                module.weight.copy_(torch.rand(module.weight.shape, generator=gen) + 0.5)
                module.bias.copy_(torch.randn(module.bias.shape, generator=gen) * 0.1)


def test_sefb_matches_reference_composition(gen):
    torch.manual_seed(0)
    block = SemanticFusionBlock(4, 6, 5, embed_dim=8, num_heads=2)
    _randomize_norms(block, gen)
    f = torch.randn(2, 4, 4, 4, generator=gen)
    s = torch.randn(2, 6, 2, 2, generator=gen)
    with torch.no_grad():
        out = sefb_forward(f, s, block)
        expected = reference_sefb(block, f, s)
    assert out.shape == (2, 5, 4, 4)
    assert torch.allclose(out, expected, rtol=1e-4, atol=1e-5)


def test_build_query_matches_sub_operations(gen):
    torch.manual_seed(1)
    block = SemanticFusionBlock(4, 6, 4, embed_dim=8, num_heads=2)
    _randomize_norms(block, gen)
    s = torch.randn(1, 6, 3, 3, generator=gen)
    with torch.no_grad():
        q = block.build_query(s)
        x = tokenize(block.group_norm(s))
        x = block.norm_semantic(x)
        q0, k0, v0 = block.qkv(x).chunk(3, dim=-1)
        expected = block.norm_query(block.sa_out(attention(q0, k0, v0, 2)))
    assert torch.allclose(q, expected, atol=1e-6)


def test_constant_semantics_give_token_constant_query():
    torch.manual_seed(2)
    block = SemanticFusionBlock(4, 6, 4, embed_dim=8, num_heads=2)
    with torch.no_grad():
        q = block.build_query(torch.full((1, 6, 3, 3), 0.3))
    assert torch.allclose(q, q[:, :1].expand_as(q), atol=1e-5)


@pytest.mark.parametrize("hw", [(1, 1), (3, 5), (8, 8), (7, 2)])
def test_sefb_preserves_spatial_size(hw, gen):
    block = SemanticFusionBlock(8, 16, 12, num_heads=4)
    f = torch.randn(1, 8, *hw, generator=gen)
    s = torch.randn(1, 16, 2, 2, generator=gen)
    assert block(f, s).shape == (1, 12, *hw)


def test_sefb_zero_features_give_bias_only_map(gen):
    block = SemanticFusionBlock(4, 6, 3, embed_dim=8, num_heads=2)
    with torch.no_grad():
        for conv in (block.k_conv, block.v_conv, block.img_conv):
            conv.bias.zero_()
        out = block(torch.zeros(2, 4, 5, 5), torch.randn(2, 6, 2, 2, generator=gen))
    expected = block.fuse.bias.view(1, 3, 1, 1).expand_as(out)
    assert torch.allclose(out, expected, atol=1e-6)


def test_sefb_gradcheck_double(gen):
    torch.manual_seed(3)
    block = SemanticFusionBlock(2, 4, 2, embed_dim=4, num_heads=2, groupnorm_groups=2).double()
    f = torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    s = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: block(a, b), (f, s), eps=1e-4, atol=1e-6, rtol=1e-3)


def test_sefb_parameter_gradcheck(gen):
    """对块内每个参数做有限差分梯度检查（步长 1e-4，相对误差 < 1e-3）"""
    torch.manual_seed(3)
    block = SemanticFusionBlock(2, 4, 2, embed_dim=4, num_heads=2, groupnorm_groups=2).double()
    f = torch.randn(1, 2, 2, 2, generator=gen, dtype=torch.float64)
    s = torch.randn(1, 4, 2, 2, generator=gen, dtype=torch.float64)
    names = [name for name, _ in block.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in block.named_parameters())
    assert len(names) > 0

    def forward(*values):
        return torch.func.functional_call(block, dict(zip(names, values)), (f, s))

    assert torch.autograd.gradcheck(forward, params, eps=1e-4, atol=1e-6, rtol=1e-3)


def test_query_depends_only_on_semantics(gen):
    """同一 S_h、不同图像特征：查询逐位相同，输出不同"""
    block = SemanticFusionBlock(4, 6, 4, embed_dim=8, num_heads=2, record_query=True)
    s = torch.randn(1, 6, 2, 2, generator=gen)
    out_a = block(torch.randn(1, 4, 4, 4, generator=gen), s)
    query_a = block.last_query
    out_b = block(torch.randn(1, 4, 4, 4, generator=gen), s)
    assert torch.equal(query_a, block.last_query)
    assert not torch.allclose(out_a, out_b)


def test_sefb_contracts():
    block = SemanticFusionBlock(4, 6, 4, embed_dim=8, num_heads=2)
    with pytest.raises(ContractError):
        block(torch.randn(1, 5, 4, 4), torch.randn(1, 6, 2, 2))
    with pytest.raises(ContractError):
        block(torch.randn(1, 4, 4, 4), torch.randn(1, 7, 2, 2))
    with pytest.raises(ContractError):
        block(torch.randn(2, 4, 4, 4), torch.randn(1, 6, 2, 2))
    with pytest.raises(ConfigurationError):
        SemanticFusionBlock(4, 6, 4, embed_dim=6, num_heads=4)
    with pytest.raises(ConfigurationError):
        sefb_forward(torch.randn(1, 4, 4, 4), torch.randn(1, 6, 2, 2), ConcatFusion(4, 6, 4))


def test_sefb_accepts_semantic_map(gen):
    block = SemanticFusionBlock(4, 6, 4, embed_dim=8, num_heads=2)
    data = torch.randn(1, 6, 2, 2, generator=gen)
    f = torch.randn(1, 4, 4, 4, generator=gen)
    with torch.no_grad():
        assert torch.equal(block(f, SemanticMap(data, 3, "toy/layer3")), block(f, data))


# ----------------------------------------------------------------------------
# 对照融合方式
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["concat", "channel_attention", "spatial_attention"])
def test_variant_output_channels(mode, gen):
    f = torch.randn(2, 8, 6, 6, generator=gen)
    s = torch.randn(2, 16, 3, 3, generator=gen)
    block = build_fusion_block(mode, 8, 16, 5)
    assert fuse_variant(f, s, mode, block).shape == (2, 5, 6, 6)
    assert fuse_variant(f, s, mode).shape == (2, 8, 6, 6)


def test_channel_attention_open_gate_is_identity_projection(gen):
    block = ChannelAttentionFusion(4, 16, 3)
    with torch.no_grad():
        block.excite.weight.zero_()
        block.excite.bias.fill_(100.0)
    f = torch.randn(1, 4, 5, 5, generator=gen)
    s = torch.randn(1, 16, 2, 2, generator=gen)
    with torch.no_grad():
        assert torch.allclose(block(f, s), block.proj(f), atol=1e-6)


def test_spatial_attention_closed_gate_zeroes_features(gen):
    block = SpatialAttentionFusion(4, 16, 3)
    with torch.no_grad():
        block.to_gate.weight.zero_()
        block.to_gate.bias.fill_(-100.0)
    f = torch.randn(1, 4, 5, 5, generator=gen)
    s = torch.randn(1, 16, 2, 2, generator=gen)
    with torch.no_grad():
        assert float(block.gate(align_semantics(s, (5, 5))).max()) < 1e-30
        out = block(f, s)
    assert torch.allclose(out, block.proj.bias.view(1, 3, 1, 1).expand_as(out), atol=1e-6)


def test_fuse_variant_rejects_unknown_modes(gen):
    f = torch.randn(1, 4, 4, 4, generator=gen)
    s = torch.randn(1, 6, 2, 2, generator=gen)
    for mode in ("sefb", "add"):
        with pytest.raises(ConfigurationError):
            fuse_variant(f, s, mode)
    with pytest.raises(ConfigurationError):
        build_fusion_block("add", 4, 6, 4)


def test_record_query_on_variants(gen):
    block = ConcatFusion(4, 6, 4, record_query=True)
    s = torch.randn(1, 6, 4, 4, generator=gen)
    block(torch.randn(1, 4, 4, 4, generator=gen), s)
    assert torch.equal(block.last_query, s)
