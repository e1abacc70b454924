"""
MIT License
Copyright (c) 2024 SedSR Contributors
See LICENSE file for full license details.

语义感知融合块
以语义特征作为查询、图像特征作为键/值做交叉注意力，把图像特征“扭转”到语义条件下；
另提供拼接、通道注意力、空间注意力三种对照融合方式
"""

from __future__ import annotations

import logging
import math
from typing import Optional, Sequence, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .exceptions import ConfigurationError, ContractError
from .semantic_extractor import SemanticMap

logger = logging.getLogger("sedsr.sefb")

VARIANT_MODES = ("concat", "channel_attention", "spatial_attention")

# 查询分块大小，限制 N_q×N_kv 注意力矩阵的峰值内存
QUERY_CHUNK = 1024

Semantics = Union[SemanticMap, Tensor]


def _data(semantics: Semantics) -> Tensor:
    return semantics.data if isinstance(semantics, SemanticMap) else semantics


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """多头缩放点积注意力

    Args:
        q: B×N_q×d
        k: B×N_kv×d
        v: B×N_kv×d
        num_heads: 头数 h，d 必须能被 h 整除

    Returns:
        B×N_q×d，各头结果按通道拼接
    """
    if q.dim() != 3 or k.dim() != 3 or v.dim() != 3:
        raise ContractError(f"注意力输入必须是 B×N×d: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    b, n_q, d = q.shape
    if k.shape != v.shape or k.shape[0] != b or k.shape[2] != d:
        raise ContractError(f"Q/K/V 形状不一致: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    if num_heads <= 0 or d % num_heads:
        raise ContractError(f"通道数 {d} 不能被头数 {num_heads} 整除")

    out_dtype = q.dtype
    if out_dtype in (torch.float16, torch.bfloat16):
        q, k, v = q.float(), k.float(), v.float()

    d_k = d // num_heads
    n_kv = k.shape[1]
    qh = q.reshape(b, n_q, num_heads, d_k).transpose(1, 2)
    kh = k.reshape(b, n_kv, num_heads, d_k).transpose(1, 2)
    vh = v.reshape(b, n_kv, num_heads, d_k).transpose(1, 2)

    scale = 1.0 / math.sqrt(d_k)
    chunks = []
    for start in range(0, n_q, QUERY_CHUNK):
        logits = torch.matmul(qh[:, :, start:start + QUERY_CHUNK], kh.transpose(-2, -1)) * scale
        chunks.append(torch.matmul(torch.softmax(logits, dim=-1), vh))
    out = torch.cat(chunks, dim=2) if len(chunks) > 1 else chunks[0]
    return out.transpose(1, 2).reshape(b, n_q, d).to(out_dtype)


def tokenize(x: Tensor) -> Tensor:
    """B×C×H×W -> B×(H·W)×C"""
    return x.flatten(2).transpose(1, 2)


def untokenize(tokens: Tensor, hw: Sequence[int]) -> Tensor:
    """B×(H·W)×C -> B×C×H×W"""
    h, w = hw
    return tokens.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], h, w)


def align_semantics(semantics: Semantics, target_hw: Sequence[int]) -> Semantics:
    """双线性（align_corners=False）把语义特征图重采样到图像特征分辨率，通道不变"""
    h, w = int(target_hw[0]), int(target_hw[1])
    if h < 1 or w < 1:
        raise ContractError(f"目标尺寸必须为正: {h}x{w}")
    data = _data(semantics)
    if tuple(data.shape[-2:]) == (h, w):
        return semantics
    resized = F.interpolate(data, size=(h, w), mode="bilinear", align_corners=False)
    if isinstance(semantics, SemanticMap):
        return SemanticMap(resized, semantics.layer_index, semantics.source_id)
    return resized


def _groupnorm_groups(channels: int, requested: int) -> int:
    """不超过 requested 且能整除 channels 的最大组数"""
    for groups in range(min(requested, channels), 0, -1):
        if channels % groups == 0:
            return groups
    return 1


class FusionBlock(nn.Module):
    """融合块基类：forward(f, S_h) -> f_s，输出分辨率与 f 相同"""

    def __init__(self, image_channels: int, semantic_channels: int, out_channels: int,
                 record_query: bool = False):
        super().__init__()
        self.image_channels = image_channels
        self.semantic_channels = semantic_channels
        self.out_channels = out_channels
        self.record_query = record_query
        self.last_query: Optional[Tensor] = None

    def _check(self, f: Tensor, semantics: Tensor):
        if f.dim() != 4 or f.shape[1] != self.image_channels:
            raise ContractError(f"图像特征通道应为 {self.image_channels}: {tuple(f.shape)}")
        if semantics.dim() != 4 or semantics.shape[1] != self.semantic_channels:
            raise ContractError(f"语义特征通道应为 {self.semantic_channels}: {tuple(semantics.shape)}")
        if semantics.shape[0] != f.shape[0]:
            raise ContractError(f"批大小不一致: {f.shape[0]} != {semantics.shape[0]}")

    def _record(self, query: Tensor):
        if self.record_query:
            self.last_query = query.detach().clone()

    def aligned(self, f: Tensor, semantics: Semantics) -> Tensor:
        data = _data(semantics)
        self._check(f, data)
        return align_semantics(data, f.shape[-2:])


class SemanticFusionBlock(FusionBlock):
    """SeFB

    Q = LN(SA(LN(GN(S_h))))，K/V 由图像特征 1x1 卷积得到；
    输出 = Conv1x1(Concat(GELU(LN(Attn(Q,K,V))), Conv3x3(f)))
    """

    def __init__(self, image_channels: int, semantic_channels: int, out_channels: int,
                 embed_dim: Optional[int] = None, num_heads: int = 4, groupnorm_groups: int = 8,
                 record_query: bool = False):
        super().__init__(image_channels, semantic_channels, out_channels, record_query)
        embed_dim = embed_dim or image_channels
        if embed_dim % num_heads:
            raise ConfigurationError(f"embed_dim={embed_dim} 不能被 heads={num_heads} 整除")
        self.embed_dim = embed_dim
        self.num_heads = num_heads

        # 查询路径
        self.group_norm = nn.GroupNorm(_groupnorm_groups(semantic_channels, groupnorm_groups), semantic_channels)
        self.norm_semantic = nn.LayerNorm(semantic_channels)
        self.qkv = nn.Linear(semantic_channels, 3 * embed_dim)
        self.sa_out = nn.Linear(embed_dim, embed_dim)
        self.norm_query = nn.LayerNorm(embed_dim)

        # 键/值路径
        self.k_conv = nn.Conv2d(image_channels, embed_dim, 1)
        self.v_conv = nn.Conv2d(image_channels, embed_dim, 1)

        # 输出路径
        self.norm_out = nn.LayerNorm(embed_dim)
        self.act = nn.GELU(approximate="none")
        self.img_conv = nn.Conv2d(image_channels, image_channels, 3, 1, 1)
        self.fuse = nn.Conv2d(embed_dim + image_channels, out_channels, 1)

    def self_attend(self, tokens: Tensor) -> Tensor:
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        return self.sa_out(attention(q, k, v, self.num_heads))

    def build_query(self, semantics: Tensor) -> Tensor:
        """语义特征图 -> B×N×d 查询"""
        x = tokenize(self.group_norm(semantics))
        x = self.self_attend(self.norm_semantic(x))
        return self.norm_query(x)

    def forward(self, f: Tensor, semantics: Semantics) -> Tensor:
        s = self.aligned(f, semantics)
        q = self.build_query(s)
        self._record(q)
        k = tokenize(self.k_conv(f))
        v = tokenize(self.v_conv(f))
        warped = self.act(self.norm_out(attention(q, k, v, self.num_heads)))
        warped = untokenize(warped, f.shape[-2:])
        return self.fuse(torch.cat([warped, self.img_conv(f)], dim=1))


class ConcatFusion(FusionBlock):
    """对齐后按通道拼接，再 1x1 卷积"""

    def __init__(self, image_channels: int, semantic_channels: int, out_channels: int, record_query: bool = False):
        super().__init__(image_channels, semantic_channels, out_channels, record_query)
        self.proj = nn.Conv2d(image_channels + semantic_channels, out_channels, 1)

    def forward(self, f: Tensor, semantics: Semantics) -> Tensor:
        s = self.aligned(f, semantics)
        self._record(s)
        return self.proj(torch.cat([f, s], dim=1))


class ChannelAttentionFusion(FusionBlock):
    """语义全局池化后经 squeeze-excite 生成逐通道门控，乘到图像特征上"""

    def __init__(self, image_channels: int, semantic_channels: int, out_channels: int,
                 reduction: int = 16, record_query: bool = False):
        super().__init__(image_channels, semantic_channels, out_channels, record_query)
        hidden = max(semantic_channels // reduction, 8)
        self.squeeze = nn.Conv2d(semantic_channels, hidden, 1)
        self.excite = nn.Conv2d(hidden, image_channels, 1)
        self.proj = nn.Conv2d(image_channels, out_channels, 1)

    def gate(self, semantics: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool2d(semantics, 1)
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, f: Tensor, semantics: Semantics) -> Tensor:
        s = self.aligned(f, semantics)
        g = self.gate(s)
        self._record(g)
        return self.proj(f * g)


class SpatialAttentionFusion(FusionBlock):
    """语义投影为单通道 [0,1] 空间门控，乘到图像特征上"""

    def __init__(self, image_channels: int, semantic_channels: int, out_channels: int, record_query: bool = False):
        super().__init__(image_channels, semantic_channels, out_channels, record_query)
        self.to_gate = nn.Conv2d(semantic_channels, 1, 1)
        self.proj = nn.Conv2d(image_channels, out_channels, 1)

    def gate(self, semantics: Tensor) -> Tensor:
        return torch.sigmoid(self.to_gate(semantics))

    def forward(self, f: Tensor, semantics: Semantics) -> Tensor:
        s = self.aligned(f, semantics)
        g = self.gate(s)
        self._record(g)
        return self.proj(f * g)


def build_fusion_block(mode: str, image_channels: int, semantic_channels: int, out_channels: int,
                       embed_dim: Optional[int] = None, num_heads: int = 4, groupnorm_groups: int = 8,
                       record_query: bool = False) -> FusionBlock:
    """按 sefb.fusion_mode 构建融合块"""
    if mode == "sefb":
        return SemanticFusionBlock(image_channels, semantic_channels, out_channels,
                                   embed_dim=embed_dim, num_heads=num_heads,
                                   groupnorm_groups=groupnorm_groups, record_query=record_query)
    if mode == "concat":
        return ConcatFusion(image_channels, semantic_channels, out_channels, record_query)
    if mode == "channel_attention":
        return ChannelAttentionFusion(image_channels, semantic_channels, out_channels, record_query=record_query)
    if mode == "spatial_attention":
        return SpatialAttentionFusion(image_channels, semantic_channels, out_channels, record_query)
    raise ConfigurationError(f"未知的融合方式: {mode}")


def sefb_forward(f: Tensor, semantics: Semantics, block: SemanticFusionBlock) -> Tensor:
    """f_s = SeFB(f, S_h)"""
    if not isinstance(block, SemanticFusionBlock):
        raise ConfigurationError(f"需要 SemanticFusionBlock: {type(block).__name__}")
    return block(f, semantics)


def fuse_variant(f: Tensor, semantics: Semantics, mode: str,
                 block: Optional[FusionBlock] = None, out_channels: Optional[int] = None) -> Tensor:
    """对照融合方式；未给定 block 时按 f 与语义的通道数新建一个"""
    if mode not in VARIANT_MODES:
        raise ConfigurationError(f"未知的对照融合方式: {mode}")
    if block is None:
        block = build_fusion_block(mode, f.shape[1], _data(semantics).shape[1], out_channels or f.shape[1])
        block = block.to(device=f.device, dtype=f.dtype)
    return block(f, semantics)
