"""Instance-encoded transformer for part pose prediction.

Shapes: ``B`` batch, ``P`` part slots, ``n`` points per part, ``d`` width.
Poses are 7-vectors ``(qw, qx, qy, qz, tx, ty, tz)``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import autodiff as ad
from .config import ModelConfig

IDENTITY_POSE = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def dtype_of(config: ModelConfig) -> torch.dtype:
    return torch.float64 if config.dtype == "float64" else torch.float32


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.empty(n_out))

    def reset(self, gen: torch.Generator):
        bound = 1.0 / math.sqrt(self.weight.shape[1])
        with torch.no_grad():
            self.weight.copy_(torch.rand(self.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            self.bias.copy_(torch.rand(self.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)

    def forward(self, x):
        return x @ self.weight.T + self.bias


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def reset(self, gen):
        with torch.no_grad():
            self.weight.fill_(1.0)
            self.bias.zero_()

    def forward(self, x):
        return ad.layer_norm(x, self.weight, self.bias)


class PointNet(nn.Module):
    """Shared per-point MLP 3 -> 64 -> 128 -> d with a max-pool over points."""

    def __init__(self, d_model: int):
        super().__init__()
        self.l1, self.l2, self.l3 = Linear(3, 64), Linear(64, 128), Linear(128, d_model)

    def forward(self, points):
        h = ad.relu(self.l1(points))
        h = ad.relu(self.l2(h))
        return ad.reduce_max(self.l3(h), axis=-2)


class PoseHead(nn.Module):
    """3-layer MLP to a unit quaternion and a tanh-bounded translation."""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.l1, self.l2, self.l3 = Linear(d_model, hidden), Linear(hidden, hidden), Linear(hidden, 7)

    def reset_output(self):
        # start every refinement chain at the identity pose
        with torch.no_grad():
            self.l3.weight.zero_()
            self.l3.bias.zero_()
            self.l3.bias[0] = 1.0

    def forward(self, x):
        out = self.l3(ad.relu(self.l2(ad.relu(self.l1(x)))))
        quat = ad.l2_normalize(ad.slice_(out, 0, 4), axis=-1)
        trans = ad.tanh(ad.slice_(out, 4, 7))
        return ad.concat([quat, trans], axis=-1)


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.q, self.k, self.v, self.o = (Linear(d_model, d_model) for _ in range(4))

    def forward(self, x, memory, key_mask):
        """``key_mask`` is ``(B, K)`` bool, True for live keys."""
        B, Q, d = x.shape
        K = memory.shape[1]
        dh = d // self.h

        def split(t, n):
            return t.reshape(B, n, self.h, dh).transpose(1, 2)

        q, k, v = split(self.q(x), Q), split(self.k(memory), K), split(self.v(memory), K)
        scores = ad.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        additive = torch.zeros(key_mask.shape, dtype=x.dtype).masked_fill(~key_mask, float("-inf"))
        attn = ad.softmax(scores, axis=-1, mask=additive[:, None, None, :])
        out = ad.matmul(attn, v).transpose(1, 2).reshape(B, Q, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, width: int):
        super().__init__()
        self.l1, self.l2 = Linear(d_model, width), Linear(width, d_model)

    def forward(self, x):
        return self.l2(ad.relu(self.l1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn: int):
        super().__init__()
        self.n1, self.attn, self.n2, self.ffn = LayerNorm(d_model), Attention(d_model, n_heads), LayerNorm(d_model), FeedForward(d_model, ffn)

    def forward(self, x, mask):
        h = self.n1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ffn(self.n2(x))


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn: int):
        super().__init__()
        self.n1, self.self_attn = LayerNorm(d_model), Attention(d_model, n_heads)
        self.n2, self.cross_attn = LayerNorm(d_model), Attention(d_model, n_heads)
        self.n3, self.ffn = LayerNorm(d_model), FeedForward(d_model, ffn)

    def forward(self, x, qmask, memory, mmask):
        h = self.n1(x)
        x = x + self.self_attn(h, h, qmask)
        x = x + self.cross_attn(self.n2(x), memory, mmask)
        return x + self.ffn(self.n3(x))


class AssemblyNet(nn.Module):
    """PointNet features, instance-encoded encoder with per-layer pose refinement, in-process decoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config
        ffn = c.ffn_mult * c.d_model
        self.pointnet = PointNet(c.d_model)
        self.enc_proj = nn.ModuleList(Linear(c.token_width, c.d_model) for _ in range(c.n_layers))
        self.enc_blocks = nn.ModuleList(EncoderBlock(c.d_model, c.n_heads, ffn) for _ in range(c.n_layers))
        self.head_norm = LayerNorm(c.d_model)
        self.head = PoseHead(c.d_model, c.head_hidden)
        self.dec_proj = nn.ModuleList(Linear(c.token_width, c.d_model) for _ in range(c.n_layers))
        self.dec_blocks = nn.ModuleList(DecoderBlock(c.d_model, c.n_heads, ffn) for _ in range(c.n_layers))
        self.dec_head_norm = LayerNorm(c.d_model)
        self.dec_head = PoseHead(c.d_model, c.head_hidden)
        self.to(dtype_of(config))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(int(seed))
        for module in self.modules():
            if isinstance(module, (Linear, LayerNorm)):
                module.reset(gen)
        self.head.reset_output()
        self.dec_head.reset_output()

    def encoder_parameters(self) -> dict:
        """Named parameters used by whole-shape assembly (everything outside the decoder)."""
        return {n: p for n, p in self.named_parameters() if not n.startswith("dec_")}

    def decoder_parameters(self) -> dict:
        return {n: p for n, p in self.named_parameters() if n.startswith("dec_")}

    @property
    def dtype(self):
        return self.head.l1.weight.dtype

    # -- token construction ---------------------------------------------------

    def mask_codes(self, codes):
        """Apply the configured encoding ablation to ``[v_inter | v_intra]`` codes."""
        m = self.config.max_parts
        mode = self.config.encoding
        if mode == "both":
            return codes
        keep = torch.zeros(2 * m, dtype=codes.dtype)
        if mode == "inter":
            keep[:m] = 1
        elif mode == "intra":
            keep[m:] = 1
        return codes * keep

    def build_tokens(self, proj: Linear, features, codes, prev_poses, noise, mask):
        """Concatenate ``[feature | v_inter | v_intra | pose | noise]`` and project to d_model."""
        B, P = mask.shape
        for name, t, width in (
            ("features", features, self.config.d_model),
            ("codes", codes, 2 * self.config.max_parts),
            ("prev_poses", prev_poses, 7),
            ("noise", noise, self.config.noise_dim),
        ):
            if tuple(t.shape) != (B, P, width):
                raise ad.ShapeError(f"build_tokens: {name} has shape {tuple(t.shape)}, expected {(B, P, width)}")
        token = ad.concat([features, self.mask_codes(codes), prev_poses, noise], axis=-1)
        return proj(token) * mask[..., None].to(features.dtype)

    def identity_poses(self, B, P):
        return torch.tensor(IDENTITY_POSE, dtype=self.dtype).expand(B, P, 7)

    # -- forward passes -------------------------------------------------------

    def features(self, points):
        """``(B, P, n, 3) -> (B, P, d)``."""
        return self.pointnet(points)

    def encode(self, features, codes, mask, noise, known_poses=None, known=None):
        """Run the encoder; returns per-layer features and poses, each ``(L, B, P, .)``.

        ``known`` marks parts whose pose is given (in-process memory); their
        ``known_poses`` replace the fed-back prediction at every layer.
        """
        if not bool(mask.any(dim=1).all()):
            raise ValueError("encoder input has a sample with every slot masked")
        B, P = mask.shape
        pose = self.identity_poses(B, P)
        if known is not None:
            clamp = known[..., None]
            pose = torch.where(clamp, known_poses, pose)
        h = features
        layers, poses = [], []
        for proj, block in zip(self.enc_proj, self.enc_blocks):
            x = self.build_tokens(proj, h, codes, pose, noise, mask)
            h = block(x, mask)
            pose = self.head(self.head_norm(h))
            layers.append(h)
            poses.append(pose)
            if known is not None:
                pose = torch.where(clamp, known_poses, pose)
        return torch.stack(layers), torch.stack(poses)

    def decode(self, features, codes, qmask, noise, memory, mmask):
        """Query parts against encoder memory; returns poses ``(L, B, Q, 7)``.

        ``memory`` is per-layer ``(L, B, M, d)``, decoder layer ``l`` reading
        encoder layer ``l``, or a single ``(B, M, d)`` shared by every layer.
        """
        if memory.shape[-2] == 0 or not bool(mmask.any(dim=1).all()):
            raise ValueError("decoder memory is empty")
        per_layer = memory if memory.dim() == 4 else [memory] * len(self.dec_blocks)
        if len(per_layer) != len(self.dec_blocks):
            raise ad.ShapeError(f"decode: memory has {len(per_layer)} layers, decoder has {len(self.dec_blocks)}")
        B, Q = qmask.shape
        pose = self.identity_poses(B, Q)
        h = features
        poses = []
        for proj, block, mem in zip(self.dec_proj, self.dec_blocks, per_layer):
            x = self.build_tokens(proj, h, codes, pose, noise, qmask)
            h = block(x, qmask, mem, mmask)
            pose = self.dec_head(self.dec_head_norm(h))
            poses.append(pose)
        return torch.stack(poses)

    def forward(self, points, codes, mask, noise):
        _, poses = self.encode(self.features(points), codes, mask, noise)
        return poses
