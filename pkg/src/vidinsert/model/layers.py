import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


def norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim=None):
        super().__init__()
        self.n1 = norm(cin)
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.t = nn.Linear(temb_dim, cout) if temb_dim else None
        self.n2 = norm(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.c1(F.silu(self.n1(x)))
        if self.t is not None:
            h = h + self.t(F.silu(temb))[:, :, None, None]
        h = self.c2(F.silu(self.n2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    """Multi-head attention with a zero-initialized output projection."""

    def __init__(self, dim, ctx_dim=None, heads=4, zero_out=True):
        super().__init__()
        ctx_dim = ctx_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(ctx_dim, dim, bias=False)
        self.v = nn.Linear(ctx_dim, dim, bias=False)
        self.o = nn.Linear(dim, dim)
        if zero_out:
            zero_module(self.o)

    def forward(self, x, ctx=None):
        ctx = x if ctx is None else ctx
        b, n, d = x.shape
        hd = d // self.heads
        q = self.q(x).view(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(ctx).view(b, ctx.shape[1], self.heads, hd).transpose(1, 2)
        v = self.v(ctx).view(b, ctx.shape[1], self.heads, hd).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class SpatialCrossAttention(nn.Module):
    """Feature map queries attend to a token sequence (e.g. ID tokens)."""

    def __init__(self, ch, ctx_dim, heads=4):
        super().__init__()
        self.norm = norm(ch)
        self.attn = Attention(ch, ctx_dim, heads)

    def forward(self, x, ctx):
        bn, c, h, w = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(seq, ctx)
        return x + out.transpose(1, 2).reshape(bn, c, h, w)


class TemporalAttention(nn.Module):
    """Self-attention across frames at every spatial location."""

    def __init__(self, ch, heads=4, max_frames=32):
        super().__init__()
        self.norm = norm(ch)
        self.attn = Attention(ch, heads=heads)
        self.register_buffer("pos", timestep_embedding(torch.arange(max_frames), ch), persistent=False)

    def forward(self, x, n_frames):
        bn, c, h, w = x.shape
        b = bn // n_frames
        seq = self.norm(x).view(b, n_frames, c, h, w).permute(0, 3, 4, 1, 2).reshape(b * h * w, n_frames, c)
        seq = seq + self.pos[:n_frames].to(seq.dtype)
        out = self.attn(seq).view(b, h, w, n_frames, c).permute(0, 3, 4, 1, 2).reshape(bn, c, h, w)
        return x + out
