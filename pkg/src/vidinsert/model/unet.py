"""Temporal 3D U-Net over latent videos and its ControlNet-style copy."""

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ResBlock, SpatialCrossAttention, TemporalAttention, norm, timestep_embedding, zero_module

IN_CHANNELS = 9  # z_t (4) + mask (1) + z_mask (4)


class Block(nn.Module):
    """ResBlock -> ID-token cross-attention -> temporal attention."""

    def __init__(self, cin, cout, temb_dim, ctx_dim, heads):
        super().__init__()
        self.res = ResBlock(cin, cout, temb_dim)
        self.xattn = SpatialCrossAttention(cout, ctx_dim, heads)
        self.tattn = TemporalAttention(cout, heads)

    def forward(self, x, temb, ctx, n_frames, temporal=True):
        x = self.res(x, temb)
        x = self.xattn(x, ctx)
        if temporal:
            x = self.tattn(x, n_frames)
        return x


class Encoder(nn.Module):
    def __init__(self, channels, temb_dim, ctx_dim, heads, in_channels=IN_CHANNELS):
        super().__init__()
        self.conv_in = nn.Conv2d(in_channels, channels[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = channels[0]
        for i, ch in enumerate(channels):
            self.blocks.append(Block(prev, ch, temb_dim, ctx_dim, heads))
            prev = ch
            if i < len(channels) - 1:
                self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid1 = Block(prev, prev, temb_dim, ctx_dim, heads)
        self.mid2 = ResBlock(prev, prev, temb_dim)

    def forward(self, x, temb, ctx, n_frames, temporal=True, hint=None):
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        skips = []
        for i, blk in enumerate(self.blocks):
            h = blk(h, temb, ctx, n_frames, temporal)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid1(h, temb, ctx, n_frames, temporal)
        h = self.mid2(h, temb)
        return skips, h


class UNet3D(nn.Module):
    def __init__(self, channels=(64, 128, 128), ctx_dim=128, heads=4, out_channels=4):
        super().__init__()
        self.channels = tuple(channels)
        self.temb_dim = channels[0] * 4
        self.time_mlp = nn.Sequential(nn.Linear(channels[0], self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.encoder = Encoder(channels, self.temb_dim, ctx_dim, heads)
        self.up_blocks = nn.ModuleList()
        prev = channels[-1]
        for ch in reversed(channels):
            self.up_blocks.append(Block(prev + ch, ch, self.temb_dim, ctx_dim, heads))
            prev = ch
        self.out = nn.Sequential(norm(channels[0]), nn.SiLU(), nn.Conv2d(channels[0], out_channels, 3, padding=1))

    def time_embed(self, t, n_frames):
        temb = self.time_mlp(timestep_embedding(t, self.channels[0]).to(self.time_mlp[0].weight.dtype))
        return temb.repeat_interleave(n_frames, dim=0)

    def decode(self, skips, h, temb, ctx, n_frames, temporal=True, control=None):
        if control is not None:
            *ctrl_skips, ctrl_mid = control
            skips = [s + c for s, c in zip(skips, ctrl_skips)]
            h = h + ctrl_mid
        for i, blk in enumerate(self.up_blocks):
            skip = skips[-1 - i]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = blk(torch.cat([h, skip], dim=1), temb, ctx, n_frames, temporal)
        return self.out(h)

    def forward(self, x, t, ctx, n_frames, control=None, temporal=True):
        """x: (B*N, 9, h, w); t: (B,); ctx: (B*N, M, d)."""
        temb = self.time_embed(t, n_frames)
        skips, h = self.encoder(x, temb, ctx, n_frames, temporal)
        return self.decode(skips, h, temb, ctx, n_frames, temporal, control)


class ControlBranch(nn.Module):
    """Copy of the U-Net encoder whose outputs pass through zero convolutions."""

    def __init__(self, unet: UNet3D, hint_channels: int):
        super().__init__()
        self.time_mlp = copy.deepcopy(unet.time_mlp)
        self.encoder = copy.deepcopy(unet.encoder)
        self.channels = unet.channels
        self.hint_proj = zero_module(nn.Conv2d(hint_channels, unet.channels[0], 1))
        self.zero_convs = nn.ModuleList([zero_module(nn.Conv2d(ch, ch, 1)) for ch in unet.channels])
        self.zero_mid = zero_module(nn.Conv2d(unet.channels[-1], unet.channels[-1], 1))

    def forward(self, x, t, ctx, n_frames, hint, temporal=True):
        temb = self.time_mlp(timestep_embedding(t, self.channels[0]).to(self.time_mlp[0].weight.dtype)).repeat_interleave(n_frames, dim=0)
        skips, h = self.encoder(x, temb, ctx, n_frames, temporal, hint=self.hint_proj(hint))
        return [z(s) for z, s in zip(self.zero_convs, skips)] + [self.zero_mid(h)]
