import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ResBlock, norm


class FrameAutoencoder(nn.Module):
    """Per-frame convolutional autoencoder with 8x spatial downsampling."""

    def __init__(self, latent_channels=4, chs=(32, 64, 128)):
        super().__init__()
        c0, c1, c2 = chs
        self.enc = nn.Sequential(
            nn.Conv2d(3, c0, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(c0, c1, 3, stride=2, padding=1),
            ResBlock(c1, c1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            ResBlock(c2, c2),
            nn.Conv2d(c2, c2, 3, stride=2, padding=1),
            ResBlock(c2, c2),
            norm(c2),
            nn.SiLU(),
            nn.Conv2d(c2, latent_channels, 1),
        )
        self.dec_in = nn.Conv2d(latent_channels, c2, 3, padding=1)
        self.dec = nn.ModuleList([ResBlock(c2, c2), ResBlock(c2, c2), ResBlock(c2, c1)])
        self.dec_out = nn.Sequential(norm(c1), nn.SiLU(), nn.Conv2d(c1, c0, 3, padding=1), nn.SiLU(), nn.Conv2d(c0, 3, 3, padding=1))
        # latent standardization, fitted after training
        self.register_buffer("shift", torch.zeros(1, latent_channels, 1, 1))
        self.register_buffer("scale", torch.ones(1, latent_channels, 1, 1))

    def encode_raw(self, x):
        return self.enc(x * 2 - 1)

    def decode_raw(self, z):
        h = self.dec_in(z)
        h = self.dec[0](h)
        for blk in self.dec[1:]:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = blk(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.dec_out(h))

    def encode(self, x):
        return (self.encode_raw(x) - self.shift) / self.scale

    def decode(self, z):
        return self.decode_raw(z * self.scale + self.shift)

    @torch.no_grad()
    def fit_standardization(self, frames: torch.Tensor):
        z = self.encode_raw(frames)
        self.shift.copy_(z.mean(dim=(0, 2, 3), keepdim=True))
        self.scale.copy_(z.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-4))
