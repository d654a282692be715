import torch
import torch.nn as nn
import torch.nn.functional as F


class IdExtractor(nn.Module):
    """Patch-embedding transformer mapping a reference crop to M identity tokens.

    Patch features on the (S/patch)^2 grid are average-pooled down to a
    sqrt(M) x sqrt(M) grid.
    """

    def __init__(self, dim=128, patch=8, image_size=64, depth=2, heads=4, n_tokens=16):
        super().__init__()
        self.patch = patch
        self.grid = image_size // patch
        self.pool = int(round(n_tokens ** 0.5))
        if self.pool ** 2 != n_tokens or self.grid % self.pool:
            raise ValueError(f"n_tokens={n_tokens} must be a square dividing the {self.grid}x{self.grid} patch grid")
        self.embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.randn(1, self.grid * self.grid, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim * 2, dropout=0.0, batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, ref):
        x = self.embed(ref * 2 - 1)
        b, d, g, _ = x.shape
        x = x.flatten(2).transpose(1, 2) + self.pos
        x = self.blocks(x)
        x = x.transpose(1, 2).reshape(b, d, g, g)
        x = F.adaptive_avg_pool2d(x, self.pool).flatten(2).transpose(1, 2)
        return self.out_norm(x)
