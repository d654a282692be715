import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Attention, ResBlock


def _encoder(width):
    # 3 stride-2 stages: full resolution -> latent resolution
    return nn.Sequential(
        nn.Conv2d(3, width // 4, 3, padding=1),
        nn.SiLU(),
        nn.Conv2d(width // 4, width // 4, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Conv2d(width // 4, width // 2, 3, stride=2, padding=1),
        nn.SiLU(),
        nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
        ResBlock(width, width),
    )


class PixelWarper(nn.Module):
    """Fuses the keypoint-marked reference with the trajectory maps.

    The content encoder sees the marked reference, the motion encoder sees each
    trajectory-map frame. Motion tokens attend to content tokens and content
    tokens attend to all motion tokens; both attention paths are residual with
    zero-initialized outputs, and the two streams are summed (content broadcast
    over frames).
    """

    def __init__(self, width=64, heads=4, max_tokens=256):
        super().__init__()
        self.content_enc = _encoder(width)
        self.motion_enc = _encoder(width)
        self.pos = nn.Parameter(torch.randn(1, max_tokens, width) * 0.02)
        self.n_m = nn.LayerNorm(width)
        self.n_c = nn.LayerNorm(width)
        self.motion_from_content = Attention(width, heads=heads)
        self.content_from_motion = Attention(width, heads=heads)

    def encode(self, kp_img, traj_map):
        b, n = traj_map.shape[:2]
        fc = self.content_enc(kp_img * 2 - 1)  # (B, C, hc, wc)
        fm = self.motion_enc(traj_map.flatten(0, 1) * 2 - 1)  # (B*N, C, h, w)
        return fc, fm.view(b, n, *fm.shape[1:])

    def forward(self, kp_img, traj_map):
        b, n = traj_map.shape[:2]
        fc, fm = self.encode(kp_img, traj_map)
        c, h, w = fm.shape[2:]
        hc, wc = fc.shape[2:]
        tc = fc.flatten(2).transpose(1, 2)  # (B, Lc, C)
        tm = fm.flatten(3).transpose(2, 3)  # (B, N, L, C)
        tc_p = tc + self.pos[:, : tc.shape[1]]
        tm_p = tm + self.pos[:, : tm.shape[2]].unsqueeze(1)
        ctx_c = self.n_c(tc_p)
        q_m = self.n_m(tm_p).reshape(b * n, h * w, c)
        m_out = tm.reshape(b * n, h * w, c) + self.motion_from_content(q_m, ctx_c.repeat_interleave(n, dim=0))
        c_out = tc + self.content_from_motion(ctx_c, self.n_m(tm_p).reshape(b, n * h * w, c))
        m_map = m_out.transpose(1, 2).reshape(b, n, c, h, w)
        c_map = c_out.transpose(1, 2).reshape(b, c, hc, wc)
        if (hc, wc) != (h, w):
            c_map = F.interpolate(c_map, size=(h, w), mode="bilinear", align_corners=False)
        return m_map + c_map.unsqueeze(1)
