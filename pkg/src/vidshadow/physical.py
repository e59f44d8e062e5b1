"""Physical characteristic branch: shared-encoder UNet with a shadow-removal
decoder and a shadow-mask decoder, enhanced by mask-guided attention.

The branch runs at a reduced resolution (input area-downsampled by
``branch_scale``); the three finest removal-decoder features are projected to
the fusion width and bilinearly upsampled back to full resolution for the
fusion stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ValidationError


@dataclass(frozen=True)
class PhysicalConfig:
    base_channels: int = 32   # desk scale: 16
    depth: int = 4            # down/up stages
    branch_scale: int = 2     # whole-branch downsampling vs the input frame

    def __post_init__(self):
        if self.base_channels < 4:
            raise ValidationError("base_channels must be >= 4")
        if self.depth < 2:
            raise ValidationError("depth must be >= 2 (three decoder taps are needed)")
        if self.branch_scale < 1:
            raise ValidationError("branch_scale must be >= 1")

    def check_dims(self, h: int, w: int) -> None:
        div = self.branch_scale * (2 ** self.depth)
        if h % div or w % div:
            raise ValidationError(
                f"input dims {h}x{w} must be divisible by branch_scale * 2^depth = {div}"
            )


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1), nn.PReLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1), nn.PReLU(),
        )

    def forward(self, x):
        return self.net(x)


class Encoder(nn.Module):
    def __init__(self, c_in: int, base: int, depth: int):
        super().__init__()
        self.stem = ConvBlock(c_in, base)
        downs, blocks = [], []
        ch = base
        for _ in range(depth):
            downs.append(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1))
            blocks.append(ConvBlock(ch * 2, ch * 2))
            ch *= 2
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        """Returns skip features [e_0 .. e_{depth-1}] and the bottleneck."""
        feats = [self.stem(x)]
        for down, block in zip(self.downs, self.blocks):
            feats.append(block(down(feats[-1])))
        return feats[:-1], feats[-1]


class Decoder(nn.Module):
    def __init__(self, base: int, depth: int):
        super().__init__()
        ups, blocks = [], []
        ch = base * 2 ** depth
        for _ in range(depth):
            ups.append(nn.Conv2d(ch, ch // 2, 1))
            blocks.append(ConvBlock(ch, ch // 2))  # after concat with the skip
            ch //= 2
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, skips, bottom):
        """Returns the decode path [bottleneck, d_1 .. d_depth], coarse to fine."""
        path = [bottom]
        x = bottom
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
            x = block(torch.cat((x, skip), dim=1))
            path.append(x)
        return path


class Msam(nn.Module):
    """Mask-guided supervised attention.

    Produces the coarse residual estimate, the mask prediction, and the
    attention-enhanced physical features. When ``use_mask`` is off, the
    attention map is built from the coarse estimate alone.
    """

    def __init__(self, channels: int, use_mask: bool = True):
        super().__init__()
        self.use_mask = use_mask
        self.to_residual = nn.Conv2d(channels, 3, 1)
        nn.init.zeros_(self.to_residual.weight)
        nn.init.zeros_(self.to_residual.bias)
        self.to_mask = nn.Conv2d(channels, 1, 1) if use_mask else None
        self.to_attention = nn.Conv2d(3 + (1 if use_mask else 0), channels, 1)
        self.transform = nn.Conv2d(channels, channels, 1)

    def forward(self, f_rem, f_msk, frame_s):
        if f_rem.shape[-2:] != frame_s.shape[-2:]:
            raise ValidationError("MSAM inputs are not spatially aligned")
        r_middle = frame_s + self.to_residual(f_rem)
        if self.use_mask:
            if f_msk is None or f_msk.shape != f_rem.shape:
                raise ValidationError("MSAM needs mask features matching f_rem")
            m_pred = torch.sigmoid(self.to_mask(f_msk))
            hybrid = torch.cat((r_middle, m_pred), dim=1)
        else:
            m_pred = None
            hybrid = r_middle
        f_att = torch.sigmoid(self.to_attention(hybrid))
        f_ph = f_rem + self.transform(f_rem) * f_att
        return f_ph, r_middle, m_pred


class PhysicalBranch(nn.Module):
    def __init__(self, cfg: PhysicalConfig, fusion_width: int,
                 use_msam: bool = True, use_mask_head: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_msam = use_msam
        self.use_mask_head = use_mask_head
        base, depth = cfg.base_channels, cfg.depth
        self.encoder = Encoder(6, base, depth)
        self.dec_removal = Decoder(base, depth)
        self.dec_mask = Decoder(base, depth) if use_mask_head else None

        # the last three features of the decode path feed the fusion stage
        tap_channels = [base * 2 ** depth] + [base * 2 ** (depth - 1 - i) for i in range(depth)]
        self.tap_projs = nn.ModuleList(
            nn.Conv2d(ch, fusion_width, 1) for ch in tap_channels[-3:]
        )
        if use_msam:
            self.msam = Msam(base, use_mask=use_mask_head)
            self.mask_head = None
        else:
            self.msam = None
            self.mask_head = nn.Conv2d(base, 1, 1) if use_mask_head else None

    def forward(self, frame, relit):
        """frame, relit: (B, 3, H, W) at full resolution.

        Returns a dict with f_ph (C, H/s, W/s), r_middle / m_pred at branch
        resolution (or None), d_feats (3 maps at fusion width, full res),
        and frame_s (the downsampled input).
        """
        if frame.shape != relit.shape:
            raise ValidationError("frame and relit must have the same shape")
        h, w = frame.shape[-2:]
        self.cfg.check_dims(h, w)
        s = self.cfg.branch_scale
        frame_s = F.avg_pool2d(frame, s) if s > 1 else frame
        relit_s = F.avg_pool2d(relit, s) if s > 1 else relit
        skips, bottom = self.encoder(torch.cat((frame_s, relit_s), dim=1))
        rem_path = self.dec_removal(skips, bottom)
        f_rem = rem_path[-1]

        d_feats = [
            F.interpolate(proj(tap), size=(h, w), mode="bilinear", align_corners=False)
            for proj, tap in zip(self.tap_projs, rem_path[-3:])
        ]

        f_msk = self.dec_mask(skips, bottom)[-1] if self.dec_mask is not None else None
        if self.msam is not None:
            f_ph, r_middle, m_pred = self.msam(f_rem, f_msk, frame_s)
        else:
            f_ph, r_middle = f_rem, None
            m_pred = torch.sigmoid(self.mask_head(f_msk)) if self.mask_head is not None else None
        return {
            "f_ph": f_ph,
            "r_middle": r_middle,
            "m_pred": m_pred,
            "d_feats": d_feats,
            "frame_s": frame_s,
        }
