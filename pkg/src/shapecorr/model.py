"""Full correspondence network: optional orientation alignment + backbone."""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import DGCNN, cosine_similarity_matrix
from .config import Config
from .orientation import OemOutput, OrientationModule, align_source


class CorrespondenceNet(nn.Module):
    def __init__(self, backbone: DGCNN, oem: OrientationModule | None = None):
        super().__init__()
        self.backbone = backbone
        self.oem = oem

    @classmethod
    def from_config(cls, cfg: Config, seed: int | None = None) -> "CorrespondenceNet":
        """Build with seeded fan-in uniform initialisation (the torch default)."""
        seed = cfg.train.seed if seed is None else seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            b = cfg.backbone
            backbone = DGCNN(b.widths, b.out_channels, b.k, b.negative_slope, b.concat)
            oem = None
            if cfg.oem.enabled:
                o = cfg.oem
                oem = OrientationModule(o.widths, o.k, o.bins, o.centered_bins, o.head_widths,
                                        o.disc_mlp1, o.disc_mlp2, o.norm, o.use_fim, o.use_dam,
                                        o.grl_weight)
        return cls(backbone, oem)

    def align(self, source: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, OemOutput | None]:
        """Rotate ``source`` by minus the predicted relative angle.

        Without an orientation module the source is returned unchanged.
        """
        if self.oem is None:
            return source, None
        out = self.oem(source, target)
        return align_source(source, out.probs, self.oem.centered_bins), out

    def embed(self, source, target):
        """Aligned source, source features, target features, orientation output."""
        aligned, oem_out = self.align(source, target)
        return aligned, self.backbone(aligned), self.backbone(target), oem_out

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Cross similarity matrix between source and target points."""
        _, fx, fy, _ = self.embed(source, target)
        return cosine_similarity_matrix(fx, fy)
