"""Descriptor networks.

The LiDAR branch embeds a 32x32x16 occupancy grid: two (3-D convolution,
max-pool) blocks with 32 then 64 channels, one more 3-D convolution with 64
channels, a flatten, a dense layer of 512, and a dense projection to the
descriptor dimension. The fused model concatenates that descriptor with a
fixed image embedding and passes the pair through a dense head to 256. The
image branch itself is never trained here: image embeddings arrive either
precomputed from a file or from the small frozen patch encoder below.
"""

import torch
from torch import nn

VOXEL_SHAPE = (32, 32, 16)
LIDAR_DIM = 64
FUSED_DIM = 256
IMAGE_FILE_DIM = 4096  # precomputed image embeddings ship at this width
PATCH_SIZE = 140


class LidarEncoder(nn.Module):
    def __init__(self, dim: int = LIDAR_DIM):
        super().__init__()
        self.dim = dim
        self.features = nn.Sequential(
            nn.Conv3d(1, 32, kernel_size=3, padding=1), nn.ReLU(),
            nn.MaxPool3d(2),
            nn.Conv3d(32, 64, kernel_size=3, padding=1), nn.ReLU(),
            nn.MaxPool3d(2),
            nn.Conv3d(64, 64, kernel_size=3, padding=1), nn.ReLU(),
        )
        flat = 64 * (VOXEL_SHAPE[0] // 4) * (VOXEL_SHAPE[1] // 4) * (VOXEL_SHAPE[2] // 4)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, 512), nn.ReLU(),
            nn.Linear(512, dim),
        )

    def forward(self, voxels: torch.Tensor) -> torch.Tensor:
        """voxels: (B, 1, 32, 32, 16) float -> (B, dim) embeddings."""
        return self.head(self.features(voxels))


class FusedEncoder(nn.Module):
    """LiDAR descriptor concatenated with a fixed image embedding, then dense
    layers down to the fused descriptor size."""

    def __init__(self, image_dim: int, dim: int = FUSED_DIM,
                 lidar_dim: int = LIDAR_DIM):
        super().__init__()
        self.dim = dim
        self.image_dim = image_dim
        self.lidar = LidarEncoder(lidar_dim)
        self.head = nn.Sequential(
            nn.Linear(lidar_dim + image_dim, 512), nn.ReLU(),
            nn.Linear(512, dim),
        )

    def forward(self, voxels: torch.Tensor,
                image_embeddings: torch.Tensor) -> torch.Tensor:
        z = self.lidar(voxels)
        return self.head(torch.cat([z, image_embeddings], dim=1))


class PatchStandIn(nn.Module):
    """Small patch encoder standing in for a full place-recognition image net.

    Produces a deterministic embedding from a 140x140 grayscale patch. Weights
    are seeded at construction and frozen: the stand-in is an image-embedding
    source, not a trainable branch.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, kernel_size=5, stride=2), nn.ReLU(),
            nn.Conv2d(8, 16, kernel_size=5, stride=2), nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
        )
        self.proj = nn.Linear(16 * 4 * 4, dim)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """patches: (B, 1, 140, 140) in [0, 1] -> (B, dim)."""
        return self.proj(torch.flatten(self.features(patches), 1))
