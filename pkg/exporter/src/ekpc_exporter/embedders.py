"""Token embedders: image -> (d_t, d) float32 token matrix.

The default "patch-proj-v1" backend is self-contained: it splits the resized
image into a patch grid and applies a seeded random projection per patch,
which is a frozen (untrained) embedding layer. Row 0 is a synthetic CLS
token, the mean of the content tokens, matching what the engine expects at
index 0.

"torchvision:<name>" backends use a real pre-trained model's embedding
layer; they are optional and require torch + torchvision with weights
available locally.
"""

from __future__ import annotations

import numpy as np


class ModelError(RuntimeError):
    """The requested model identifier cannot be instantiated."""


def _grid_side(n_content: int) -> int:
    side = 1
    while side * side < n_content:
        side += 1
    return side


class PatchProjectionEmbedder:
    """Seeded random projection of image patches; deterministic given (job seed, shape)."""

    name = "patch-proj-v1"

    def __init__(self, d_t: int, d: int, image_size: int, seed: int):
        if d_t < 2:
            raise ModelError("patch-proj-v1 needs d_t >= 2 (CLS + content tokens)")
        self.d_t = d_t
        self.d = d
        self.image_size = image_size
        self.side = _grid_side(d_t - 1)
        if image_size % self.side != 0:
            raise ModelError(
                f"image_size {image_size} not divisible by patch grid {self.side}")
        self.patch = image_size // self.side
        gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0x5045], dtype=np.uint64)))
        fan_in = self.patch * self.patch * 3
        self.projection = (gen.standard_normal((fan_in, d)) / np.sqrt(fan_in)).astype(np.float64)

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        """pixels (H, W, 3) float64 in [0, 1] -> (d_t, d) float32 tokens."""
        h = w = self.image_size
        if pixels.shape != (h, w, 3):
            raise ValueError(f"expected ({h}, {w}, 3) pixels, got {pixels.shape}")
        p = self.patch
        patches = []
        for r in range(self.side):
            for c in range(self.side):
                patches.append(pixels[r * p:(r + 1) * p, c * p:(c + 1) * p, :].reshape(-1))
        content = np.stack(patches[:self.d_t - 1]) @ self.projection
        cls = content.mean(axis=0, keepdims=True)
        return np.concatenate([cls, content], axis=0).astype(np.float32)


class TorchVisionEmbedder:
    """Post-embedding-layer tokens of a pre-trained torchvision ViT.

    Content tokens are the conv-projected patch tokens pooled down to
    d_t - 1 groups and truncated to the first d channels; row 0 is the
    model's class token treated the same way. `stage` > 0 runs that many
    encoder blocks first (deeper-token export for ablations).
    """

    def __init__(self, model_name: str, d_t: int, d: int, image_size: int,
                 stage: int = 0):
        try:
            import torch
            import torchvision.models as tvm
        except ImportError as e:
            raise ModelError(f"torchvision backend unavailable: {e}")
        self.torch = torch
        factory = getattr(tvm, model_name, None)
        if factory is None:
            raise ModelError(f"unknown torchvision model '{model_name}'")
        try:
            self.model = factory(weights="DEFAULT")
        except Exception as e:
            raise ModelError(f"cannot load pre-trained weights for '{model_name}': {e}")
        self.model.eval()
        if not hasattr(self.model, "conv_proj"):
            raise ModelError(f"'{model_name}' is not a ViT-style model with conv_proj")
        hidden = self.model.conv_proj.out_channels
        if d > hidden:
            raise ModelError(f"d={d} exceeds the model width {hidden}")
        self.d_t = d_t
        self.d = d
        self.image_size = image_size
        self.stage = stage

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        torch = self.torch
        with torch.no_grad():
            img = torch.from_numpy(pixels.transpose(2, 0, 1)[None]).float()
            img = torch.nn.functional.interpolate(
                img, size=self.model.image_size, mode="bilinear", align_corners=False)
            x = self.model.conv_proj(img)
            x = x.flatten(2).transpose(1, 2)  # (1, n_patches, hidden)
            cls = self.model.class_token.expand(1, -1, -1)
            x = torch.cat([cls, x], dim=1) + self.model.encoder.pos_embedding
            for block in list(self.model.encoder.layers)[: self.stage]:
                x = block(x)
            tokens = x[0].numpy()
        cls_row = tokens[0, : self.d]
        content = tokens[1:, : self.d]
        groups = np.array_split(content, self.d_t - 1, axis=0)
        pooled = np.stack([g.mean(axis=0) for g in groups])
        return np.concatenate([cls_row[None], pooled], axis=0).astype(np.float32)


def make_embedder(model_id: str, d_t: int, d: int, image_size: int, seed: int,
                  stage: int = 0):
    if model_id == PatchProjectionEmbedder.name:
        if stage != 0:
            raise ModelError("patch-proj-v1 has no deeper layers to export")
        return PatchProjectionEmbedder(d_t, d, image_size, seed)
    if model_id.startswith("torchvision:"):
        return TorchVisionEmbedder(model_id.split(":", 1)[1], d_t, d, image_size, stage)
    raise ModelError(f"unknown model identifier '{model_id}'")
