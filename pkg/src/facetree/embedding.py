"""Per-token input matrices for the two streams.

The structure stream consumes landmark coordinates in traversal order;
the texture stream consumes encoded pixel patches centered on each
landmark, stacked in the same order. Patch encodings are computed once
per landmark and gathered per token, so repeated visits reuse the same
row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import LandmarkSet, TraversalSequence

__all__ = [
    "PatchConfig",
    "patch_center",
    "extract_patch",
    "extract_landmark_patches",
    "structure_embed",
    "texture_embed",
    "FlattenEncoder",
    "RandomProjectionEncoder",
    "TinyConvEncoder",
    "make_encoder",
    "ENCODER_KINDS",
]

ENCODER_KINDS = ("flatten", "random-projection", "tiny-conv")


@dataclass(frozen=True)
class PatchConfig:
    """Square crop size; out-of-image pixels replicate the nearest edge."""

    size: int = 17

    def __post_init__(self) -> None:
        if self.size < 3 or self.size % 2 == 0:
            raise ValueError("patch size must be odd and >= 3")


def patch_center(landmark_xy, image_shape) -> tuple[int, int]:
    """Nearest pixel (row, col) for a normalized landmark coordinate."""
    h, w = image_shape
    x, y = float(landmark_xy[0]), float(landmark_xy[1])
    return int(round(y * (h - 1))), int(round(x * (w - 1)))


def extract_patch(image, center, cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """Crop a size x size patch around a pixel, replicating edges as needed."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("image must be a nonempty 2-D grayscale array")
    r, c = int(round(center[0])), int(round(center[1]))
    h, w = image.shape
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"patch center ({r}, {c}) lies outside image of shape {image.shape}")
    half = cfg.size // 2
    rows = np.clip(np.arange(r - half, r + half + 1), 0, h - 1)
    cols = np.clip(np.arange(c - half, c + half + 1), 0, w - 1)
    return image[np.ix_(rows, cols)]


def extract_landmark_patches(image, landmarks: LandmarkSet,
                             cfg: PatchConfig = PatchConfig()) -> np.ndarray:
    """(n, size, size) stack with one patch per landmark."""
    image = np.asarray(image, dtype=float)
    return np.stack([
        extract_patch(image, patch_center(xy, image.shape), cfg)
        for xy in landmarks.coords
    ])


def structure_embed(seq: TraversalSequence, landmarks: LandmarkSet) -> np.ndarray:
    """(2n-1, 2) matrix of landmark coordinates in traversal order."""
    tokens = seq.as_array()
    if tokens.min() < 0 or tokens.max() >= landmarks.n:
        raise ValueError("traversal token out of range for landmark set")
    return landmarks.coords[tokens]


def texture_embed(seq: TraversalSequence, patches, encoder) -> np.ndarray:
    """(2n-1, d) matrix of patch encodings in traversal order.

    The n distinct patches are encoded once; rows for repeated tokens are
    gathered from that cache, not recomputed.
    """
    patches = np.asarray(patches, dtype=float)
    if patches.ndim != 3:
        raise ValueError(f"expected an (n, size, size) patch stack, got shape {patches.shape}")
    tokens = seq.as_array()
    if tokens.min() < 0 or tokens.max() >= patches.shape[0]:
        raise ValueError(
            f"missing patch: traversal references landmark {int(tokens.max())} "
            f"but only {patches.shape[0]} patches were given"
        )
    encoded = encoder.encode(patches)
    return encoded[tokens]


class FlattenEncoder:
    """Raw pixels as features; reshaping an output row recovers the patch."""

    kind = "flatten"
    trainable = False

    def __init__(self, patch_size: int = 17, seed: int = 0) -> None:
        self.patch_size = patch_size
        self.seed = seed
        self.output_dim = patch_size * patch_size

    def encode(self, patches) -> np.ndarray:
        patches = np.asarray(patches, dtype=float)
        return patches.reshape(patches.shape[0], -1).copy()


class RandomProjectionEncoder:
    """Fixed Gaussian projection of flattened pixels, deterministic per seed."""

    kind = "random-projection"
    trainable = False

    def __init__(self, patch_size: int = 17, output_dim: int = 64, seed: int = 0) -> None:
        self.patch_size = patch_size
        self.output_dim = output_dim
        self.seed = seed
        d_in = patch_size * patch_size
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((d_in, output_dim)) / math.sqrt(d_in)

    def encode(self, patches) -> np.ndarray:
        patches = np.asarray(patches, dtype=float)
        return patches.reshape(patches.shape[0], -1) @ self.projection


class TinyConvEncoder:
    """Small trainable encoder: conv -> tanh -> mean pool -> dense.

    Parameters live in `params` and are updated by the training loop when
    this encoder is selected; `backward` returns their gradients given the
    upstream gradient of the encoded features.
    """

    kind = "tiny-conv"
    trainable = True

    def __init__(self, patch_size: int = 17, output_dim: int = 64, seed: int = 0,
                 channels: int = 8, kernel: int = 5, stride: int = 2) -> None:
        if kernel > patch_size:
            raise ValueError("kernel larger than patch")
        self.patch_size = patch_size
        self.output_dim = output_dim
        self.seed = seed
        self.channels = channels
        self.kernel = kernel
        self.stride = stride
        rng = np.random.default_rng(seed)
        k2 = kernel * kernel
        self.params = {
            "conv_W": rng.uniform(-1, 1, size=(k2, channels)) / math.sqrt(k2),
            "conv_b": np.zeros(channels),
            "out_W": rng.uniform(-1, 1, size=(channels, output_dim)) / math.sqrt(channels),
            "out_b": np.zeros(output_dim),
        }
        # flat-pixel gather index for all conv windows: (windows, kernel^2)
        starts = np.arange(0, patch_size - kernel + 1, stride)
        base = (starts[:, None] * patch_size + starts[None, :]).ravel()
        offs = (np.arange(kernel)[:, None] * patch_size + np.arange(kernel)[None, :]).ravel()
        self._windows = base[:, None] + offs[None, :]

    def forward(self, patches):
        patches = np.asarray(patches, dtype=float)
        flat = patches.reshape(patches.shape[0], -1)
        cols = flat[:, self._windows]                               # (m, P, k^2)
        z = cols @ self.params["conv_W"] + self.params["conv_b"]    # (m, P, ch)
        a = np.tanh(z)
        pooled = a.mean(axis=1)                                     # (m, ch)
        out = pooled @ self.params["out_W"] + self.params["out_b"]
        cache = {"cols": cols, "a": a, "pooled": pooled}
        return out, cache

    def encode(self, patches) -> np.ndarray:
        return self.forward(patches)[0]

    def backward(self, cache, d_out) -> dict[str, np.ndarray]:
        cols, a, pooled = cache["cols"], cache["a"], cache["pooled"]
        grads = {
            "out_W": pooled.T @ d_out,
            "out_b": d_out.sum(axis=0),
        }
        dpooled = d_out @ self.params["out_W"].T
        da = dpooled[:, None, :] / a.shape[1]
        dz = da * (1.0 - a ** 2)
        m, P, k2 = cols.shape
        grads["conv_W"] = cols.reshape(m * P, k2).T @ dz.reshape(m * P, -1)
        grads["conv_b"] = dz.sum(axis=(0, 1))
        return grads


def make_encoder(kind: str, patch_size: int = 17, output_dim: int = 64, seed: int = 0):
    """Build a patch encoder by name."""
    if kind == "flatten":
        return FlattenEncoder(patch_size, seed=seed)
    if kind == "random-projection":
        return RandomProjectionEncoder(patch_size, output_dim, seed)
    if kind == "tiny-conv":
        return TinyConvEncoder(patch_size, output_dim, seed)
    raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")
