"""Toy text encoder (token + position embeddings) and linear patch image encoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, VocabularyError
from .numerics import Tensor, add, as_tensor, matmul, take_rows


@dataclass
class TextEncoder:
    token_embedding: Tensor  # V x d_text
    position_embedding: Tensor  # M x d_text

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def width(self) -> int:
        return self.token_embedding.shape[1]

    def encode(self, tokens) -> Tensor:
        """``tokens``: int array (M,) or (B, M) -> Tensor (..., M, d_text)."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"token id outside [0, {self.vocab_size})")
        if ids.shape[-1] != self.position_embedding.shape[0]:
            raise DimensionError(f"expected {self.position_embedding.shape[0]} tokens, got {ids.shape[-1]}")
        return add(take_rows(self.token_embedding, ids), self.position_embedding)


def encode_text(caption, enc: TextEncoder) -> Tensor:
    ids = caption.ids if hasattr(caption, "ids") else caption
    return enc.encode(ids)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W, C) -> (..., N, patch*patch*C), patches in row-major order.

    Each patch vector is ordered (row, column, channel).
    """
    images = np.asarray(images, dtype=np.float64)
    *lead, h, w, c = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    gh, gw = h // patch, w // patch
    x = images.reshape(*lead, gh, patch, gw, patch, c)
    x = np.moveaxis(x, -4, -3)  # (..., gh, gw, patch, patch, c)
    return x.reshape(*lead, gh * gw, patch * patch * c)


@dataclass
class ImageEncoder:
    projection: Tensor  # (p*p*3) x d
    position_embedding: Tensor  # N x d
    patch: int
    image_hw: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.position_embedding.shape[0]

    def encode(self, images) -> Tensor:
        """(B, H, W, 3) or (H, W, 3) pixels -> latent tokens (..., N, d)."""
        arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float64)
        if arr.shape[-3:] != (*self.image_hw, 3):
            raise DimensionError(f"expected images of shape {(*self.image_hw, 3)}, got {arr.shape[-3:]}")
        patches = as_tensor(patchify(arr, self.patch))
        return add(matmul(patches, self.projection), self.position_embedding)


def encode_image(image, enc: ImageEncoder) -> Tensor:
    return enc.encode(image)
