"""Patch tiling geometry, (un)patchify, and patch-aligned binary masks.

A frame [H, W, C] is tiled into N = H*W/patch_size**2 non-overlapping
square blocks, indexed row-major over the block grid. Patch rows are the
blocks flattened row-major within the block with the channel axis last
(fastest varying). Masks use 1 for causal/known pixels and 0 for
environmental/to-inpaint pixels; file export inverts to the black/white
image convention (causal black, environmental white).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class PatchPartitionGeometry:
    """Tiling of an (height, width, channels) frame into square patches."""

    height: int
    width: int
    channels: int
    patch_size: int

    def __post_init__(self):
        if self.patch_size < 1:
            raise DimensionError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.height % self.patch_size != 0:
            raise DimensionError(
                f"height {self.height} not divisible by patch_size {self.patch_size}"
            )
        if self.width % self.patch_size != 0:
            raise DimensionError(
                f"width {self.width} not divisible by patch_size {self.patch_size}"
            )
        if self.channels < 1:
            raise DimensionError(f"channels must be >= 1, got {self.channels}")

    @property
    def patches_per_row(self) -> int:
        return self.width // self.patch_size

    @property
    def patches_per_col(self) -> int:
        return self.height // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.patches_per_row * self.patches_per_col

    @property
    def patch_dim(self) -> int:
        """Length of one flattened patch row: patch_size**2 * channels."""
        return self.patch_size * self.patch_size * self.channels

    def block_origin(self, index: int) -> tuple[int, int]:
        """Top-left (row, col) pixel of patch `index`."""
        if not 0 <= index < self.num_patches:
            raise IndexError(f"patch index {index} out of range [0, {self.num_patches})")
        block_row, block_col = divmod(index, self.patches_per_row)
        return block_row * self.patch_size, block_col * self.patch_size

    def block_slices(self, index: int) -> tuple[slice, slice]:
        r0, c0 = self.block_origin(index)
        return slice(r0, r0 + self.patch_size), slice(c0, c0 + self.patch_size)


def patchify(frame: np.ndarray, geometry: PatchPartitionGeometry) -> np.ndarray:
    """Split a [H, W, C] frame into the [N, patch_dim] patch matrix."""
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise DimensionError(f"frame must be [H, W, C], got shape {frame.shape}")
    h, w, c = frame.shape
    if h != geometry.height:
        raise DimensionError(f"frame height {h} != geometry height {geometry.height}")
    if w != geometry.width:
        raise DimensionError(f"frame width {w} != geometry width {geometry.width}")
    if c != geometry.channels:
        raise DimensionError(f"frame channels {c} != geometry channels {geometry.channels}")
    p = geometry.patch_size
    blocks = frame.reshape(h // p, p, w // p, p, c)
    blocks = blocks.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(geometry.num_patches, geometry.patch_dim))


def unpatchify(patches: np.ndarray, geometry: PatchPartitionGeometry) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    if patches.ndim != 2:
        raise DimensionError(f"patches must be [N, patch_dim], got shape {patches.shape}")
    if patches.shape[0] != geometry.num_patches:
        raise DimensionError(
            f"got {patches.shape[0]} patches, geometry expects {geometry.num_patches}"
        )
    if patches.shape[1] != geometry.patch_dim:
        raise DimensionError(
            f"patch row length {patches.shape[1]} != expected {geometry.patch_dim}"
        )
    p = geometry.patch_size
    nh, nw, c = geometry.patches_per_col, geometry.patches_per_row, geometry.channels
    blocks = patches.reshape(nh, nw, p, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(geometry.height, geometry.width, c))


def mask_from_partition(env_indices, geometry: PatchPartitionGeometry) -> np.ndarray:
    """Binary [H, W] mask: 0 on the listed environmental patches, 1 elsewhere."""
    mask = np.ones((geometry.height, geometry.width), dtype=np.uint8)
    for index in env_indices:
        rows, cols = geometry.block_slices(int(index))
        mask[rows, cols] = 0
    return mask


def validate_mask(mask: np.ndarray, geometry: PatchPartitionGeometry) -> None:
    """Check a mask is binary and block-constant on the patch tiling."""
    mask = np.asarray(mask)
    if mask.shape != (geometry.height, geometry.width):
        raise DimensionError(
            f"mask shape {mask.shape} != ({geometry.height}, {geometry.width})"
        )
    if not np.isin(mask, (0, 1)).all():
        raise DimensionError("mask entries must be exactly 0 or 1")
    p = geometry.patch_size
    blocks = mask.reshape(geometry.patches_per_col, p, geometry.patches_per_row, p)
    if (blocks.min(axis=(1, 3)) != blocks.max(axis=(1, 3))).any():
        raise DimensionError("mask is not block-constant on the patch tiling")


def save_mask(mask: np.ndarray, path) -> None:
    """Export a mask as raw [H, W] uint8: 255 environmental, 0 causal."""
    inverted = np.where(np.asarray(mask) == 0, 255, 0).astype(np.uint8)
    Path(path).write_bytes(inverted.tobytes())


def load_mask(path, geometry: PatchPartitionGeometry) -> np.ndarray:
    """Read a mask exported by :func:`save_mask` back to the 1=causal convention."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    raw = raw.reshape(geometry.height, geometry.width)
    return np.where(raw == 255, 0, 1).astype(np.uint8)
