"""Patch-level primitives for feature borrowing.

Everything here operates on single (unbatched) maps: images and feature
maps are ``(C, h, w)`` tensors, masks are ``(h, w)`` or ``(1, h, w)``
with 1 marking a missing pixel.  All functions are pure; they never
mutate their inputs, so they are safe to call concurrently.

Patch indexing is row-major: index 0 is the top-left patch, indices run
left to right, then top to bottom.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

# Stabilizer for cosine-similarity denominators. Norms below this are
# clamped up, so a patch with a vanishing norm gets a self-similarity
# below 1; anything with norm >= EPS_NORM keeps s_ii = 1.
EPS_NORM = 1e-8


class EmptyKnownRegionError(ValueError):
    """The mask leaves no fully-known patch to borrow from."""


@dataclass(frozen=True)
class PatchGrid:
    """An ordered set of k x k patches cut from a (C, h, w) map.

    ``patches`` has shape (P, C, k, k).  ``index_to_center`` maps a patch
    index to the (row, col) center of its footprint in source
    coordinates (fractional for even patch sizes).
    """

    source_shape: tuple[int, int, int]
    patch_size: int
    stride: int
    patches: torch.Tensor
    index_to_center: dict[int, tuple[float, float]]

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Rows and columns of the patch lattice."""
        _, h, w = self.source_shape
        k, s = self.patch_size, self.stride
        return ((h - k) // s + 1, (w - k) // s + 1)

    def top_left(self, index: int) -> tuple[int, int]:
        """Top-left source coordinate of patch ``index``."""
        _, cols = self.grid_shape
        return (index // cols) * self.stride, (index % cols) * self.stride


@dataclass(frozen=True)
class SimilarityMap:
    """Pairwise patch similarities plus the known-patch index set.

    ``scores`` is a (P, P) matrix of cosine similarities.  ``known_set``
    holds the indices of patches whose full footprint lies in the known
    region; the complement is the missing set.
    """

    scores: torch.Tensor
    known_set: frozenset[int]

    @property
    def n_patches(self) -> int:
        return self.scores.shape[0]

    @property
    def missing_set(self) -> frozenset[int]:
        return frozenset(range(self.n_patches)) - self.known_set

    def known_indices(self) -> torch.Tensor:
        """Sorted known indices as a long tensor."""
        return torch.tensor(sorted(self.known_set), dtype=torch.long)

    def with_known_set(self, known_set) -> "SimilarityMap":
        return replace(self, known_set=frozenset(known_set))


def _as_chw(feature: torch.Tensor) -> torch.Tensor:
    if feature.dim() != 3:
        raise ValueError(f"expected a (C, h, w) map, got shape {tuple(feature.shape)}")
    return feature


def _mask_2d(mask: torch.Tensor) -> torch.Tensor:
    """Normalize a mask to 2-d float and check it is binary."""
    if mask.dim() == 3:
        if mask.shape[0] != 1:
            raise ValueError(f"mask must have one channel, got {mask.shape[0]}")
        mask = mask[0]
    if mask.dim() != 2:
        raise ValueError(f"mask must be (h, w) or (1, h, w), got {tuple(mask.shape)}")
    mask = mask.float()
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary with 1 = missing, 0 = known")
    return mask


def extract_patches(feature: torch.Tensor, patch_size: int, stride: int) -> PatchGrid:
    """Cut all k x k patches at the given stride, in row-major order."""
    feature = _as_chw(feature)
    c, h, w = feature.shape
    k, s = int(patch_size), int(stride)
    if k > h or k > w:
        raise ValueError(f"patch size {k} exceeds map size ({h}, {w})")
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")

    # unfold scans left-to-right then top-to-bottom, matching our order
    cols = F.unfold(feature.unsqueeze(0), kernel_size=k, stride=s)[0]  # (C*k*k, P)
    patches = cols.transpose(0, 1).reshape(-1, c, k, k)

    n_cols = (w - k) // s + 1
    half = (k - 1) / 2.0
    centers = {
        i: ((i // n_cols) * s + half, (i % n_cols) * s + half)
        for i in range(patches.shape[0])
    }
    return PatchGrid(
        source_shape=(c, h, w),
        patch_size=k,
        stride=s,
        patches=patches,
        index_to_center=centers,
    )


def reassemble_patches(
    patches: torch.Tensor,
    source_shape: tuple[int, int, int],
    patch_size: int,
    stride: int,
) -> torch.Tensor:
    """Paste (P, C, k, k) patches back onto a map, averaging overlaps.

    Cells covered by no patch (possible when stride > patch size) are
    left at zero.  With stride == patch size and exactly tiling patches
    this inverts :func:`extract_patches`.
    """
    c, h, w = source_shape
    k, s = int(patch_size), int(stride)
    p = patches.shape[0]
    cols = patches.reshape(p, c * k * k).transpose(0, 1).unsqueeze(0)
    acc = F.fold(cols, output_size=(h, w), kernel_size=k, stride=s)[0]
    ones = torch.ones(1, k * k, p, dtype=patches.dtype, device=patches.device)
    count = F.fold(ones, output_size=(h, w), kernel_size=k, stride=s)[0]
    return acc / count.clamp_min(1.0)


def cosine_similarity(grid: PatchGrid, known_set=None) -> SimilarityMap:
    """Pairwise cosine similarity of flattened patches.

    Denominator norms are clamped to ``EPS_NORM`` so zero-norm patches
    stay finite.  ``known_set`` defaults to all patch indices.
    """
    p = grid.n_patches
    if p == 0:
        raise ValueError("empty patch grid")
    flat = grid.patches.reshape(p, -1)
    norms = flat.norm(dim=1).clamp_min(EPS_NORM)
    unit = flat / norms.unsqueeze(1)
    scores = unit @ unit.transpose(0, 1)
    if known_set is None:
        known_set = range(p)
    return SimilarityMap(scores=scores, known_set=frozenset(known_set))


def mask_to_known_set(
    mask: torch.Tensor,
    patch_size: int,
    stride: int,
    feature_scale: int = 1,
) -> frozenset[int]:
    """Indices of patches whose pixel footprint is entirely known.

    The pixel mask is reduced to feature resolution by max-pooling with
    factor ``feature_scale`` (any missing pixel poisons its feature
    cell), then a patch is known only if its k x k feature footprint has
    no missing cell.

    Raises :class:`EmptyKnownRegionError` when nothing qualifies.
    """
    mask = _mask_2d(mask)
    h, w = mask.shape
    scale = int(feature_scale)
    if scale < 1 or h % scale or w % scale:
        raise ValueError(f"feature_scale {scale} must divide mask size ({h}, {w})")
    m = mask.view(1, 1, h, w)
    if scale > 1:
        m = F.max_pool2d(m, kernel_size=scale)
    per_patch = F.max_pool2d(m, kernel_size=patch_size, stride=stride)
    known = (per_patch.flatten() == 0).nonzero(as_tuple=True)[0]
    if known.numel() == 0:
        raise EmptyKnownRegionError("no fully-known patch available")
    return frozenset(known.tolist())


def _softmax_weights(sim: SimilarityMap, sharpness: float, dtype, device) -> torch.Tensor:
    """(P, P) row-softmax over known columns; missing columns get weight 0."""
    if not sim.known_set:
        raise EmptyKnownRegionError("similarity map has an empty known set")
    if sharpness <= 0:
        raise ValueError(f"sharpness must be positive, got {sharpness}")
    p = sim.n_patches
    col_known = torch.zeros(p, dtype=torch.bool, device=device)
    col_known[sim.known_indices()] = True
    logits = sim.scores.to(dtype) * sharpness
    logits = logits.masked_fill(~col_known.unsqueeze(0), float("-inf"))
    return torch.softmax(logits, dim=1)


def soft_replace(
    features: PatchGrid, sim: SimilarityMap, sharpness: float
) -> torch.Tensor:
    """Replace every patch by a softmax-weighted sum of known patches.

    The softmax runs only over the known index set (missing columns are
    excluded by -inf masking).  The reassembled map averages overlapping
    patches, and the whole pipeline is differentiable with respect to
    both the similarity scores and the patch features.
    """
    if features.n_patches != sim.n_patches:
        raise ValueError("patch grid and similarity map disagree on patch count")
    weights = _softmax_weights(sim, sharpness, features.patches.dtype, features.patches.device)
    flat = features.patches.reshape(features.n_patches, -1)
    replaced = weights @ flat
    return reassemble_patches(
        replaced.reshape_as(features.patches),
        features.source_shape,
        features.patch_size,
        features.stride,
    )


def argmax_known(sim: SimilarityMap) -> np.ndarray:
    """Per row, the known column with the highest similarity.

    Ties break to the lowest index. Returns an int array of length P.
    """
    if not sim.known_set:
        raise EmptyKnownRegionError("similarity map has an empty known set")
    scores = sim.scores.detach().cpu().numpy().astype(np.float64, copy=True)
    missing = np.ones(sim.n_patches, dtype=bool)
    missing[sorted(sim.known_set)] = False
    scores[:, missing] = -np.inf
    return np.argmax(scores, axis=1)


def hard_replace(features: PatchGrid, sim: SimilarityMap) -> torch.Tensor:
    """Replace every patch by its single most similar known patch."""
    if features.n_patches != sim.n_patches:
        raise ValueError("patch grid and similarity map disagree on patch count")
    idx = torch.from_numpy(argmax_known(sim))
    return reassemble_patches(
        features.patches[idx],
        features.source_shape,
        features.patch_size,
        features.stride,
    )


def jigsaw_compose(
    image: torch.Tensor,
    mask: torch.Tensor,
    sim: SimilarityMap,
    patch_size: int,
    stride: int,
) -> torch.Tensor:
    """Overwrite each missing patch footprint with its best known patch.

    The patch lattice implied by (patch_size, stride) on ``image`` must
    have the same patch count as ``sim``; patch index i of the lattice is
    the pixel footprint of similarity row i.  Pasted footprints are
    averaged where they overlap and the known region is left untouched.

    With an empty known set the input is returned unchanged and a
    warning is emitted.
    """
    image = _as_chw(image)
    mask = _mask_2d(mask).to(image.dtype)
    if mask.shape != image.shape[1:]:
        raise ValueError("image and mask spatial sizes disagree")
    grid = extract_patches(image, patch_size, stride)
    if grid.n_patches != sim.n_patches:
        raise ValueError(
            f"pixel lattice has {grid.n_patches} patches but the similarity "
            f"map has {sim.n_patches}"
        )
    if not sim.known_set:
        warnings.warn("empty known set: jigsaw composition returns the input unchanged")
        return image.clone()

    missing = sorted(sim.missing_set)
    if not missing:
        return image.clone()
    idx = argmax_known(sim)

    c, h, w = grid.source_shape
    k, s, p = patch_size, stride, grid.n_patches
    cols = torch.zeros(1, c * k * k, p, dtype=image.dtype)
    ones = torch.zeros(1, k * k, p, dtype=image.dtype)
    src = grid.patches[torch.from_numpy(idx[missing])]
    cols[0, :, missing] = src.reshape(len(missing), -1).transpose(0, 1)
    ones[0, :, missing] = 1.0
    acc = F.fold(cols, output_size=(h, w), kernel_size=k, stride=s)[0]
    count = F.fold(ones, output_size=(h, w), kernel_size=k, stride=s)[0]
    stitched = torch.where(count > 0, acc / count.clamp_min(1.0), image)
    return stitched * mask + image * (1.0 - mask)


def contextual_attention_baseline(
    features: torch.Tensor,
    mask: torch.Tensor,
    sharpness: float = 10.0,
    patch_size: int = 3,
    stride: int = 1,
) -> torch.Tensor:
    """In-network patch borrowing: the attention-layer forward pass.

    Extracts patches from the feature map itself, scores them by cosine
    similarity, and rebuilds every location from softmax-weighted known
    patches.  The mask is given at pixel resolution and reduced to the
    feature grid.  Output shape equals input shape.
    """
    features = _as_chw(features)
    mask = _mask_2d(mask)
    h_f = features.shape[1]
    if mask.shape[0] % h_f or mask.shape[1] % features.shape[2]:
        raise ValueError("mask size must be a multiple of the feature size")
    scale = mask.shape[0] // h_f
    known = mask_to_known_set(mask, patch_size, stride, feature_scale=scale)
    grid = extract_patches(features, patch_size, stride)
    sim = cosine_similarity(grid, known_set=known)
    return soft_replace(grid, sim, sharpness)
