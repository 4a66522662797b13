"""Region-wise color histogram matching.

Builds the pseudo ground truth for the makeup losses: lips/eyes/face regions of
the source are remapped so their per-channel empirical distribution matches the
reference's corresponding region, everything else copied from the source.
Runs outside the autodiff graph; targets are fixed per batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import REGION_NAMES, RegionMaskSet

DEFAULT_BINS = 256


@dataclass
class ChannelHistogram:
    """Counts of one channel's masked pixels over uniform bins spanning [-1, 1]."""

    bin_counts: np.ndarray
    mask_pixel_count: int

    def __post_init__(self):
        if self.bin_counts.sum() != self.mask_pixel_count:
            raise ValueError("bin counts do not sum to the mask pixel count")
        if (self.bin_counts < 0).any():
            raise ValueError("negative bin count")

    @property
    def bins(self) -> int:
        return len(self.bin_counts)


@dataclass
class MatchedComposite:
    """Source image with masked regions color-matched to the reference."""

    pixels: np.ndarray  # (3, H, W) float32 in [-1, 1]
    matched_regions: tuple[str, ...]


def bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    """Bin index in [0, bins) for values in [-1, 1]; uniform bin edges.

    Computed in float64 so float32 inputs near a bin edge land in the right bin.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.floor((values + 1.0) * 0.5 * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def bin_centers(bins: int) -> np.ndarray:
    return -1.0 + (np.arange(bins) + 0.5) * (2.0 / bins)


def channel_histogram(image: np.ndarray, mask: np.ndarray, channel: int, bins: int = DEFAULT_BINS) -> ChannelHistogram:
    """Histogram of one channel's pixels under ``mask``.

    The mask must be nonempty; callers check before calling.
    """
    mask = mask.astype(bool)
    if not mask.any():
        raise ValueError("channel_histogram: empty mask")
    values = image[channel][mask]
    counts = np.bincount(bin_index(values, bins), minlength=bins)
    return ChannelHistogram(bin_counts=counts, mask_pixel_count=int(values.size))


def match_region(
    source_image: np.ndarray,
    source_mask: np.ndarray,
    reference_image: np.ndarray,
    reference_mask: np.ndarray,
    bins: int = DEFAULT_BINS,
) -> np.ndarray:
    """CDF-match the source region to the reference region, per channel.

    Each masked source pixel is ranked within its region (value ties broken by
    pixel scan order) and mapped to the reference bin whose cumulative count
    reaches the same quantile. Returns matched values of shape (3, n) aligned
    with ``np.nonzero(source_mask)`` scan order.
    """
    source_mask = source_mask.astype(bool)
    reference_mask = reference_mask.astype(bool)
    if not source_mask.any() or not reference_mask.any():
        raise ValueError("match_region: empty mask")
    centers = bin_centers(bins)
    n = int(source_mask.sum())
    matched = np.empty((3, n), dtype=np.float32)
    for c in range(3):
        src_vals = source_image[c][source_mask]
        ref_hist = channel_histogram(reference_image, reference_mask, c, bins)
        ref_cdf = np.cumsum(ref_hist.bin_counts)
        m = ref_hist.mask_pixel_count

        order = np.argsort(src_vals, kind="stable")
        ranks = np.empty(n, dtype=np.int64)
        ranks[order] = np.arange(n)
        quantile_counts = (ranks + 0.5) / n * m
        # bin of the reference order statistic at the midpoint quantile
        # (side="right" keeps integer quantile positions on the floor element)
        target_bins = np.searchsorted(ref_cdf, quantile_counts, side="right")
        matched[c] = centers[np.clip(target_bins, 0, bins - 1)]
    return matched


def makeup_target(
    source_image: np.ndarray,
    source_masks: RegionMaskSet,
    reference_image: np.ndarray,
    reference_masks: RegionMaskSet,
    bins: int = DEFAULT_BINS,
) -> MatchedComposite:
    """Histogram-match all three regions; unmasked pixels are copied bit-exactly."""
    out = np.array(source_image, dtype=np.float32, copy=True)
    for name in REGION_NAMES:
        src_mask = source_masks.region(name)
        ref_mask = reference_masks.region(name)
        matched = match_region(source_image, src_mask, reference_image, ref_mask, bins)
        rows, cols = np.nonzero(src_mask)
        out[:, rows, cols] = matched
    return MatchedComposite(pixels=out, matched_regions=REGION_NAMES)
