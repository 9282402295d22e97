"""Selection maps: composing the two explainer heads and deriving masks.

A selection map scores every (channel, pixel) entry of an image in [0, 1]
and is rank-1 by construction: a per-channel vector times a shared spatial
map.  The factored form is authoritative; ``values`` is always the exact
outer product of the stored factors.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class SelectionMap:
    values: np.ndarray          # (C, H, W) in [0, 1]
    spatial_factor: np.ndarray  # (1, H, W) in [0, 1]
    channel_factor: np.ndarray  # (C,) in [0, 1]


@dataclass(frozen=True)
class TopKMask:
    values: np.ndarray  # binary (C, H, W), exactly k ones
    k: int


def _check_unit_range(arr, what, op):
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError("explainer", op, f"{what} values outside [0, 1]")


def compose_selection(spatial_factor, channel_factor):
    """Outer product of a (1, H, W) spatial map and a (C,) channel vector."""
    s = np.asarray(spatial_factor)
    c = np.asarray(channel_factor)
    if s.ndim != 3 or s.shape[0] != 1:
        raise ValidationError("explainer", "compose_selection",
                              f"spatial factor must be (1, H, W), got {s.shape}")
    if c.ndim != 1:
        raise ValidationError("explainer", "compose_selection",
                              f"channel factor must be 1-D, got {c.shape}")
    _check_unit_range(s, "spatial factor", "compose_selection")
    _check_unit_range(c, "channel factor", "compose_selection")
    values = c[:, None, None] * s
    return SelectionMap(values=values, spatial_factor=s, channel_factor=c)


def simplify_input(image, selection):
    """Element-wise product of the image with its selection map."""
    x = np.asarray(image)
    theta = selection.values if isinstance(selection, SelectionMap) else np.asarray(selection)
    if x.shape != theta.shape:
        raise ValidationError("explainer", "simplify_input",
                              f"image {x.shape} vs selection {theta.shape}")
    return theta * x


def topk_mask(selection, k):
    """Binary mask of the k largest selection entries.

    Ties break deterministically toward the lower flat index (channel-major,
    then row, then column).
    """
    theta = selection.values if isinstance(selection, SelectionMap) else np.asarray(selection)
    flat = theta.reshape(-1)
    if not 1 <= k <= flat.size:
        raise ValidationError("explainer", "topk_mask",
                              f"k must be in 1..{flat.size}, got {k}")
    order = np.argsort(-flat, kind="stable")  # stable: equal values keep flat order
    mask = np.zeros(flat.size, dtype=np.uint8)
    mask[order[:k]] = 1
    return TopKMask(values=mask.reshape(theta.shape), k=int(k))
