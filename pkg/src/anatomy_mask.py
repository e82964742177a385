"""
View-specific hard masking of segmentation logits.

Each standard view admits only a subset of the 15 segmentation classes.
Disallowed channels are pushed to a large negative finite sentinel so the
softmax stays NaN-free and their probability underflows to zero.
"""

import logging
from typing import Mapping, Optional, Union

import numpy as np

from src.errors import ConfigurationError
from src.models.sample import N_SEG_CLASSES, View
from src.tensorcore import Tensor, masked_fill_channels

logger = logging.getLogger(__name__)

MASK_SENTINEL = -1e9

VIEW_CATEGORIES: dict[View, frozenset] = {
    View.FOUR_CHAMBER: frozenset(range(0, 8)),
    View.LVOT: frozenset({0, 1, 2, 4, 8}),
    View.RVOT: frozenset({0, 6, 8, 9, 10, 11, 12}),
    View.THREE_VESSEL: frozenset({0, 9, 12, 13, 14}),
}

ViewTable = Mapping[View, frozenset]


def parse_mask_table(spec: str) -> dict[View, frozenset]:
    """
    Parse a flat mask-table override such as "4CH=0-7;LVOT=0,1,2,4,8".

    Views not named keep their embedded category set. An empty string
    returns the embedded table.

    Raises:
        ConfigurationError: on malformed entries or invalid categories
    """
    table = dict(VIEW_CATEGORIES)
    if not spec or not spec.strip():
        return table

    for chunk in spec.split(";"):
        if not chunk.strip():
            continue
        if "=" not in chunk:
            raise ConfigurationError(f"mask_table entry '{chunk}' lacks '='")
        name, values = chunk.split("=", 1)
        try:
            view = View(name.strip())
        except ValueError:
            raise ConfigurationError(f"mask_table: unknown view '{name.strip()}'")

        classes: set[int] = set()
        for part in values.split(","):
            part = part.strip()
            if not part:
                continue
            try:
                if "-" in part:
                    lo, hi = (int(x) for x in part.split("-", 1))
                    classes.update(range(lo, hi + 1))
                else:
                    classes.add(int(part))
            except ValueError:
                raise ConfigurationError(f"mask_table: bad category '{part}' for {view.value}")

        if 0 not in classes:
            raise ConfigurationError(f"mask_table: background 0 must be allowed for {view.value}")
        if max(classes) >= N_SEG_CLASSES or min(classes) < 0:
            raise ConfigurationError(f"mask_table: categories for {view.value} must be < {N_SEG_CLASSES}")
        table[view] = frozenset(classes)

    logger.info(f"Using mask table override: {spec}")
    return table


def allowed_categories(view: View, table: Optional[ViewTable] = None) -> frozenset:
    """Return the class set permitted for a view."""
    return (table or VIEW_CATEGORIES)[view]


def allowed_channels(view: View, table: Optional[ViewTable] = None) -> np.ndarray:
    """Boolean vector of length 15, True for permitted classes."""
    keep = np.zeros(N_SEG_CLASSES, dtype=bool)
    keep[sorted(allowed_categories(view, table))] = True
    return keep


def apply_hard_mask(
    seg_logits: Union[Tensor, np.ndarray],
    view: View,
    table: Optional[ViewTable] = None,
) -> Union[Tensor, np.ndarray]:
    """
    Set disallowed channels of 15 x H x W logits to the sentinel.

    Works on graph tensors (gradient to masked channels is zero) and on
    plain arrays. Allowed channels are returned bit-identical.
    """
    keep = allowed_channels(view, table)
    if isinstance(seg_logits, Tensor):
        return masked_fill_channels(seg_logits, keep, MASK_SENTINEL)
    arr = np.asarray(seg_logits)
    return np.where(keep.reshape((-1,) + (1,) * (arr.ndim - 1)), arr, np.asarray(MASK_SENTINEL, dtype=arr.dtype))


def count_illegal_pixels(mask: np.ndarray, view: View, table: Optional[ViewTable] = None) -> int:
    """Number of mask pixels whose class is not permitted for the view."""
    keep = allowed_channels(view, table)
    return int(np.count_nonzero(~keep[mask]))
