from typing import Optional

import numpy as np


def format_threshold(threshold: float) -> str:
    """
    Compact, filename-safe rendering of a threshold.
    1e-05 -> '1e-05', 0.001 -> '0.001', 2.5e-06 -> '2.5e-06'
    """
    return f"{threshold:g}"


def controller_label(kind: str, threshold: Optional[float] = None, patience: Optional[int] = None) -> str:
    """
    Stable label for a controller configuration.

    Example:
    ('never') -> 'never'
    ('threshold', 1e-5) -> 'threshold-T1e-05'
    ('plateau', None, 15) -> 'plateau-P15'
    ('hybrid', 1e-5, 15) -> 'hybrid-T1e-05-P15'
    """
    parts = [kind]
    if threshold is not None:
        parts.append(f"T{format_threshold(threshold)}")
    if patience is not None:
        parts.append(f"P{patience}")
    return "-".join(parts)


def record_id(label: str, sample_index: int) -> str:
    return f"{label}_s{sample_index:03d}"


def clamp_unit(image) -> np.ndarray:
    """Copy of an image with every value clamped to [0, 1]."""
    return np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)


def largest_odd_window(height: int, width: int, cap: int = 11) -> int:
    """Largest odd window side that fits an image and does not exceed cap."""
    size = min(cap, height, width)
    if size % 2 == 0:
        size -= 1
    return max(size, 1)
