"""Image quality metrics: MSE, NCC, CNR and averaged profile lines.

Standard deviations are population (ddof=0) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _pair(x1, x2):
    a = np.asarray(getattr(x1, "values", x1), dtype=float)
    b = np.asarray(getattr(x2, "values", x2), dtype=float)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValidationError("empty images")
    return a, b


def mse(x1, x2):
    a, b = _pair(x1, x2)
    return float(np.mean((a - b) ** 2))


def ncc(x1, x2):
    a, b = _pair(x1, x2)
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.mean(da * da))
    sb = np.sqrt(np.mean(db * db))
    if sa == 0 or sb == 0:
        raise ValidationError("NCC undefined: an image has zero variance")
    return float(np.clip(np.mean(da * db) / (sa * sb), -1.0, 1.0))


@dataclass(frozen=True)
class RoiSpec:
    """ROI and background rectangles as (row, col, height, width)."""

    roi: tuple
    background: tuple

    def __post_init__(self):
        for r in (self.roi, self.background):
            if len(r) != 4 or r[2] < 1 or r[3] < 1 or r[0] < 0 or r[1] < 0:
                raise ValidationError(f"bad rectangle {r}: need (row, col, height>=1, width>=1)")
        (r0, c0, h0, w0), (r1, c1, h1, w1) = self.roi, self.background
        if r0 < r1 + h1 and r1 < r0 + h0 and c0 < c1 + w1 and c1 < c0 + w0:
            raise ValidationError("ROI and background rectangles overlap")

    @classmethod
    def centered(cls, roi_center, background_center, size=14):
        """Square ``size`` x ``size`` rectangles around the given (row, col) centres."""
        def box(c):
            return (int(c[0]) - size // 2, int(c[1]) - size // 2, size, size)
        return cls(box(roi_center), box(background_center))

    def check(self, shape):
        for r in (self.roi, self.background):
            if r[0] + r[2] > shape[0] or r[1] + r[3] > shape[1]:
                raise ValidationError(f"rectangle {r} extends outside image of shape {shape}")

    @staticmethod
    def _cut(img, r):
        return img[r[0]:r[0] + r[2], r[1]:r[1] + r[3]]


def cnr(img, roi):
    """|mean(ROI) - mean(background)| / std(background)."""
    a = np.asarray(getattr(img, "values", img), dtype=float)
    if a.ndim != 2:
        raise ValidationError("CNR needs a 2-D image")
    roi.check(a.shape)
    r = RoiSpec._cut(a, roi.roi)
    b = RoiSpec._cut(a, roi.background)
    sd = float(np.std(b))
    if sd == 0:
        raise ValidationError("CNR undefined: background standard deviation is zero")
    return abs(float(r.mean()) - float(b.mean())) / sd


def profile_line(img, rows, cols=None):
    """Column-wise mean over the row band ``rows = (start, stop)``."""
    a = np.asarray(getattr(img, "values", img), dtype=float)
    if a.ndim != 2:
        raise ValidationError("profile needs a 2-D image")
    r0, r1 = rows
    c0, c1 = (0, a.shape[1]) if cols is None else cols
    if not (0 <= r0 < r1 <= a.shape[0] and 0 <= c0 < c1 <= a.shape[1]):
        raise ValidationError(f"profile range rows={rows} cols={cols} empty or outside {a.shape}")
    return a[r0:r1, c0:c1].mean(axis=0)
