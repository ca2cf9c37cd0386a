"""Shared helpers: box builders, brute-force oracles, tiny corpora."""

from __future__ import annotations

import numpy as np
import pytest

from detfuse.core import BoundingBox, Detection, GroundTruthObject


def box(x0, y0, x1, y1) -> BoundingBox:
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def det(image="img", cls=0, detector=0, b=None, raw=1.0, cal=None) -> Detection:
    return Detection(image, cls, detector, b or box(0, 0, 10, 10), raw, cal)


def gt(image="img", cls=0, b=None, difficult=False) -> GroundTruthObject:
    return GroundTruthObject(image, cls, b or box(0, 0, 10, 10), difficult)


def random_box(rng: np.random.Generator, lo=0.0, hi=100.0, min_side=1.0) -> BoundingBox:
    x0 = rng.uniform(lo, hi - min_side)
    y0 = rng.uniform(lo, hi - min_side)
    w = rng.uniform(min_side, hi - x0)
    h = rng.uniform(min_side, hi - y0)
    return BoundingBox(x0, y0, x0 + w, y0 + h)


def iou_oracle(a: BoundingBox, b: BoundingBox) -> float:
    """Area arithmetic written out independently of the library."""
    ix0, iy0 = max(a.x_min, b.x_min), max(a.y_min, b.y_min)
    ix1, iy1 = min(a.x_max, b.x_max), min(a.y_max, b.y_max)
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min)
    area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min)
    return inter / (area_a + area_b - inter)


def ap_oracle(flags: list[str], n_positive: int, protocol: str) -> float | None:
    """Direct precision/recall table enumeration, no envelope tricks.

    all-points: for each of the n_positive recall increments, the best
    precision at any rank reaching that recall. 11-point: mean of best
    precision at recall >= i/10 over i = 0..10.
    """
    if n_positive == 0:
        return None
    precisions, recalls = [], []
    tp = fp = 0
    for f in flags:
        if f == "tp":
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_positive)
    if protocol == "voc07-11point":
        total = 0.0
        for i in range(11):
            r = i / 10
            best = 0.0
            for p, rec in zip(precisions, recalls):
                if rec >= r and p > best:
                    best = p
            total += best
        return total / 11
    total = 0.0
    for k in range(1, n_positive + 1):
        r = k / n_positive
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / n_positive


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
