"""Per-detector, per-class sigmoid score calibration.

Raw scores from independently trained detectors live on incompatible
scales; fitting f(x) = 1 / (1 + exp(x*alpha + beta)) against smoothed
correct/incorrect targets maps them to comparable probabilities without
changing any within-detector ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

MAX_ITER = 200
REL_TOL = 1e-8


@dataclass(frozen=True)
class PlattParams:
    alpha: float
    beta: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise NumericError("calibration parameters must be finite")


def apply_platt(params: PlattParams, x: float) -> float:
    """Calibrated score 1 / (1 + exp(x*alpha + beta))."""
    z = x * params.alpha + params.beta
    with np.errstate(over="ignore"):
        return float(1.0 / (1.0 + np.exp(z)))


def smoothed_targets(labels: np.ndarray) -> np.ndarray:
    """Bayesian-prior-corrected targets: keeps separable fits finite."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    hi = (n_pos + 1.0) / (n_pos + 2.0)
    lo = 1.0 / (n_neg + 2.0)
    return np.where(labels, hi, lo)


def platt_loss_grad(
    alpha: float, beta: float, scores: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy between the sigmoid and targets, with its gradient."""
    z = scores * alpha + beta
    # log(p) = -log1p(exp(z)), log(1-p) = z - log1p(exp(z)), stable both tails
    log1pez = np.logaddexp(0.0, z)
    loss = float(np.sum(targets * log1pez - (1.0 - targets) * (z - log1pez)))
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + np.exp(z))
    d = targets - p  # d(loss)/dz
    return loss, np.array([float(np.dot(d, scores)), float(np.sum(d))])


def fit_platt(scores, labels) -> PlattParams:
    """Fit (alpha, beta) by damped Newton on the smoothed cross-entropy.

    Deterministic: full-batch, fixed damping schedule, relative tolerance
    1e-8, at most 200 iterations. Requires at least one positive and one
    negative label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be 1-d arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise DataError("non-finite score in calibration set")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("degenerate calibration set: needs both positive and negative labels")

    targets = smoothed_targets(labels)
    alpha = 0.0
    beta = float(np.log((n_neg + 1.0) / (n_pos + 1.0)))
    loss, grad = platt_loss_grad(alpha, beta, scores, targets)
    damping = 1e-8
    for _ in range(MAX_ITER):
        z = scores * alpha + beta
        with np.errstate(over="ignore"):
            p = 1.0 / (1.0 + np.exp(z))
        w = p * (1.0 - p)
        h_aa = float(np.dot(w, scores * scores))
        h_ab = float(np.dot(w, scores))
        h_bb = float(np.sum(w))
        step_alpha = step_beta = 0.0
        for _ in range(60):
            det = (h_aa + damping) * (h_bb + damping) - h_ab * h_ab
            if det <= 0.0:
                damping = max(damping * 10.0, 1e-12)
                continue
            step_alpha = -((h_bb + damping) * grad[0] - h_ab * grad[1]) / det
            step_beta = -((h_aa + damping) * grad[1] - h_ab * grad[0]) / det
            new_loss, new_grad = platt_loss_grad(
                alpha + step_alpha, beta + step_beta, scores, targets
            )
            if np.isfinite(new_loss) and new_loss <= loss:
                break
            damping = max(damping * 10.0, 1e-12)
        else:
            break
        alpha += step_alpha
        beta += step_beta
        improved = loss - new_loss
        loss, grad = new_loss, new_grad
        damping = max(damping * 0.1, 1e-12)
        if improved <= REL_TOL * max(abs(loss), 1.0):
            break
    return PlattParams(float(alpha), float(beta))


# --- calibration table ----------------------------------------------------

# float saturation guard so calibrated scores stay strictly inside (0,1)
_EPS = 1e-15


def clip_unit_open(p: float) -> float:
    return min(max(p, _EPS), 1.0 - _EPS)


class CalibrationTable:
    """(detector_name, class_name) -> PlattParams, with line-record IO."""

    def __init__(self) -> None:
        self._params: dict[tuple[str, str], PlattParams] = {}

    def set(self, detector: str, class_name: str, params: PlattParams) -> None:
        self._params[(detector, class_name)] = params

    def get(self, detector: str, class_name: str) -> PlattParams:
        try:
            return self._params[(detector, class_name)]
        except KeyError:
            raise DataError(
                f"missing calibration for detector {detector!r}, class {class_name!r}"
            ) from None

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._params

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for (det, cls), p in sorted(self._params.items()):
                fh.write(f"{det}\t{cls}\t{float(p.alpha)!r}\t{float(p.beta)!r}\n")

    @classmethod
    def load(cls, path: str) -> "CalibrationTable":
        table = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 fields")
                try:
                    params = PlattParams(float(parts[2]), float(parts[3]))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad parameter value") from None
                table.set(parts[0], parts[1], params)
        return table
