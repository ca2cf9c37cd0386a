"""Per-class linear ranking models.

Four L2-regularized learners over the objective

    min_theta  0.5 * ||theta||^2 + C * sum_i loss_i(theta)

with theta the weight vector augmented by a (regularized) bias
coordinate:

- hinge:            classification on labels binarized at overlap 0.5
- logistic:         log-loss on the same binarized labels
- squared-eps:      squared epsilon-insensitive regression on raw
                    overlap labels (eps = 0.1)
- pairwise-hinge:   hinge on score differences of label-ordered pairs

All solvers are deterministic and full-batch. The smooth losses use
damped Newton steps with Armijo backtracking. The nonsmooth hinge
family is solved by Newton continuation on a Huber-smoothed objective
(smoothing width shrinking from 1 to 1e-9) followed by exact-line-search
descent on the true objective; the reported trace is the best objective
seen so far, hence non-increasing. Multi-start runs agree to near
machine precision because every continuation stage has a unique
optimum. Features are standardized per dimension before optimization
and the statistics are stored with the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

HINGE = "hinge"
LOGISTIC = "logistic"
SQUARED_EPS = "squared-eps"
PAIRWISE_HINGE = "pairwise-hinge"
LOSS_TAGS = (HINGE, LOGISTIC, SQUARED_EPS, PAIRWISE_HINGE)

EPSILON_TUBE = 0.1
REL_TOL = 1e-6
MAX_ITER = 1000


@dataclass(frozen=True)
class PairPolicy:
    """How label-ordered pairs are drawn for the pairwise learner."""

    delta: float = 0.1        # required label gap y_a > y_b + delta
    max_pairs: int = 100_000  # per-class cap
    seed: int = 0


@dataclass
class TrainingSet:
    """Feature rows with real overlap labels in [0, 1]."""

    features: np.ndarray
    overlaps: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.overlaps = np.asarray(self.overlaps, dtype=np.float64)
        if self.features.ndim != 2 or self.overlaps.ndim != 1:
            raise DataError("features must be 2-d, overlaps 1-d")
        if self.features.shape[0] != self.overlaps.shape[0]:
            raise DataError("row count differs between features and overlaps")
        if self.overlaps.size and (self.overlaps.min() < 0.0 or self.overlaps.max() > 1.0):
            raise DataError("overlap labels must lie in [0, 1]")

    @property
    def binary_labels(self) -> np.ndarray:
        """VOC criterion: positive iff overlap > 0.5."""
        return np.where(self.overlaps > 0.5, 1.0, -1.0)


@dataclass
class RankerModel:
    class_id: int
    loss_tag: str
    weights: np.ndarray
    bias: float
    C: float
    mean: np.ndarray
    scale: np.ndarray
    final_objective: float = 0.0
    iterations: int = 0

    def __post_init__(self) -> None:
        if self.loss_tag not in LOSS_TAGS:
            raise DataError(f"unknown loss tag {self.loss_tag!r}")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise NumericError("model weights must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


def identity_model(
    class_id: int, loss_tag: str, weights, bias: float = 0.0, C: float = 1.0
) -> RankerModel:
    """Model with no standardization; useful for hand-built weightings."""
    w = np.asarray(weights, dtype=np.float64)
    return RankerModel(class_id, loss_tag, w, bias, C, np.zeros(w.size), np.ones(w.size))


def score(model: RankerModel, x: np.ndarray) -> float:
    """w . standardize(x) + bias."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise DataError(f"feature dimension {x.shape} does not match model dim {model.dim}")
    return float(model.weights @ ((x - model.mean) / model.scale) + model.bias)


def score_matrix(model: RankerModel, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != model.dim:
        raise DataError(f"feature dimension {rows.shape[1]} does not match model dim {model.dim}")
    return ((rows - model.mean) / model.scale) @ model.weights + model.bias


# --- objectives -----------------------------------------------------------
#
# All objectives operate on the augmented parameter vector theta whose
# last coordinate is the bias.


class _MarginObjective:
    """0.5||theta||^2 + C sum max(0, 1 - z_i . theta): hinge and pairwise.

    Rows z already absorb the label sign (z = y * x_aug for hinge,
    z = x_a - x_b for pairs).
    """

    smooth = False

    def __init__(self, Z: np.ndarray, C: float) -> None:
        self.Z = Z
        self.C = C

    def value_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        slack = 1.0 - self.Z @ theta
        active = slack > 0.0
        f = 0.5 * float(theta @ theta) + self.C * float(slack[active].sum())
        g = theta - self.C * self.Z[active].sum(axis=0)
        return f, g

    def smoothed_value_grad(self, theta: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
        """Huberized hinge: quadratic on the band 0 < slack < mu."""
        slack = 1.0 - self.Z @ theta
        band = (slack > 0.0) & (slack < mu)
        out = slack >= mu
        f = 0.5 * float(theta @ theta) + self.C * (
            float((slack[out] - mu / 2.0).sum()) + float((slack[band] ** 2).sum()) / (2.0 * mu)
        )
        g = theta - self.C * self.Z[out].sum(axis=0)
        if band.any():
            g = g - (self.C / mu) * (self.Z[band].T @ slack[band])
        return f, g

    def smoothed_newton_dir(self, theta: np.ndarray, mu: float, g: np.ndarray) -> np.ndarray:
        slack = 1.0 - self.Z @ theta
        band = (slack > 0.0) & (slack < mu)
        H = np.eye(theta.size)
        if band.any():
            Zb = self.Z[band]
            H = H + (self.C / mu) * (Zb.T @ Zb)
        return -np.linalg.solve(H, g)

    def exact_linesearch(self, theta: np.ndarray, d: np.ndarray) -> float:
        """Minimize the convex piecewise-quadratic restriction t -> f(theta + t d)."""
        c = 1.0 - self.Z @ theta
        u = self.Z @ d
        a0 = float(theta @ d)
        q = float(d @ d)
        if q == 0.0:
            return 0.0
        active = (c > 0.0) | ((c == 0.0) & (u < 0.0))
        s = float(u[active].sum())
        # event times where a term enters or leaves the active set (t > 0)
        leave = (u > 0.0) & (c > 0.0)
        enter = (u < 0.0) & (c < 0.0)
        times = np.concatenate([c[leave] / u[leave], c[enter] / u[enter]])
        deltas = np.concatenate([-u[leave], u[enter]])
        order = np.argsort(times, kind="stable")
        times, deltas = times[order], deltas[order]
        t_prev = 0.0
        for ti, di in zip(times, deltas):
            if a0 + t_prev * q - self.C * s >= 0.0:
                return t_prev
            t_star = (self.C * s - a0) / q
            if t_star <= ti:
                return max(t_star, 0.0)
            t_prev = ti
            s += di
        if a0 + t_prev * q - self.C * s >= 0.0:
            return t_prev
        return max((self.C * s - a0) / q, 0.0)


class _LogisticObjective:
    """0.5||theta||^2 + C sum log(1 + exp(-z_i . theta))."""

    smooth = True

    def __init__(self, Z: np.ndarray, C: float) -> None:
        self.Z = Z
        self.C = C

    def value_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        m = self.Z @ theta
        f = 0.5 * float(theta @ theta) + self.C * float(np.logaddexp(0.0, -m).sum())
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(m))
        g = theta - self.C * (self.Z.T @ sig)
        return f, g

    def newton_dir(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        m = self.Z @ theta
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(m))
        w = sig * (1.0 - sig)
        H = np.eye(theta.size) + self.C * (self.Z.T * w) @ self.Z
        return -np.linalg.solve(H, g)


class _SquaredEpsObjective:
    """0.5||theta||^2 + C sum max(0, |X theta - y| - eps)^2."""

    smooth = True

    def __init__(self, X: np.ndarray, y: np.ndarray, C: float, eps: float = EPSILON_TUBE) -> None:
        self.X = X
        self.y = y
        self.C = C
        self.eps = eps

    def value_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        r = self.X @ theta - self.y
        excess = np.maximum(np.abs(r) - self.eps, 0.0)
        f = 0.5 * float(theta @ theta) + self.C * float((excess**2).sum())
        g = theta + 2.0 * self.C * (self.X.T @ (excess * np.sign(r)))
        return f, g

    def newton_dir(self, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        r = self.X @ theta - self.y
        outside = np.abs(r) > self.eps
        H = np.eye(theta.size) + 2.0 * self.C * (self.X[outside].T @ self.X[outside])
        return -np.linalg.solve(H, g)


def _armijo(value_grad, theta, f, g, d):
    slope = float(g @ d)
    if slope >= 0.0:
        return None
    t = 1.0
    for _ in range(50):
        cand = theta + t * d
        f_new, g_new = value_grad(cand)
        if f_new <= f + 1e-4 * t * slope:
            return cand, f_new, g_new
        t *= 0.5
    return None


def _minimize_smooth(obj, theta0: np.ndarray, tol: float = REL_TOL, max_iter: int = MAX_ITER):
    theta = np.asarray(theta0, dtype=np.float64).copy()
    f, g = obj.value_grad(theta)
    trace = [f]
    for _ in range(max_iter):
        f_prev = f
        step = _armijo(obj.value_grad, theta, f, g, obj.newton_dir(theta, g))
        if step is not None:
            theta, f, g = step
        trace.append(f)
        if f_prev - f <= tol * max(abs(f_prev), 1.0):
            break
    return theta, trace


_MU_STAGES = tuple(10.0 ** (-k) for k in range(10))


def _minimize_margin(obj: _MarginObjective, theta0: np.ndarray, max_iter: int = MAX_ITER):
    """Continuation on the Huberized objective, then exact-line-search polish.

    The trace records the best true objective seen so far, which is what
    the returned parameters achieve; it is non-increasing by construction.
    """
    theta = np.asarray(theta0, dtype=np.float64).copy()
    best_f, _ = obj.value_grad(theta)
    best_theta = theta.copy()
    trace = [best_f]
    total = 0
    for mu in _MU_STAGES:
        f_mu, g_mu = obj.smoothed_value_grad(theta, mu)
        gtol = max(1e-10, 1e-3 * mu)
        while total < max_iter:
            if float(np.linalg.norm(g_mu)) <= gtol * max(1.0, float(np.linalg.norm(theta))):
                break
            step = _armijo(
                lambda t: obj.smoothed_value_grad(t, mu),
                theta, f_mu, g_mu, obj.smoothed_newton_dir(theta, mu, g_mu),
            )
            if step is None:
                break
            theta, f_mu, g_mu = step
            total += 1
            f_true, _ = obj.value_grad(theta)
            if f_true < best_f:
                best_f, best_theta = f_true, theta.copy()
            trace.append(best_f)
        if total >= max_iter:
            break
    theta = best_theta.copy()
    f, g = obj.value_grad(theta)
    stall = 0
    while total < max_iter:
        f_prev = f
        t = obj.exact_linesearch(theta, -g)
        if t > 0.0:
            cand = theta - t * g
            f_new, g_new = obj.value_grad(cand)
            if f_new < f:
                theta, f, g = cand, f_new, g_new
        total += 1
        if f < best_f:
            best_f, best_theta = f, theta.copy()
        trace.append(best_f)
        if f_prev - f <= 1e-12 * max(abs(f_prev), 1.0):
            stall += 1
            if stall >= 2:
                break
        else:
            stall = 0
    return best_theta, trace


def _minimize(obj, theta0: np.ndarray, max_iter: int = MAX_ITER):
    if obj.smooth:
        return _minimize_smooth(obj, theta0, max_iter=max_iter)
    return _minimize_margin(obj, theta0, max_iter=max_iter)


# --- training -------------------------------------------------------------


@dataclass
class _Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "_Standardizer":
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale < 1e-12] = 1.0
        return cls(mean, scale)

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _check_features(X: np.ndarray) -> None:
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values in training set")


def train_pointwise(
    ts: TrainingSet,
    loss_tag: str,
    C: float = 1.0,
    class_id: int = 0,
    init: np.ndarray | None = None,
) -> RankerModel:
    """Fit one pointwise model (hinge, logistic or squared-eps)."""
    if loss_tag not in (HINGE, LOGISTIC, SQUARED_EPS):
        raise DataError(f"not a pointwise loss: {loss_tag!r}")
    if C <= 0.0:
        raise DataError("C must be positive")
    _check_features(ts.features)
    if ts.features.shape[0] == 0:
        raise DataError("empty training set")

    std = _Standardizer.fit(ts.features)
    Xa = _augment(std.apply(ts.features))
    if loss_tag == SQUARED_EPS:
        obj = _SquaredEpsObjective(Xa, ts.overlaps, C)
    else:
        y = ts.binary_labels
        if np.all(y > 0) or np.all(y < 0):
            raise DataError("degenerate training set: a classification loss needs both labels")
        Z = y[:, None] * Xa
        obj = _LogisticObjective(Z, C) if loss_tag == LOGISTIC else _MarginObjective(Z, C)

    theta0 = np.zeros(Xa.shape[1]) if init is None else np.asarray(init, dtype=np.float64)
    theta, trace = _minimize(obj, theta0)
    return RankerModel(
        class_id, loss_tag, theta[:-1], float(theta[-1]), C,
        std.mean, std.scale, trace[-1], len(trace) - 1,
    )


def generate_pairs(overlaps: np.ndarray, policy: PairPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic uniform sample of index pairs (a, b) with y_a > y_b + delta.

    The full pair set is indexed through the label-sorted staircase, so
    sampling never materializes all pairs.
    """
    y = np.asarray(overlaps, dtype=np.float64)
    order = np.argsort(y, kind="stable")
    ys = y[order]
    counts = np.searchsorted(ys, ys - policy.delta, side="left")
    cum = np.cumsum(counts)
    total = int(cum[-1]) if cum.size else 0
    if total == 0:
        raise DataError("pair policy yields zero training pairs")
    rng = np.random.default_rng(policy.seed)
    if total <= policy.max_pairs:
        flat = np.arange(total, dtype=np.int64)
    elif total <= 8_000_000:
        flat = np.sort(rng.choice(total, size=policy.max_pairs, replace=False))
    else:
        draws = np.unique(rng.integers(0, total, size=policy.max_pairs * 2))
        while draws.size < policy.max_pairs:
            more = rng.integers(0, total, size=policy.max_pairs)
            draws = np.unique(np.concatenate([draws, more]))
        flat = draws[: policy.max_pairs]
    hi_sorted = np.searchsorted(cum, flat, side="right")
    base = np.where(hi_sorted > 0, cum[hi_sorted - 1], 0)
    lo_sorted = flat - base
    return order[hi_sorted], order[lo_sorted]


def train_pairwise(
    ts: TrainingSet,
    C: float = 1.0,
    pair_policy: PairPolicy | None = None,
    class_id: int = 0,
    init: np.ndarray | None = None,
) -> RankerModel:
    """Fit a pairwise ranking model: hinge on score differences."""
    if C <= 0.0:
        raise DataError("C must be positive")
    _check_features(ts.features)
    policy = pair_policy or PairPolicy()
    hi, lo = generate_pairs(ts.overlaps, policy)

    std = _Standardizer.fit(ts.features)
    Xa = _augment(std.apply(ts.features))
    Z = Xa[hi] - Xa[lo]  # bias column cancels
    obj = _MarginObjective(Z, C)
    theta0 = np.zeros(Xa.shape[1]) if init is None else np.asarray(init, dtype=np.float64)
    theta, trace = _minimize(obj, theta0)
    return RankerModel(
        class_id, PAIRWISE_HINGE, theta[:-1], float(theta[-1]), C,
        std.mean, std.scale, trace[-1], len(trace) - 1,
    )


def _objective_for(loss_tag: str, X: np.ndarray, y: np.ndarray, C: float):
    """Objective on raw (unstandardized) features; used by gradient checks."""
    Xa = _augment(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if loss_tag == HINGE:
        return _MarginObjective(y[:, None] * Xa, C)
    if loss_tag == LOGISTIC:
        return _LogisticObjective(y[:, None] * Xa, C)
    if loss_tag == SQUARED_EPS:
        return _SquaredEpsObjective(Xa, y, C)
    if loss_tag == PAIRWISE_HINGE:
        hi, lo = generate_pairs(y, PairPolicy(max_pairs=10_000_000))
        return _MarginObjective(Xa[hi] - Xa[lo], C)
    raise DataError(f"unknown loss tag {loss_tag!r}")


def gradient_check(
    loss_tag: str, theta: np.ndarray, batch, C: float = 1.0, h: float = 1e-5
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    ``theta`` is the augmented parameter vector (bias last); ``batch`` is
    (features, labels). Meaningful only at points whose margins sit away
    from the hinge kinks.
    """
    X, y = batch
    obj = _objective_for(loss_tag, X, y, C)
    theta = np.asarray(theta, dtype=np.float64)
    _, g = obj.value_grad(theta)
    worst = 0.0
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        f_plus, _ = obj.value_grad(theta + e)
        f_minus, _ = obj.value_grad(theta - e)
        fd = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(g[k]), abs(fd), 1e-8)
        worst = max(worst, abs(g[k] - fd) / denom)
    return worst


# --- model persistence ----------------------------------------------------


def _fmt_vector(v: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in v.tolist())


def save_model(path: str, model: RankerModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"loss = {model.loss_tag}\n")
        fh.write(f"C = {float(model.C)!r}\n")
        fh.write(f"dim = {model.dim}\n")
        fh.write(f"class_id = {model.class_id}\n")
        fh.write(f"bias = {float(model.bias)!r}\n")
        fh.write(f"objective = {float(model.final_objective)!r}\n")
        fh.write(f"iterations = {model.iterations}\n")
        fh.write(f"mean = {_fmt_vector(model.mean)}\n")
        fh.write(f"scale = {_fmt_vector(model.scale)}\n")
        fh.write(f"weights = {_fmt_vector(model.weights)}\n")


def load_model(path: str) -> RankerModel:
    fields: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if " = " not in line:
                raise DataError(f"{path}: malformed model line {line!r}")
            key, value = line.split(" = ", 1)
            fields[key] = value
    try:
        dim = int(fields["dim"])
        model = RankerModel(
            class_id=int(fields["class_id"]),
            loss_tag=fields["loss"],
            weights=np.array([float(t) for t in fields["weights"].split()]),
            bias=float(fields["bias"]),
            C=float(fields["C"]),
            mean=np.array([float(t) for t in fields["mean"].split()]),
            scale=np.array([float(t) for t in fields["scale"].split()]),
            final_objective=float(fields["objective"]),
            iterations=int(fields["iterations"]),
        )
    except KeyError as e:
        raise DataError(f"{path}: missing model field {e}") from None
    if model.dim != dim or model.mean.size != dim or model.scale.size != dim:
        raise DataError(f"{path}: dimension mismatch in model file")
    return model
