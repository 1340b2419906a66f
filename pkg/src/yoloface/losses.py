"""Wing loss and companion regression losses, with analytic gradients.

The wing loss is logarithmic inside |x| < w (amplifying small-error
gradients) and linear outside; C = w - w*ln(1 + w/e) splices the branches
continuously. The branch condition is read symmetrically in |x|, matching
the even shape of the published curves.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class WingParams:
    """Switch point ``w`` and curvature limiter ``e``; ``C`` is derived."""
    w: float = 10.0
    e: float = 2.0

    def __post_init__(self):
        if self.w <= 0 or self.e <= 0:
            raise ConfigError(f"wing parameters must be positive, got w={self.w} e={self.e}")

    @property
    def C(self):
        return self.w - self.w * math.log1p(self.w / self.e)


def wing(x, p=WingParams()):
    """Piecewise wing loss value at ``x``."""
    ax = abs(x)
    if ax < p.w:
        return p.w * math.log1p(ax / p.e)
    return ax - p.C


def wing_grad(x, p=WingParams()):
    """Analytic derivative of :func:`wing`; defined as 0 at x = 0."""
    if x == 0:
        return 0.0
    s = 1.0 if x > 0 else -1.0
    ax = abs(x)
    if ax < p.w:
        return s * p.w / (p.e + ax)
    return s


def l2(x):
    return x * x


def l2_grad(x):
    return 2.0 * x


def l1(x):
    return abs(x)


def l1_grad(x):
    if x == 0:
        return 0.0
    return 1.0 if x > 0 else -1.0


def smooth_l1(x):
    """Quadratic below |x| = 1 (value x^2/2), linear above (|x| - 1/2)."""
    ax = abs(x)
    if ax < 1.0:
        return 0.5 * ax * ax
    return ax - 0.5


def smooth_l1_grad(x):
    if abs(x) < 1.0:
        return x
    return 1.0 if x > 0 else -1.0


@dataclass
class LandmarkVector:
    """Five (x, y) landmark coordinates with per-coordinate validity."""
    values: np.ndarray                    # 10 floats
    target: np.ndarray                    # 10 floats
    valid: np.ndarray = None              # 10 bools; default all valid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.values.shape != (10,) or self.target.shape != (10,):
            raise ConfigError("landmark vectors carry exactly 10 coordinates")
        if self.valid is None:
            self.valid = np.ones(10, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
            if self.valid.shape != (10,):
                raise ConfigError("validity mask carries exactly 10 flags")


def landmark_loss(v, p=WingParams(), anchor_size=None):
    """Sum of wing losses over valid coordinates (0 if none valid).

    ``anchor_size`` optionally holds (aw, ah); differences are then taken in
    anchor-normalized units (x / aw, y / ah) to match the head's decode
    convention. Default is raw units.
    """
    diffs = v.values - v.target
    if anchor_size is not None:
        aw, ah = anchor_size
        diffs = diffs / np.array([aw, ah] * 5, dtype=np.float64)
    return float(sum(wing(float(d), p) for d, ok in zip(diffs, v.valid) if ok))


def landmark_loss_grad(v, p=WingParams(), anchor_size=None):
    """Gradient of :func:`landmark_loss` w.r.t. ``v.values`` (10 floats)."""
    diffs = v.values - v.target
    scale = np.ones(10)
    if anchor_size is not None:
        aw, ah = anchor_size
        scale = 1.0 / np.array([aw, ah] * 5, dtype=np.float64)
        diffs = diffs * scale
    g = np.array([wing_grad(float(d), p) for d in diffs]) * scale
    g[~v.valid] = 0.0
    return g


@dataclass(frozen=True)
class TotalLossSpec:
    """Detection loss (opaque, externally supplied) plus weighted landmark loss."""
    loss_O: float
    loss_L: float
    lambda_L: float = 0.5

    def __post_init__(self):
        for name in ("loss_O", "loss_L", "lambda_L"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {val}")


def total_loss(t):
    """loss_O + lambda_L * loss_L."""
    return t.loss_O + t.lambda_L * t.loss_L


def toy_fit(initial, target, p=WingParams(), lr=0.1, steps=500, valid=None):
    """Gradient-descend landmark coordinates onto a target.

    ``lr`` caps the step size; each step backtracks (halving) until the
    loss does not increase, since the boosted near-zero wing gradient
    (up to w/e) would otherwise oscillate around the optimum. Returns
    (loss trajectory, final coordinates). Raises if the loss diverges
    past 1e6.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    coords = np.asarray(initial, dtype=np.float64).reshape(-1).copy()
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    losses = []
    for _ in range(steps):
        v = LandmarkVector(coords, target, valid)
        loss = landmark_loss(v, p)
        if loss > 1e6:
            raise ArithmeticError(f"toy_fit diverged: loss {loss:.3e}")
        losses.append(loss)
        g = landmark_loss_grad(v, p)
        t = lr
        trial = coords - t * g
        for _ in range(30):
            if landmark_loss(LandmarkVector(trial, target, valid), p) <= loss:
                break
            t /= 2.0
            trial = coords - t * g
        coords = trial
    return losses, coords
