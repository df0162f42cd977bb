"""Camera pose container and the evaluation metrics built on it.

Orientation error is the quaternion geodesic angle with an absolute-value
inner product, so antipodal quaternions (the double cover) compare equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError

UNIT_QUAT_TOL = 1e-9


@dataclass
class Pose:
    """Position ``t`` (3-vector) and orientation ``r`` (wxyz quaternion)."""

    t: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        if self.t.shape != (3,) or self.r.shape != (4,):
            raise ContractError(
                f"pose expects t (3,) and r (4,), got {self.t.shape}, {self.r.shape}"
            )

    def assert_unit(self):
        n = float(np.linalg.norm(self.r))
        if abs(n - 1.0) > UNIT_QUAT_TOL:
            raise ContractError(f"quaternion norm {n} is not unit within {UNIT_QUAT_TOL}")


def position_error(t, t_hat) -> float:
    """Euclidean distance between true and predicted positions."""
    t = np.asarray(t, dtype=np.float64)
    t_hat = np.asarray(t_hat, dtype=np.float64)
    d = t - t_hat
    return float(np.sqrt(np.dot(d, d)))


def orientation_error_deg(r, r_hat) -> float:
    """Geodesic angle in degrees between a unit quaternion and a prediction.

    The prediction is normalized first; the inner product is taken in
    absolute value so q and -q are the same rotation.
    """
    r = np.asarray(r, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    n = float(np.linalg.norm(r_hat))
    if n == 0.0:
        raise DomainError("orientation_error_deg: predicted quaternion has zero norm")
    dot = abs(float(np.dot(r, r_hat / n)))
    # clamp absorbs rounding outside [-1, 1]
    angle = 2.0 * np.arccos(min(1.0, dot))
    return float(np.degrees(angle))


def median(values) -> float:
    values = list(values)
    if not values:
        raise ContractError("median of an empty list is undefined")
    return float(np.median(np.asarray(values, dtype=np.float64)))


def recall_at(errors, thr_pos: float, thr_ang: float) -> float:
    """Fraction of (pos_err, ang_err) pairs within both thresholds."""
    errors = list(errors)
    if not errors:
        raise ContractError("recall over an empty error list is undefined")
    if thr_pos <= 0 or thr_ang <= 0:
        raise ContractError(f"recall thresholds must be positive, got ({thr_pos}, {thr_ang})")
    hits = sum(1 for p, a in errors if p <= thr_pos and a <= thr_ang)
    return hits / len(errors)
