import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)

AXIS_TOLERANCE = 1e-9

Vector3 = Tuple[float, float, float]


class InvalidAxis(ValueError):
    """Raised when a rotation axis is not a unit vector"""


class ZeroWindow(RuntimeError):
    """Raised when a sampling window has no clicks in one of the detector pairs"""

    def __init__(self, counts: 'ClickCounts'):
        super().__init__(
            f"Unusable feedback sample: H+V={counts.i_h + counts.i_v}, Q+R={counts.i_q + counts.i_r}"
        )
        self.counts = counts


@dataclass(frozen=True)
class StokesVector:
    """Point on (or inside) the Poincare sphere"""

    s1: float
    s2: float
    s3: float

    @classmethod
    def from_array(cls, values) -> 'StokesVector':
        return cls(float(values[0]), float(values[1]), float(values[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.s1, self.s2, self.s3], dtype=float)

    def norm(self) -> float:
        return math.sqrt(self.s1 * self.s1 + self.s2 * self.s2 + self.s3 * self.s3)

    @property
    def azimuth_2theta(self) -> float:
        """Double azimuth angle 2θ (longitude on the sphere)"""
        return math.atan2(self.s2, self.s1)

    @property
    def ellipticity_2eps(self) -> float:
        """Double ellipticity angle 2ε (latitude on the sphere)"""
        return math.asin(max(-1.0, min(1.0, self.s3 / (self.norm() or 1.0))))

    def angle_to(self, other: 'StokesVector') -> float:
        """Great-circle angle between two states, in radians"""
        cosine = float(np.dot(self.as_array(), other.as_array())) / ((self.norm() * other.norm()) or 1.0)
        return math.acos(max(-1.0, min(1.0, cosine)))


H = StokesVector(1.0, 0.0, 0.0)
V = StokesVector(-1.0, 0.0, 0.0)
Q = StokesVector(0.0, 1.0, 0.0)
R = StokesVector(0.0, -1.0, 0.0)

# Rotation axes: X2 stresses along 0° (HV axis), X1 along 45° (QR axis)
S1_AXIS: Vector3 = (1.0, 0.0, 0.0)
S2_AXIS: Vector3 = (0.0, 1.0, 0.0)
S3_AXIS: Vector3 = (0.0, 0.0, 1.0)
HV_AXIS = S1_AXIS
QR_AXIS = S2_AXIS


@dataclass(frozen=True)
class PoincareRotation:
    """Proper rotation of the sphere, stored as axis and angle (right-handed)"""

    axis: Vector3 = S1_AXIS
    angle: float = 0.0

    @classmethod
    def identity(cls) -> 'PoincareRotation':
        return cls(S1_AXIS, 0.0)

    @classmethod
    def from_quaternion(cls, quaternion) -> 'PoincareRotation':
        w, x, y, z = (float(value) for value in quaternion)
        norm = math.sqrt(w * w + x * x + y * y + z * z)
        w, x, y, z = w / norm, x / norm, y / norm, z / norm
        if w < 0.0:
            w, x, y, z = -w, -x, -y, -z
        sin_half = math.sqrt(x * x + y * y + z * z)
        if sin_half < 1e-15:
            return cls.identity()
        angle = 2.0 * math.atan2(sin_half, w)
        return cls((x / sin_half, y / sin_half, z / sin_half), angle)

    def validate(self) -> None:
        norm = math.sqrt(sum(component * component for component in self.axis))
        if abs(norm - 1.0) > AXIS_TOLERANCE:
            raise InvalidAxis(f"Rotation axis {self.axis} has norm {norm:.12f}, expected 1")

    def inverse(self) -> 'PoincareRotation':
        return PoincareRotation(self.axis, -self.angle)

    def quaternion(self) -> np.ndarray:
        half = 0.5 * self.angle
        sin_half = math.sin(half)
        return np.array([math.cos(half), self.axis[0] * sin_half,
                         self.axis[1] * sin_half, self.axis[2] * sin_half])

    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix (Rodrigues form)"""
        self.validate()
        kx, ky, kz = self.axis
        cross = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
        return np.eye(3) + math.sin(self.angle) * cross + (1.0 - math.cos(self.angle)) * (cross @ cross)


@dataclass(frozen=True)
class ClickCounts:
    """Clicks of the H, V, Q and R detectors accumulated over one sampling window"""

    i_h: int
    i_v: int
    i_q: int
    i_r: int
    window_pulses: int = 0

    def __post_init__(self):
        if min(self.i_h, self.i_v, self.i_q, self.i_r) < 0:
            raise ValueError(f"Click counts must be nonnegative: {self}")

    @property
    def hv_total(self) -> int:
        return self.i_h + self.i_v

    @property
    def qr_total(self) -> int:
        return self.i_q + self.i_r


@dataclass(frozen=True)
class EstimatedSOP:
    """Measured normalized Stokes parameters S1, S2 from one window"""

    s1_hat: float
    s2_hat: float
    window_pulses: int = 0


def stokes_from_angles(azimuth_2theta: float, ellipticity_2eps: float) -> StokesVector:
    """Pure state at double azimuth 2θ and double ellipticity 2ε"""
    return StokesVector(
        math.cos(ellipticity_2eps) * math.cos(azimuth_2theta),
        math.cos(ellipticity_2eps) * math.sin(azimuth_2theta),
        math.sin(ellipticity_2eps),
    )


def rotate(s: StokesVector, r: PoincareRotation) -> StokesVector:
    """Rotate a state about r.axis by r.angle (Rodrigues formula)"""
    r.validate()
    v = s.as_array()
    k = np.asarray(r.axis, dtype=float)
    cos_a = math.cos(r.angle)
    sin_a = math.sin(r.angle)
    rotated = v * cos_a + np.cross(k, v) * sin_a + k * float(np.dot(k, v)) * (1.0 - cos_a)
    return StokesVector.from_array(rotated)


def rotate_many(vectors: np.ndarray, r: PoincareRotation) -> np.ndarray:
    """Rotate an (n, 3) array of Stokes vectors"""
    return np.asarray(vectors, dtype=float) @ r.matrix().T


def compose(r1: PoincareRotation, r2: PoincareRotation) -> PoincareRotation:
    """Rotation equivalent to applying r1 first, then r2"""
    w1, x1, y1, z1 = r1.quaternion()
    w2, x2, y2, z2 = r2.quaternion()
    # Hamilton product q2 * q1
    product = (
        w2 * w1 - x2 * x1 - y2 * y1 - z2 * z1,
        w2 * x1 + x2 * w1 + y2 * z1 - z2 * y1,
        w2 * y1 - x2 * z1 + y2 * w1 + z2 * x1,
        w2 * z1 + x2 * y1 - y2 * x1 + z2 * w1,
    )
    return PoincareRotation.from_quaternion(product)


def estimate_stokes(c: ClickCounts) -> EstimatedSOP:
    """Normalized S1, S2 from H/V and Q/R click differences"""
    if c.hv_total <= 0 or c.qr_total <= 0:
        raise ZeroWindow(c)
    return EstimatedSOP(
        s1_hat=(c.i_h - c.i_v) / c.hv_total,
        s2_hat=(c.i_q - c.i_r) / c.qr_total,
        window_pulses=c.window_pulses,
    )


def random_unit_vector(rng: np.random.Generator) -> Vector3:
    """Direction drawn uniformly on the sphere"""
    while True:
        v = rng.standard_normal(3)
        norm = float(np.linalg.norm(v))
        if norm > 1e-12:
            return (float(v[0] / norm), float(v[1] / norm), float(v[2] / norm))


def random_rotation(rng: np.random.Generator) -> PoincareRotation:
    """Rotation drawn uniformly (Haar) from SO(3)"""
    q = rng.standard_normal(4)
    return PoincareRotation.from_quaternion(q / np.linalg.norm(q))
