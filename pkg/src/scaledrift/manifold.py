"""Rotation, rigid and similarity transforms in 3D.

Two layers live here.  The batched functions (``so3_exp``, ``sim3_log``,
``quat_to_matrix`` ...) work on plain arrays with arbitrary leading
dimensions and are what the optimizers call inside their residuals.  The
value types ``Rot3``, ``SE3``, ``Sim3`` and ``Sim3Tangent`` wrap single
elements for everything else.

Conventions
-----------
* Quaternions are stored ``(w, x, y, z)``, canonicalised to ``w >= 0``.
* The sim(3) tangent is the 7-vector ``(omega, sigma, nu)``: rotation
  coefficients, log-scale, translation coefficients.  The se(3) tangent is
  ``(omega, nu)``.
* Stored poses are world-from-camera, so a pose's translation is the
  camera centre.
* Manifold updates are left-multiplicative: ``X <- exp(delta) X``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-6
SMALL_SIGMA = 1e-6
# |w| below this means a rotation of pi, where log has no unique answer
PI_BRANCH_TOL = 1e-12


class BranchAmbiguityError(ValueError):
    """Raised when a logarithm is requested for a rotation of exactly pi."""


# ---------------------------------------------------------------------------
# batched primitives
# ---------------------------------------------------------------------------


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalise and flip to the ``w >= 0`` hemisphere.

    Quaternions already unit to within a few ulps are left bit-for-bit
    untouched so that serialisation round-trips stay exact.
    """
    q = np.array(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("quaternion must be finite and non-zero")
    q = np.where(np.abs(n - 1.0) > 1e-14, q / n, q)
    return np.where(q[..., :1] < 0, -q, q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method, batched)."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    choice = np.argmax(np.column_stack([tr, diag]), axis=1)
    q = np.empty((R.shape[0], 4))
    for c in range(4):
        m = choice == c
        if not np.any(m):
            continue
        r = R[m]
        if c == 0:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.column_stack(
                [0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                 (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s]
            )
        else:
            i = c - 1
            j, k = (i + 1) % 3, (i + 2) % 3
            s = 2.0 * np.sqrt(1.0 + r[:, i, i] - r[:, j, j] - r[:, k, k])
            qq = np.empty((r.shape[0], 4))
            qq[:, 0] = (r[:, k, j] - r[:, j, k]) / s
            qq[:, 1 + i] = 0.25 * s
            qq[:, 1 + j] = (r[:, j, i] + r[:, i, j]) / s
            qq[:, 1 + k] = (r[:, k, i] + r[:, i, k]) / s
            q[m] = qq
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q = np.where(q[:, :1] < 0, -q, q)
    return q.reshape(shape + (4,))


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # np.cross is slow on small batches
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:]
    w = q[..., :1]
    t = 2.0 * _cross(u, v)
    return v + w * t + _cross(u, t)


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rotation vector(s) to unit quaternion(s)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    half_sinc = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * safe) / safe)
    q = np.concatenate([np.cos(0.5 * theta), half_sinc * omega], axis=-1)
    return np.where(q[..., :1] < 0, -q, q)


def so3_log(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) to rotation vector(s) on the principal branch."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    if np.any(w < PI_BRANCH_TOL):
        raise BranchAmbiguityError("rotation angle is pi; logarithm is ambiguous")
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < 1e-8
    safe_n = np.where(small, 1.0, n)
    factor = np.where(
        small,
        2.0 / w * (1.0 - n**2 / (3.0 * w**2)),
        2.0 * np.arctan2(n, w) / safe_n,
    )
    return factor * v


def _series_small_theta(sigma: np.ndarray):
    """W coefficients at theta = 0 as exact functions of sigma."""
    a = np.empty_like(sigma)
    b = np.empty_like(sigma)
    mid = np.abs(sigma) < 1.0
    s = np.where(mid, sigma, 0.0)
    term = np.ones_like(s)
    sa = np.zeros_like(s)
    sb = np.zeros_like(s)
    for n in range(22):
        if n > 0:
            term = term * s / n
        sa = sa + term / (n + 2)
        sb = sb + term / (2.0 * (n + 3))
    big = np.where(mid, 1.0, sigma)
    e = np.exp(big)
    a_closed = (e * (big - 1.0) + 1.0) / big**2
    b_closed = (e * (big * big - 2.0 * big + 2.0) - 2.0) / (2.0 * big**3)
    a[...] = np.where(mid, sa, a_closed)
    b[...] = np.where(mid, sb, b_closed)
    return a, b


def sim3_W_coeffs(theta: np.ndarray, sigma: np.ndarray):
    """Coefficients ``(a, b, c)`` of ``W = c I + a K + b K^2`` with ``K = skew(omega)``.

    ``W`` is the integral of ``exp(sigma t) exp(t K)`` over ``t`` in [0, 1].
    """
    theta = np.asarray(theta, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    theta, sigma = np.broadcast_arrays(theta, sigma)
    small_s = np.abs(sigma) < SMALL_SIGMA
    safe_s = np.where(small_s, 1.0, sigma)
    c = np.where(small_s, 1.0 + sigma / 2.0 + sigma**2 / 6.0, np.expm1(safe_s) / safe_s)

    small_t = theta < SMALL_ANGLE
    a0, b0 = _series_small_theta(sigma)
    a_small = a0 - theta**2 / 24.0
    b_small = b0 - theta**2 / 120.0

    th = np.where(small_t, 1.0, theta)
    es = np.exp(sigma)
    denom = sigma**2 + th**2
    sin_t, cos_t = np.sin(th), np.cos(th)
    i_s = (es * (sigma * sin_t - th * cos_t) + th) / denom
    i_c = (es * (sigma * cos_t + th * sin_t) - sigma) / denom
    a_gen = i_s / th
    b_gen = (c - i_c) / th**2

    return np.where(small_t, a_small, a_gen), np.where(small_t, b_small, b_gen), c


def sim3_W(omega: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b, c = sim3_W_coeffs(theta, sigma)
    K = skew(omega)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return c[..., None, None] * eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def sim3_exp(xi: np.ndarray):
    """Batched exponential: ``xi (..., 7) -> (q (..., 4), t (..., 3), s (...))``."""
    xi = np.asarray(xi, dtype=float)
    omega, sigma, nu = xi[..., :3], xi[..., 3], xi[..., 4:]
    q = so3_exp(omega)
    W = sim3_W(omega, sigma)
    t = np.einsum("...ij,...j->...i", W, nu)
    return q, t, np.exp(sigma)


def sim3_log(q: np.ndarray, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    omega = so3_log(q)
    sigma = np.log(np.asarray(s, dtype=float))
    W = sim3_W(omega, sigma)
    nu = np.linalg.solve(W, np.asarray(t, dtype=float)[..., None])[..., 0]
    return np.concatenate([omega, sigma[..., None], nu], axis=-1)


def se3_exp(xi: np.ndarray):
    """Batched se(3) exponential: ``(omega, nu) -> (q, t)``."""
    xi = np.asarray(xi, dtype=float)
    full = np.concatenate([xi[..., :3], np.zeros(xi.shape[:-1] + (1,)), xi[..., 3:]], axis=-1)
    q, t, _ = sim3_exp(full)
    return q, t


def se3_log(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    xi = sim3_log(q, t, np.ones(np.shape(t)[:-1]))
    return np.concatenate([xi[..., :3], xi[..., 4:]], axis=-1)


def sim3_compose(qa, ta, sa, qb, tb, sb):
    sa = np.asarray(sa, dtype=float)
    q = quat_mul(qa, qb)
    t = sa[..., None] * quat_rotate(qa, tb) + ta
    return q, t, sa * sb


def sim3_inverse(q, t, s):
    s = np.asarray(s, dtype=float)
    qi = quat_conj(q)
    ti = -quat_rotate(qi, t) / s[..., None]
    return qi, ti, 1.0 / s


def sim3_act(q, t, s, p):
    s = np.asarray(s, dtype=float)
    return s[..., None] * quat_rotate(q, p) + t


def sim3_adjoint(q, t, s) -> np.ndarray:
    """7x7 adjoint acting on ``(omega, sigma, nu)`` tangents."""
    R = quat_to_matrix(q)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    out = np.zeros(R.shape[:-2] + (7, 7))
    out[..., :3, :3] = R
    out[..., 3, 3] = 1.0
    out[..., 4:, :3] = skew(t) @ R
    out[..., 4:, 3] = -t
    out[..., 4:, 4:] = s[..., None, None] * R
    return out


def sim3_ad(xi: np.ndarray) -> np.ndarray:
    """Lie bracket matrix: ``sim3_ad(x) @ y == [x, y]``."""
    xi = np.asarray(xi, dtype=float)
    omega, sigma, nu = xi[..., :3], xi[..., 3], xi[..., 4:]
    out = np.zeros(xi.shape[:-1] + (7, 7))
    K = skew(omega)
    out[..., :3, :3] = K
    out[..., 4:, :3] = skew(nu)
    out[..., 4:, 3] = -nu
    out[..., 4:, 4:] = K + sigma[..., None, None] * np.eye(3)
    return out


def sim3_right_jacobian(xi: np.ndarray, terms: int = 30) -> np.ndarray:
    """Right Jacobian ``sum_n (-ad xi)^n / (n+1)!`` by series."""
    A = -sim3_ad(xi)
    out = np.broadcast_to(np.eye(7), A.shape).copy()
    term = out.copy()
    for n in range(1, terms):
        term = term @ A / (n + 1)
        out = out + term
    return out


def sim3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(sim3_right_jacobian(xi))


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Rot3:
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", _frozen(quat_normalize(np.asarray(self.q, dtype=float).reshape(4)), 4))

    @classmethod
    def identity(cls) -> Rot3:
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def exp(cls, omega) -> Rot3:
        return cls(so3_exp(np.asarray(omega, dtype=float).reshape(3)))

    @classmethod
    def from_matrix(cls, R) -> Rot3:
        return cls(matrix_to_quat(np.asarray(R, dtype=float)))

    def log(self) -> np.ndarray:
        return so3_log(self.q)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> Rot3:
        return Rot3(quat_conj(self.q))

    def act(self, p) -> np.ndarray:
        return quat_rotate(self.q, np.asarray(p, dtype=float))

    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.q[1:]), abs(self.q[0])))

    def __matmul__(self, other: Rot3) -> Rot3:
        return Rot3(quat_mul(self.q, other.q))

    def __repr__(self) -> str:
        return f"Rot3(q={self.q.tolist()})"


@dataclass(frozen=True, eq=False)
class SE3:
    rotation: Rot3
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(self.translation, 3))

    @classmethod
    def identity(cls) -> SE3:
        return cls(Rot3.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> SE3:
        T = np.asarray(T, dtype=float)
        return cls(Rot3.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def exp(cls, xi) -> SE3:
        q, t = se3_exp(np.asarray(xi, dtype=float).reshape(6))
        return cls(Rot3(q), t)

    def log(self) -> np.ndarray:
        return se3_log(self.rotation.q, self.translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> SE3:
        ri = self.rotation.inverse()
        return SE3(ri, -ri.act(self.translation))

    def act(self, p) -> np.ndarray:
        return self.rotation.act(p) + self.translation

    def __matmul__(self, other: SE3) -> SE3:
        return SE3(self.rotation @ other.rotation, self.act(other.translation))

    def __repr__(self) -> str:
        return f"SE3(q={self.rotation.q.tolist()}, t={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Sim3:
    rotation: Rot3
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "translation", _frozen(self.translation, 3))
        s = float(self.scale)
        if not (s > 0.0 and np.isfinite(s)):
            raise ValueError(f"Sim3 scale must be positive and finite, got {s}")
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> Sim3:
        return cls(Rot3.identity(), np.zeros(3), 1.0)

    @classmethod
    def from_matrix(cls, M) -> Sim3:
        M = np.asarray(M, dtype=float)
        A = M[:3, :3]
        s = float(np.cbrt(np.linalg.det(A)))
        return cls(Rot3.from_matrix(A / s), M[:3, 3], s)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation.matrix()
        M[:3, 3] = self.translation
        return M

    def params(self) -> np.ndarray:
        """Packed ``(qw, qx, qy, qz, tx, ty, tz, s)``."""
        return np.concatenate([self.rotation.q, self.translation, [self.scale]])

    @classmethod
    def from_params(cls, p) -> Sim3:
        p = np.asarray(p, dtype=float)
        return cls(Rot3(p[:4]), p[4:7], p[7])

    def to_se3(self) -> SE3:
        """Drop the scale, keeping rotation and camera centre."""
        return SE3(self.rotation, self.translation)

    def inverse(self) -> Sim3:
        return inverse(self)

    def act(self, p) -> np.ndarray:
        return act(self, p)

    def __matmul__(self, other: Sim3) -> Sim3:
        return compose(self, other)

    def __repr__(self) -> str:
        return f"Sim3(q={self.rotation.q.tolist()}, t={self.translation.tolist()}, s={self.scale})"


@dataclass(frozen=True, eq=False)
class Sim3Tangent:
    omega: np.ndarray
    sigma: float
    nu: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(self.omega, 3))
        object.__setattr__(self, "nu", _frozen(self.nu, 3))
        object.__setattr__(self, "sigma", float(self.sigma))

    @classmethod
    def from_vector(cls, xi) -> Sim3Tangent:
        xi = np.asarray(xi, dtype=float).reshape(7)
        return cls(xi[:3], xi[3], xi[4:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.omega, [self.sigma], self.nu])

    def __repr__(self) -> str:
        return f"Sim3Tangent(omega={self.omega.tolist()}, sigma={self.sigma}, nu={self.nu.tolist()})"


def exp_sim3(xi) -> Sim3:
    vec = xi.vector() if isinstance(xi, Sim3Tangent) else np.asarray(xi, dtype=float).reshape(7)
    if not np.all(np.isfinite(vec)):
        raise ValueError("sim(3) coefficients must be finite")
    q, t, s = sim3_exp(vec)
    return Sim3(Rot3(q), t, float(s))


def log_sim3(S: Sim3) -> Sim3Tangent:
    """Principal-branch logarithm; raises ``BranchAmbiguityError`` at a rotation of pi."""
    return Sim3Tangent.from_vector(sim3_log(S.rotation.q, S.translation, np.float64(S.scale)))


def compose(a: Sim3, b: Sim3) -> Sim3:
    q, t, s = sim3_compose(a.rotation.q, a.translation, a.scale, b.rotation.q, b.translation, b.scale)
    return Sim3(Rot3(q), t, float(s))


def inverse(a: Sim3) -> Sim3:
    q, t, s = sim3_inverse(a.rotation.q, a.translation, a.scale)
    return Sim3(Rot3(q), t, float(s))


def act(a: Sim3, p) -> np.ndarray:
    return sim3_act(a.rotation.q, a.translation, a.scale, np.asarray(p, dtype=float))


def se3_to_sim3(G: SE3) -> Sim3:
    return Sim3(G.rotation, G.translation, 1.0)


def adjoint(S: Sim3) -> np.ndarray:
    return sim3_adjoint(S.rotation.q, S.translation, S.scale)
