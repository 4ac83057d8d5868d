"""Gaussian RBF network mapping a DLO shape to deformation Jacobians.

One hidden layer of ``q`` Gaussian neurons is shared by every output head.
Head ``h`` owns ``l*n`` consecutive rows of the weight matrix; inside a head
the rows hold the Jacobian stacked column by column, so rows
``i*l .. (i+1)*l - 1`` produce column ``i``.  Heads ``0..m-1`` belong to the
tracked features and head ``m`` to the target point.  The target head can
alias a feature head, in which case reads and online updates go straight to
that feature's rows.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptPayload, DimensionMismatch, VersionMismatch

TARGET = "target"
MAGIC = b"DLORBF1\x00"
_MAGIC_STEM = b"DLORBF"
_HEADER = struct.Struct("<8s4I")


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-stacking vectorisation."""
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec` for an ``rows x cols`` matrix."""
    return np.asarray(v).reshape(cols, rows).T


@dataclass
class RbfNetwork:
    centers: np.ndarray
    widths: np.ndarray
    weights: np.ndarray
    l: int = 3
    n: int = 3
    m: int = 10
    target_feature: int | None = None
    sigma_min: float = 1e-3

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        self.widths = np.asarray(self.widths, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        q = len(self.widths)
        if self.centers.shape != (q, self.l * self.m):
            raise DimensionMismatch(f"centers shape {self.centers.shape} != {(q, self.l * self.m)}")
        if self.weights.shape != (self.rows, q):
            raise DimensionMismatch(f"weights shape {self.weights.shape} != {(self.rows, q)}")
        if self.target_feature is not None and not 0 <= self.target_feature < self.m:
            raise ValueError("target_feature out of range")

    @classmethod
    def zeros(cls, q: int, l: int = 3, n: int = 3, m: int = 10, width: float = 1.0, **kw) -> "RbfNetwork":
        return cls(
            centers=np.zeros((q, l * m)),
            widths=np.full(q, width),
            weights=np.zeros((l * n * (m + 1), q)),
            l=l, n=n, m=m, **kw,
        )

    @property
    def q(self) -> int:
        return len(self.widths)

    @property
    def rows(self) -> int:
        return self.l * self.n * (self.m + 1)

    @property
    def block(self) -> int:
        return self.l * self.n

    def head_index(self, head) -> int:
        if head == TARGET:
            return self.m if self.target_feature is None else self.target_feature
        head = int(head)
        if not 0 <= head < self.m:
            raise IndexError(f"feature head {head} outside [0, {self.m})")
        return head

    def head_weights(self, head) -> np.ndarray:
        """Writable view of the ``l*n x q`` weight block behind ``head``."""
        h = self.head_index(head)
        return self.weights[h * self.block:(h + 1) * self.block]

    def full_weights(self) -> np.ndarray:
        """Weight matrix with the target block materialised (a copy)."""
        out = self.weights.copy()
        if self.target_feature is not None:
            out[self.m * self.block:] = self.head_weights(self.target_feature)
        return out

    def copy(self) -> "RbfNetwork":
        return RbfNetwork(self.centers.copy(), self.widths.copy(), self.weights.copy(),
                          self.l, self.n, self.m, self.target_feature, self.sigma_min)

    def check(self) -> None:
        if not np.all(self.widths > self.sigma_min):
            raise ValueError("widths must exceed sigma_min")
        if not np.isfinite(self.centers).all():
            raise ValueError("non-finite centers")


@dataclass
class JacobianEstimate:
    matrix: np.ndarray
    shape_input: np.ndarray = field(repr=False)


def squared_distances(net: RbfNetwork, phi: np.ndarray) -> np.ndarray:
    phi = np.atleast_2d(phi)
    diff = phi[:, None, :] - net.centers[None, :, :]
    return np.einsum("bqd,bqd->bq", diff, diff)


def activations(net: RbfNetwork, phi: np.ndarray) -> np.ndarray:
    """Gaussian activations; shape ``(q,)`` for one shape, ``(B, q)`` for a batch."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != net.l * net.m:
        raise DimensionMismatch(f"shape vector has {phi.shape[-1]} entries, expected {net.l * net.m}")
    theta = np.exp(-squared_distances(net, phi) / net.widths**2)
    return theta[0] if phi.ndim == 1 else theta


def estimate_jacobian(net: RbfNetwork, phi: np.ndarray, feature=TARGET) -> JacobianEstimate:
    theta = activations(net, phi)
    flat = net.head_weights(feature) @ theta
    return JacobianEstimate(unvec(flat, net.l, net.n), np.asarray(phi, dtype=float).copy())


def predict_velocity(jac: JacobianEstimate | np.ndarray, rdot) -> np.ndarray:
    matrix = jac.matrix if isinstance(jac, JacobianEstimate) else np.asarray(jac)
    return matrix @ np.asarray(rdot, dtype=float)


def approximation_error(net: RbfNetwork, phi, rdot, ydot_measured, feature=TARGET) -> np.ndarray:
    """Measured point velocity minus the network's prediction."""
    return np.asarray(ydot_measured, dtype=float) - predict_velocity(estimate_jacobian(net, phi, feature), rdot)


def backward(net: RbfNetwork, phi: np.ndarray, theta: np.ndarray, sqdist: np.ndarray,
             grad_out: np.ndarray, rows: slice = slice(None)) -> dict[str, np.ndarray]:
    """Gradients of a scalar w.r.t. weights, centers and widths.

    ``grad_out`` is the derivative with respect to ``theta @ weights[rows].T``
    (shape ``(B, len(rows))``).  Rows outside ``rows`` get zero gradient.
    """
    w = net.weights[rows]
    grad_w = np.zeros_like(net.weights)
    grad_w[rows] = grad_out.T @ theta
    a = (grad_out @ w) * theta  # d/d(exponent) up to the sign of the exponent
    inv_s2 = 1.0 / net.widths**2
    grad_c = 2.0 * inv_s2[:, None] * (a.T @ phi - a.sum(axis=0)[:, None] * net.centers)
    grad_s = 2.0 * np.sum(a * sqdist, axis=0) / net.widths**3
    return {"weights": grad_w, "centers": grad_c, "widths": grad_s}


# --- model file -----------------------------------------------------------

def to_bytes(net: RbfNetwork) -> bytes:
    body = _HEADER.pack(MAGIC, net.q, net.l, net.n, net.m)
    body += np.ascontiguousarray(net.widths, dtype="<f8").tobytes()
    body += np.ascontiguousarray(net.centers, dtype="<f8").tobytes()
    body += np.ascontiguousarray(net.full_weights(), dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes, expect: tuple[int, int, int] | None = None) -> RbfNetwork:
    """Parse a model file.  ``expect`` optionally pins ``(l, n, m)``."""
    if len(data) < _HEADER.size + 4:
        raise CorruptPayload("model file shorter than its header")
    magic, q, l, n, m = _HEADER.unpack_from(data)
    if magic != MAGIC:
        if magic.startswith(_MAGIC_STEM):
            raise VersionMismatch(f"unsupported model version {magic[6:7]!r}")
        raise CorruptPayload("bad magic bytes")
    rows = l * n * (m + 1)
    size = _HEADER.size + 8 * (q + q * l * m + rows * q) + 4
    if len(data) != size:
        raise CorruptPayload(f"model file is {len(data)} bytes, header implies {size}")
    (crc,) = struct.unpack_from("<I", data, size - 4)
    if crc != zlib.crc32(data[:size - 4]):
        raise CorruptPayload("checksum mismatch")
    if expect is not None and (l, n, m) != tuple(expect):
        raise DimensionMismatch(f"model has (l, n, m) = {(l, n, m)}, expected {tuple(expect)}")
    if q == 0 or l == 0 or n == 0 or m == 0:
        raise DimensionMismatch("zero dimension in model header")
    arr = np.frombuffer(data, dtype="<f8", count=q + q * l * m + rows * q, offset=_HEADER.size)
    widths = arr[:q].astype(float)
    centers = arr[q:q + q * l * m].reshape(q, l * m).astype(float)
    weights = arr[q + q * l * m:].reshape(rows, q).astype(float)
    net = RbfNetwork(centers, widths, weights, l, n, m)
    target = weights[m * l * n:]
    if np.any(target):
        for k in range(m):
            if np.array_equal(target, weights[k * l * n:(k + 1) * l * n]):
                net.target_feature = k
                break
    return net


def save(net: RbfNetwork, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path, expect: tuple[int, int, int] | None = None) -> RbfNetwork:
    return from_bytes(Path(path).read_bytes(), expect)
