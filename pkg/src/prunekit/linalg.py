"""Dense matrix helpers: checked matmul, one-sided Jacobi SVD, finite differences, PKMX files.

Matrices are plain 2-D ``numpy.ndarray`` objects. Everything here is a pure
function of its inputs.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NumericalFailure

MAX_SWEEPS = 100
OFF_TOL = 1e-12

PKMX_MAGIC = b"PKMX"
_HEADER = struct.Struct("<4sIIB")
DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAG_OF = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def as_matrix(x, name="matrix"):
    """Coerce ``x`` to a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name} contains non-finite entries")
    return a


def matmul(a, b):
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class SvdTriple:
    """``w == u @ diag(sigma) @ v`` with ``u`` m x k, ``v`` k x n, k = min(m, n)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank(self):
        return self.sigma.shape[0]

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v


def _round_robin(n):
    """Yield index arrays (I, J) of disjoint column pairs; n-1 rounds cover all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    for _ in range(size - 1):
        left = players[: size // 2]
        right = players[size // 2 :][::-1]
        pairs = [(i, j) for i, j in zip(left, right) if i >= 0 and j >= 0]
        yield np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
        players = [players[0], players[-1]] + players[1:-1]


def _jacobi_tall(a):
    """One-sided Jacobi on a tall matrix (m >= n). Returns (A V, V)."""
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    if n == 1:
        return a, v
    scale = np.linalg.norm(a)
    tiny = (np.finfo(float).eps * scale) ** 2
    rounds = list(_round_robin(n))
    for _ in range(MAX_SWEEPS):
        worst = 0.0
        for i, j in rounds:
            ai, aj = a[:, i], a[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            live = (alpha > tiny) & (beta > tiny)
            off = np.zeros_like(gamma)
            off[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            rot = off > OFF_TOL
            if not rot.any():
                continue
            worst = max(worst, float(off.max()))
            i, j = i[rot], j[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ai, aj = a[:, i], a[:, j]
            a[:, i] = c * ai - s * aj
            a[:, j] = s * ai + c * aj
            vi, vj = v[:, i], v[:, j]
            v[:, i] = c * vi - s * vj
            v[:, j] = s * vi + c * vj
        if worst <= OFF_TOL:
            return a, v
    raise NumericalFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _orthonormal_columns(cols, count):
    """Gram-Schmidt the given columns, completing null ones to an orthonormal set."""
    m = cols.shape[0]
    out = np.zeros((m, count))
    for c in range(count):
        col = cols[:, c] if c < cols.shape[1] else np.zeros(m)
        done = out[:, :c]
        r = col.copy()
        for _ in range(2):
            r -= done @ (done.T @ r)
        norm = np.linalg.norm(r)
        if norm <= 1e-8 * max(np.linalg.norm(col), 1e-300) or norm == 0.0:
            resid = np.eye(m) - done @ done.T
            resid -= done @ (done.T @ resid)
            r = resid[:, int(np.argmax(np.linalg.norm(resid, axis=0)))]
            norm = np.linalg.norm(r)
        out[:, c] = r / norm
    return out


def svd(w):
    """Thin SVD via one-sided Jacobi rotations.

    Singular values come back non-increasing; near-zero ones (below
    ``max(m, n) * eps * sigma_max``) are set to exactly zero and their left
    vectors are completed to an orthonormal basis. Each column of ``u`` has
    its largest-magnitude entry made non-negative.
    """
    w = as_matrix(w, "w")
    m, n = w.shape
    tall = m >= n
    a = w if tall else w.T
    av, vmat = _jacobi_tall(a)
    sigma = np.linalg.norm(av, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    av = av[:, order]
    vmat = vmat[:, order]
    cutoff = max(m, n) * np.finfo(float).eps * (sigma[0] if sigma.size else 0.0)
    nonzero = sigma > cutoff
    sigma = np.where(nonzero, sigma, 0.0)
    k = sigma.shape[0]
    left = _orthonormal_columns(av[:, nonzero], k)
    # left holds the tall factor, vmat the short one
    if tall:
        u, v = left, vmat.T
    else:
        u, v = vmat, left.T
    flip = u[np.argmax(np.abs(u), axis=0), np.arange(k)] < 0
    u = np.where(flip, -u, u)
    v = np.where(flip[:, None], -v, v)
    return SvdTriple(u=u, sigma=sigma, v=v)


def fd_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at matrix ``x``."""
    if not h > 0:
        raise ContractViolation("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        plus = float(f(x))
        x[idx] = orig - h
        minus = float(f(x))
        x[idx] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericalFailure(f"non-finite function value near index {idx}")
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def encode_matrix(m):
    """Serialize a 2-D float64/float32 array to PKMX bytes."""
    a = np.asarray(m)
    if a.ndim != 2:
        raise ContractViolation(f"PKMX stores 2-D arrays, got shape {a.shape}")
    if a.dtype not in _TAG_OF:
        a = a.astype(np.float64)
    tag = _TAG_OF[a.dtype]
    body = np.ascontiguousarray(a, dtype=DTYPE_TAGS[tag]).tobytes()
    return _HEADER.pack(PKMX_MAGIC, a.shape[0], a.shape[1], tag) + body


def decode_matrix(data):
    if len(data) < _HEADER.size:
        raise ContractViolation("truncated PKMX header")
    magic, rows, cols, tag = _HEADER.unpack_from(data)
    if magic != PKMX_MAGIC:
        raise ContractViolation(f"bad PKMX magic {magic!r}")
    if tag not in DTYPE_TAGS:
        raise ContractViolation(f"unknown PKMX dtype tag {tag}")
    dtype = DTYPE_TAGS[tag]
    expected = rows * cols * dtype.itemsize
    body = data[_HEADER.size :]
    if len(body) != expected:
        raise ContractViolation(f"PKMX body is {len(body)} bytes, expected {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder("="))


def write_matrix(path, m):
    from ._fs import atomic_write_bytes

    atomic_write_bytes(Path(path), encode_matrix(m))


def read_matrix(path):
    return decode_matrix(Path(path).read_bytes())
