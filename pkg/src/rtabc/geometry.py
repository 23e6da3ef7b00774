"""Rotation and sphere-sampling helpers for orientation inference."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Quaternion(NamedTuple):
    """Unit quaternion ``(w, x, y, z)``.  ``q`` and ``-q`` are the same rotation."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=float)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        a = np.asarray(a, dtype=float)
        norm = float(np.linalg.norm(a))
        if norm == 0:
            raise ValueError("zero quaternion")
        return cls(*(a / norm).tolist())


class EulerYXZ(NamedTuple):
    """Intrinsic Y, then X, then Z angles in radians."""

    phi1: float
    phi2: float
    phi3: float


def euler_yxz_to_quaternion(e) -> Quaternion:
    p1, p2, p3 = (float(v) for v in e)
    s1, c1 = math.sin(p1 / 2), math.cos(p1 / 2)
    s2, c2 = math.sin(p2 / 2), math.cos(p2 / 2)
    s3, c3 = math.sin(p3 / 2), math.cos(p3 / 2)
    w = s1 * s2 * s3 + c1 * c2 * c3
    x = s1 * c2 * s3 + c1 * s2 * c3
    y = s1 * c2 * c3 - c1 * s2 * s3
    z = c1 * c2 * s3 - s1 * s2 * c3
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    return Quaternion(w / norm, x / norm, y / norm, z / norm)


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_geodesic_distance(a, b, tol: float = 1e-6) -> float:
    """Rotation angle between two unit quaternions, in ``[0, pi]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for q in (a, b):
        if abs(np.linalg.norm(q) - 1.0) > tol:
            raise ValueError("quaternions must be unit length")
    dot = min(1.0, abs(float(a @ b)))
    return 2.0 * math.acos(dot)


def _deserno_s2(n: int) -> np.ndarray:
    """Equal-area latitude bands on S^2 (Deserno's construction)."""
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])
    area = 4.0 * math.pi / n
    d = math.sqrt(area)
    m_theta = max(1, round(math.pi / d))
    d_theta = math.pi / m_theta
    d_phi = area / d_theta
    pts = []
    for m in range(m_theta):
        theta = math.pi * (m + 0.5) / m_theta
        m_phi = max(1, round(2.0 * math.pi * math.sin(theta) / d_phi))
        phi = 2.0 * math.pi * np.arange(m_phi) / m_phi
        st = math.sin(theta)
        pts.append(np.column_stack([st * np.cos(phi), st * np.sin(phi), np.full(m_phi, math.cos(theta))]))
    return np.concatenate(pts)


def _banded_s3(n: int) -> np.ndarray:
    """Stratify the S^3 polar angle in bands weighted by sin^2, then fill each
    band's S^2 cross-section with the equal-area construction."""
    if n == 1:
        return np.array([[1.0, 0.0, 0.0, 0.0]])
    cell = 2.0 * math.pi**2 / n
    d = cell ** (1.0 / 3.0)
    m_psi = max(1, round(math.pi / d))
    d_psi = math.pi / m_psi
    pts = []
    for m in range(m_psi):
        psi = math.pi * (m + 0.5) / m_psi
        # exact volume of the band [psi0, psi1] is 4 pi * int sin^2
        a, b = m * d_psi, (m + 1) * d_psi
        vol = 2.0 * math.pi * ((b - a) - 0.5 * (math.sin(2 * b) - math.sin(2 * a)))
        count = round(vol / cell)
        if count < 1:
            continue
        inner = _deserno_s2(count)
        pts.append(np.column_stack([np.full(len(inner), math.cos(psi)), math.sin(psi) * inner]))
    return np.concatenate(pts) if pts else np.array([[1.0, 0.0, 0.0, 0.0]])


def equispaced_hypersphere(n: int, dim: int = 3) -> np.ndarray:
    """Roughly evenly spread unit vectors on S^2 (``dim=3``) or S^3 (``dim=4``).

    The banded constructions cannot hit ``n`` exactly; the requested count is
    nudged until the produced count is as close to ``n`` as the scan finds.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if dim not in (3, 4):
        raise ValueError("dim must be 3 or 4")
    build = _deserno_s2 if dim == 3 else _banded_s3
    if n == 1:
        return build(1)
    target = n
    best = cand = build(n)
    tried = {n}
    for _ in range(20):
        got = len(cand)
        if len(best) == n:
            break
        step = round(target * n / got)
        if step in tried:
            step = target + (1 if got < n else -1)
        target = max(2, step)
        if target in tried:
            break
        tried.add(target)
        cand = build(target)
        if abs(len(cand) - n) < abs(len(best) - n):
            best = cand
    if abs(len(best) - n) > 0.02 * n:
        for target in range(max(2, int(0.85 * n)), int(1.15 * n) + 2):
            if target in tried:
                continue
            cand = build(target)
            if abs(len(cand) - n) < abs(len(best) - n):
                best = cand
            if len(best) == n:
                break
    out = np.asarray(best, dtype=float)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def write_points(points: np.ndarray, path) -> None:
    """Same line-oriented decimal format as leaf dumps."""
    points = np.atleast_2d(points)
    with open(path, "w") as fh:
        fh.write(f"# points: {points.shape[1]} coordinates per line\n")
        for row in points:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
