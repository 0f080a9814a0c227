"""Pinhole cameras and ray construction.

Conventions: the camera looks down +z of its own frame, image x grows to the
right and y grows downward, and a pixel ``(u, v)`` is sampled at its centre
``(u + 0.5, v + 0.5)``. Poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    f: float
    W: int
    H: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.cx is None:
            object.__setattr__(self, "cx", self.W / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.H / 2.0)
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if self.W < 1 or self.H < 1:
            raise ValueError("image must be at least 1x1")
        if not (0 <= self.cx <= self.W and 0 <= self.cy <= self.H):
            raise ValueError("principal point outside the image")

    @property
    def s_max(self):
        """Radius of the image-diagonal disc, in pixels."""
        return float(np.hypot(self.W, self.H) / 2.0)

    def to_dict(self):
        return {"f": self.f, "W": self.W, "H": self.H, "cx": self.cx, "cy": self.cy}


@dataclass(frozen=True)
class Pose:
    origin: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "rotation", R)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.eye(3))

    @classmethod
    def look_at(cls, origin, target, up=(0.0, 1.0, 0.0)):
        origin = np.asarray(origin, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - origin
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("camera origin coincides with its target")
        fwd /= n
        right = np.cross(-np.asarray(up, dtype=np.float64), fwd)
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("view direction parallel to the up vector")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return cls(origin, np.stack([right, down, fwd], axis=1))

    def to_list(self):
        """12 floats, row-major ``[R | t]``."""
        return np.concatenate([self.rotation, self.origin[:, None]], axis=1).reshape(-1).tolist()

    @classmethod
    def from_list(cls, values):
        m = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(m[:, 3], m[:, :3])


@dataclass
class Ray:
    """Origin and unit direction; arrays may carry a leading batch axis."""

    origin: np.ndarray
    direction: np.ndarray

    def __len__(self):
        return 1 if np.ndim(self.origin) == 1 else len(self.origin)

    def __getitem__(self, idx):
        return Ray(self.origin[idx], self.direction[idx])

    @staticmethod
    def concat(rays):
        return Ray(
            np.concatenate([np.atleast_2d(r.origin) for r in rays]),
            np.concatenate([np.atleast_2d(r.direction) for r in rays]),
        )


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def pixel_rays(intr, pose, u, v):
    """Rays through pixel centres; ``u`` (column) and ``v`` (row) may be arrays."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= intr.W) or np.any(v < 0) or np.any(v >= intr.H):
        raise ValueError(f"pixel outside the {intr.W}x{intr.H} image")
    cam = np.stack(
        [(u + 0.5 - intr.cx) / intr.f, (v + 0.5 - intr.cy) / intr.f, np.ones_like(u)], axis=-1
    )
    d = _normalize(cam @ pose.rotation.T)
    o = np.broadcast_to(pose.origin, d.shape).copy()
    return Ray(o, d)


def pixel_ray(intr, pose, u, v):
    return pixel_rays(intr, pose, float(u), float(v))


def image_rays(intr, pose):
    """All ``H*W`` pixel rays in row-major order."""
    v, u = np.meshgrid(np.arange(intr.H), np.arange(intr.W), indexing="ij")
    return pixel_rays(intr, pose, u.reshape(-1), v.reshape(-1))


def principal_ray(intr, pose):
    return Ray(pose.origin.copy(), pose.rotation[:, 2].copy())


_AXES = np.eye(3)


def gram_schmidt_basis(r_d_star):
    """Two unit vectors completing ``r_d_star`` to an orthonormal frame.

    Seeds are world axes: ``e_x`` first, or ``e_y`` when the direction lies
    within ~25 degrees of the x axis. The second vector comes from whichever
    remaining axis keeps the larger residual, which is never below 1/sqrt(2).
    """
    d = np.asarray(r_d_star, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1) > 1e-6:
        raise ValueError("direction must be unit length")
    if abs(d[0]) > 0.9:
        first, rest = 1, (2, 0)
    else:
        first, rest = 0, (1, 2)
    p1 = _AXES[first] - d[first] * d
    p1 /= np.linalg.norm(p1)
    best = None
    for k in rest:
        r = _AXES[k] - d[k] * d - p1[k] * p1
        if best is None or np.linalg.norm(r) > np.linalg.norm(best):
            best = r
    return p1, best / np.linalg.norm(best)


def gram_schmidt_basis_batch(dirs):
    """Vectorized :func:`gram_schmidt_basis` over ``dirs[n, 3]``."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    near_x = np.abs(d[:, 0]) > 0.9
    first = np.where(near_x, 1, 0)
    sec_a = np.where(near_x, 2, 1)
    sec_b = np.where(near_x, 0, 2)
    idx = np.arange(len(d))

    def resid(k, *against):
        r = _AXES[k].copy()
        for basis in against:
            r -= basis[idx, k][:, None] * basis
        return r

    p1 = _normalize(resid(first, d))
    ra = resid(sec_a, d, p1)
    rb = resid(sec_b, d, p1)
    na = np.linalg.norm(ra, axis=1)
    nb = np.linalg.norm(rb, axis=1)
    # the losing candidate may be zero; only the winner is divided
    p2 = np.where((na >= nb)[:, None], ra, rb) / np.maximum(na, nb)[:, None]
    return p1, p2


def sample_nonprincipal(r_star, intr, s, u_theta):
    """Ray sharing ``r_star``'s origin, tilted by ``s`` pixels at angle ``u_theta``.

    Works elementwise when ``r_star``, ``s`` and ``u_theta`` are batched.
    """
    s = np.asarray(s, dtype=np.float64)
    u_theta = np.asarray(u_theta, dtype=np.float64)
    if np.any(s < 0) or np.any(s > intr.s_max * (1 + 1e-12)):
        raise ValueError(f"s must lie in [0, {intr.s_max}]")
    d = np.asarray(r_star.direction, dtype=np.float64)
    single = d.ndim == 1
    d2 = np.atleast_2d(d)
    p1, p2 = gram_schmidt_basis_batch(d2)
    s = np.atleast_1d(s)[:, None]
    th = np.atleast_1d(u_theta)[:, None]
    raw = intr.f * d2 + s * np.cos(th) * p1 + s * np.sin(th) * p2
    out = _normalize(raw)
    # s == 0 must reproduce the principal direction exactly, not up to rounding
    out = np.where(s == 0, d2, out)
    o = np.broadcast_to(np.atleast_2d(r_star.origin), out.shape).copy()
    if single:
        return Ray(o[0], out[0])
    return Ray(o, out)
