"""Analytic sphere scenes, camera trajectories and task construction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, Pose, image_rays


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    sigma: float
    color: tuple


@dataclass(frozen=True)
class SceneDef:
    """Constant-density coloured spheres inside an axis-aligned box.

    ``z_near``/``z_far`` bound the integration interval along every ray, for
    both the analytic oracle and quadrature rendering.
    """

    spheres: tuple
    bounds: tuple = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
    z_near: float = 2.0
    z_far: float = 6.0

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
        for s in self.spheres:
            c = np.asarray(s.center, dtype=float)
            if s.radius <= 0 or not np.isfinite(s.sigma) or s.sigma < 0:
                raise ValueError(f"invalid sphere {s}")
            if np.any(c - s.radius < lo - 1e-9) or np.any(c + s.radius > hi + 1e-9):
                raise ValueError(f"sphere {s} leaves the scene bounds")
            if np.any(np.asarray(s.color) < 0) or np.any(np.asarray(s.color) > 1):
                raise ValueError("sphere colours must lie in [0, 1]")

    def query(self, points, dirs=None):
        """Density and colour of the field at ``points`` (view independent)."""
        pts = np.asarray(points, dtype=np.float64)
        sig = np.zeros(pts.shape[:-1])
        col = np.zeros(pts.shape)
        for s in self.spheres:
            inside = np.sum((pts - s.center) ** 2, axis=-1) <= s.radius ** 2
            sig = sig + inside * s.sigma
            col = col + (inside * s.sigma)[..., None] * np.asarray(s.color)
        with np.errstate(invalid="ignore", divide="ignore"):
            col = np.where(sig[..., None] > 0, col / sig[..., None], 0.0)
        return col, sig

    __call__ = query

    def to_dict(self):
        return {
            "spheres": [
                {"center": list(s.center), "radius": s.radius, "sigma": s.sigma, "color": list(s.color)}
                for s in self.spheres
            ],
            "bounds": [list(b) for b in self.bounds],
            "z_near": self.z_near,
            "z_far": self.z_far,
        }

    @classmethod
    def from_dict(cls, d):
        spheres = tuple(
            Sphere(tuple(s["center"]), float(s["radius"]), float(s["sigma"]), tuple(s["color"]))
            for s in d["spheres"]
        )
        bounds = tuple(tuple(b) for b in d.get("bounds", ((-1.5,) * 3, (1.5,) * 3)))
        return cls(spheres, bounds, float(d.get("z_near", 2.0)), float(d.get("z_far", 6.0)))


def _sphere_intervals(scene, origins, dirs):
    """Entry/exit depths ``(n, K, 2)`` clipped to the scene's z-range; empty -> equal."""
    K = len(scene.spheres)
    n = len(origins)
    out = np.full((n, K, 2), float(scene.z_near))
    for k, s in enumerate(scene.spheres):
        oc = origins - np.asarray(s.center)
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - s.radius ** 2
        disc = b * b - c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0 = np.clip(-b - root, scene.z_near, scene.z_far)
        t1 = np.clip(-b + root, scene.z_near, scene.z_far)
        out[:, k, 0] = np.where(hit, t0, scene.z_near)
        out[:, k, 1] = np.where(hit, t1, scene.z_near)
    return out


def analytic_render_rays(scene, origins, dirs):
    """Exact emission-absorption colour for each ray (black background)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = len(origins)
    if not scene.spheres:
        return np.zeros((n, 3))
    iv = _sphere_intervals(scene, origins, dirs)
    sig = np.array([s.sigma for s in scene.spheres])
    col = np.array([s.color for s in scene.spheres], dtype=np.float64)
    bps = np.sort(iv.reshape(n, -1), axis=1)
    lo, hi = bps[:, :-1], bps[:, 1:]
    mid = 0.5 * (lo + hi)
    # active[n, seg, k]: segment midpoint lies inside sphere k's interval
    active = (mid[:, :, None] > iv[:, None, :, 0]) & (mid[:, :, None] < iv[:, None, :, 1])
    seg_sigma = active @ sig
    seg_col = (active * sig) @ col
    with np.errstate(invalid="ignore", divide="ignore"):
        seg_col = np.where(seg_sigma[..., None] > 0, seg_col / seg_sigma[..., None], 0.0)
    tau = seg_sigma * (hi - lo)
    trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
    w = trans * -np.expm1(-tau)
    return np.sum(w[..., None] * seg_col, axis=1)


def analytic_render(scene, intr, pose, P_exact=None):
    """Closed-form image of ``scene``; ``P_exact`` is accepted and ignored.

    Every ray is integrated exactly over its sphere chords, so there is no
    sample count to choose.
    """
    rays = image_rays(intr, pose)
    img = analytic_render_rays(scene, rays.origin, rays.direction)
    return np.clip(img, 0.0, 1.0).reshape(intr.H, intr.W, 3)


# -- trajectories and tasks ----------------------------------------------


@dataclass(frozen=True)
class TrajectorySpec:
    """Camera path split into ``T`` tasks of ``N`` consecutive views.

    ``orbit_arc`` places cameras on a horizontal arc of ``radius`` around
    ``center`` (at ``height``), sweeping ``arc_degrees`` from
    ``start_degrees``, each looking at ``look_at`` (``facing="inward"``) or
    radially away from ``center`` (``facing="outward"``). ``line_sweep`` translates
    the camera along ``sweep_axis`` over ``sweep_extent`` starting at
    ``sweep_start``, looking along ``view_dir``.
    """

    kind: str = "orbit_arc"
    T: int = 3
    N: int = 5
    arc_degrees: float = 90.0
    start_degrees: float = 0.0
    radius: float = 4.0
    height: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    facing: str = "inward"
    sweep_start: tuple = (-2.0, 0.0, -4.0)
    sweep_axis: tuple = (1.0, 0.0, 0.0)
    sweep_extent: float = 4.0
    view_dir: tuple = (0.0, 0.0, 1.0)

    def poses(self):
        if self.T < 1 or self.N < 2:
            raise ValueError("need T >= 1 tasks of N >= 2 views (one view carries no geometry)")
        n = self.T * self.N
        if self.kind == "orbit_arc":
            if self.arc_degrees == 0 or self.radius <= 0:
                raise ValueError("degenerate orbit: zero arc or radius")
            angles = np.deg2rad(self.start_degrees + np.linspace(0.0, self.arc_degrees, n))
            c = np.asarray(self.center, dtype=float)
            poses = []
            for a in angles:
                radial = np.array([np.sin(a), 0.0, -np.cos(a)])
                pos = c + self.radius * radial + np.array([0.0, self.height, 0.0])
                if self.facing == "inward":
                    poses.append(Pose.look_at(pos, self.look_at))
                elif self.facing == "outward":
                    poses.append(Pose.look_at(pos, pos + radial))
                else:
                    raise ValueError(f"unknown facing {self.facing!r}")
            return poses
        if self.kind == "line_sweep":
            if self.sweep_extent == 0:
                raise ValueError("degenerate sweep: zero extent")
            axis = np.asarray(self.sweep_axis, dtype=float)
            axis /= np.linalg.norm(axis)
            start = np.asarray(self.sweep_start, dtype=float)
            ts = np.linspace(0.0, self.sweep_extent, n)
            vd = np.asarray(self.view_dir, dtype=float)
            return [Pose.look_at(start + t * axis, start + t * axis + vd) for t in ts]
        raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Task:
    """``N`` posed images sharing intrinsics; ``index`` counts from 1."""

    index: int
    images: list
    poses: list
    intrinsics: Intrinsics
    _rays: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if len(self.images) != len(self.poses):
            raise ValueError("images and poses differ in count")
        if len(self.images) < 2:
            raise ValueError("a task needs N > 1 views so geometry is observable")
        for im in self.images:
            if im.shape != (self.intrinsics.H, self.intrinsics.W, 3):
                raise ValueError(f"image shape {im.shape} does not match intrinsics")

    @property
    def N(self):
        return len(self.images)

    def all_rays(self):
        """Concatenated pixel rays and colours of every view (cached)."""
        if self._rays is None:
            from .camera import Ray

            rays = [image_rays(self.intrinsics, p) for p in self.poses]
            self._rays = (
                Ray.concat(rays),
                np.concatenate([im.reshape(-1, 3) for im in self.images]),
            )
        return self._rays


@dataclass
class ViewSet:
    """Posed evaluation views of one task; unlike :class:`Task` it may hold a single view."""

    index: int
    images: list
    poses: list
    intrinsics: Intrinsics


def holdout_split(tasks, every=5):
    """Move every ``every``-th view of each task (the last of each group) out of training.

    Returns ``(train_tasks, heldout_views)``.
    """
    if every < 2:
        raise ValueError("every must be >= 2")
    train, held = [], []
    for t in tasks:
        out = [k for k in range(t.N) if k % every == every - 1]
        keep = [k for k in range(t.N) if k not in out]
        if not out:
            raise ValueError(f"task {t.index} has {t.N} views; nothing to hold out with every={every}")
        train.append(Task(t.index, [t.images[k] for k in keep], [t.poses[k] for k in keep], t.intrinsics))
        held.append(ViewSet(t.index, [t.images[k] for k in out], [t.poses[k] for k in out], t.intrinsics))
    return train, held


def build_tasks(scene, traj, intr):
    """Render ``traj`` through ``scene`` and group the views into tasks."""
    poses = traj.poses()
    keys = {tuple(np.round(p.to_list(), 12)) for p in poses}
    if len(keys) != len(poses):
        raise ValueError("trajectory revisits a pose")
    tasks = []
    for t in range(traj.T):
        ps = poses[t * traj.N:(t + 1) * traj.N]
        imgs = [analytic_render(scene, intr, p).astype(np.float32) for p in ps]
        tasks.append(Task(t + 1, imgs, ps, intr))
    return tasks


def _ring(deg, r, y, radius, color, sigma=8.0):
    a = np.deg2rad(deg)
    return Sphere((r * np.sin(a), y, -r * np.cos(a)), radius, sigma, color)


def reference_scene():
    """Six coloured spheres on a ring around the origin.

    Seen from outward-facing cameras near the centre, each third of a 90
    degree arc looks at a mostly different pair of spheres.
    """
    return SceneDef(
        spheres=(
            _ring(-12, 4.0, 0.3, 0.55, (0.9, 0.15, 0.1)),
            _ring(12, 3.6, -0.4, 0.5, (0.2, 0.8, 0.25)),
            _ring(40, 4.2, 0.2, 0.6, (0.15, 0.3, 0.95)),
            _ring(68, 3.7, -0.3, 0.5, (0.95, 0.85, 0.2)),
            _ring(95, 4.0, 0.35, 0.55, (0.85, 0.3, 0.9)),
            _ring(115, 3.8, -0.2, 0.45, (0.2, 0.9, 0.9)),
        ),
        bounds=((-5.0, -1.5, -5.0), (5.0, 1.5, 5.0)),
        z_near=1.0,
        z_far=5.5,
    )


def reference_trajectory(T=3, N=5):
    return TrajectorySpec(kind="orbit_arc", T=T, N=N, arc_degrees=90.0, radius=1.0, facing="outward")


def reference_intrinsics():
    return Intrinsics(f=64.0, W=64, H=64)


def reference_tasks(T=3, N=5):
    """The 64x64 benchmark: T tasks of N views along a 90 degree arc."""
    return build_tasks(reference_scene(), reference_trajectory(T, N), reference_intrinsics())
