"""Quadrature volume rendering and its reverse pass.

``render_rays`` works with any *field*: a callable ``(points, dirs) ->
(colors, sigmas)``. :class:`NetworkField` wraps a parameter set so the
renderer can also push colour gradients back into the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from . import mlp
from .camera import Ray, image_rays
from .exceptions import NumericError


@dataclass(frozen=True)
class SampleSpec:
    P: int = 32
    z_near: float = 2.0
    z_far: float = 6.0
    stratified: bool = True

    def __post_init__(self):
        if self.P < 1:
            raise ValueError("need at least one sample per ray")
        if not 0 < self.z_near < self.z_far:
            raise ValueError("require 0 < z_near < z_far")

    def replace(self, **kw):
        return SampleSpec(**{**self.__dict__, **kw})


@dataclass
class RenderResult:
    color: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    depths: np.ndarray
    alpha: np.ndarray


def sample_depths(spec, rng=None, n_rays=None):
    """Depths along each ray, one per equal bin of ``[z_near, z_far]``.

    Bin midpoints when ``spec.stratified`` is false, else one uniform draw per
    bin. Returns shape ``(P,)`` or ``(n_rays, P)``.
    """
    edges = np.linspace(spec.z_near, spec.z_far, spec.P + 1)
    lo, width = edges[:-1], np.diff(edges)
    shape = (spec.P,) if n_rays is None else (n_rays, spec.P)
    if not spec.stratified:
        return np.broadcast_to(lo + 0.5 * width, shape).copy()
    if rng is None:
        raise ValueError("stratified sampling needs an rng")
    z = lo + rng.random(shape) * width
    # keep draws strictly inside their own bin
    return np.minimum(z, np.nextafter(lo + width, lo))


def _deltas(depths, z_far):
    return np.concatenate([np.diff(depths, axis=-1), z_far - depths[..., -1:]], axis=-1)


def composite(colors, sigmas, depths, z_far):
    """Alpha-composite per-sample colours; the last interval ends at ``z_far``."""
    colors = np.asarray(colors)
    sigmas = np.asarray(sigmas)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(np.diff(depths, axis=-1) <= 0) or np.any(depths[..., -1] > z_far):
        raise ValueError("sample depths must be strictly increasing and below z_far")
    if np.any(sigmas < 0):
        raise ValueError("densities must be nonnegative")
    tau = sigmas * _deltas(depths, z_far)
    alpha = -np.expm1(-tau)
    # exclusive prefix sum; (cumsum - tau) can break monotonicity by rounding
    acc = np.cumsum(tau, axis=-1)
    excl = np.concatenate([np.zeros_like(acc[..., :1]), acc[..., :-1]], axis=-1)
    trans = np.exp(-excl)
    w = trans * alpha
    color = np.sum(w[..., None] * colors, axis=-2)
    return RenderResult(color, w, trans, depths, alpha)


def _composite_backward(res, colors, grad_color, z_far):
    """Gradients of a loss w.r.t. per-sample colours and densities."""
    w, trans, alpha = res.weights, res.transmittance, res.alpha
    s = np.einsum("...pc,...c->...p", colors, grad_color)
    ws = w * s
    # sum_{i > k} w_i s_i
    tail = np.cumsum(ws[..., ::-1], axis=-1)[..., ::-1] - ws
    t_next = trans * (1 - alpha)
    d_tau = t_next * s - tail
    d_sigma = d_tau * _deltas(res.depths, z_far)
    d_colors = w[..., None] * grad_color[..., None, :]
    return d_colors, d_sigma


class NetworkField:
    """Adapter exposing a NeRF parameter set as a renderable field."""

    def __init__(self, params, net):
        self.params = params
        self.net = net

    def __call__(self, points, dirs):
        c, s, _ = mlp._field_forward(self.params, self.net, points, dirs)
        return c, s


def _query(rays, depths):
    pts = rays.origin[:, None, :] + depths[..., None] * rays.direction[:, None, :]
    dirs = np.broadcast_to(rays.direction[:, None, :], pts.shape)
    return pts.reshape(-1, 3), dirs.reshape(-1, 3)


def render_rays(field, rays, spec, rng=None):
    """Render a batch of rays through ``field``."""
    n = len(rays.origin) if np.ndim(rays.origin) == 2 else None
    origin = np.atleast_2d(rays.origin)
    direction = np.atleast_2d(rays.direction)
    depths = sample_depths(spec, rng, n_rays=len(origin))
    pts, dirs = _query(Ray(origin, direction), depths)
    c, s = field(pts, dirs)
    c = np.asarray(c).reshape(len(origin), spec.P, 3)
    s = np.asarray(s).reshape(len(origin), spec.P)
    res = composite(c, s, depths, spec.z_far)
    if n is None:
        return RenderResult(res.color[0], res.weights[0], res.transmittance[0], res.depths[0], res.alpha[0])
    return res


def render_ray(params, net, ray, spec, rng=None):
    """Render a single ray, or a batch, through a NeRF parameter set."""
    return render_rays(NetworkField(params, net), ray, spec, rng)


def render_image(field, intr, pose, spec, rng=None, n_jobs=1, chunk=4096):
    """Render every pixel; ``field`` may be a callable field or ``(params, net)``.

    With ``n_jobs > 1`` chunks are rendered in worker threads. Stratified
    sampling draws a per-chunk generator from ``rng`` up front so the image
    does not depend on scheduling.
    """
    if isinstance(field, tuple):
        field = NetworkField(*field)
    rays = image_rays(intr, pose)
    n = len(rays.origin)
    starts = list(range(0, n, chunk))
    if spec.stratified:
        if rng is None:
            raise ValueError("stratified rendering needs an rng")
        seeds = rng.integers(0, 2**63 - 1, size=len(starts))
        rngs = [np.random.default_rng(int(s)) for s in seeds]
    else:
        rngs = [None] * len(starts)

    def work(k):
        st = starts[k]
        return render_rays(field, rays[st:st + chunk], spec, rngs[k]).color

    if n_jobs == 1:
        parts = [work(k) for k in range(len(starts))]
    else:
        parts = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(work)(k) for k in range(len(starts)))
    return np.concatenate(parts).reshape(intr.H, intr.W, 3)


# -- losses on rendered colours ------------------------------------------


def color_loss(pred, target, kind="l2", eps=1e-3):
    """Mean per-ray loss and its gradient w.r.t. ``pred``.

    ``l2`` is the squared Euclidean norm of the RGB residual, ``charbonnier``
    is ``sqrt(|r|^2 + eps^2)`` and ``l1`` is the channel-summed absolute error.
    """
    r = pred - target
    m = len(r)
    if kind == "l2":
        return float(np.sum(r * r) / m), 2 * r / m
    if kind == "charbonnier":
        rho = np.sqrt(np.sum(r * r, axis=-1) + eps * eps)
        return float(rho.sum() / m), r / rho[:, None] / m
    if kind == "l1":
        return float(np.abs(r).sum() / m), np.sign(r) / m
    raise ValueError(f"unknown loss kind {kind!r}")


def render_and_grad(params, net, rays, spec, rng, color_grad_fn):
    """Render ``rays`` with ``params`` and backpropagate a colour loss.

    ``color_grad_fn(pred) -> (loss, dloss/dpred)``. Returns ``(loss, grad,
    pred)`` where ``grad`` is a :class:`ParamSet`.
    """
    origin = np.atleast_2d(rays.origin)
    direction = np.atleast_2d(rays.direction)
    n = len(origin)
    if n == 0:
        raise ValueError("empty ray batch")
    depths = sample_depths(spec, rng, n_rays=n)
    pts, dirs = _query(Ray(origin, direction), depths)
    c, s, cache = mlp._field_forward(params, net, pts, dirs)
    c = c.reshape(n, spec.P, 3)
    s = s.reshape(n, spec.P)
    res = composite(c, s, depths, spec.z_far)
    loss, g = color_grad_fn(res.color)
    if not np.isfinite(loss):
        raise NumericError(
            "non-finite loss",
            {"max_sigma": float(np.max(s)), "params_finite": bool(np.all(np.isfinite(params.data)))},
        )
    g = np.asarray(g, dtype=c.dtype)
    d_colors, d_sigma = _composite_backward(res, c, g, spec.z_far)
    dt = params.dtype
    grad = mlp.field_backward(
        params, net, cache, d_colors.reshape(-1, 3).astype(dt, copy=False),
        d_sigma.reshape(-1).astype(dt, copy=False),
    )
    return loss, grad, res.color


def render_batch_backward(params, net, rays, targets, loss_kind, spec, rng, eps=1e-3):
    """Mean colour loss over the batch and its gradient w.r.t. every parameter."""
    targets = np.asarray(targets)
    loss, grad, _ = render_and_grad(
        params, net, rays, spec, rng, lambda pred: color_loss(pred, targets, loss_kind, eps)
    )
    return loss, grad
