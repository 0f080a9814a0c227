"""Task-by-task training for the distillation method and its baselines.

Every method shares one inner loop (:func:`_optimize`) and differs only in
the per-iteration gradient and the bookkeeping at task boundaries. Random
streams are derived from ``(seed, task, stream)`` so methods that reduce to
plain incremental training consume identical draws for the current batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import mlp
from .camera import Ray, principal_ray
from .exceptions import CapacityExhaustedError, NumericError
from .optim import Adam
from .render import NetworkField, SampleSpec, color_loss, render_and_grad, render_rays
from .rgn import RayGenerator

log = logging.getLogger(__name__)

METHODS = ("meil", "incre", "joint", "ewc", "packnet", "replay")
SCHEDULES = ("S1", "S2", "S3", "S4", "S5")

_STREAM_CURRENT, _STREAM_PAST, _STREAM_AUX = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    m_c: int = 1024
    m_p: int = 512
    iterations_per_view: int = 500
    lr: float = 5e-4
    lr_final_ratio: float = 1.0
    eps_charbonnier: float = 1e-3
    lambda_schedule: object = "S2"
    past_loss: str = "charbonnier"
    sample: SampleSpec = field(default_factory=SampleSpec)
    seed: int = 0

    def __post_init__(self):
        if self.m_c < 1 or self.m_p < 0:
            raise ValueError("need m_c >= 1 and m_p >= 0")
        if not self.eps_charbonnier > 0:
            raise ValueError("Charbonnier epsilon must be positive")
        if not (isinstance(self.lambda_schedule, (int, float)) or self.lambda_schedule in SCHEDULES):
            raise ValueError(f"unknown lambda schedule {self.lambda_schedule!r}")

    def iterations(self, N):
        return self.iterations_per_view * N

    def replace(self, **kw):
        return replace(self, **kw)


def task_rng(seed, t, stream):
    return np.random.default_rng([int(seed), int(t), int(stream)])


# -- loss pieces ---------------------------------------------------------


def lambda_p(schedule, r):
    """Weight of the past-task term at task progress ``r`` in [0, 1].

    S2 and S3 are the raised-cosine forms that climb from 0 to 1.
    """
    if not 0 <= r <= 1:
        raise ValueError("progress must lie in [0, 1]")
    if isinstance(schedule, (int, float)) and not isinstance(schedule, bool):
        return float(schedule)
    if schedule == "S1":
        return float(np.cos(np.pi / 2 * (1 - r)))
    if schedule == "S2":
        return float((1 + np.cos(np.pi * (1 + r))) / 2)
    if schedule == "S3":
        return float((1 + np.cos(np.pi * (1 + 3 * r))) / 2)
    if schedule == "S4":
        return float(10 ** np.cos(np.pi * (1 + 1.5 * r)))
    if schedule == "S5":
        return float(10 ** np.cos(np.pi * (1 + 3.5 * r)))
    raise ValueError(f"unknown schedule {schedule!r}")


def charbonnier(x, eps):
    """``sqrt(|x|^2 + eps^2)`` over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=-1) + eps * eps)


def meil_loss(pred_c, gt_c, pred_p, distilled_p, lam, eps):
    """Current-task squared error plus weighted Charbonnier on distilled colours."""
    cur = float(np.sum((np.asarray(pred_c) - gt_c) ** 2) / len(pred_c))
    if pred_p is None or len(pred_p) == 0:
        return cur
    return cur + lam * float(np.sum(charbonnier(np.asarray(pred_p) - distilled_p, eps)) / len(pred_p))


# -- data sampling -------------------------------------------------------


def sample_current_batch(task, m_c, rng, replace=True):
    """``m_c`` pixels drawn uniformly over all views of ``task``."""
    return sample_pixels([task], m_c, rng, replace)


def sample_pixels(tasks, m, rng, replace=True):
    rays, cols = zip(*(t.all_rays() for t in tasks))
    if len(tasks) == 1:
        rays, cols = rays[0], cols[0]
    else:
        rays, cols = Ray.concat(rays), np.concatenate(cols)
    n = len(cols)
    if replace:
        idx = rng.integers(0, n, size=m)
    else:
        if m > n:
            raise ValueError(f"cannot draw {m} distinct pixels from {n}")
        idx = rng.permutation(n)[:m]
    return rays[idx], cols[idx]


# -- method state --------------------------------------------------------


@dataclass
class MEILAux:
    teacher: mlp.ParamSet | None = None
    rgn: RayGenerator | None = None
    past_rays: Ray | None = None  # only for the ground-truth-ray ablation

    def nbytes(self, net_bytes):
        # the teacher is a copy of the live network, stored from task 1 on
        rgn = self.rgn.nbytes if self.rgn is not None else 0
        gt = 0 if self.past_rays is None else self.past_rays.origin.size * 8 * 2
        return net_bytes + rgn + gt


@dataclass
class EWCAux:
    fisher: np.ndarray | None = None
    anchor: np.ndarray | None = None
    weight: float = 0.0

    def nbytes(self, net_bytes):
        return 2 * net_bytes + np.dtype(np.float32).itemsize


@dataclass
class PackNetAux:
    owner: np.ndarray | None = None  # 0 = free, t = frozen for task t

    def nbytes(self, net_bytes):
        return 0 if self.owner is None else int(self.owner.nbytes)


@dataclass
class ReplayAux:
    capacity: int = 0
    origins: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    directions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    record_bytes: int = 9 * 4

    def __len__(self):
        return len(self.colors)

    def nbytes(self, net_bytes):
        return len(self) * self.record_bytes


@dataclass
class MethodState:
    kind: str
    net: mlp.NetworkConfig
    nerf: mlp.ParamSet
    aux: object = None
    T: int = 0
    seen: list = field(default_factory=list)  # joint training only
    losses: list = field(default_factory=list)

    def aux_bytes(self):
        if self.aux is None:
            return 0
        return int(self.aux.nbytes(mlp.param_bytes(self.nerf)))


def new_state(kind, net, seed, **opts):
    if kind not in METHODS:
        raise ValueError(f"unknown method {kind!r}; choose from {METHODS}")
    params = mlp.init_network(net, np.random.default_rng([int(seed), 0, 9]))
    aux = None
    if kind == "meil":
        aux = MEILAux(teacher=mlp.snapshot(params, 0), rgn=RayGenerator(
            n_steps=opts.get("rgn_steps", 2000), lr=opts.get("rgn_lr", 1e-3), random_state=int(seed)))
    elif kind == "ewc":
        aux = EWCAux(np.zeros_like(params.data), params.data.copy(), opts.get("ewc_weight", "auto"))
    elif kind == "packnet":
        aux = PackNetAux(np.zeros(params.size, dtype=np.uint8))
    elif kind == "replay":
        aux = ReplayAux(capacity=int(opts.get("capacity", 0)))
    return MethodState(kind, net, params, aux)


# -- the shared loop -----------------------------------------------------


class TrainingDiverged(NumericError):
    def __init__(self, message, last_good, diagnostics=None):
        super().__init__(message, diagnostics)
        self.last_good = last_good


def _optimize(state, cfg, n_iter, step_fn, mask=None):
    """Run ``n_iter`` Adam steps; ``step_fn(it, progress) -> (loss, grad)``.

    Optimizer moments start fresh for every call.
    """
    theta = state.nerf.data
    # float64 moments: float32 second moments of dead units decay into subnormals, which are very slow
    opt = Adam(theta.size, lr=cfg.lr, dtype=np.float64)
    last_good = None
    for it in range(n_iter):
        if it % 500 == 0:
            last_good = state.nerf.copy()
        r = it / (n_iter - 1) if n_iter > 1 else 1.0
        try:
            loss, grad = step_fn(it, r)
        except NumericError as exc:
            raise TrainingDiverged(str(exc), last_good, {"iteration": it, **exc.diagnostics}) from exc
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise TrainingDiverged("non-finite loss or gradient", last_good, {"iteration": it, "loss": loss})
        lr = cfg.lr * cfg.lr_final_ratio ** r
        opt.step(theta, grad, mask=mask, lr=lr)
        state.losses.append(loss)
    return state


def _current_step(state, cfg, sample, rng):
    spec = cfg.sample

    def step(it, r):
        rays, cols = sample(rng)
        loss, grad, _ = render_and_grad(
            state.nerf, state.net, rays, spec, rng, lambda p: color_loss(p, cols, "l2"))
        return loss, grad.data

    return step


def _with_extra(step, extra):
    def combined(it, r):
        loss, grad = step(it, r)
        extra_loss, extra_grad = extra(it, r)
        if extra_grad is None:
            return loss, grad
        return loss + extra_loss, grad + extra_grad

    return combined


def _start_task(state, task, kind):
    if state.kind != kind:
        raise ValueError(f"state is for {state.kind!r}, not {kind!r}")
    if task.index != state.T + 1:
        raise ValueError(f"expected task {state.T + 1}, got task {task.index}")


# -- methods -------------------------------------------------------------


def train_task_incre(state, task, cfg):
    """Current-task squared error only."""
    _start_task(state, task, "incre")
    rng = task_rng(cfg.seed, task.index, _STREAM_CURRENT)
    step = _current_step(state, cfg, lambda g: sample_current_batch(task, cfg.m_c, g), rng)
    _optimize(state, cfg, cfg.iterations(task.N), step)
    state.T = task.index
    return state


def train_task_joint(state, task, cfg):
    """Batches drawn uniformly over every task seen so far.

    The iteration budget counts every view trained on, so each view gets
    ``iterations_per_view`` steps' worth at every task.
    """
    _start_task(state, task, "joint")
    state.seen.append(task)
    seen = list(state.seen)
    rng = task_rng(cfg.seed, task.index, _STREAM_CURRENT)
    step = _current_step(state, cfg, lambda g: sample_pixels(seen, cfg.m_c, g), rng)
    _optimize(state, cfg, cfg.iterations(sum(t.N for t in seen)), step)
    state.T = task.index
    return state


def _random_rays(bounds, m, rng):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    o = rng.uniform(lo, hi, size=(m, 3))
    d = rng.standard_normal((m, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Ray(o, d)


def train_task_meil(state, task, cfg, past_rays="rgn", random_bounds=None):
    """Self-distillation against a frozen copy of the previous network.

    ``past_rays`` chooses where past query rays come from: the ray generator
    (``"rgn"``), stored pixel rays of earlier views (``"gt"``) or uniformly
    random rays inside ``random_bounds`` (``"random"``).
    """
    _start_task(state, task, "meil")
    T = task.index
    aux = state.aux
    aux.teacher = mlp.snapshot(state.nerf, T - 1)
    teacher = aux.teacher
    teacher_sum = teacher.checksum()
    rng_c = task_rng(cfg.seed, T, _STREAM_CURRENT)
    rng_p = task_rng(cfg.seed, T, _STREAM_PAST)
    spec = cfg.sample
    intr = task.intrinsics

    def draw_past(m):
        if past_rays == "rgn":
            return aux.rgn.sample_rays(intr, m, rng_p)
        if past_rays == "gt":
            idx = rng_p.integers(0, len(aux.past_rays.origin), size=m)
            return aux.past_rays[idx]
        if past_rays == "random":
            return _random_rays(random_bounds, m, rng_p)
        raise ValueError(f"unknown past ray source {past_rays!r}")

    def past_term(it, r):
        lam = lambda_p(cfg.lambda_schedule, r)
        if T == 1 or lam == 0 or cfg.m_p == 0:
            return 0.0, None
        rays = draw_past(cfg.m_p)
        assert teacher.version < T
        target = render_rays(NetworkField(teacher, state.net), rays, spec, rng_p).color
        loss, grad, _ = render_and_grad(
            state.nerf, state.net, rays, spec, rng_p,
            lambda p: _scaled(color_loss(p, target, cfg.past_loss, cfg.eps_charbonnier), lam))
        return loss, grad.data

    step = _current_step(state, cfg, lambda g: sample_current_batch(task, cfg.m_c, g), rng_c)
    _optimize(state, cfg, cfg.iterations(task.N), _with_extra(step, past_term))
    if teacher.checksum() != teacher_sum:
        raise AssertionError("frozen snapshot changed during training")

    principals = Ray.concat([principal_ray(intr, p) for p in task.poses])
    aux.rgn.partial_fit(principals, task.N)
    if past_rays == "gt":
        cur = task.all_rays()[0]
        aux.past_rays = cur if aux.past_rays is None else Ray.concat([aux.past_rays, cur])
    state.T = T
    return state


def _scaled(loss_grad, lam):
    loss, g = loss_grad
    return lam * loss, lam * g


def estimate_fisher(state, task, cfg, n_batches=32):
    """Mean squared batch gradient of the rendering loss on ``task``."""
    rng = task_rng(cfg.seed, task.index, _STREAM_AUX)
    fisher = np.zeros_like(state.nerf.data)
    for _ in range(n_batches):
        rays, cols = sample_current_batch(task, cfg.m_c, rng)
        _, grad, _ = render_and_grad(
            state.nerf, state.net, rays, cfg.sample, rng, lambda p: color_loss(p, cols, "l2"))
        fisher += grad.data * grad.data
    return fisher / n_batches


def train_task_ewc(state, task, cfg, ewc_weight=None, fisher_batches=32):
    """Quadratic penalty ``weight * sum F (theta - anchor)^2`` on top of the
    current-task loss. ``ewc_weight="auto"`` picks the weight after the first
    1% of iterations so the penalty is 10% of the rendering loss."""
    _start_task(state, task, "ewc")
    aux = state.aux
    if ewc_weight is not None:
        aux.weight = ewc_weight
    rng = task_rng(cfg.seed, task.index, _STREAM_CURRENT)
    step = _current_step(state, cfg, lambda g: sample_current_batch(task, cfg.m_c, g), rng)
    theta = state.nerf.data
    n_iter = cfg.iterations(task.N)
    calib_at = max(1, n_iter // 100)
    recent = []

    def combined(it, r):
        loss, grad = step(it, r)
        if task.index == 1:
            return loss, grad
        if aux.weight == "auto":
            if it < calib_at:
                recent.append(loss)
                return loss, grad
            raw = float(np.sum(aux.fisher * (theta - aux.anchor) ** 2))
            aux.weight = 0.1 * float(np.mean(recent)) / raw if raw > 0 else 0.0
            log.info("EWC weight calibrated to %.3g", aux.weight)
        if aux.weight == 0:
            return loss, grad
        diff = theta - aux.anchor
        penalty = aux.weight * float(np.sum(aux.fisher * diff * diff))
        return loss + penalty, grad + (2 * aux.weight * aux.fisher * diff).astype(theta.dtype)

    _optimize(state, cfg, n_iter, combined)
    new_f = estimate_fisher(state, task, cfg, fisher_batches)
    aux.fisher = (aux.fisher + new_f).astype(theta.dtype)
    aux.anchor = theta.copy()
    state.T = task.index
    return state


def packnet_layer_ranges(params):
    """``(start, stop)`` of each layer's weights+bias in the flat buffer."""
    out, k = [], 0
    for o, i in params.shapes:
        out.append((k, k + o * i + o))
        k += o * i + o
    return out


def packnet_params(state, t):
    """Parameters visible to task ``t``: those frozen for tasks ``<= t``."""
    owner = state.aux.owner
    keep = (owner > 0) & (owner <= t)
    return mlp.ParamSet(state.nerf.shapes, np.where(keep, state.nerf.data, 0).astype(state.nerf.dtype))


def train_task_packnet(state, task, cfg, prune_rate=0.5, retrain_fraction=0.2):
    """Train the free parameters, prune ``prune_rate`` of them per layer by
    magnitude, retrain the survivors, then freeze them for this task.

    Per layer, ``floor(prune_rate * n_free)`` parameters are released, so
    after ``t`` tasks about ``total * prune_rate**t`` remain free.
    """
    _start_task(state, task, "packnet")
    owner = state.aux.owner
    free = owner == 0
    if not free.any():
        raise CapacityExhaustedError("no free parameters left for a new task")
    theta = state.nerf.data
    # released weights restart from zero; they were masked out for old tasks
    if task.index > 1:
        init = mlp.init_network(state.net, task_rng(cfg.seed, task.index, _STREAM_AUX), theta.dtype)
        theta[free] = init.data[free]
    visible = (owner > 0) | free
    n_iter = cfg.iterations(task.N)
    n_retrain = int(round(n_iter * retrain_fraction))
    rng = task_rng(cfg.seed, task.index, _STREAM_CURRENT)

    def masked_step(active):
        def step(it, r):
            rays, cols = sample_current_batch(task, cfg.m_c, rng)
            params = mlp.ParamSet(state.nerf.shapes, np.where(active, theta, 0).astype(theta.dtype))
            loss, grad, _ = render_and_grad(
                params, state.net, rays, cfg.sample, rng, lambda p: color_loss(p, cols, "l2"))
            return loss, grad.data

        return step

    _optimize(state, cfg, n_iter - n_retrain, masked_step(visible), mask=free)

    keep = np.zeros_like(free)
    for a, b in packnet_layer_ranges(state.nerf):
        idx = np.flatnonzero(free[a:b]) + a
        n_prune = int(np.floor(prune_rate * len(idx)))
        order = idx[np.argsort(np.abs(theta[idx]), kind="stable")]
        keep[order[n_prune:]] = True
    pruned = free & ~keep
    theta[pruned] = 0
    visible = (owner > 0) | keep
    if n_retrain:
        _optimize(state, cfg, n_retrain, masked_step(visible), mask=keep)
    owner[keep] = task.index
    state.T = task.index
    return state


def select_exemplars(losses, k, rng):
    """``k`` indices without replacement, with probability proportional to loss."""
    losses = np.asarray(losses, dtype=np.float64)
    k = min(int(k), len(losses))
    if k == 0:
        return np.zeros(0, dtype=int)
    w = np.maximum(losses, 0) + 1e-12
    return rng.choice(len(losses), size=k, replace=False, p=w / w.sum())


def train_task_replay(state, task, cfg, capacity_per_task=None):
    """Rehearse stored ground-truth exemplars alongside the current task."""
    _start_task(state, task, "replay")
    aux = state.aux
    if capacity_per_task is not None:
        aux.capacity = int(capacity_per_task)
    if aux.capacity == 0:
        log.warning("replay capacity is 0; training reduces to incremental")
    rng_c = task_rng(cfg.seed, task.index, _STREAM_CURRENT)
    rng_p = task_rng(cfg.seed, task.index, _STREAM_PAST)
    spec = cfg.sample

    def replay_term(it, r):
        if len(aux) == 0 or cfg.m_p == 0:
            return 0.0, None
        idx = rng_p.integers(0, len(aux), size=cfg.m_p)
        rays = Ray(aux.origins[idx].astype(np.float64), aux.directions[idx].astype(np.float64))
        loss, grad, _ = render_and_grad(
            state.nerf, state.net, rays, spec, rng_p, lambda p: color_loss(p, aux.colors[idx], "l2"))
        return loss, grad.data

    step = _current_step(state, cfg, lambda g: sample_current_batch(task, cfg.m_c, g), rng_c)
    _optimize(state, cfg, cfg.iterations(task.N), _with_extra(step, replay_term))

    if aux.capacity:
        rays, cols = task.all_rays()
        rng_a = task_rng(cfg.seed, task.index, _STREAM_AUX)
        pred = render_rays(NetworkField(state.nerf, state.net), rays, spec.replace(stratified=False)).color
        per_ray = np.sum((pred - cols) ** 2, axis=1)
        idx = select_exemplars(per_ray, aux.capacity, rng_a)
        aux.origins = np.concatenate([aux.origins, rays.origin[idx].astype(np.float32)])
        aux.directions = np.concatenate([aux.directions, rays.direction[idx].astype(np.float32)])
        aux.colors = np.concatenate([aux.colors, cols[idx].astype(np.float32)])
    state.T = task.index
    return state


def train_task(state, task, cfg, **opts):
    """Dispatch to the method-specific trainer."""
    kind = state.kind
    if kind == "incre":
        return train_task_incre(state, task, cfg)
    if kind == "joint":
        return train_task_joint(state, task, cfg)
    if kind == "meil":
        return train_task_meil(state, task, cfg, opts.get("past_rays", "rgn"), opts.get("random_bounds"))
    if kind == "ewc":
        return train_task_ewc(state, task, cfg, opts.get("ewc_weight"), opts.get("fisher_batches", 32))
    if kind == "packnet":
        return train_task_packnet(state, task, cfg, opts.get("prune_rate", 0.5))
    if kind == "replay":
        return train_task_replay(state, task, cfg, opts.get("capacity"))
    raise ValueError(f"unknown method {kind!r}")


def eval_params(state, t):
    """Parameters used to render task ``t``."""
    if state.kind == "packnet":
        return packnet_params(state, t)
    return state.nerf
