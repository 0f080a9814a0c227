"""Estimator front end: one incremental radiance field trained task by task."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import mlp, trainers
from .camera import Ray
from .exceptions import ConfigurationError
from .metrics import ms_ssim, psnr
from .render import NetworkField, SampleSpec, render_image, render_rays


class IncrementalNeRF(BaseEstimator):
    """Radiance field learned from a stream of tasks.

    ``partial_fit`` consumes one :class:`~incnerf.scenes.Task` at a time and
    never sees earlier tasks again (``method="joint"`` is the exception, it
    keeps them as an upper bound). Hyper-parameters are flat so they can be
    read and set through ``get_params``/``set_params``.

    Parameters
    ----------
    method : {"meil", "incre", "joint", "ewc", "packnet", "replay"}
    depth, width, L_pos, L_dir, pos_scale : network shape and encoding
    n_samples, z_near, z_far : samples per ray and the integration range
    m_c, m_p : current and past rays per iteration
    iterations_per_view : optimizer steps per view (a task runs this times N)
    lr, lr_final_ratio : Adam step size, decayed geometrically to ``lr * lr_final_ratio``
    lambda_schedule : "S1".."S5" or a constant weight for the past term
    eps_charbonnier : Charbonnier epsilon
    past_rays : "rgn", "gt" or "random" (distillation only)
    random_bounds : box for ``past_rays="random"``
    ewc_weight : float or "auto"
    prune_rate : fraction of free weights released per task (packnet)
    capacity : exemplars kept per task (replay)
    random_state : int
    """

    def __init__(self, method="meil", depth=3, width=64, L_pos=6, L_dir=2, pos_scale=0.25,
                 n_samples=24, z_near=1.0, z_far=5.5, m_c=128, m_p=64, iterations_per_view=500,
                 lr=2e-3, lr_final_ratio=0.1, lambda_schedule="S2", eps_charbonnier=1e-3,
                 past_rays="rgn", random_bounds=None, ewc_weight="auto", prune_rate=0.5,
                 capacity=0, random_state=0):
        self.method = method
        self.depth = depth
        self.width = width
        self.L_pos = L_pos
        self.L_dir = L_dir
        self.pos_scale = pos_scale
        self.n_samples = n_samples
        self.z_near = z_near
        self.z_far = z_far
        self.m_c = m_c
        self.m_p = m_p
        self.iterations_per_view = iterations_per_view
        self.lr = lr
        self.lr_final_ratio = lr_final_ratio
        self.lambda_schedule = lambda_schedule
        self.eps_charbonnier = eps_charbonnier
        self.past_rays = past_rays
        self.random_bounds = random_bounds
        self.ewc_weight = ewc_weight
        self.prune_rate = prune_rate
        self.capacity = capacity
        self.random_state = random_state

    # -- configuration ---------------------------------------------------

    def network_config(self):
        return mlp.NetworkConfig(mlp.EncodingConfig(self.L_pos, self.L_dir, True),
                                 depth=self.depth, width=self.width, pos_scale=self.pos_scale)

    def sample_spec(self, stratified=True):
        return SampleSpec(P=self.n_samples, z_near=self.z_near, z_far=self.z_far, stratified=stratified)

    def train_config(self):
        try:
            return trainers.TrainConfig(
                m_c=self.m_c, m_p=self.m_p, iterations_per_view=self.iterations_per_view, lr=self.lr,
                lr_final_ratio=self.lr_final_ratio, eps_charbonnier=self.eps_charbonnier,
                lambda_schedule=self.lambda_schedule, sample=self.sample_spec(), seed=self.random_state)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    def method_options(self):
        opts = {"past_rays": self.past_rays, "random_bounds": self.random_bounds,
                "ewc_weight": self.ewc_weight, "prune_rate": self.prune_rate, "capacity": self.capacity}
        if self.method == "meil" and self.past_rays == "random" and self.random_bounds is None:
            raise ConfigurationError("past_rays='random' needs random_bounds")
        return opts

    def _validate(self):
        if self.method not in trainers.METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {trainers.METHODS}")
        if self.method == "packnet" and not 0 < self.prune_rate < 1:
            raise ConfigurationError("prune_rate must lie in (0, 1)")
        if self.capacity < 0:
            raise ConfigurationError("capacity must be >= 0")
        if not 0 < self.z_near < self.z_far:
            raise ConfigurationError("need 0 < z_near < z_far")

    # -- fitting ---------------------------------------------------------

    def _init_state(self):
        self._validate()
        self.state_ = trainers.new_state(self.method, self.network_config(), self.random_state,
                                         **self.method_options())

    def partial_fit(self, task):
        """Train on the next task; its ``index`` must follow the last one seen."""
        if not hasattr(self, "state_"):
            self._init_state()
        trainers.train_task(self.state_, task, self.train_config(), **self.method_options())
        self.n_tasks_ = self.state_.T
        return self

    def fit(self, tasks):
        """Train from scratch on ``tasks`` in order."""
        self._init_state()
        for task in tasks:
            self.partial_fit(task)
        return self

    # -- inference -------------------------------------------------------

    def _field(self, task_index=None):
        check_is_fitted(self, "state_")
        t = self.state_.T if task_index is None else int(task_index)
        return NetworkField(trainers.eval_params(self.state_, t), self.state_.net)

    def predict(self, rays, task_index=None):
        """Colours ``(n, 3)`` of ``rays`` rendered with midpoint samples.

        ``rays`` is a :class:`~incnerf.camera.Ray` or an ``(n, 6)`` array of
        origin and direction. ``task_index`` only matters for methods that keep
        per-task parameters.
        """
        field = self._field(task_index)
        if not isinstance(rays, Ray):
            arr = np.asarray(rays, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 6:
                raise ValueError("rays must be a Ray or an (n, 6) array")
            norm = np.linalg.norm(arr[:, 3:], axis=1, keepdims=True)
            if np.any(norm == 0):
                raise ValueError("ray directions must be non-zero")
            rays = Ray(arr[:, :3], arr[:, 3:] / norm)
        return render_rays(field, rays, self.sample_spec(False)).color

    def render(self, intr, pose, task_index=None, n_jobs=1):
        return render_image(self._field(task_index), intr, pose, self.sample_spec(False), n_jobs=n_jobs)

    def evaluate(self, task, n_jobs=1, with_msssim=True):
        """Mean PSNR and MS-SSIM over the task's views."""
        ps, ss = [], []
        for pose, img in zip(task.poses, task.images):
            pred = np.clip(self.render(task.intrinsics, pose, task.index, n_jobs), 0, 1)
            ps.append(psnr(pred, img))
            if with_msssim:
                ss.append(ms_ssim(pred, img))
        return float(np.mean(ps)), (float(np.mean(ss)) if with_msssim else float("nan"))

    def score(self, task):
        """Mean PSNR in dB over the task's views."""
        return self.evaluate(task, with_msssim=False)[0]

    @property
    def aux_bytes_(self):
        check_is_fitted(self, "state_")
        return self.state_.aux_bytes()
