"""Ray generator: a tiny MLP mapping a scalar in [0, 1] to a past principal ray."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from . import mlp
from .camera import Ray, sample_nonprincipal
from .exceptions import NumericError
from .optim import Adam


def equally_spaced_inputs(T, N):
    """``T*N`` evenly spaced points from 0 to 1 inclusive."""
    n = int(T) * int(N)
    if n < 2:
        raise ValueError(f"need at least two grid points, got T*N = {n}")
    return np.arange(n) / (n - 1)


class RayGenerator(BaseEstimator):
    """Maps ``x`` in [0, 1] to ``(origin, unit direction)``.

    Each :meth:`partial_fit` call adds one task's principal rays: the
    generator's own predictions on the previous grid serve as targets for the
    old rays, so nothing but the network weights is kept between tasks.

    Parameters
    ----------
    hidden : tuple of int
        Hidden layer widths.
    L : int
        Frequency bands used to encode the scalar input.
    n_steps : int
        Full-batch optimizer steps per update.
    lr : float
        Learning rate.
    random_state : int, Generator or None
    """

    def __init__(self, hidden=(16, 64, 32), L=2, n_steps=2000, lr=1e-3, random_state=None):
        self.hidden = hidden
        self.L = L
        self.n_steps = n_steps
        self.lr = lr
        self.random_state = random_state

    def _shapes(self):
        dims = [1 + 2 * self.L, *self.hidden, 6]
        return [(o, i) for i, o in zip(dims[:-1], dims[1:])]

    def _encode(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return mlp.encode(x, self.L, True)

    def _raw(self, x):
        out, _ = mlp.mlp_forward(self.net_, self._encode(x))
        return out

    def _init(self):
        rng = check_random_state(self.random_state)
        seed = rng.randint(0, 2**31 - 1)
        self.net_ = mlp.init_params(self._shapes(), np.random.default_rng(seed), np.float64)
        self.n_tasks_ = 0
        self.views_per_task_ = None
        self.loss_history_ = []

    def predict(self, x):
        """Rays for inputs ``x``; directions are renormalized on read."""
        check_is_fitted(self, "net_")
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if np.any(x < 0) or np.any(x > 1):
            raise ValueError("generator inputs must lie in [0, 1]")
        raw = self._raw(x)
        d = raw[:, 3:]
        n = np.linalg.norm(d, axis=1, keepdims=True)
        if np.any(n < 1e-8):
            raise NumericError("degenerate direction from ray generator")
        return Ray(raw[:, :3].copy(), d / n)

    def partial_fit(self, principal_rays, N=None):
        """Add one task of principal rays (in arrival order) and retrain."""
        origins = np.atleast_2d(np.asarray(principal_rays.origin, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(principal_rays.direction, dtype=np.float64))
        N = len(origins) if N is None else int(N)
        if len(origins) != N:
            raise ValueError("principal ray count does not match N")
        if not hasattr(self, "net_"):
            self._init()
        elif N != self.views_per_task_:
            raise ValueError("views per task must stay constant across updates")
        T = self.n_tasks_ + 1
        targets = np.concatenate([origins, dirs], axis=1)
        if T > 1:
            past = self.predict(equally_spaced_inputs(T - 1, N))
            targets = np.concatenate([np.concatenate([past.origin, past.direction], axis=1), targets])
        x = equally_spaced_inputs(T, N)
        final = self._train(x, targets)
        self.n_tasks_ = T
        self.views_per_task_ = N
        self.loss_history_.append(final)
        return self

    def fit(self, principal_rays, N):
        """Train from scratch on a full ordered sequence of principal rays."""
        self._init()
        origins = np.atleast_2d(principal_rays.origin)
        for t in range(0, len(origins), N):
            self.partial_fit(principal_rays[t:t + N], N)
        return self

    def _train(self, x, targets):
        enc = self._encode(x)
        opt = Adam(self.net_.size, lr=self.lr, dtype=np.float64)
        n = len(x)
        loss = np.inf
        for _ in range(self.n_steps):
            out, cache = mlp.mlp_forward(self.net_, enc)
            r = out - targets
            loss = float(np.sum(r * r) / n)
            if not np.isfinite(loss):
                raise NumericError("ray generator loss diverged", {"loss": loss})
            grad = mlp.mlp_backward(self.net_, cache, 2 * r / n)
            opt.step(self.net_.data, grad.data)
        out, _ = mlp.mlp_forward(self.net_, enc)
        return float(np.sum((out - targets) ** 2) / n)

    @property
    def nbytes(self):
        """Storage of the weights; the same after every update."""
        if hasattr(self, "net_"):
            return mlp.param_bytes(self.net_)
        return mlp.param_bytes(mlp.ParamSet(self._shapes(), dtype=np.float64))

    def sample_rays(self, intr, m_p, rng):
        """``m_p`` rays scattered in the image cone around random principal rays."""
        if m_p < 1:
            raise ValueError("m_p must be positive")
        x = rng.random(m_p)
        s = rng.uniform(0.0, intr.s_max, m_p)
        th = rng.uniform(0.0, 2 * np.pi, m_p)
        return sample_nonprincipal(self.predict(x), intr, s, th)

    def to_bytes(self):
        check_is_fitted(self, "net_")
        ps = mlp.ParamSet(self.net_.shapes, self.net_.data, version=self.n_tasks_)
        return ps.to_bytes()

    def load_bytes(self, blob, N):
        ps = mlp.ParamSet.from_bytes(blob)
        self.net_ = mlp.ParamSet(ps.shapes, ps.data.copy())
        self.n_tasks_ = ps.version
        self.views_per_task_ = N
        self.loss_history_ = []
        return self


# functional aliases


def rgn_forward(rgn, x):
    ray = rgn.predict(np.atleast_1d(x))
    return ray if np.ndim(x) else ray[0]


def rgn_update(rgn, current_principals, T, N):
    if rgn.__dict__.get("n_tasks_", 0) != T - 1:
        raise ValueError(f"generator holds {rgn.__dict__.get('n_tasks_', 0)} tasks, cannot add task {T}")
    return rgn.partial_fit(current_principals, N)


def generate_past_rays(rgn, intr, m_p, rng):
    return rgn.sample_rays(intr, m_p, rng)
