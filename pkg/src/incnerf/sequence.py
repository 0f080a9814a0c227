"""Task-sequence driver: train, evaluate every seen task, log, checkpoint."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mlp, trainers
from .camera import Ray
from .estimator import IncrementalNeRF
from .exceptions import DatasetError

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "T_trained", "t_eval", "psnr_db", "msssim", "aux_bytes", "wall_s")


@dataclass
class MetricsLog:
    """One row per (trained-through task ``T``, evaluated task ``t <= T``)."""

    rows: list = field(default_factory=list)

    def add(self, method, T, t, psnr_db, msssim, aux_bytes, wall_s):
        self.rows.append({"method": method, "T_trained": int(T), "t_eval": int(t),
                          "psnr_db": float(psnr_db), "msssim": float(msssim),
                          "aux_bytes": int(aux_bytes), "wall_s": float(wall_s)})

    def __len__(self):
        return len(self.rows)

    def methods(self):
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def select(self, method=None, T=None, t=None):
        return [r for r in self.rows
                if (method is None or r["method"] == method)
                and (T is None or r["T_trained"] == T)
                and (t is None or r["t_eval"] == t)]

    def matrix(self, method, metric="psnr_db"):
        """``M[T-1, t-1]``; NaN where ``t > T``."""
        rows = self.select(method)
        n = max(r["T_trained"] for r in rows)
        M = np.full((n, n), np.nan)
        for r in rows:
            M[r["T_trained"] - 1, r["t_eval"] - 1] = r[metric]
        return M

    def aux_series(self, method):
        return {r["T_trained"]: r["aux_bytes"] for r in self.select(method)}

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({**r, "psnr_db": f"{r['psnr_db']:.6f}", "msssim": f"{r['msssim']:.6f}",
                        "wall_s": f"{r['wall_s']:.3f}"})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path):
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.add(r["method"], r["T_trained"], r["t_eval"], r["psnr_db"], r["msssim"],
                        r["aux_bytes"], r["wall_s"])
        return out

    def extend(self, other):
        self.rows.extend(other.rows)
        return self


# -- checkpoints ---------------------------------------------------------


def _arr(x, dtype=None):
    return np.zeros(0, dtype or np.float32) if x is None else np.asarray(x)


def save_checkpoint(est, directory):
    """Write ``task<T>.params`` and ``task<T>.aux.npz`` for the estimator's state."""
    state = est.state_
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T = state.T
    ps = mlp.ParamSet(state.nerf.shapes, state.nerf.data, version=T)
    (d / f"task{T}.params").write_bytes(ps.to_bytes())
    aux, blob = state.aux, {"kind": np.array(state.kind)}
    if isinstance(aux, trainers.MEILAux):
        blob["teacher"] = np.frombuffer(aux.teacher.to_bytes(), np.uint8)
        if hasattr(aux.rgn, "net_"):
            blob["rgn"] = np.frombuffer(aux.rgn.to_bytes(), np.uint8)
            blob["rgn_N"] = np.array(aux.rgn.views_per_task_)
        if aux.past_rays is not None:
            blob["past_origin"] = aux.past_rays.origin
            blob["past_direction"] = aux.past_rays.direction
    elif isinstance(aux, trainers.EWCAux):
        blob.update(fisher=aux.fisher, anchor=aux.anchor, weight=np.array(str(aux.weight)))
    elif isinstance(aux, trainers.PackNetAux):
        blob["owner"] = aux.owner
    elif isinstance(aux, trainers.ReplayAux):
        blob.update(capacity=np.array(aux.capacity), origins=aux.origins,
                    directions=aux.directions, colors=aux.colors)
    with open(d / f"task{T}.aux.npz", "wb") as fh:
        np.savez(fh, **blob)
    return d / f"task{T}.params"


def latest_checkpoint(directory):
    d = Path(directory)
    done = sorted(int(p.name[4:-7]) for p in d.glob("task*.params")
                  if p.name[4:-7].isdigit() and (d / f"task{p.name[4:-7]}.aux.npz").exists())
    return done[-1] if done else 0


def load_checkpoint(est, directory, T, tasks=()):
    """Restore ``est`` to its state after task ``T``.

    ``tasks`` supplies the already-seen tasks that joint training keeps.
    """
    d = Path(directory)
    try:
        ps = mlp.ParamSet.from_bytes((d / f"task{T}.params").read_bytes())
        blob = np.load(d / f"task{T}.aux.npz")
    except FileNotFoundError as exc:
        raise DatasetError(f"missing checkpoint file {exc.filename}") from exc
    est._init_state()
    state = est.state_
    if str(blob["kind"]) != state.kind:
        raise DatasetError(f"checkpoint in {d} is for {blob['kind']}, not {state.kind}")
    state.nerf.data[...] = ps.data
    state.T = T
    aux = state.aux
    if state.kind == "meil":
        aux.teacher = mlp.ParamSet.from_bytes(blob["teacher"].tobytes())
        if "rgn" in blob:
            aux.rgn.load_bytes(blob["rgn"].tobytes(), int(blob["rgn_N"]))
        if "past_origin" in blob:
            aux.past_rays = Ray(blob["past_origin"], blob["past_direction"])
    elif state.kind == "ewc":
        aux.fisher, aux.anchor = blob["fisher"], blob["anchor"]
        w = str(blob["weight"])
        aux.weight = w if w == "auto" else float(w)
    elif state.kind == "packnet":
        aux.owner = blob["owner"].copy()
    elif state.kind == "replay":
        aux.capacity = int(blob["capacity"])
        aux.origins, aux.directions, aux.colors = blob["origins"], blob["directions"], blob["colors"]
    elif state.kind == "joint":
        state.seen = list(tasks[:T])
    est.n_tasks_ = T
    return est


# -- the driver ----------------------------------------------------------


def run_sequence(tasks, estimator, name=None, checkpoint_dir=None, csv_path=None, resume=False,
                 deterministic=False, with_msssim=True, n_jobs=1, eval_sets=None):
    """Train ``estimator`` on ``tasks`` in order, evaluating all seen tasks after each.

    The log is rewritten to ``csv_path`` after every task so an aborted run
    keeps its finished rows. With ``resume`` the run restarts after the last
    checkpoint in ``checkpoint_dir``. ``deterministic`` records wall time as 0.
    ``eval_sets`` (one per task, e.g. from :func:`~incnerf.scenes.holdout_split`)
    replaces the training views for evaluation.
    """
    if not tasks:
        raise ValueError("need at least one task")
    name = name or estimator.method
    logbook = MetricsLog()
    start = 0
    if resume and checkpoint_dir is not None:
        start = latest_checkpoint(checkpoint_dir)
        if start:
            load_checkpoint(estimator, checkpoint_dir, start, tasks)
            if csv_path is not None and Path(csv_path).exists():
                logbook.rows = [r for r in MetricsLog.from_csv(csv_path).rows
                                if r["method"] == name and r["T_trained"] <= start]
            log.info("%s: resuming after task %d", name, start)
    if not start:
        estimator._init_state()
    for task in tasks[start:]:
        t0 = time.perf_counter()
        estimator.partial_fit(task)
        wall = 0.0 if deterministic else time.perf_counter() - t0
        aux = estimator.aux_bytes_
        for past in (eval_sets or tasks)[:task.index]:
            p, s = estimator.evaluate(past, n_jobs=n_jobs, with_msssim=with_msssim)
            logbook.add(name, task.index, past.index, p, s, aux, wall)
        log.info("%s: task %d done, task-1 PSNR %.2f dB", name, task.index,
                 logbook.select(name, task.index, 1)[0]["psnr_db"])
        if checkpoint_dir is not None:
            save_checkpoint(estimator, checkpoint_dir)
        if csv_path is not None:
            logbook.to_csv(csv_path)
    return logbook
