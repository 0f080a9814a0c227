"""Command line: ``incnerf {generate,train,eval,report}``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence, 4 I/O error.
Set ``INCNERF_NUM_THREADS`` to cap BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import ExperimentConfig
from .datasets import dataset_hash, load_dataset, save_dataset
from .estimator import IncrementalNeRF
from .exceptions import ConfigurationError, DatasetError, NumericError
from .scenes import build_tasks
from .sequence import MetricsLog, latest_checkpoint, load_checkpoint, run_sequence

log = logging.getLogger("incnerf")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "INCNERF_NUM_THREADS"


def _thread_limit(deterministic):
    n = os.environ.get(THREADS_ENV)
    if n is None and not deterministic:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n) if n else 1)


def _write_provenance(out, cfg, extra=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(cfg.to_yaml())
    record = {"config_sha256": cfg.hash(), "seed": cfg.seed, "deterministic": cfg.deterministic,
              "incnerf": __version__, "numpy": np.__version__, "python": platform.python_version()}
    record.update(extra or {})
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_cfg(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    return cfg.with_overrides(seed=args.seed, out=args.out, deterministic=args.deterministic)


# -- generate --------------------------------------------------------------


def cmd_generate(cfg):
    scene = cfg.scene()
    tasks = build_tasks(scene, cfg.trajectory(), cfg.intrinsics())
    root = cfg.dataset_dir()
    save_dataset(tasks, root, scene=scene)
    _write_provenance(root, cfg, {"dataset_sha256": dataset_hash(root)})
    log.info("wrote %d tasks of %d views to %s", len(tasks), tasks[0].N, root)
    return root


# -- train -----------------------------------------------------------------


def _train_one(cfg, run, tasks, resume):
    est = IncrementalNeRF(**cfg.estimator_params(run))
    run_dir = cfg.out / "runs" / run.name
    n_jobs = 1 if cfg.deterministic else cfg.raw["eval"]["n_jobs"]
    with _thread_limit(cfg.deterministic):
        run_sequence(tasks, est, name=run.name, checkpoint_dir=run_dir / "checkpoints",
                     csv_path=run_dir / "metrics.csv", resume=resume,
                     deterministic=cfg.deterministic, with_msssim=cfg.raw["eval"]["msssim"],
                     n_jobs=n_jobs)
    return run.name


def cmd_train(cfg, resume=True, parallel_methods=False):
    """Train every configured run; a diverging run is skipped, the others proceed."""
    root = cfg.dataset_dir()
    tasks = load_dataset(root)
    ds_hash = dataset_hash(root)
    _write_provenance(cfg.out, cfg, {"dataset_sha256": ds_hash, "dataset": str(root.resolve())})
    runs = cfg.runs()
    failed = []
    if parallel_methods and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=len(runs)) as pool:
            futs = {r.name: pool.submit(_train_one, cfg, r, tasks, resume) for r in runs}
            for name, fut in futs.items():
                try:
                    fut.result()
                except NumericError as exc:
                    log.error("%s diverged: %s", name, exc)
                    failed.append(name)
    else:
        for r in runs:
            try:
                _train_one(cfg, r, tasks, resume)
            except NumericError as exc:
                log.error("%s diverged: %s %s", r.name, exc, getattr(exc, "diagnostics", ""))
                failed.append(r.name)
    merged = MetricsLog()
    for r in runs:
        p = cfg.out / "runs" / r.name / "metrics.csv"
        if p.exists():
            merged.extend(MetricsLog.from_csv(p))
    merged.to_csv(cfg.out / "metrics.csv")
    return failed


# -- eval ------------------------------------------------------------------


def _restore(cfg, run, tasks):
    ckpt = cfg.out / "runs" / run.name / "checkpoints"
    T = latest_checkpoint(ckpt)
    if T == 0:
        raise DatasetError(f"no checkpoints for run {run.name} in {ckpt}")
    est = IncrementalNeRF(**cfg.estimator_params(run))
    return load_checkpoint(est, ckpt, T, tasks), T


def cmd_eval(cfg):
    """Re-evaluate the final checkpoint of every run on every task it saw."""
    tasks = load_dataset(cfg.dataset_dir())
    out = MetricsLog()
    for run in cfg.runs():
        est, T = _restore(cfg, run, tasks)
        for t in tasks[:T]:
            p, s = est.evaluate(t, with_msssim=cfg.raw["eval"]["msssim"])
            out.add(run.name, T, t.index, p, s, est.aux_bytes_, 0.0)
    out.to_csv(cfg.out / "eval.csv")
    return out


# -- report ----------------------------------------------------------------


def _fmt(x):
    return f"{x:.6f}"


def cmd_report(run_dirs, out):
    """Aggregate trained runs into the comparison tables and an image grid."""
    run_dirs = [Path(d) for d in run_dirs]
    provs = []
    for d in run_dirs:
        try:
            provs.append(json.loads((d / "provenance.json").read_text()))
        except FileNotFoundError:
            raise DatasetError(f"{d} has no provenance.json; is it a train output directory?") from None
    hashes = {p.get("dataset_sha256") for p in provs}
    if len(hashes) != 1:
        raise DatasetError(f"runs were trained on different datasets ({len(hashes)} distinct hashes); "
                           "refusing to aggregate")
    logbook = MetricsLog()
    for d in run_dirs:
        logbook.extend(MetricsLog.from_csv(d / "metrics.csv"))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    methods = logbook.methods()

    # final per-task quality, one row per evaluated task
    lines = ["t_eval," + ",".join(f"{m}_psnr_db,{m}_msssim" for m in methods)]
    finals = {m: max(r["T_trained"] for r in logbook.select(m)) for m in methods}
    n_tasks = max(finals.values())
    for t in range(1, n_tasks + 1):
        cells = []
        for m in methods:
            r = logbook.select(m, finals[m], t)
            cells += [_fmt(r[0]["psnr_db"]), _fmt(r[0]["msssim"])] if r else ["", ""]
        lines.append(f"{t}," + ",".join(cells))
    avg = []
    for m in methods:
        rs = logbook.select(m, finals[m])
        avg += [_fmt(np.mean([r["psnr_db"] for r in rs])), _fmt(np.mean([r["msssim"] for r in rs]))]
    lines.append("mean," + ",".join(avg))
    (out / "final_quality.csv").write_text("\n".join(lines) + "\n")

    # first task over training time
    lines = ["T_trained," + ",".join(methods)]
    for T in range(1, n_tasks + 1):
        cells = [logbook.select(m, T, 1) for m in methods]
        lines.append(f"{T}," + ",".join(_fmt(c[0]["psnr_db"]) if c else "" for c in cells))
    (out / "task1_over_time.csv").write_text("\n".join(lines) + "\n")

    # auxiliary memory per task
    lines = ["T_trained," + ",".join(methods)]
    for T in range(1, n_tasks + 1):
        series = [logbook.aux_series(m).get(T) for m in methods]
        lines.append(f"{T}," + ",".join("" if s is None else str(s) for s in series))
    (out / "aux_memory.csv").write_text("\n".join(lines) + "\n")

    _render_grid(run_dirs, provs, out / "task1_grid.png")
    (out / "provenance.json").write_text(json.dumps(
        {"dataset_sha256": hashes.pop(), "runs": [str(d) for d in run_dirs]}, indent=2) + "\n")
    return out


def _render_grid(run_dirs, provs, path):
    """Ground truth of the first view of task 1, then each run's final render of it."""
    cols = []
    tasks = None
    for d, prov in zip(run_dirs, provs):
        cfg = ExperimentConfig.load(d / "config.resolved.yaml")
        if tasks is None:
            tasks = load_dataset(prov.get("dataset", cfg.dataset_dir()))
            cols.append(tasks[0].images[0])
        for run in cfg.runs():
            try:
                est, _ = _restore(cfg.with_overrides(out=d), run, tasks)
            except DatasetError:
                continue
            cols.append(np.clip(est.render(tasks[0].intrinsics, tasks[0].poses[0], task_index=1), 0, 1))
    img = np.concatenate(cols, axis=1)
    Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)


# -- entry point -----------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="incnerf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults: reference benchmark)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true",
                        help="single-threaded, wall times recorded as 0")
        sp.add_argument("--out", help="output directory")

    common(sub.add_parser("generate", help="render the synthetic dataset"))
    tp = sub.add_parser("train", help="train every configured method")
    common(tp)
    tp.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints")
    tp.add_argument("--parallel-methods", action="store_true", help="one process per method")
    common(sub.add_parser("eval", help="re-evaluate final checkpoints"))
    rp = sub.add_parser("report", help="aggregate run directories into tables and a grid")
    rp.add_argument("runs", nargs="+", help="train output directories")
    rp.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.runs, args.out)
            return EXIT_OK
        cfg = _load_cfg(args)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "train":
            failed = cmd_train(cfg, resume=not args.no_resume, parallel_methods=args.parallel_methods)
            if failed:
                print(f"diverged: {', '.join(failed)}", file=sys.stderr)
                return EXIT_DIVERGED
        elif args.command == "eval":
            cmd_eval(cfg)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
