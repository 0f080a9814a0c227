"""Experiment configuration: a YAML file, validated strictly before any compute."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .camera import Intrinsics
from .exceptions import ConfigurationError, DatasetError
from .scenes import SceneDef, TrajectorySpec, reference_scene
from .trainers import METHODS, SCHEDULES

# per-run keys that may differ between entries of ``methods``
RUN_KEYS = {"name", "method", "past_rays", "ewc_weight", "prune_rate", "capacity",
            "lambda_schedule", "m_p", "random_bounds"}

DEFAULTS = {
    "seed": 0,
    "deterministic": False,
    "out": "runs/reference",
    "dataset": None,
    "scene": "reference",
    "trajectory": {"kind": "orbit_arc", "T": 3, "N": 5, "arc_degrees": 90.0, "radius": 1.0,
                   "facing": "outward"},
    "intrinsics": {"f": 64.0, "W": 64, "H": 64},
    "methods": ["incre", "meil", "joint"],
    "network": {"depth": 3, "width": 64, "L_pos": 6, "L_dir": 2, "pos_scale": 0.25},
    "train": {"n_samples": 24, "m_c": 128, "m_p": 64, "iterations_per_view": 500, "lr": 2e-3,
              "lr_final_ratio": 0.1, "lambda_schedule": "S2", "eps_charbonnier": 1e-3},
    "eval": {"msssim": True, "n_jobs": 1},
}

_TRAJ_KEYS = set(TrajectorySpec.__dataclass_fields__)
_INTR_KEYS = {"f", "W", "H", "cx", "cy"}


def _check_keys(section, given, allowed):
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigurationError(f"unknown key(s) in {section}: {', '.join(map(str, extra))}")


def _merge(defaults, given, section):
    if not isinstance(given, dict):
        raise ConfigurationError(f"{section} must be a mapping")
    _check_keys(section, given, defaults)
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


@dataclass
class RunSpec:
    name: str
    method: str
    options: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    raw: dict

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d):
        if d is None:
            d = {}
        if not isinstance(d, dict):
            raise ConfigurationError("config must be a mapping at top level")
        _check_keys("config", d, DEFAULTS)
        raw = copy.deepcopy(DEFAULTS)
        for k, v in d.items():
            if isinstance(DEFAULTS[k], dict):
                if k == "trajectory":
                    _check_keys("trajectory", v, _TRAJ_KEYS)
                    raw[k] = {**DEFAULTS[k], **v}
                elif k == "intrinsics":
                    _check_keys("intrinsics", v, _INTR_KEYS)
                    raw[k] = dict(v)
                else:
                    raw[k] = _merge(DEFAULTS[k], v, k)
            else:
                raw[k] = v
        cfg = cls(raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DatasetError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(yaml.safe_load(text))
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc

    def with_overrides(self, seed=None, out=None, deterministic=None):
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = int(seed)
        if out is not None:
            raw["out"] = str(out)
        if deterministic:
            raw["deterministic"] = True
        cfg = ExperimentConfig(raw)
        cfg.validate()
        return cfg

    # -- validation --------------------------------------------------------

    def validate(self):
        r = self.raw
        if not isinstance(r["seed"], int) or r["seed"] < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        tr = self.trajectory()
        if tr.N < 2:
            raise ConfigurationError(
                f"trajectory.N = {tr.N}: every task needs N > 1 views, since a single view "
                "carries no geometric information")
        if tr.T < 1:
            raise ConfigurationError("trajectory.T must be >= 1")
        try:
            tr.poses()
            self.intrinsics()
            self.scene()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigurationError(str(exc)) from exc
        t = r["train"]
        for k in ("n_samples", "m_c", "iterations_per_view"):
            if not isinstance(t[k], int) or t[k] < 1:
                raise ConfigurationError(f"train.{k} must be a positive integer")
        if not isinstance(t["m_p"], int) or t["m_p"] < 0:
            raise ConfigurationError("train.m_p must be a non-negative integer")
        if not t["lr"] > 0 or not 0 < t["lr_final_ratio"] <= 1 or not t["eps_charbonnier"] > 0:
            raise ConfigurationError("need lr > 0, 0 < lr_final_ratio <= 1 and eps_charbonnier > 0")
        self._check_schedule(t["lambda_schedule"], "train.lambda_schedule")
        n = r["network"]
        for k in ("depth", "width"):
            if not isinstance(n[k], int) or n[k] < 1:
                raise ConfigurationError(f"network.{k} must be a positive integer")
        runs = self.runs()
        names = [x.name for x in runs]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate run names in methods: {names}")
        if not runs:
            raise ConfigurationError("methods must list at least one method")

    @staticmethod
    def _check_schedule(s, where):
        if not (isinstance(s, (int, float)) and not isinstance(s, bool)) and s not in SCHEDULES:
            raise ConfigurationError(f"{where}: expected one of {SCHEDULES} or a number, got {s!r}")

    # -- typed views -------------------------------------------------------

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def deterministic(self):
        return bool(self.raw["deterministic"])

    @property
    def out(self):
        return Path(self.raw["out"])

    def dataset_dir(self):
        return Path(self.raw["dataset"]) if self.raw["dataset"] else self.out / "dataset"

    def scene(self):
        s = self.raw["scene"]
        if s == "reference":
            return reference_scene()
        if not isinstance(s, dict):
            raise ConfigurationError("scene must be 'reference' or a mapping")
        _check_keys("scene", s, {"spheres", "bounds", "z_near", "z_far"})
        return SceneDef.from_dict(s)

    def trajectory(self):
        t = dict(self.raw["trajectory"])
        for k in ("center", "look_at", "sweep_start", "sweep_axis", "view_dir"):
            if k in t:
                t[k] = tuple(t[k])
        try:
            return TrajectorySpec(**t)
        except TypeError as exc:
            raise ConfigurationError(f"trajectory: {exc}") from exc

    def intrinsics(self):
        try:
            return Intrinsics(**self.raw["intrinsics"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"intrinsics: {exc}") from exc

    def runs(self):
        out = []
        for entry in self.raw["methods"]:
            if isinstance(entry, str):
                entry = {"method": entry}
            if not isinstance(entry, dict):
                raise ConfigurationError(f"methods entries must be names or mappings, got {entry!r}")
            _check_keys("methods entry", entry, RUN_KEYS)
            method = entry.get("method")
            if method not in METHODS:
                raise ConfigurationError(f"unknown method {method!r}; choose from {METHODS}")
            opts = {k: v for k, v in entry.items() if k not in ("name", "method")}
            if "lambda_schedule" in opts:
                self._check_schedule(opts["lambda_schedule"], f"methods[{method}].lambda_schedule")
            if opts.get("past_rays", "rgn") not in ("rgn", "gt", "random"):
                raise ConfigurationError(f"past_rays must be rgn, gt or random, got {opts['past_rays']!r}")
            out.append(RunSpec(entry.get("name", method), method, opts))
        return out

    def estimator_params(self, run):
        """Keyword arguments for :class:`~incnerf.estimator.IncrementalNeRF`."""
        scene = self.scene()
        n, t = self.raw["network"], self.raw["train"]
        params = dict(method=run.method, depth=n["depth"], width=n["width"], L_pos=n["L_pos"],
                      L_dir=n["L_dir"], pos_scale=n["pos_scale"], n_samples=t["n_samples"],
                      z_near=scene.z_near, z_far=scene.z_far, m_c=t["m_c"], m_p=t["m_p"],
                      iterations_per_view=t["iterations_per_view"], lr=t["lr"],
                      lr_final_ratio=t["lr_final_ratio"], lambda_schedule=t["lambda_schedule"],
                      eps_charbonnier=t["eps_charbonnier"], random_state=self.seed)
        opts = dict(run.options)
        if opts.get("past_rays") == "random" and "random_bounds" not in opts:
            opts["random_bounds"] = scene.bounds
        params.update(opts)
        return params

    # -- output ------------------------------------------------------------

    def to_yaml(self):
        return yaml.safe_dump(self.raw, sort_keys=True)

    def hash(self):
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()
