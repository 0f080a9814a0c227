"""On-disk task datasets.

Layout::

    <root>/manifest.json
    <root>/views/t1_v0.f32     raw float32 image (see ``write_float_image``)
    <root>/views/t1_v0.png     8-bit preview, never read back

``manifest.json`` holds the intrinsics, the near/far range, the optional
scene description and, per task, a list of views with their image file and
camera-to-world pose as 12 row-major floats ``[R | t]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics, Pose
from .exceptions import DatasetError
from .scenes import Task

FORMAT = "incnerf-dataset/1"
_MAGIC = b"INIM"
_HEADER = struct.Struct("<4sIII")


def write_float_image(path, img):
    """Header (magic, H, W, C as little-endian uint32) then float32 LE row-major."""
    img = np.ascontiguousarray(img, dtype="<f4")
    H, W, C = img.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, H, W, C))
        fh.write(img.tobytes())


def read_float_image(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DatasetError(f"missing image file {path}") from None
    if len(blob) < _HEADER.size:
        raise DatasetError(f"truncated image file {path}")
    magic, H, W, C = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise DatasetError(f"{path} is not a float image dump")
    n = H * W * C
    if len(blob) != _HEADER.size + 4 * n:
        raise DatasetError(f"{path}: expected {n} floats, found {(len(blob) - _HEADER.size) // 4}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(H, W, C).astype(np.float32)


def save_dataset(tasks, root, scene=None, z_near=None, z_far=None):
    root = Path(root)
    views_dir = root / "views"
    try:
        views_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {views_dir}: {exc}") from exc
    intr = tasks[0].intrinsics
    manifest = {
        "format": FORMAT,
        "intrinsics": intr.to_dict(),
        "z_near": z_near if z_near is not None else (scene.z_near if scene else None),
        "z_far": z_far if z_far is not None else (scene.z_far if scene else None),
        "scene": scene.to_dict() if scene is not None else None,
        "tasks": [],
    }
    for task in tasks:
        if task.intrinsics != intr:
            raise DatasetError("all tasks must share intrinsics")
        entry = {"index": task.index, "views": []}
        for i, (img, pose) in enumerate(zip(task.images, task.poses)):
            stem = f"t{task.index}_v{i}"
            write_float_image(views_dir / f"{stem}.f32", img)
            Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(views_dir / f"{stem}.png")
            entry["views"].append({"image": f"views/{stem}.f32", "preview": f"views/{stem}.png",
                                   "pose": [float(x) for x in pose.to_list()]})
        manifest["tasks"].append(entry)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return root


def read_manifest(root):
    path = Path(root) / "manifest.json"
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DatasetError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {path}: {exc}") from exc


def load_dataset(root):
    """Tasks from a directory written by :func:`save_dataset`."""
    root = Path(root)
    m = read_manifest(root)
    try:
        intr = Intrinsics(**m["intrinsics"])
        task_entries = m["tasks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{root / 'manifest.json'}: bad intrinsics or task list ({exc})") from exc
    tasks = []
    for k, entry in enumerate(task_entries):
        views = entry.get("views", [])
        where = f"{root / 'manifest.json'}: task {entry.get('index', k + 1)}"
        if len(views) < 2:
            raise DatasetError(f"{where} has {len(views)} view(s); each task needs N > 1")
        imgs, poses = [], []
        for j, v in enumerate(views):
            try:
                img_name, pose_list = v["image"], v["pose"]
            except KeyError as exc:
                raise DatasetError(f"{where}, view {j}: missing field {exc}") from None
            try:
                poses.append(Pose.from_list(pose_list))
            except ValueError as exc:
                raise DatasetError(f"{where}, view {j}: bad pose ({exc})") from exc
            imgs.append(read_float_image(root / img_name))
        try:
            tasks.append(Task(int(entry.get("index", k + 1)), imgs, poses, intr))
        except ValueError as exc:
            raise DatasetError(f"{where}: {exc}") from exc
    if not tasks:
        raise DatasetError(f"{root / 'manifest.json'} lists no tasks")
    return tasks


def dataset_hash(root):
    """SHA-256 over the manifest and every float image it references."""
    root = Path(root)
    h = hashlib.sha256((root / "manifest.json").read_bytes())
    for entry in read_manifest(root)["tasks"]:
        for v in entry["views"]:
            h.update((root / v["image"]).read_bytes())
    return h.hexdigest()
