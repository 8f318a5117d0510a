"""Posed image datasets in the NeRF-synthetic ``transforms_{split}.json`` layout."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import Camera, generate_rays


class DatasetError(RuntimeError):
    """A dataset on disk is malformed or incomplete."""


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    camera: Camera
    illumination: int = 0
    name: str = ""


@dataclass
class SceneDataset:
    frames: list[Frame]
    split: str = "train"
    num_illuminations: int = 1
    camera_angle_x: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.frames:
            shapes = {f.image.shape for f in self.frames}
            if len(shapes) > 1:
                raise ValueError(f"frames have differing image shapes: {sorted(shapes)}")
        for f in self.frames:
            if not 0 <= f.illumination < self.num_illuminations:
                raise ValueError(f"illumination index {f.illumination} outside [0, {self.num_illuminations})")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.frames[0].image.shape[:2]

    def rays(self):
        """All rays stacked: origins, directions, colors ``(R, 3)`` and illumination ``(R,)``."""
        origins, dirs, colors, illum = [], [], [], []
        for f in self.frames:
            o, d = generate_rays(f.camera)
            origins.append(o)
            dirs.append(d)
            colors.append(f.image.reshape(-1, 3))
            illum.append(np.full(len(o), f.illumination, dtype=np.int64))
        return (np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors),
                np.concatenate(illum))


@dataclass
class RayBundle:
    """Loose rays with target colors; trains like a dataset without cameras."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    illumination: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def rays(self):
        return self.origins, self.dirs, self.colors, self.illumination


# ---------------------------------------------------------------------------
# images


def read_image(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """8-bit PNG to float RGB in ``[0, 1]``; RGBA is composited over ``background``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"),
                         dtype=np.float64) / 255.0
    if arr.shape[-1] == 4:
        alpha = arr[..., 3:]
        arr = arr[..., :3] * alpha + np.asarray(background) * (1.0 - alpha)
    return arr


def quantize(img) -> np.ndarray:
    return np.round(255.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_image(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = quantize(img)
    mode = "RGBA" if q.shape[-1] == 4 else "RGB"
    _atomic_write(path, lambda fh: Image.fromarray(q, mode).save(fh, format="PNG"))


def _atomic_write(path: Path, writer) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".partial")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(path, lambda fh: fh.write(text.encode("utf-8")))


# ---------------------------------------------------------------------------
# transforms json


def load_dataset(root, split: str = "train", near: float = 2.0, far: float = 6.0) -> SceneDataset:
    root = Path(root)
    path = root / f"transforms_{split}.json"
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed json in {path}: {exc}") from None
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise DatasetError(f"{path} must define camera_angle_x and frames")
    angle = float(meta["camera_angle_x"])
    n_illum = int(meta.get("num_illuminations", 1))
    frames = []
    for i, entry in enumerate(meta["frames"]):
        try:
            rel = entry["file_path"]
            pose = np.asarray(entry["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: frame {i} is malformed ({exc})") from None
        if pose.shape != (4, 4):
            raise DatasetError(f"{path}: frame {i} transform_matrix is not 4x4")
        img_path = root / rel
        if img_path.suffix.lower() != ".png":
            img_path = img_path.with_name(img_path.name + ".png")
        if not img_path.exists():
            raise DatasetError(f"{path}: frame {i} image {img_path} not found")
        img = read_image(img_path)
        h, w = img.shape[:2]
        cam = Camera.from_fov(w, h, angle, pose, near, far)
        frames.append(Frame(img, cam, int(entry.get("illumination_index", 0)), rel))
    return SceneDataset(frames, split, n_illum, angle, {k: v for k, v in meta.items() if k != "frames"})


def save_dataset(ds: SceneDataset, root) -> Path:
    """Write ``transforms_{split}.json`` plus one PNG per frame under ``root/{split}/``."""
    root = Path(root)
    if ds.camera_angle_x is None:
        w = ds.frames[0].camera.width
        angle = 2.0 * np.arctan(0.5 * w / ds.frames[0].camera.focal)
    else:
        angle = ds.camera_angle_x
    entries = []
    for i, f in enumerate(ds.frames):
        rel = f"./{ds.split}/r_{i}"
        write_image(root / f"{rel}.png", f.image)
        entry = {"file_path": rel, "transform_matrix": f.camera.pose.tolist()}
        if ds.num_illuminations > 1:
            entry["illumination_index"] = f.illumination
        entries.append(entry)
    meta = {"camera_angle_x": float(angle), "frames": entries}
    if ds.num_illuminations > 1:
        meta["num_illuminations"] = ds.num_illuminations
    out = root / f"transforms_{ds.split}.json"
    atomic_write_text(out, json.dumps(meta, indent=2))
    return out
