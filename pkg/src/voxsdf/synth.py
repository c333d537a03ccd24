"""Analytic SDF scenes, camera trajectories and sphere-traced RGB-D datasets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .fileio import read_pfm, read_png, write_pfm, write_png
from .sampler import Camera, generate_rays, pixel_centers

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


# -- primitives and CSG ------------------------------------------------------------------

@dataclass
class Sphere:
    center: Sequence[float] = (0.0, 0.0, 0.0)
    radius: float = 0.5
    albedo: Sequence[float] = (0.8, 0.5, 0.3)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box:
    center: Sequence[float] = (0.0, 0.0, 0.0)
    half: Sequence[float] = (0.3, 0.3, 0.3)
    albedo: Sequence[float] = (0.3, 0.6, 0.8)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(q.max(-1), 0.0)


@dataclass
class Torus:
    """Torus in the xy-plane around ``center``."""

    center: Sequence[float] = (0.0, 0.0, 0.0)
    major: float = 0.4
    minor: float = 0.15
    albedo: Sequence[float] = (0.5, 0.8, 0.4)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        ring = np.linalg.norm(q[..., :2], axis=-1) - self.major
        return np.hypot(ring, q[..., 2]) - self.minor


@dataclass
class Union:
    a: Any
    b: Any

    def sdf(self, p):
        return np.minimum(self.a.sdf(p), self.b.sdf(p))


@dataclass
class Intersection:
    a: Any
    b: Any

    def sdf(self, p):
        return np.maximum(self.a.sdf(p), self.b.sdf(p))


@dataclass
class Subtraction:
    """``a`` minus ``b``."""

    a: Any
    b: Any

    def sdf(self, p):
        return np.maximum(self.a.sdf(p), -self.b.sdf(p))


def _albedo(node: Any, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(distance, albedo) of the primitive that decides the CSG value at each point."""
    if hasattr(node, "albedo"):
        return node.sdf(p), np.broadcast_to(np.asarray(node.albedo, dtype=np.float64), p.shape).copy()
    da, ca = _albedo(node.a, p)
    db, cb = _albedo(node.b, p)
    if isinstance(node, Union):
        pick_a = da <= db
        d = np.minimum(da, db)
    elif isinstance(node, Intersection):
        pick_a = da >= db
        d = np.maximum(da, db)
    else:
        pick_a = da >= -db
        d = np.maximum(da, -db)
    return d, np.where(pick_a[..., None], ca, cb)


@dataclass
class AnalyticScene:
    root: Any
    light_dir: Sequence[float] = (0.3, 0.4, 0.85)
    ambient: float = 0.25
    background: Sequence[float] = (0.0, 0.0, 0.0)
    glossy: bool = False
    bounds: tuple[Sequence[float], Sequence[float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.root.sdf(np.asarray(p, dtype=np.float64))

    def albedo(self, p: np.ndarray) -> np.ndarray:
        return _albedo(self.root, np.asarray(p, dtype=np.float64))[1]

    def normal(self, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
        eye = np.eye(3) * h
        g = np.stack([self.sdf(p + eye[i]) - self.sdf(p - eye[i]) for i in range(3)], -1) / (2 * h)
        return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)

    def shade(self, p: np.ndarray, view_dir: np.ndarray | None = None) -> np.ndarray:
        """Lambertian (plus a Blinn-Phong lobe when ``glossy``) colour at surface points."""
        n = self.normal(p)
        light = np.asarray(self.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        diffuse = np.clip(n @ light, 0.0, None)
        rgb = self.albedo(p) * (self.ambient + (1.0 - self.ambient) * diffuse)[..., None]
        if self.glossy and view_dir is not None:
            half = light - view_dir
            half /= np.linalg.norm(half, axis=-1, keepdims=True)
            rgb = rgb + 0.4 * np.clip((n * half).sum(-1), 0.0, None)[..., None] ** 32
        return np.clip(rgb, 0.0, 1.0)


def analytic_sdf(scene: AnalyticScene | Any, p: np.ndarray) -> np.ndarray:
    return scene.sdf(np.asarray(p, dtype=np.float64))


def sphere_scene(radius: float = 0.5, albedo: Sequence[float] = (0.8, 0.5, 0.3), glossy: bool = False) -> AnalyticScene:
    return AnalyticScene(Sphere((0.0, 0.0, 0.0), radius, albedo), glossy=glossy)


PRESETS = {
    "sphere": lambda: sphere_scene(),
    "two_spheres": lambda: AnalyticScene(Union(Sphere((-0.35, 0, 0), 0.3, (0.9, 0.3, 0.3)),
                                               Sphere((0.35, 0, 0), 0.3, (0.3, 0.3, 0.9)))),
    "torus": lambda: AnalyticScene(Torus()),
    "csg": lambda: AnalyticScene(Subtraction(Box(half=(0.4, 0.4, 0.4)), Sphere(radius=0.5, albedo=(0.9, 0.9, 0.2)))),
}


def _node_from_dict(d: dict) -> Any:
    kind = d["type"]
    kids = {"union": Union, "intersection": Intersection, "subtraction": Subtraction}
    if kind in kids:
        return kids[kind](_node_from_dict(d["a"]), _node_from_dict(d["b"]))
    cls = {"sphere": Sphere, "box": Box, "torus": Torus}[kind]
    return cls(**{k: v for k, v in d.items() if k != "type"})


def load_scene(spec: str | Path | dict) -> AnalyticScene:
    """Preset name, JSON file path or dict ``{"root": {...}, "light_dir": ...}``."""
    if isinstance(spec, str) and spec in PRESETS:
        return PRESETS[spec]()
    if not isinstance(spec, dict):
        spec = json.loads(Path(spec).read_text())
    kw = {k: v for k, v in spec.items() if k != "root"}
    if "bounds" in kw:
        kw["bounds"] = tuple(tuple(b) for b in kw["bounds"])
    return AnalyticScene(_node_from_dict(spec["root"]), **kw)


# -- cameras -----------------------------------------------------------------------------------

def look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Camera-to-world pose with +z towards ``target`` and image-down roughly world -z."""
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([right, down, fwd], axis=1)
    pose[:3, 3] = position
    return pose


def make_cameras(n: int, radius: float, target: Sequence[float] = (0.0, 0.0, 0.0), width: int = 64,
                 height: int = 64, focal: float | None = None, phase: float = 0.0,
                 azimuth0: float = 0.0) -> list[Camera]:
    """``n`` cameras on a spiral over the upper hemisphere, all looking at ``target``.

    View i sits at height fraction 1 - (i + phase) / n and azimuth i * golden angle.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    focal = focal if focal is not None else 0.5 * width / math.tan(math.radians(20.0))
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n):
        z = 1.0 - (i + phase) / n
        rho = math.sqrt(max(0.0, 1.0 - z * z))
        phi = azimuth0 + i * GOLDEN_ANGLE
        pos = target + radius * np.array([rho * math.cos(phi), rho * math.sin(phi), z])
        cams.append(Camera(focal, focal, width / 2, height / 2, width, height, look_at(pos, target)))
    return cams


# -- ground-truth rendering --------------------------------------------------------------------

def sphere_trace(scene: AnalyticScene, o: np.ndarray, d: np.ndarray, eps: float = 1e-5,
                 max_steps: int = 256, t_max: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Ray distance to the first surface hit and a hit mask."""
    t = np.zeros(len(o))
    active = np.ones(len(o), dtype=bool)
    hit = np.zeros(len(o), dtype=bool)
    for _ in range(max_steps):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        s = scene.sdf(o[idx] + t[idx, None] * d[idx])
        done = np.abs(s) < eps
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, s)
        escaped = t[idx] > t_max
        active[idx[done | escaped]] = False
    return t, hit


def gt_render(scene: AnalyticScene, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """RGB image in [0, 1] and ray-distance depth (0 where the ray misses)."""
    rays = generate_rays(camera, pixel_centers(camera.width, camera.height))
    t, hit = sphere_trace(scene, rays.origins, rays.dirs)
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(t), 3)).copy()
    if hit.any():
        p = rays.origins[hit] + t[hit, None] * rays.dirs[hit]
        rgb[hit] = scene.shade(p, rays.dirs[hit])
    depth = np.where(hit, t, 0.0)
    return rgb.reshape(camera.height, camera.width, 3), depth.reshape(camera.height, camera.width)


# -- datasets ------------------------------------------------------------------------------------

@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    depths: list[np.ndarray | None]
    bounds: tuple[np.ndarray, np.ndarray]
    root: Path | None = None
    names: list[str] = dc_field(default_factory=list)


MANIFEST = "manifest.json"


def gen_dataset(scene: AnalyticScene | str, n_views: int, width: int, height: int, out_dir: str | Path,
                seed: int = 0, radius: float = 2.0, phase: float = 0.0, focal: float | None = None) -> SceneDataset:
    """Render ``n_views`` spiral views and write manifest, PNG colour and PFM depth.

    ``seed`` rotates the spiral's starting azimuth (seed 0 starts at azimuth 0).
    """
    scene = load_scene(scene) if not isinstance(scene, AnalyticScene) else scene
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    az0 = float(np.random.default_rng(seed).uniform(0, 2 * math.pi)) if seed else 0.0
    cams = make_cameras(n_views, radius, (0, 0, 0), width, height, focal, phase, az0)
    views, images, depths, names = [], [], [], []
    for i, cam in enumerate(cams):
        rgb, depth = gt_render(scene, cam)
        name = f"{i:04d}"
        write_png(out / "images" / f"{name}.png", rgb)
        write_pfm(out / "depth" / f"{name}.pfm", depth)
        views.append({"name": name, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                      "width": cam.width, "height": cam.height,
                      "pose": [float(x) for x in cam.pose.ravel()],
                      "image": f"images/{name}.png", "depth": f"depth/{name}.pfm"})
        images.append(read_png(out / "images" / f"{name}.png"))
        depths.append(depth.astype(np.float32))
        names.append(name)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene.bounds)
    manifest = {"version": 1, "bounds": [lo.tolist(), hi.tolist()], "depth_kind": "ray_distance",
                "depth_invalid": 0.0, "views": views}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    return SceneDataset(cams, images, depths, (lo, hi), out, names)


def load_dataset(root: str | Path) -> SceneDataset:
    root = Path(root)
    man = json.loads((root / MANIFEST).read_text())
    cams, images, depths, names = [], [], [], []
    for v in man["views"]:
        cam = Camera(v["fx"], v["fy"], v["cx"], v["cy"], int(v["width"]), int(v["height"]),
                     np.asarray(v["pose"], dtype=np.float64).reshape(4, 4))
        img = read_png(root / v["image"])
        if img.shape[:2] != (cam.height, cam.width):
            raise ValueError(f"{v['image']}: size does not match intrinsics")
        cams.append(cam)
        images.append(img)
        depths.append(read_pfm(root / v["depth"]) if v.get("depth") else None)
        names.append(v.get("name", str(len(names))))
    lo, hi = (np.asarray(b, dtype=np.float64) for b in man["bounds"])
    return SceneDataset(cams, images, depths, (lo, hi), root, names)
