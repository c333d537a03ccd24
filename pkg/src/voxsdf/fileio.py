"""Image and mesh file formats: PNG, little-endian PFM, ASCII PLY, OBJ."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path: str | Path, img: np.ndarray) -> None:
    arr = to_uint8(img) if np.asarray(img).dtype != np.uint8 else np.asarray(img)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path: str | Path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Greyscale (H, W) or colour (H, W, 3) PFM; rows stored bottom-to-top."""
    data = np.asarray(data, dtype="<f4")
    colour = data.ndim == 3
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if colour else b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        raw = f.read()
    if len(raw) < w * h * ch * 4:
        raise ValueError(f"{path}: truncated PFM")
    arr = np.frombuffer(raw[: w * h * ch * 4], dtype=dt).reshape((h, w, ch) if ch == 3 else (h, w))
    return arr[::-1].astype(np.float32)


def write_ply(path: str | Path, vertices: np.ndarray, faces: np.ndarray,
              normals: np.ndarray | None = None, colors: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(vertices)}",
             "property float x", "property float y", "property float z"]
    if normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header"]
    cols = [vertices]
    fmt = ["%.9g"] * 3
    if normals is not None:
        cols.append(np.asarray(normals, dtype=np.float64))
        fmt += ["%.6g"] * 3
    if colors is not None:
        cols.append(to_uint8(colors).astype(np.float64))
        fmt += ["%d"] * 3
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        if len(vertices):
            np.savetxt(f, np.hstack(cols), fmt=fmt)
        if len(faces):
            np.savetxt(f, np.hstack([np.full((len(faces), 1), 3), faces]), fmt="%d")


def read_ply(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Positions and triangles from an ASCII PLY (other properties ignored)."""
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vert = n_face = 0
        props: list[str] = []
        current = None
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if tok[0] == "element":
                current = tok[1]
                if current == "vertex":
                    n_vert = int(tok[2])
                elif current == "face":
                    n_face = int(tok[2])
            elif tok[0] == "property" and current == "vertex":
                props.append(tok[-1])
            elif tok[0] == "end_header":
                break
        body = [f.readline() for _ in range(n_vert)]
        verts = np.loadtxt(body, ndmin=2) if n_vert else np.zeros((0, len(props)))
        xyz = verts[:, [props.index(a) for a in "xyz"]] if n_vert else np.zeros((0, 3))
        faces = [list(map(int, f.readline().split()))[1:4] for _ in range(n_face)]
    return xyz, np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    with open(path, "w") as f:
        for v in np.asarray(vertices):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in np.asarray(faces, dtype=np.int64).reshape(-1, 3):
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
