"""Synthetic indoor RGB + depth scenes and a sparse spot-ToF simulator.

Scenes are piecewise-planar rooms (back wall, floor, side walls, ceiling)
seen through a pinhole camera, populated with axis-aligned boxes and
spheres.  Depth is the camera z-coordinate of the nearest hit.  Surface
colors are split into patches whose boundaries are unrelated to geometry,
so color edges occur on flat surfaces too.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import SceneGenParams

STRIDE = 32
DEPTH_SCALE = 1000.0  # stored PNG units per meter
MAX_STORABLE_DEPTH = 65535 / DEPTH_SCALE


@dataclass
class Scene:
    rgb: np.ndarray  # H x W x 3 float in [0, 1]
    gt_depth: np.ndarray  # H x W, meters, 0 where invalid
    valid_mask: np.ndarray  # H x W bool

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_depth.shape


@dataclass
class SparseDepthMap:
    depth: np.ndarray  # H x W, meters, 0 = no sample
    sample_mask: np.ndarray  # H x W bool

    @property
    def count(self) -> int:
        return int(self.sample_mask.sum())


@dataclass
class SceneSequence:
    scene: Scene
    frames: list[tuple[np.ndarray, SparseDepthMap]]

    @property
    def gt(self) -> np.ndarray:
        return self.scene.gt_depth

    def __len__(self) -> int:
        return len(self.frames)


def _camera_rays(height, width, fov_deg):
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    u = np.arange(width) + 0.5 - width / 2
    v = np.arange(height) + 0.5 - height / 2
    uu, vv = np.meshgrid(u, v)
    # camera looks down +z, y points down
    dirs = np.stack([uu / f, vv / f, np.ones_like(uu)], axis=-1)
    return dirs  # z component is 1, so ray parameter t equals z-depth


def _patch_texture(rng, coords, base, n_patches):
    """Piecewise-constant color over a surface, split along random lines in surface coords."""
    color = np.broadcast_to(base, coords.shape[:-1] + (3,)).copy()
    for _ in range(n_patches):
        normal = rng.normal(size=2)
        normal /= np.linalg.norm(normal)
        offset = rng.uniform(-1.0, 1.0)
        side = coords @ normal > offset
        tint = rng.uniform(0.0, 1.0, size=3)
        color[side] = 0.5 * color[side] + 0.5 * tint
    return color


def _validate_dims(height, width):
    if height < STRIDE or width < STRIDE or height % STRIDE or width % STRIDE:
        raise ValueError(
            f"scene size {height}x{width} invalid: height and width must be >= {STRIDE} "
            f"and divisible by {STRIDE} (network stride)"
        )


def generate_scene(seed: int, height: int, width: int, params: SceneGenParams | None = None) -> Scene:
    params = params or SceneGenParams()
    _validate_dims(height, width)
    rng = np.random.default_rng(seed)
    dirs = _camera_rays(height, width, params.fov_deg)
    tan_half = math.tan(math.radians(params.fov_deg) / 2)
    h, w = height, width

    depth = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    albedo = np.zeros((h, w, 3))

    back_z = rng.uniform(0.6, 1.0) * params.d_max
    half_w = rng.uniform(1.5, 3.0)
    floor_y = rng.uniform(1.0, 1.8)
    ceil_y = -rng.uniform(1.0, 1.8)
    # (axis, plane coordinate, inward normal); back wall is always first
    planes = [
        (2, back_z, np.array([0.0, 0.0, -1.0])),
        (1, floor_y, np.array([0.0, -1.0, 0.0])),
        (0, -half_w, np.array([1.0, 0.0, 0.0])),
        (0, half_w, np.array([-1.0, 0.0, 0.0])),
        (1, ceil_y, np.array([0.0, 1.0, 0.0])),
    ][: params.plane_count]

    for axis, coord, n in planes:
        comp = dirs[..., axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = coord / comp
        hit = np.isfinite(t) & (t > 0) & (t < depth)
        pts = dirs * t[..., None]
        others = [a for a in range(3) if a != axis]
        surf = pts[..., others] / np.array([half_w, params.d_max])[: len(others)]
        base = rng.uniform(0.2, 0.9, size=3)
        tex = _patch_texture(rng, np.nan_to_num(surf), base, int(rng.integers(1, 4)))
        depth[hit] = t[hit]
        normal[hit] = n
        albedo[hit] = tex[hit]

    for _ in range(params.object_count):
        # placed by image position so every object is at least partly in view
        cz = rng.uniform(0.25, 0.7) * back_z
        size = rng.uniform(0.15, 0.45) * cz * 0.5
        cx = float(np.clip(rng.uniform(-0.6, 0.6) * tan_half * cz, -half_w + size, half_w - size))
        cy = rng.uniform(-0.3, 0.6) * tan_half * cz * h / w
        color = rng.uniform(0.1, 1.0, size=3)
        if rng.random() < 0.5:
            lo = np.array([cx - size, cy - size, cz - size])
            hi = np.array([cx + size, cy + size, cz + size])
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = lo / dirs
                t1 = hi / dirs
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            t_near = np.nanmax(tmin, axis=-1)
            t_far = np.nanmin(tmax, axis=-1)
            hit = (t_near <= t_far) & (t_near > 0) & (t_near < depth)
            pts = dirs * t_near[..., None]
            # face normal: axis where the entry plane was hit
            face = np.argmax(tmin, axis=-1)
            n = np.zeros((h, w, 3))
            np.put_along_axis(n, face[..., None], -np.sign(np.take_along_axis(dirs, face[..., None], -1)), -1)
            surf = (pts - np.array([cx, cy, cz]))[..., :2] / size
            tex = _patch_texture(rng, surf, color, int(rng.integers(0, 3)))
        else:
            c = np.array([cx, cy, cz])
            dd = np.sum(dirs * dirs, axis=-1)
            b = np.sum(dirs * c, axis=-1)
            disc = b * b - dd * (c @ c - size * size)
            with np.errstate(invalid="ignore"):
                t_near = (b - np.sqrt(disc)) / dd
            hit = (disc > 0) & (t_near > 0) & (t_near < depth)
            pts = dirs * np.nan_to_num(t_near)[..., None]
            n = (pts - c) / size
            tex = np.broadcast_to(color, (h, w, 3))
        depth[hit] = t_near[hit]
        normal[hit] = n[hit]
        albedo[hit] = tex[hit]

    depth = np.clip(depth, params.d_min, params.d_max)

    light = np.array([0.3, -0.8, -0.5])
    light /= np.linalg.norm(light)
    shade = 0.35 + 0.65 * np.clip(normal @ light, 0.0, 1.0)
    falloff = 1.0 / (1.0 + 0.05 * depth)
    rgb = np.clip(albedo * shade[..., None] * falloff[..., None] + 0.03 * rng.normal(size=(h, w, 3)), 0.0, 1.0)

    valid = np.ones((h, w), dtype=bool)
    if rng.random() < params.hole_prob:
        hh = int(rng.integers(h // 8, h // 3))
        ww = int(rng.integers(w // 8, w // 3))
        y0 = int(rng.integers(0, h - hh))
        x0 = int(rng.integers(0, w - ww))
        valid[y0 : y0 + hh, x0 : x0 + ww] = False
    depth = np.where(valid, depth, 0.0)
    return Scene(rgb=rgb.astype(np.float64), gt_depth=depth, valid_mask=valid)


def sample_spots(
    scene: Scene,
    grid: tuple[int, int] = (24, 24),
    jitter_px: float = 2.0,
    noise_sigma_rel: float = 0.01,
    seed: int = 0,
) -> SparseDepthMap:
    """Simulate a spot ToF on a jittered regular grid; spots on invalid GT are dropped."""
    h, w = scene.shape
    rows, cols = grid
    if rows < 1 or cols < 1 or rows > h or cols > w:
        raise ValueError(f"spot grid {rows}x{cols} does not fit a {h}x{w} image")
    if jitter_px < 0 or noise_sigma_rel < 0:
        raise ValueError("jitter_px and noise_sigma_rel must be non-negative")
    rng = np.random.default_rng(seed)
    dy, dx = h / rows, w / cols
    # bounded below half a cell so jittered spots never collide
    jit = min(jitter_px, 0.49 * dy - 0.5, 0.49 * dx - 0.5) if jitter_px > 0 else 0.0
    jit = max(jit, 0.0)
    cy = (np.arange(rows) + 0.5) * dy
    cx = (np.arange(cols) + 0.5) * dx
    yy, xx = np.meshgrid(cy, cx, indexing="ij")
    yy = yy + rng.uniform(-jit, jit, size=yy.shape)
    xx = xx + rng.uniform(-jit, jit, size=xx.shape)
    iy = np.clip(np.floor(yy).astype(int), 0, h - 1).ravel()
    ix = np.clip(np.floor(xx).astype(int), 0, w - 1).ravel()
    noise = rng.normal(0.0, 1.0, size=iy.shape) * noise_sigma_rel

    keep = scene.valid_mask[iy, ix]
    iy, ix, noise = iy[keep], ix[keep], noise[keep]
    depth = np.zeros((h, w))
    depth[iy, ix] = np.maximum(scene.gt_depth[iy, ix] * (1.0 + noise), 1e-3)
    return SparseDepthMap(depth=depth, sample_mask=depth > 0)


def make_sequence(scene: Scene, T: int, seeds, grid=(24, 24), jitter_px=2.0, noise_sigma_rel=0.01) -> SceneSequence:
    seeds = list(seeds)
    if T < 2:
        raise ValueError("a sequence needs T >= 2 frames")
    if len(seeds) != T:
        raise ValueError(f"expected {T} seeds, got {len(seeds)}")
    frames = [(scene.rgb, sample_spots(scene, grid, jitter_px, noise_sigma_rel, s)) for s in seeds]
    return SceneSequence(scene=scene, frames=frames)


# ---------------------------------------------------------------- disk format


def encode_depth(depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth > MAX_STORABLE_DEPTH):
        raise ValueError(f"depth {depth.max():.3f} m overflows 16-bit storage (max {MAX_STORABLE_DEPTH} m)")
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite and non-negative")
    return np.round(depth * DEPTH_SCALE).astype(np.uint16)


def decode_depth(raw: np.ndarray) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / DEPTH_SCALE


def write_depth_png(path, depth) -> None:
    Image.fromarray(encode_depth(depth)).save(path)


def read_depth_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return decode_depth(np.array(im))


def write_rgb_png(path, rgb) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def read_rgb_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_sample(directory, sample_id: str, scene: Scene, sparse: SparseDepthMap) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "rgb": f"{sample_id}_rgb.png",
        "gt": f"{sample_id}_gt.png",
        "sparse": f"{sample_id}_sparse.png",
    }
    write_depth_png(directory / files["gt"], scene.gt_depth)
    write_depth_png(directory / files["sparse"], sparse.depth)
    write_rgb_png(directory / files["rgb"], scene.rgb)
    return files


def load_sample(directory, sample_id: str) -> tuple[Scene, SparseDepthMap]:
    directory = Path(directory)
    gt = read_depth_png(directory / f"{sample_id}_gt.png")
    sparse = read_depth_png(directory / f"{sample_id}_sparse.png")
    rgb = read_rgb_png(directory / f"{sample_id}_rgb.png")
    return Scene(rgb=rgb, gt_depth=gt, valid_mask=gt > 0), SparseDepthMap(depth=sparse, sample_mask=sparse > 0)


def save_sequence(directory, sample_id: str, seq: SceneSequence) -> list[str]:
    seq_dir = Path(directory) / sample_id
    seq_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for t, (_, sparse) in enumerate(seq.frames):
        name = f"{sample_id}/frame_{t}_sparse.png"
        write_depth_png(Path(directory) / name, sparse.depth)
        names.append(name)
    return names


def load_sequence(directory, sample_id: str, scene: Scene, T: int) -> SceneSequence:
    frames = []
    for t in range(T):
        d = read_depth_png(Path(directory) / sample_id / f"frame_{t}_sparse.png")
        frames.append((scene.rgb, SparseDepthMap(depth=d, sample_mask=d > 0)))
    return SceneSequence(scene=scene, frames=frames)


def generate_dataset(
    out,
    count: int,
    size: tuple[int, int],
    seed: int = 0,
    spots: tuple[int, int] = (24, 24),
    noise: float = 0.01,
    jitter_px: float = 2.0,
    seq_len: int = 0,
    params: SceneGenParams | None = None,
) -> dict:
    """Write ``count`` samples and a ``manifest.json`` under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    params = params or SceneGenParams()
    h, w = size
    samples = []
    for i in range(count):
        sid = f"{i:05d}"
        scene_seed = seed * 1_000_003 + i
        scene = generate_scene(scene_seed, h, w, params)
        sparse = sample_spots(scene, spots, jitter_px, noise, seed=scene_seed + 1)
        entry = {"id": sid, "seed": scene_seed, "files": save_sample(out, sid, scene, sparse), "spots": sparse.count}
        if seq_len >= 2:
            seq = make_sequence(scene, seq_len, [scene_seed * 31 + t + 7 for t in range(seq_len)], spots, jitter_px, noise)
            entry["sequence"] = save_sequence(out, sid, seq)
        samples.append(entry)
    manifest = {
        "format": "emdc-synthetic-v1",
        "depth_scale": DEPTH_SCALE,
        "height": h,
        "width": w,
        "seed": seed,
        "spots": list(spots),
        "noise_sigma_rel": noise,
        "jitter_px": jitter_px,
        "seq_len": seq_len if seq_len >= 2 else 0,
        "scene_params": {k: getattr(params, k) for k in params.__dataclass_fields__},
        "samples": samples,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_manifest(directory) -> dict:
    with open(Path(directory) / "manifest.json") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- sample sets


@dataclass
class Sample:
    """One training/eval item; ``frames`` holds extra sparse maps of the same scene (may be empty)."""

    id: str
    rgb: np.ndarray
    sparse: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    frames: list[np.ndarray]


def build_samples(
    count: int,
    size: tuple[int, int],
    seed: int = 0,
    spots: tuple[int, int] = (24, 24),
    jitter_px: float = 2.0,
    noise: float = 0.01,
    seq_len: int = 0,
    params: SceneGenParams | None = None,
) -> list[Sample]:
    """In-memory equivalent of :func:`generate_dataset` (same seeds, no quantization)."""
    params = params or SceneGenParams()
    out = []
    for i in range(count):
        scene_seed = seed * 1_000_003 + i
        scene = generate_scene(scene_seed, size[0], size[1], params)
        sparse = sample_spots(scene, spots, jitter_px, noise, seed=scene_seed + 1)
        frames = []
        if seq_len >= 2:
            seq = make_sequence(scene, seq_len, [scene_seed * 31 + t + 7 for t in range(seq_len)], spots, jitter_px, noise)
            frames = [f.depth for _, f in seq.frames]
        out.append(Sample(f"{i:05d}", scene.rgb, sparse.depth, scene.gt_depth, scene.valid_mask, frames))
    return out


def load_dataset(directory) -> list[Sample]:
    manifest = read_manifest(directory)
    out = []
    for entry in manifest["samples"]:
        scene, sparse = load_sample(directory, entry["id"])
        frames = []
        if entry.get("sequence"):
            seq = load_sequence(directory, entry["id"], scene, len(entry["sequence"]))
            frames = [f.depth for _, f in seq.frames]
        out.append(Sample(entry["id"], scene.rgb, sparse.depth, scene.gt_depth, scene.valid_mask, frames))
    return out
