"""Synthetic scene-flow samples, their on-disk format, and deterministic splits.

A sample holds two independently sampled point sets of rigidly moving primitives
(plane patches, box surfaces, Gaussian blobs) in a unit cube, the per-point
ground-truth flow for frame one, and a validity mask. Files are raw little-endian
arrays plus a meta.json so the format stays portable and bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .errors import InvalidArgumentError, SampleFormatError

PRIMITIVES = ("plane", "box", "blob")


class GeneratorSpec(BaseModel):
    """Scene recipe: object mix, rigid-motion ranges, jitter, and occlusion."""

    n_points: int = 1024
    n_points2: Optional[int] = None  # second frame size; defaults to n_points
    objects_min: int = 2
    objects_max: int = 4
    primitives: List[str] = Field(default_factory=lambda: list(PRIMITIVES))
    translation_min: float = 0.05
    translation_max: float = 0.3
    fixed_translation: Optional[List[float]] = None  # overrides sampled translations
    rotation_max_deg: float = 10.0
    jitter: float = 0.005
    occlusion_fraction: float = 0.0
    extent: float = 1.0  # scene cube edge length, centered at the origin

    def model_post_init(self, _ctx) -> None:
        if self.n_points < 1 or (self.n_points2 is not None and self.n_points2 < 1):
            raise InvalidArgumentError("point counts must be >= 1")
        if not self.primitives or any(p not in PRIMITIVES for p in self.primitives):
            raise InvalidArgumentError(f"primitives must be a non-empty subset of {PRIMITIVES}")
        if self.objects_min < 1 or self.objects_max < self.objects_min:
            raise InvalidArgumentError("need 1 <= objects_min <= objects_max")
        if not (0.0 <= self.translation_min <= self.translation_max):
            raise InvalidArgumentError("bad translation range")
        if not (0.0 <= self.occlusion_fraction < 1.0):
            raise InvalidArgumentError("occlusion_fraction must be in [0,1)")


@dataclass
class Sample:
    """One training/eval record; meta carries shapes and per-object transforms."""

    pc1: np.ndarray  # (N,3) float32
    pc2: np.ndarray  # (M,3) float32
    flow: np.ndarray  # (N,3) float32
    mask: np.ndarray  # (N,1) uint8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pc1.ndim != 2 or self.pc1.shape[1] != 3:
            raise InvalidArgumentError("pc1 must be (N,3)")
        if self.pc2.ndim != 2 or self.pc2.shape[1] != 3:
            raise InvalidArgumentError("pc2 must be (M,3)")
        if self.flow.shape != self.pc1.shape:
            raise InvalidArgumentError("flow must align with pc1")
        if self.mask.shape != (self.pc1.shape[0], 1):
            raise InvalidArgumentError("mask must be (N,1)")


def _rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis."""
    kx, ky, kz = axis
    k_cross = np.array([[0, -kz, ky], [kz, 0, -kx], [-ky, kx, 0]], dtype=np.float64)
    return np.eye(3) + math.sin(angle) * k_cross + (1 - math.cos(angle)) * (k_cross @ k_cross)


def _orthonormal_frame(rng: np.random.Generator) -> np.ndarray:
    """Random right-handed 3x3 rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q


def _primitive_params(kind: str, rng: np.random.Generator, extent: float) -> dict:
    """Pose and dimensions of one primitive instance inside the scene cube."""
    params = {
        "center": rng.uniform(-0.3, 0.3, size=3) * extent,
        "frame": _orthonormal_frame(rng),
    }
    if kind == "plane":
        params["half"] = rng.uniform(0.08, 0.2, size=2) * extent
    elif kind == "box":
        params["half"] = rng.uniform(0.05, 0.15, size=3) * extent
    elif kind == "blob":
        params["sigma"] = rng.uniform(0.03, 0.1) * extent
    else:
        raise InvalidArgumentError(f"unknown primitive {kind!r}")
    return params


def _sample_primitive(kind: str, params: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """n surface points of a primitive instance; the draw stream is the caller's."""
    if kind == "plane":
        uv = rng.uniform(-1.0, 1.0, size=(n, 2)) * params["half"]
        local = np.concatenate([uv, np.zeros((n, 1))], axis=1)
    elif kind == "box":
        half = params["half"]
        face_axis = rng.integers(0, 3, size=n)
        face_sign = rng.choice([-1.0, 1.0], size=n)
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        local[np.arange(n), face_axis] = face_sign * half[face_axis]
    else:
        sigma = params["sigma"]
        # truncate at 3 sigma so rotational displacement stays bounded
        local = np.clip(rng.normal(scale=sigma, size=(n, 3)), -3 * sigma, 3 * sigma)
    return local @ params["frame"].T + params["center"]


def gen_synthetic(spec: GeneratorSpec, seed: int) -> Sample:
    """One sample: per-object rigid motion, frame two independently resampled."""
    rng = np.random.default_rng(seed)
    n1 = spec.n_points
    n2 = spec.n_points2 or spec.n_points
    n_obj = int(rng.integers(spec.objects_min, spec.objects_max + 1))

    counts1 = _split_counts(n1, n_obj)
    counts2 = _split_counts(n2, n_obj)
    pc1_parts, pc2_parts, flow_parts, objects = [], [], [], []
    for i in range(n_obj):
        kind = spec.primitives[int(rng.integers(len(spec.primitives)))]
        obj_seed = int(rng.integers(0, 2**31 - 1))
        obj_rng = np.random.default_rng(obj_seed)
        params = _primitive_params(kind, obj_rng, spec.extent)
        # same primitive instance, independent point draws per frame
        pts1 = _sample_primitive(kind, params, counts1[i], np.random.default_rng(obj_seed + 1))
        pts2 = _sample_primitive(kind, params, counts2[i], np.random.default_rng(obj_seed + 2))

        angle = math.radians(obj_rng.uniform(0.0, spec.rotation_max_deg))
        axis = obj_rng.normal(size=3)
        axis /= np.linalg.norm(axis) + 1e-12
        rot = _rotation_about_axis(axis, angle)
        if spec.fixed_translation is not None:
            trans = np.asarray(spec.fixed_translation, dtype=np.float64)
        else:
            mag = obj_rng.uniform(spec.translation_min, spec.translation_max)
            direction = obj_rng.normal(size=3)
            direction /= np.linalg.norm(direction) + 1e-12
            trans = mag * direction
        centroid = pts1.mean(axis=0)

        moved1 = (pts1 - centroid) @ rot.T + centroid + trans
        moved2 = (pts2 - centroid) @ rot.T + centroid + trans
        pc1_parts.append(pts1)
        pc2_parts.append(moved2)
        flow_parts.append(moved1 - pts1)
        objects.append({
            "primitive": kind,
            "rotation": rot.tolist(),
            "translation": trans.tolist(),
            "centroid": centroid.tolist(),
            "n_frame1": int(counts1[i]),
            "n_frame2": int(counts2[i]),
        })

    pc1 = np.concatenate(pc1_parts).astype(np.float32)
    flow = np.concatenate(flow_parts).astype(np.float32)
    pc2 = np.concatenate(pc2_parts)
    if spec.jitter > 0:
        pc2 = pc2 + rng.normal(scale=spec.jitter, size=pc2.shape)
    pc2 = pc2.astype(np.float32)
    mask = np.ones((n1, 1), dtype=np.uint8)

    if spec.occlusion_fraction > 0:
        warped = pc1 + flow
        center = warped[int(rng.integers(n1))]
        d = np.linalg.norm(warped - center, axis=1)
        radius = np.quantile(d, spec.occlusion_fraction)
        occluded = d < radius
        mask[occluded] = 0
        keep = np.linalg.norm(pc2 - center, axis=1) >= radius
        if keep.any():
            pc2 = pc2[keep]

    meta = {"seed": seed, "generator": spec.model_dump(), "objects": objects}
    return Sample(pc1=pc1, pc2=pc2, flow=flow, mask=mask, meta=meta)


def _split_counts(total: int, parts: int) -> List[int]:
    base = total // parts
    counts = [base] * parts
    for i in range(total - base * parts):
        counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# on-disk format: pc1.f32 / pc2.f32 / flow.f32 raw '<f4', mask.u8 raw '<u1', meta.json

_ARRAY_FILES = {
    "pc1": ("pc1.f32", "<f4", 3),
    "pc2": ("pc2.f32", "<f4", 3),
    "flow": ("flow.f32", "<f4", 3),
    "mask": ("mask.u8", "<u1", 1),
}


def save_sample(sample: Sample, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {"pc1": sample.pc1, "pc2": sample.pc2, "flow": sample.flow, "mask": sample.mask}
    shapes = {}
    for name, (fname, dtype, _) in _ARRAY_FILES.items():
        arr = np.ascontiguousarray(arrays[name].astype(dtype))
        (path / fname).write_bytes(arr.tobytes())
        shapes[name] = list(arr.shape)
    meta = dict(sample.meta)
    meta["shapes"] = shapes
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_sample(path) -> Sample:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise SampleFormatError(f"missing meta.json in {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SampleFormatError(f"meta.json is not valid JSON: {exc}") from exc
    shapes = meta.get("shapes")
    if not isinstance(shapes, dict):
        raise SampleFormatError("meta.json lacks the shapes record")
    arrays = {}
    for name, (fname, dtype, ncol) in _ARRAY_FILES.items():
        if name not in shapes:
            raise SampleFormatError(f"meta.json missing shape for field {name!r}")
        shape = tuple(shapes[name])
        if len(shape) != 2 or shape[1] != ncol:
            raise SampleFormatError(f"field {name!r} has invalid shape {shape}")
        fpath = path / fname
        if not fpath.exists():
            raise SampleFormatError(f"missing array file for field {name!r}")
        raw = fpath.read_bytes()
        expected = shape[0] * shape[1] * np.dtype(dtype).itemsize
        if len(raw) != expected:
            raise SampleFormatError(
                f"field {name!r} truncated: {len(raw)} bytes, expected {expected}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    try:
        return Sample(pc1=arrays["pc1"], pc2=arrays["pc2"], flow=arrays["flow"],
                      mask=arrays["mask"], meta=meta)
    except InvalidArgumentError as exc:
        raise SampleFormatError(str(exc)) from exc


def make_splits(n_samples: int, ratios: Sequence[float], seed: int) -> Tuple[List[int], List[int], List[int]]:
    """Disjoint, exhaustive train/val/test index lists; largest-remainder rounding."""
    if len(ratios) != 3:
        raise InvalidArgumentError("ratios must have three entries")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidArgumentError("ratios must be nonnegative and sum to 1")
    if n_samples < 0:
        raise InvalidArgumentError("n_samples must be >= 0")
    exact = [r * n_samples for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    for _ in range(n_samples - sum(counts)):
        i = max(range(3), key=lambda j: (remainders[j], -j))
        counts[i] += 1
        remainders[i] = -1.0
    perm = np.random.default_rng(seed).permutation(n_samples).tolist()
    train = sorted(perm[:counts[0]])
    val = sorted(perm[counts[0]:counts[0] + counts[1]])
    test = sorted(perm[counts[0] + counts[1]:])
    return train, val, test


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(out_dir, spec: GeneratorSpec, n_samples: int, seed: int,
                  ratios: Sequence[float] = (0.8, 0.1, 0.1)) -> Path:
    """Generate n_samples into out_dir/samples plus a manifest with the split."""
    if n_samples < 1:
        raise InvalidArgumentError("n_samples must be >= 1")
    out_dir = Path(out_dir)
    sample_dirs = []
    for i in range(n_samples):
        rel = f"samples/sample_{i:05d}"
        save_sample(gen_synthetic(spec, seed=seed + i), out_dir / rel)
        sample_dirs.append(rel)
    train, val, test = make_splits(n_samples, ratios, seed)
    manifest = {
        "n_samples": n_samples,
        "seed": seed,
        "ratios": list(ratios),
        "generator": spec.model_dump(),
        "samples": sample_dirs,
        "splits": {"train": train, "val": val, "test": test},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir / "manifest.json"


class DatasetDir:
    """Reader over a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise SampleFormatError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())

    def split_ids(self, split: str) -> List[int]:
        try:
            return list(self.manifest["splits"][split])
        except KeyError as exc:
            raise InvalidArgumentError(f"unknown split {split!r}") from exc

    def sample_path(self, index: int) -> Path:
        return self.root / self.manifest["samples"][index]

    def load(self, index: int) -> Sample:
        return load_sample(self.sample_path(index))

    def load_split(self, split: str) -> List[Sample]:
        return [self.load(i) for i in self.split_ids(split)]
