"""Synthetic video datasets that isolate temporal-order and appearance cues.

``directional-motion``: a textured patch slides left to right (class 0) or
right to left (class 1).  Samples come in pairs, the class-1 member being
the exact time reversal of the class-0 member, so no frame-order-blind model
can beat chance.  ``static-texture``: every frame of a clip is the same
image, a textured patch in the left (class 0) or right (class 1) half.
``speed-contrast``: same direction, one or two pixels per frame.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

KINDS = ("directional-motion", "static-texture", "speed-contrast")
MIN_GEOMETRY = (8, 16, 16, 1)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "directional-motion"
    geometry: tuple[int, int, int, int] = (16, 32, 32, 3)
    samples: int = 500
    seed: int = 0
    patch: int = 8
    speed: int = 1
    noise: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "geometry", tuple(int(v) for v in self.geometry))
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        if len(self.geometry) != 4 or any(g < m for g, m in zip(self.geometry, MIN_GEOMETRY)):
            raise ValueError(f"clip geometry {self.geometry} is below the minimum {MIN_GEOMETRY}")
        if self.samples < 2:
            raise ValueError("need at least two samples")
        T, H, W, _ = self.geometry
        fastest = 2 * self.speed if self.kind == "speed-contrast" else self.speed
        if self.patch > H or self.patch + fastest * (T - 1) > W:
            raise ValueError(
                f"a {self.patch}px patch moving {fastest}px/frame for {T} frames needs width "
                f"{self.patch + fastest * (T - 1)} and height {self.patch}, clip is {W}x{H}"
            )

    @property
    def classes(self) -> int:
        return 2


@dataclass
class SyntheticVideoDataset:
    spec: DatasetSpec
    clips: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def save(self, directory: str | Path) -> Path:
        """Directory of raw little-endian tensors plus a JSON manifest."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.clips.astype("<f4").tofile(d / "clips.f32")
        self.labels.astype("<i8").tofile(d / "labels.i64")
        manifest = {"version": 1, "spec": asdict(self.spec), "clips": list(self.clips.shape), "labels": len(self.labels)}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "SyntheticVideoDataset":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        clips = np.fromfile(d / "clips.f32", dtype="<f4").reshape(manifest["clips"])
        labels = np.fromfile(d / "labels.i64", dtype="<i8")
        return cls(DatasetSpec(**manifest["spec"]), clips, labels)


def _texture(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    return rng.uniform(0.5, 1.0, size=(size, size, channels))


def _slide(texture: np.ndarray, geometry, x0: int, y0: int, step: int) -> np.ndarray:
    T, H, W, C = geometry
    p = texture.shape[0]
    clip = np.zeros((T, H, W, C))
    for t in range(T):
        x = x0 + step * t
        clip[t, y0 : y0 + p, x : x + p] = texture
    return clip


def directional_pair(rng: np.random.Generator, spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """A left-to-right clip and its exact time reversal (the right-to-left clip)."""
    T, H, W, C = spec.geometry
    p, v = spec.patch, spec.speed
    travel = v * (T - 1)
    x0 = int(rng.integers(0, W - p - travel + 1))
    y0 = int(rng.integers(0, H - p + 1))
    noise = rng.normal(0.0, spec.noise, size=spec.geometry)
    rightward = _slide(_texture(rng, p, C), spec.geometry, x0, y0, v) + noise
    return rightward, rightward[::-1].copy()


def render_motion(texture: np.ndarray, geometry, start_x: int, y: int, speed: int, direction: int) -> np.ndarray:
    """Noise-free clip of ``texture`` moving ``direction`` (+1 right, -1 left)."""
    return _slide(texture, geometry, start_x, y, speed * direction)


def _static_frame(rng, spec: DatasetSpec, label: int) -> np.ndarray:
    _, H, W, C = spec.geometry
    p = min(spec.patch, W // 2)
    half = W // 2
    x0 = int(rng.integers(0, half - p + 1)) + label * (W - half)
    y0 = int(rng.integers(0, H - p + 1))
    frame = np.zeros((H, W, C))
    frame[y0 : y0 + p, x0 : x0 + p] = _texture(rng, p, C)
    return frame


def generate_synthetic(spec: DatasetSpec) -> SyntheticVideoDataset:
    """Deterministic in ``spec.seed``; clips are float32 ``(N, T, H, W, C)``."""
    rng = np.random.default_rng(spec.seed)
    T, H, W, C = spec.geometry
    clips, labels = [], []
    if spec.kind == "directional-motion":
        while len(clips) < spec.samples:
            rightward, leftward = directional_pair(rng, spec)
            clips += [rightward, leftward]
            labels += [0, 1]
    elif spec.kind == "static-texture":
        for i in range(spec.samples):
            label = i % 2
            frame = _static_frame(rng, spec, label)
            clips.append(np.repeat(frame[None], T, axis=0))
            labels.append(label)
    else:
        for i in range(spec.samples):
            label = i % 2
            v = spec.speed * (1 + label)
            x0 = int(rng.integers(0, W - spec.patch - v * (T - 1) + 1))
            y0 = int(rng.integers(0, H - spec.patch + 1))
            clip = _slide(_texture(rng, spec.patch, C), spec.geometry, x0, y0, v)
            clips.append(clip + rng.normal(0.0, spec.noise, size=spec.geometry))
            labels.append(label)
    clips = np.stack(clips[: spec.samples]).astype(np.float32)
    return SyntheticVideoDataset(spec, clips, np.asarray(labels[: spec.samples], dtype=np.int64))
