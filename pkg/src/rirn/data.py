"""Synthetic blurry/sharp clips and the on-disk dataset layout.

Scenes are procedural: a grating-textured background under a slowly
panning camera plus a few textured sprites (rectangles, disks, bars), each
moving along a piecewise-linear path that occasionally turns abruptly.
Rendering is analytic with box-filter anti-aliasing, so a scene can be
sampled at any continuous time. A sharp frame is the render at
mid-exposure; its blurry counterpart averages ``n_subframes`` renders
spread over the exposure. Both are quantized to the 8-bit grid so that
in-memory samples survive PPM export unchanged.

Dataset directories look like ``clip_0000/{blur,sharp}/frame_0000.ppm``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_image, to_bytes8, write_image
from .seeding import generator

__all__ = [
    "MotionSpec",
    "SequenceSample",
    "gen_synthetic_sequence",
    "gen_dataset",
    "write_dataset",
    "read_dataset",
    "read_frames",
    "random_window",
    "stack_windows",
]


@dataclass(frozen=True)
class MotionSpec:
    """Speeds are in pixels per frame interval."""

    min_speed: float = 2.0
    max_speed: float = 6.0
    camera_speed: float = 3.0
    abrupt_prob: float = 0.2
    n_sprites: int = 4

    @classmethod
    def static(cls):
        return cls(min_speed=0.0, max_speed=0.0, camera_speed=0.0)

    def __post_init__(self):
        if not 0 <= self.min_speed <= self.max_speed:
            raise ValueError("need 0 <= min_speed <= max_speed")
        if self.camera_speed < 0:
            raise ValueError("camera_speed must be >= 0")
        if not 0.0 <= self.abrupt_prob <= 1.0:
            raise ValueError("abrupt_prob must lie in [0, 1]")


@dataclass
class SequenceSample:
    blurry: list
    sharp: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.blurry) != len(self.sharp):
            raise ValueError("blurry and sharp must have the same number of frames")

    def __len__(self):
        return len(self.blurry)

    @property
    def shape(self):
        return self.blurry[0].shape


# ---------------------------------------------------------------------------
# scene model

# spatial frequencies in cycles per pixel
BG_FREQ = (0.03, 0.25)
STRIPE_FREQ = (0.1, 0.45)


class _Path:
    """Piecewise-linear 2-D trajectory folded back into a box."""

    def __init__(self, rng, frames, start, speed_lo, speed_hi, abrupt_prob, box):
        self.box = np.asarray(box, dtype=np.float64)
        speeds = rng.uniform(speed_lo, speed_hi, size=frames)
        angle = rng.uniform(0, 2 * np.pi)
        vel = np.empty((frames, 2))
        for k in range(frames):
            if k > 0 and rng.random() < abrupt_prob:
                angle = rng.uniform(0, 2 * np.pi)
            vel[k] = speeds[k] * np.cos(angle), speeds[k] * np.sin(angle)
        self.vel = vel
        self.knots = np.vstack([start, start + np.cumsum(vel, axis=0)])

    def at(self, tau):
        k = min(int(np.floor(tau)), len(self.vel) - 1)
        p = self.knots[k] + self.vel[k] * (tau - k)
        # triangle-wave fold keeps the path inside [0, box]
        period = 2 * self.box
        q = np.mod(p, period)
        return np.where(q > self.box, period - q, q)


def _coverage_1d(coord, lo, hi):
    return np.clip(np.minimum(coord + 0.5, hi) - np.maximum(coord - 0.5, lo), 0.0, 1.0)


class _Scene:
    def __init__(self, rng, frames, size, motion):
        h, w = size
        self.size = size
        self.yy, self.xx = np.mgrid[0:h, 0:w].astype(np.float64)
        n_waves = 6
        self.bg_freq = rng.uniform(*BG_FREQ, n_waves)
        self.bg_theta = rng.uniform(0, np.pi, n_waves)
        self.bg_phase = rng.uniform(0, 2 * np.pi, n_waves)
        self.bg_amp = rng.uniform(0.3, 1.0, n_waves)
        self.bg_mix = rng.uniform(0.2, 1.0, (n_waves, 3))
        self.bg_base = rng.uniform(0.25, 0.6, 3)
        self.camera = _Path(rng, frames, np.array([0.0, 0.0]), max(0.0, motion.camera_speed * 0.5),
                            motion.camera_speed, motion.abrupt_prob, (4 * w, 4 * h))
        self.sprites = []
        for _ in range(motion.n_sprites):
            kind = rng.choice(["rect", "disk", "bar"])
            if kind == "rect":
                half = rng.uniform(3, max(4, min(h, w) / 6), 2)
            elif kind == "disk":
                half = np.full(2, rng.uniform(3, max(4, min(h, w) / 6)))
            else:
                half = np.array([rng.uniform(1.5, 3), rng.uniform(6, max(7, min(h, w) / 3))])
                if rng.random() < 0.5:
                    half = half[::-1]
            start = rng.uniform([0, 0], [w, h])
            path = _Path(rng, frames, start, motion.min_speed, motion.max_speed, motion.abrupt_prob, (w, h))
            self.sprites.append(
                dict(
                    kind=kind,
                    half=half,
                    path=path,
                    color=rng.uniform(0.0, 1.0, 3),
                    stripe_freq=rng.uniform(*STRIPE_FREQ),
                    stripe_theta=rng.uniform(0, np.pi),
                    stripe_depth=rng.uniform(0.2, 0.5),
                )
            )

    def render(self, tau):
        h, w = self.size
        ox, oy = self.camera.at(tau)
        x = self.xx + ox
        y = self.yy + oy
        g = np.zeros((3, h, w))
        for f, th, ph, a, mix in zip(self.bg_freq, self.bg_theta, self.bg_phase, self.bg_amp, self.bg_mix):
            wave = a * np.sin(2 * np.pi * f * (x * np.cos(th) + y * np.sin(th)) + ph)
            g += mix[:, None, None] * wave
        img = self.bg_base[:, None, None] + 0.12 * g
        for s in self.sprites:
            cx, cy = s["path"].at(tau)
            hx, hy = s["half"]
            lx = self.xx - cx
            ly = self.yy - cy
            if s["kind"] == "disk":
                alpha = np.clip(hx - np.hypot(lx, ly) + 0.5, 0.0, 1.0)
            else:
                alpha = _coverage_1d(lx, -hx, hx) * _coverage_1d(ly, -hy, hy)
            th = s["stripe_theta"]
            stripes = np.sin(2 * np.pi * s["stripe_freq"] * (lx * np.cos(th) + ly * np.sin(th)))
            tex = s["color"][:, None, None] * (1.0 - s["stripe_depth"] * (0.5 + 0.5 * stripes))
            img = img * (1.0 - alpha) + tex * alpha
        return np.clip(img, 0.0, 1.0)


def _quantize(img):
    return (to_bytes8(img).astype(np.float64) / 255.0).astype(np.float32)[None]


def gen_synthetic_sequence(seed, frames, size=(64, 64), n_subframes=9, motion=None):
    """Render one clip of ``frames`` blurry/sharp pairs, deterministic in ``seed``."""
    if frames < 2:
        raise ValueError(f"a sequence needs at least 2 frames, got {frames}")
    if n_subframes < 1:
        raise ValueError(f"n_subframes must be >= 1, got {n_subframes}")
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"invalid frame size {size}")
    motion = motion or MotionSpec()
    scene = _Scene(generator(seed, "scene"), frames, (h, w), motion)
    blurry, sharp = [], []
    for t in range(frames):
        sharp.append(_quantize(scene.render(t + 0.5)))
        acc = np.zeros((3, h, w))
        for s in range(n_subframes):
            acc += scene.render(t + (s + 0.5) / n_subframes)
        blurry.append(_quantize(acc / n_subframes))
    meta = dict(seed=int(seed), n_subframes=int(n_subframes), motion=motion)
    return SequenceSample(blurry, sharp, meta)


def gen_dataset(seed, clips, frames, size=(64, 64), n_subframes=9, motion=None):
    """``clips`` independent clips; clip ``i`` uses a seed derived from ``(seed, i)``."""
    samples = []
    for i in range(clips):
        clip_seed = int(generator(seed, "data", i).integers(0, 2**62))
        samples.append(gen_synthetic_sequence(clip_seed, frames, size, n_subframes, motion))
    return samples


# ---------------------------------------------------------------------------
# directory layout


def write_dataset(root, samples):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        clip = root / f"clip_{i:04d}"
        for sub, frames in (("blur", sample.blurry), ("sharp", sample.sharp)):
            d = clip / sub
            d.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(frames):
                write_image(d / f"frame_{t:04d}.ppm", frame)


def read_frames(directory):
    files = sorted(Path(directory).glob("frame_*.ppm"))
    return [read_image(f) for f in files]


def read_dataset(root):
    """Load every ``clip_*`` directory under ``root`` in name order."""
    root = Path(root)
    clip_dirs = sorted(p for p in root.glob("clip_*") if p.is_dir())
    if not clip_dirs:
        raise FileNotFoundError(f"no clip_* directories under {root}")
    samples = []
    for d in clip_dirs:
        blurry = read_frames(d / "blur")
        sharp = read_frames(d / "sharp")
        if not blurry:
            raise FileNotFoundError(f"{d / 'blur'} holds no frames")
        samples.append(SequenceSample(blurry, sharp, dict(clip=d.name)))
    return samples


# ---------------------------------------------------------------------------
# training windows


def random_window(sample, length, crop, rng, flip=True):
    """Random temporal window, spatial crop and optional horizontal flip.

    Returns ``(blurry, sharp)`` as lists of ``(1, 3, crop, crop)`` arrays.
    """
    n = len(sample)
    if length > n:
        raise ValueError(f"window of {length} frames exceeds clip length {n}")
    _, _, h, w = sample.shape
    ch, cw = (crop, crop) if crop else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} larger than frames {h}x{w}")
    t0 = int(rng.integers(0, n - length + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    mirror = bool(flip and rng.random() < 0.5)

    def cut(frames):
        out = []
        for f in frames[t0 : t0 + length]:
            patch = f[:, :, y0 : y0 + ch, x0 : x0 + cw]
            out.append(np.ascontiguousarray(patch[..., ::-1] if mirror else patch))
        return out

    return cut(sample.blurry), cut(sample.sharp)


def stack_windows(windows):
    """Stack per-clip windows along the batch axis into one SequenceSample."""
    blurry = [np.concatenate(frames, axis=0) for frames in zip(*(b for b, _ in windows))]
    sharp = [np.concatenate(frames, axis=0) for frames in zip(*(s for _, s in windows))]
    return SequenceSample(blurry, sharp)
