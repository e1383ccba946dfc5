"""Input coercion for clip-shaped data.

A *clip* is accepted as a ``(T, 3, h, w)`` array, a list of ``(3, h, w)``
or ``(1, 3, h, w)`` frames, or a :class:`~rirn.data.SequenceSample`.
Internally every clip becomes a list of contiguous ``(1, 3, h, w)``
float32 arrays.
"""

from __future__ import annotations

import numpy as np

from .data import SequenceSample

__all__ = ["check_clip", "check_clips", "check_paired"]


def check_clip(clip, dtype=np.float32, min_frames=1, name="clip"):
    if isinstance(clip, SequenceSample):
        clip = clip.blurry
    if isinstance(clip, np.ndarray):
        if clip.ndim != 4:
            raise ValueError(f"{name}: expected a (T, 3, h, w) array, got shape {clip.shape}")
        frames = [clip[t : t + 1] for t in range(clip.shape[0])]
    else:
        frames = []
        for f in clip:
            f = np.asarray(getattr(f, "data", f))
            if f.ndim == 3:
                f = f[None]
            if f.ndim != 4 or f.shape[0] != 1:
                raise ValueError(f"{name}: each frame must be (3, h, w) or (1, 3, h, w), got {f.shape}")
            frames.append(f)
    if len(frames) < min_frames:
        raise ValueError(f"{name}: need at least {min_frames} frames, got {len(frames)}")
    shape = frames[0].shape
    if shape[1] != 3:
        raise ValueError(f"{name}: frames must have 3 channels, got {shape[1]}")
    out = []
    for t, f in enumerate(frames):
        if f.shape != shape:
            raise ValueError(f"{name}: frame {t} has shape {f.shape}, expected {shape}")
        f = np.ascontiguousarray(f, dtype=dtype)
        if not np.all(np.isfinite(f)):
            raise ValueError(f"{name}: frame {t} contains non-finite values")
        out.append(f)
    return out


def check_clips(X, dtype=np.float32, min_frames=1):
    if isinstance(X, (SequenceSample, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 5):
        X = [X]
    clips = [check_clip(c, dtype, min_frames, name=f"clip {i}") for i, c in enumerate(X)]
    if not clips:
        raise ValueError("no clips given")
    return clips


def check_paired(X, y=None, dtype=np.float32, min_frames=1):
    """Return a list of :class:`SequenceSample`.

    With ``y=None``, ``X`` must already be a sequence of samples.
    """
    if y is None:
        if isinstance(X, SequenceSample):
            X = [X]
        samples = []
        for i, s in enumerate(X):
            if not isinstance(s, SequenceSample):
                raise TypeError("y is required unless X holds SequenceSample objects")
            blurry = check_clip(s.blurry, dtype, min_frames, name=f"clip {i} blurry")
            sharp = check_clip(s.sharp, dtype, min_frames, name=f"clip {i} sharp")
            _check_match(blurry, sharp, i)
            samples.append(SequenceSample(blurry, sharp, dict(s.meta)))
        if not samples:
            raise ValueError("no clips given")
        return samples
    blurry_clips = check_clips(X, dtype, min_frames)
    sharp_clips = check_clips(y, dtype, min_frames)
    if len(blurry_clips) != len(sharp_clips):
        raise ValueError(f"X has {len(blurry_clips)} clips but y has {len(sharp_clips)}")
    samples = []
    for i, (b, s) in enumerate(zip(blurry_clips, sharp_clips)):
        _check_match(b, s, i)
        samples.append(SequenceSample(b, s, dict(clip=f"clip_{i:04d}")))
    return samples


def _check_match(blurry, sharp, i):
    if len(blurry) != len(sharp):
        raise ValueError(f"clip {i}: {len(blurry)} blurry frames but {len(sharp)} sharp frames")
    if blurry[0].shape != sharp[0].shape:
        raise ValueError(f"clip {i}: blurry frames {blurry[0].shape} vs sharp frames {sharp[0].shape}")
