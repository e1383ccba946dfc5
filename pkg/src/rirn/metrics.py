"""PSNR, SSIM and attention-weight statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "psnr",
    "ssim",
    "luminance",
    "gaussian_window",
    "EvalReport",
    "AttnStats",
    "attn_stats_from_maps",
    "format_psnr",
]

LUMA = (0.299, 0.587, 0.114)


def _array(x):
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(a, b, peak=1.0):
    """``10 log10(peak^2 / MSE)`` in dB; ``inf`` when the inputs are identical."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def format_psnr(value):
    return "inf" if math.isinf(value) else f"{value:.4f}"


def luminance(x):
    """Collapse RGB to luma. Accepts ``(n, 3, h, w)``, ``(3, h, w)`` or grayscale ``(h, w)``."""
    x = _array(x)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected RGB (n, 3, h, w) or (3, h, w), got {x.shape}")
    r, g, b = LUMA
    return r * x[:, 0] + g * x[:, 1] + b * x[:, 2]


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable valid-mode weighted window sums over the last two axes."""
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=-2) @ g


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Mean SSIM over valid 11x11 Gaussian windows of the luma channel.

    A batch of images is averaged into a single value.
    """
    x, y = luminance(a), luminance(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if x.shape[-2] < window or x.shape[-1] < window:
        raise ValueError(f"ssim: image {x.shape[-2]}x{x.shape[-1]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Per-frame metrics grouped by clip.

    Aggregates are means over all frames, not over per-clip means.
    """

    label: str
    clip_ids: list = field(default_factory=list)
    frame_psnr: list = field(default_factory=list)  # one list per clip
    frame_ssim: list = field(default_factory=list)
    sec_per_frame: float = 0.0

    def add_clip(self, clip_id, psnrs, ssims):
        self.clip_ids.append(clip_id)
        self.frame_psnr.append([float(v) for v in psnrs])
        self.frame_ssim.append([float(v) for v in ssims])

    @staticmethod
    def _mean(values):
        return float(np.mean(values)) if values else float("nan")

    @property
    def psnr(self):
        return self._mean([v for clip in self.frame_psnr for v in clip])

    @property
    def ssim(self):
        return self._mean([v for clip in self.frame_ssim for v in clip])

    def clip_psnr(self, i):
        return self._mean(self.frame_psnr[i])

    def clip_ssim(self, i):
        return self._mean(self.frame_ssim[i])

    def records(self, timing=True):
        out = []
        for i, cid in enumerate(self.clip_ids):
            rec = dict(label=self.label, clip=cid, psnr=self.clip_psnr(i), ssim=self.clip_ssim(i))
            if timing:
                rec["sec_per_frame"] = self.sec_per_frame
            out.append(rec)
        return out

    def to_jsonl(self, timing=True):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records(timing))

    def to_table(self, timing=True):
        head = f"{'label':<12} {'clip':<12} {'psnr':>10} {'ssim':>8}"
        if timing:
            head += f" {'sec/frame':>10}"
        lines = [head]
        rows = [(r["clip"], r["psnr"], r["ssim"]) for r in self.records(False)]
        rows.append(("mean", self.psnr, self.ssim))
        for cid, p, s in rows:
            line = f"{self.label:<12} {cid:<12} {format_psnr(p):>10} {s:>8.4f}"
            if timing:
                line += f" {self.sec_per_frame:>10.5f}"
            lines.append(line)
        return "\n".join(lines) + "\n"


@dataclass
class AttnStats:
    """Distribution of per-pixel ``w + w~`` over fixed bins on ``[0, 4]``.

    Values beyond the last edge are counted in the last bin.
    """

    edges: np.ndarray
    hist: np.ndarray
    fraction_below_1: float
    mean: float
    count: int

    def to_text(self):
        lines = [
            f"count = {self.count}",
            f"mean = {self.mean:.3f}",
            f"fraction_below_1 = {self.fraction_below_1:.3f}",
        ]
        for lo, hi, m in zip(self.edges[:-1], self.edges[1:], self.hist):
            lines.append(f"[{lo:.2f}, {hi:.2f}) {m:.6f}")
        return "\n".join(lines) + "\n"


def attn_stats_from_maps(maps, bins=40, upper=4.0):
    """Pool ``(w, w~)`` pairs from any number of frames into :class:`AttnStats`."""
    sums = []
    for w, w_tilde in maps:
        # add in the maps' own precision: there w + (1 - w) == 1 exactly
        s = np.asarray(getattr(w, "data", w)) + np.asarray(getattr(w_tilde, "data", w_tilde))
        sums.append(s.reshape(-1).astype(np.float64))
    if not sums:
        raise ValueError("no attention maps to summarize")
    s = np.concatenate(sums)
    edges = np.linspace(0.0, upper, bins + 1)
    idx = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, bins - 1)
    hist = np.bincount(idx, minlength=bins).astype(np.float64) / s.size
    return AttnStats(
        edges=edges,
        hist=hist,
        fraction_below_1=float(np.mean(s < 1.0)),
        mean=float(np.mean(s)),
        count=int(s.size),
    )
