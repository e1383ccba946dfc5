"""Seeded synthetic benchmark and the variant ablation battery."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import gen_dataset
from .estimator import RIRNDeblurrer
from .metrics import psnr

__all__ = ["BATTERY_PARAMS", "BenchmarkSpec", "make_benchmark", "BatteryResult", "run_battery", "dataset_psnr"]


# training settings of the ablation battery, shared by every variant
BATTERY_PARAMS = dict(crop=16, windows_per_clip=10)


@dataclass(frozen=True)
class BenchmarkSpec:
    data_seed: int = 2024
    train_clips: int = 20
    eval_clips: int = 3
    frames: int = 16
    size: int = 64
    subframes: int = 9


def make_benchmark(spec=BenchmarkSpec()):
    """``(train, eval)`` lists of SequenceSample drawn from disjoint seed streams."""
    size = (spec.size, spec.size)
    train = gen_dataset(spec.data_seed, spec.train_clips, spec.frames, size, spec.subframes)
    evalset = gen_dataset(spec.data_seed + 1_000_003, spec.eval_clips, spec.frames, size, spec.subframes)
    for i, s in enumerate(train):
        s.meta["clip"] = f"clip_{i:04d}"
    for i, s in enumerate(evalset):
        s.meta["clip"] = f"clip_{i:04d}"
    return train, evalset


def dataset_psnr(samples):
    """Mean per-frame PSNR of the blurry inputs against their sharp targets."""
    return float(np.mean([psnr(b, s) for smp in samples for b, s in zip(smp.blurry, smp.sharp)]))


@dataclass
class BatteryResult:
    reports: dict = field(default_factory=dict)  # (variant, seed) -> EvalReport
    attn: dict = field(default_factory=dict)  # (variant, seed) -> AttnStats
    seconds: float = 0.0
    input_psnr: float = float("nan")

    def variants(self):
        return list(dict.fromkeys(v for v, _ in self.reports))

    def seeds(self):
        return sorted({s for _, s in self.reports})

    def mean_psnr(self, variant):
        vals = [r.psnr for (v, _), r in self.reports.items() if v == variant]
        return float(np.mean(vals))

    def mean_ssim(self, variant):
        vals = [r.ssim for (v, _), r in self.reports.items() if v == variant]
        return float(np.mean(vals))

    def to_table(self):
        seeds = self.seeds()
        head = f"{'variant':<10}" + "".join(f" {'seed ' + str(s):>10}" for s in seeds) + f" {'mean':>10} {'ssim':>8}"
        lines = [head]
        for v in self.variants():
            row = f"{v:<10}" + "".join(f" {self.reports[(v, s)].psnr:>10.4f}" for s in seeds)
            lines.append(row + f" {self.mean_psnr(v):>10.4f} {self.mean_ssim(v):>8.4f}")
        lines.append(f"{'input':<10} {self.input_psnr:.4f}")
        return "\n".join(lines) + "\n"

    def to_jsonl(self):
        out = []
        for (v, s), r in self.reports.items():
            rec = dict(variant=v, seed=s, psnr=r.psnr, ssim=r.ssim)
            if (v, s) in self.attn:
                rec["fraction_below_1"] = self.attn[(v, s)].fraction_below_1
                rec["attn_mean"] = self.attn[(v, s)].mean
            out.append(json.dumps(rec, sort_keys=True))
        return "\n".join(out) + "\n"


def run_battery(train, evalset, variants=("baseline", "irm", "atb", "dtb", "rirn"), seeds=(0, 1, 2),
                progress=None, **estimator_kwargs):
    """Train every variant under every seed and score it on ``evalset``.

    Variants share the seed, so layers they have in common start from the
    same weights.
    """
    result = BatteryResult(input_psnr=dataset_psnr(evalset))
    t0 = time.perf_counter()
    for seed in seeds:
        for variant in variants:
            est = RIRNDeblurrer(variant=variant, seed=seed, **estimator_kwargs)
            est.fit(train)
            report = est.evaluate(evalset, label=variant, timing=False)
            result.reports[(variant, seed)] = report
            if est.config_.uses_blending:
                result.attn[(variant, seed)] = est.attention_stats(evalset)
            if progress is not None:
                progress(variant, seed, report, time.perf_counter() - t0)
    result.seconds = time.perf_counter() - t0
    return result
