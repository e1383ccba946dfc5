"""Scikit-learn style estimator wrapping training, inference and checkpoints."""

from __future__ import annotations

import logging
import time

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import io as rio
from .cells import VARIANTS, CellConfig, init_params
from .data import random_window, stack_windows
from .metrics import EvalReport, attn_stats_from_maps, psnr, ssim
from .optim import Adam, LrSchedule
from .seeding import generator
from .sequence import run_sequence, train_step
from .tensor import no_grad
from .validation import check_clips, check_paired

__all__ = ["RIRNDeblurrer", "format_milestones", "parse_milestones"]

log = logging.getLogger(__name__)


def parse_milestones(text):
    """``"25:0.1,40:0.5"`` -> ``((25, 0.1), (40, 0.5))``; empty string -> ``()``."""
    if isinstance(text, (tuple, list)):
        return tuple((int(e), float(m)) for e, m in text)
    text = str(text).strip()
    if not text or text == "none":
        return ()
    out = []
    for item in text.split(","):
        epoch, sep, mult = item.partition(":")
        if not sep:
            raise ValueError(f"bad milestone {item!r}; expected epoch:multiplier")
        out.append((int(epoch), float(mult)))
    return tuple(out)


def format_milestones(milestones):
    return ",".join(f"{e}:{m!r}" for e, m in milestones) or "none"


class RIRNDeblurrer(BaseEstimator):
    """Recurrent video deblurrer with optional IRM and temporal blending.

    Parameters
    ----------
    variant : {"baseline", "irm", "atb", "dtb", "rirn"}
        Which supplementary blocks are on. ``rirn`` enables IRM and ATB.
    base_cell : {"plain", "gru", "lstm"}
        Recurrent encoder underneath.
    feat_channels, hidden_channels : int
        Widths of ``f_t`` and ``h_t``.
    epochs : int
        Passes over the training clips.
    batch_size : int
        Clips per optimizer step.
    lr : float
        Initial ADAM learning rate.
    lr_milestones : tuple of (epoch, multiplier) or str
        Step annealing schedule, e.g. ``((25, 0.1),)`` or ``"25:0.1"``.
    unroll : int
        Frames per training window; gradients flow through the whole window.
    crop : int or None
        Square training crop size; ``None`` trains on full frames.
    windows_per_clip : int
        Training windows drawn from every clip per epoch.
    flip : bool
        Random horizontal flips during training.
    seed : int
        Master seed for initialization, shuffling and augmentation.
    """

    def __init__(
        self,
        variant="rirn",
        base_cell="plain",
        feat_channels=16,
        hidden_channels=16,
        epochs=40,
        batch_size=4,
        lr=1e-3,
        lr_milestones=((25, 0.1),),
        unroll=8,
        crop=64,
        windows_per_clip=1,
        flip=True,
        seed=0,
    ):
        self.variant = variant
        self.base_cell = base_cell
        self.feat_channels = feat_channels
        self.hidden_channels = hidden_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_milestones = lr_milestones
        self.unroll = unroll
        self.crop = crop
        self.windows_per_clip = windows_per_clip
        self.flip = flip
        self.seed = seed

    # -- configuration -------------------------------------------------------

    def cell_config(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {sorted(VARIANTS)}, got {self.variant!r}")
        return CellConfig.from_variant(
            self.variant,
            feat_channels=int(self.feat_channels),
            hidden_channels=int(self.hidden_channels),
            base_cell=self.base_cell,
        )

    def schedule(self):
        return LrSchedule(float(self.lr), parse_milestones(self.lr_milestones))

    def _validate_hyperparams(self):
        if int(self.epochs) < 0:
            raise ValueError("epochs must be >= 0")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if int(self.unroll) < 2:
            raise ValueError("unroll must be >= 2")
        if int(self.windows_per_clip) < 1:
            raise ValueError("windows_per_clip must be >= 1")
        if self.crop is not None and int(self.crop) < 1:
            raise ValueError("crop must be positive or None")
        if float(self.lr) <= 0:
            raise ValueError("lr must be positive")

    def initialize(self):
        """Fresh parameters and optimizer state without training."""
        self._validate_hyperparams()
        self.config_ = self.cell_config()
        self.params_ = init_params(self.config_, seed=self.seed)
        self.optimizer_ = Adam(list(self.params_.values()))
        self.history_ = []
        self.n_epochs_ = 0
        return self

    # -- training ------------------------------------------------------------

    def fit(self, X, y=None, eval_set=None, callback=None):
        """Train from scratch for ``epochs`` epochs.

        Parameters
        ----------
        X : list of SequenceSample, or list of blurry clips
        y : list of sharp clips, optional
            Required when ``X`` holds bare clips.
        eval_set : list of SequenceSample, optional
            Scored (PSNR) before training and after every epoch.
        callback : callable, optional
            Called as ``callback(self, record)`` after each scored epoch,
            including epoch 0; ``record`` is the latest history entry.
        """
        samples = check_paired(X, y, min_frames=int(self.unroll))
        if eval_set is not None:
            eval_set = check_paired(eval_set)
        self.initialize()
        if eval_set is not None:
            self._record(0, float("nan"), eval_set, callback)
        for _ in range(int(self.epochs)):
            self._fit_epoch(samples)
            self._record(self.n_epochs_, self.last_loss_, eval_set, callback)
        return self

    def _fit_epoch(self, samples):
        epoch = self.n_epochs_
        lr = self.schedule().lr_at(epoch)
        shuffle = generator(self.seed, "shuffle", epoch)
        augment = generator(self.seed, "augment", epoch)
        order = np.concatenate([shuffle.permutation(len(samples)) for _ in range(int(self.windows_per_clip))])
        bs = int(self.batch_size)
        crop = None if self.crop is None else int(self.crop)
        losses = []
        for start in range(0, len(order), bs):
            windows = [random_window(samples[i], int(self.unroll), crop, augment, self.flip) for i in order[start : start + bs]]
            batch = stack_windows(windows)
            losses.append(train_step(batch, self.config_, self.params_, self.optimizer_, lr))
        self.n_epochs_ += 1
        self.last_loss_ = float(np.mean(losses))
        log.debug("epoch %d lr=%g loss=%.6f", self.n_epochs_, lr, self.last_loss_)
        return self.last_loss_

    def _record(self, epoch, loss, eval_set, callback):
        rec = dict(epoch=epoch, loss=loss, lr=self.schedule().lr_at(max(epoch - 1, 0)))
        if eval_set is not None:
            rec["psnr"] = self.evaluate(eval_set, timing=False).psnr
        self.history_.append(rec)
        if callback is not None:
            callback(self, rec)

    # -- inference -----------------------------------------------------------

    def _forward(self, clip, return_maps=False):
        with no_grad():
            res = run_sequence(clip, self.config_, self.params_)
        outs = [o.data for o in res.outputs]
        if return_maps:
            return outs, [m for m in res.maps if m is not None]
        return outs

    def predict(self, X, clamp=True):
        """Deblur each clip; returns a list of ``(T, 3, h, w)`` arrays.

        Outputs are clamped to ``[0, 1]`` unless ``clamp=False``.
        """
        check_is_fitted(self, "params_")
        clips = check_clips(X)
        results = []
        for clip in clips:
            outs = np.concatenate(self._forward(clip), axis=0)
            results.append(np.clip(outs, 0.0, 1.0) if clamp else outs)
        return results

    def score(self, X, y=None):
        """Mean per-frame PSNR (dB) of clamped outputs."""
        return self.evaluate(check_paired(X, y), timing=False).psnr

    def evaluate(self, samples, label=None, timing=True):
        """Per-frame PSNR/SSIM over ``samples`` as an :class:`EvalReport`."""
        check_is_fitted(self, "params_")
        samples = check_paired(samples)
        report = EvalReport(label or self.variant)
        if timing:
            self._forward(samples[0].blurry[:1])  # warm-up so the first clip is not charged for it
        elapsed = 0.0
        frames = 0
        for i, s in enumerate(samples):
            t0 = time.perf_counter()
            outs = self._forward(s.blurry)
            elapsed += time.perf_counter() - t0
            frames += len(outs)
            outs = [np.clip(o, 0.0, 1.0) for o in outs]
            report.add_clip(
                s.meta.get("clip", f"clip_{i:04d}"),
                [psnr(o, t) for o, t in zip(outs, s.sharp)],
                [ssim(o, t) for o, t in zip(outs, s.sharp)],
            )
        report.sec_per_frame = elapsed / frames if timing else 0.0
        return report

    def attention_stats(self, samples, bins=40):
        """Pooled ``w + w~`` statistics over every pixel of every frame."""
        check_is_fitted(self, "params_")
        if not self.config_.uses_blending:
            raise ValueError(f"variant {self.variant!r} has no temporal blending to summarize")
        maps = []
        for clip in check_clips(samples):
            maps.extend(self._forward(clip, return_maps=True)[1])
        return attn_stats_from_maps(maps, bins=bins)

    # -- persistence ---------------------------------------------------------

    def to_checkpoint(self):
        check_is_fitted(self, "params_")
        config = {k: v for k, v in self.get_params().items()}
        config["lr_milestones"] = format_milestones(parse_milestones(self.lr_milestones))
        config["crop"] = "none" if self.crop is None else int(self.crop)
        config["in_channels"] = self.config_.in_channels
        tensors = {}
        steps = set()
        for name, p in self.params_.items():
            tensors[name] = p.value.data
            tensors["adam.m/" + name] = p.m
            tensors["adam.v/" + name] = p.v
            steps.add(p.step_count)
        if len(steps) != 1:
            raise RuntimeError("parameters disagree on the optimizer step count")
        return rio.Checkpoint(config=config, tensors=tensors, epoch=self.n_epochs_, adam_step=steps.pop())

    def save(self, path):
        rio.save_checkpoint(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt, expect=None):
        """Rebuild a fitted estimator.

        ``expect`` optionally overrides architecture fields (e.g.
        ``{"feat_channels": 8}``); stored tensors must then fit that
        architecture or :class:`~rirn.io.CheckpointError` names the first
        offending parameter.
        """
        cfg = dict(ckpt.config)
        cfg.pop("in_channels", None)
        if cfg.get("crop") == "none":
            cfg["crop"] = None
        if "lr_milestones" in cfg:
            cfg["lr_milestones"] = parse_milestones(cfg["lr_milestones"])
        if expect:
            cfg.update(expect)
        names = cls._get_param_names()
        unknown = sorted(set(cfg) - set(names))
        if unknown:
            raise rio.CheckpointError(f"checkpoint config has unknown keys {unknown}")
        est = cls(**cfg).initialize()
        for name, p in est.params_.items():
            for key, target in ((name, p.value.data), ("adam.m/" + name, p.m), ("adam.v/" + name, p.v)):
                if key not in ckpt.tensors:
                    raise rio.CheckpointError(f"checkpoint is missing parameter {key!r}")
                arr = ckpt.tensors[key]
                if arr.shape != target.shape:
                    raise rio.CheckpointError(
                        f"shape mismatch for parameter {key!r}: checkpoint {arr.shape}, model {target.shape}"
                    )
        extra = sorted(set(ckpt.tensors) - {k for n in est.params_ for k in (n, "adam.m/" + n, "adam.v/" + n)})
        if extra:
            raise rio.CheckpointError(f"checkpoint holds tensors the model does not use: {extra[:3]}")
        for name, p in est.params_.items():
            p.value.data[...] = ckpt.tensors[name]
            p.m[...] = ckpt.tensors["adam.m/" + name]
            p.v[...] = ckpt.tensors["adam.v/" + name]
            p.step_count = ckpt.adam_step
        est.n_epochs_ = ckpt.epoch
        return est

    @classmethod
    def load(cls, path, expect=None):
        return cls.from_checkpoint(rio.load_checkpoint(path), expect=expect)

    def zero_params(self):
        """Set every weight to zero (the identity model on frames)."""
        check_is_fitted(self, "params_")
        for p in self.params_.values():
            p.value.data[...] = 0
        return self

