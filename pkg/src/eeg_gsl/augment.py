"""Stochastic view generation for contrastive pretraining.

Four families of corruption, all shape preserving: additive Gaussian
noise, contiguous signal masking, flips along the time or electrode axis,
and DC shifts. A view composes `compose_count` augmentations drawn
uniformly from the enabled set. Magnitudes are in units of per-window
standard deviation, so windows are expected to be standardized first.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from eeg_gsl.signal import Window

AUGMENTATIONS = ("noise", "mask", "time_flip", "electrode_flip", "dc_shift")


@dataclass
class AugmentPolicy:
    noise_sigma_range: tuple[float, float] = (0.0, 0.2)
    mask_fraction_range: tuple[float, float] = (0.0, 0.25)
    dc_shift_range: tuple[float, float] = (-0.1, 0.1)
    flip_probability: float = 0.5
    enabled: tuple[str, ...] = AUGMENTATIONS
    compose_count: int = 2

    def __post_init__(self):
        if not 0.0 <= self.mask_fraction_range[0] <= self.mask_fraction_range[1] < 1.0:
            raise ValueError(f"mask_fraction_range must lie in [0, 1): {self.mask_fraction_range}")
        if self.noise_sigma_range[0] < 0 or not np.isfinite(self.noise_sigma_range).all():
            raise ValueError(f"noise_sigma_range must be finite and non-negative: {self.noise_sigma_range}")
        unknown = set(self.enabled) - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentations: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentPolicy":
        d = dict(d)
        for key in ("noise_sigma_range", "mask_fraction_range", "dc_shift_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "enabled" in d:
            d["enabled"] = tuple(d["enabled"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "noise_sigma_range": list(self.noise_sigma_range),
            "mask_fraction_range": list(self.mask_fraction_range),
            "dc_shift_range": list(self.dc_shift_range),
            "flip_probability": self.flip_probability,
            "enabled": list(self.enabled),
            "compose_count": self.compose_count,
        }


def _apply(name: str, x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    C, L = x.shape
    if name == "noise":
        sigma = rng.uniform(*policy.noise_sigma_range)
        return x + (sigma * rng.standard_normal((C, L))).astype(np.float32)
    if name == "mask":
        frac = rng.uniform(*policy.mask_fraction_range)
        width = int(round(frac * L))
        start = int(rng.integers(0, L - width + 1)) if width < L else 0
        out = x.copy()
        out[:, start:start + width] = 0.0  # one contiguous segment, all channels
        return out
    if name == "time_flip":
        return x[:, ::-1].copy() if rng.random() < policy.flip_probability else x
    if name == "electrode_flip":
        return x[::-1, :].copy() if rng.random() < policy.flip_probability else x
    if name == "dc_shift":
        return x + np.float32(rng.uniform(*policy.dc_shift_range))
    raise ValueError(f"unknown augmentation {name!r}")


def sample_view(w: Window, policy: AugmentPolicy, rng: np.random.Generator) -> Window:
    """One augmented view; label and subject metadata are preserved."""
    if not policy.enabled:
        warnings.warn("all augmentations disabled; returning identity view")
        return Window(w.subject_id, w.label, w.samples.copy(), w.window_index)
    k = min(policy.compose_count, len(policy.enabled))
    chosen = rng.choice(len(policy.enabled), size=k, replace=False)
    x = w.samples
    for idx in chosen:
        x = _apply(policy.enabled[idx], x, policy, rng)
    return Window(w.subject_id, w.label, x.astype(np.float32, copy=True), w.window_index)


def sample_pair(w: Window, policy: AugmentPolicy, rng: np.random.Generator) -> tuple[Window, Window]:
    """Two independent draws of sample_view on the same source window."""
    return sample_view(w, policy, rng), sample_view(w, policy, rng)
