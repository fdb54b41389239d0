"""Recording ingestion, preprocessing, PCC graphs, and synthetic cohorts.

Preprocessing follows the minimal chain: re-reference to the mean of named
reference channels, zero-phase band-pass, segmentation into fixed
non-overlapping windows, then per-window standardization. The band-pass is
an order-4 Butterworth applied forward-backward (SOS form for numerical
stability at low cutoffs), with reflected edge padding of three
coefficient lengths to tame startup transients.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

from eeg_gsl import autodiff as ad
from eeg_gsl._util import seeded_rng

LABELS = ("HC", "PD")
FILTER_ORDER = 4
_PAD_FACTOR = 3 * (2 * FILTER_ORDER + 1)


class DatasetError(ValueError):
    """Malformed manifest, tensor file, or recording metadata."""


@dataclass
class Recording:
    """Multi-channel signal at a fixed sample rate."""

    subject_id: str
    label: str
    sample_rate_hz: int
    channels: np.ndarray          # (C, n_samples) float32
    channel_names: list[str]

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.label not in LABELS:
            raise DatasetError(f"subject {self.subject_id}: unknown label {self.label!r}")
        if self.sample_rate_hz <= 0:
            raise DatasetError(f"subject {self.subject_id}: sample_rate_hz must be positive")
        if self.channels.ndim != 2:
            raise DatasetError(f"subject {self.subject_id}: channels must be 2-D (C, n)")
        if len(self.channel_names) != self.channels.shape[0]:
            raise DatasetError(
                f"subject {self.subject_id}: {self.channels.shape[0]} channels but "
                f"{len(self.channel_names)} channel names"
            )

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]


@dataclass
class Window:
    """Fixed-length segment of a recording."""

    subject_id: str
    label: str
    samples: np.ndarray           # (C, L) float32
    window_index: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)

    @property
    def label_index(self) -> int:
        return LABELS.index(self.label)


@dataclass
class StaticGraph:
    """Symmetric adjacency with unit diagonal, entries in [0, 1]."""

    adjacency: np.ndarray


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_dataset(manifest_path) -> list[Recording]:
    """Load recordings listed in a JSON manifest.

    Manifest schema:
      {"subjects": [{"id", "label", "file", "sample_rate_hz", "channel_names"}]}
    Each file is a serialized raw tensor of shape (C, n_samples). Relative
    file paths resolve against the manifest directory.
    """
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.fspath(manifest_path))
    subjects = manifest.get("subjects", [])
    if not subjects:
        warnings.warn(f"{manifest_path}: empty manifest")
        return []
    recordings = []
    for entry in subjects:
        sid = entry.get("id", "<missing id>")
        path = entry["file"]
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        if not os.path.exists(path):
            raise DatasetError(f"subject {sid}: tensor file not found: {path}")
        named, _ = ad.load_tensors(path)
        if len(named) != 1:
            raise DatasetError(f"subject {sid}: expected one tensor in {path}, got {len(named)}")
        data = next(iter(named.values()))
        names = list(entry["channel_names"])
        if data.ndim != 2 or data.shape[0] != len(names):
            raise DatasetError(
                f"subject {sid}: tensor shape {data.shape} does not match "
                f"{len(names)} declared channels"
            )
        recordings.append(
            Recording(
                subject_id=str(sid),
                label=entry["label"],
                sample_rate_hz=int(entry["sample_rate_hz"]),
                channels=data,
                channel_names=names,
            )
        )
    return recordings


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def rereference(rec: Recording, ref_names: list[str]) -> Recording:
    """Subtract the mean of the reference channels; the references are
    dropped from the output."""
    missing = [n for n in ref_names if n not in rec.channel_names]
    if missing:
        raise DatasetError(f"subject {rec.subject_id}: unknown reference channels {missing}")
    ref_idx = [rec.channel_names.index(n) for n in ref_names]
    keep_idx = [i for i in range(rec.n_channels) if i not in ref_idx]
    ref = rec.channels[ref_idx].mean(axis=0, dtype=np.float64).astype(np.float32)
    return Recording(
        subject_id=rec.subject_id,
        label=rec.label,
        sample_rate_hz=rec.sample_rate_hz,
        channels=rec.channels[keep_idx] - ref[None, :],
        channel_names=[rec.channel_names[i] for i in keep_idx],
    )


def bandpass(rec: Recording, lo_hz: float = 0.5, hi_hz: float = 80.0) -> Recording:
    """Zero-phase Butterworth band-pass, per channel; length preserved."""
    nyq = rec.sample_rate_hz / 2.0
    if not 0.0 < lo_hz < hi_hz < nyq:
        raise DatasetError(
            f"subject {rec.subject_id}: band ({lo_hz}, {hi_hz}) Hz invalid for "
            f"sample rate {rec.sample_rate_hz} Hz"
        )
    if rec.n_samples <= _PAD_FACTOR:
        raise DatasetError(
            f"subject {rec.subject_id}: recording too short to filter "
            f"({rec.n_samples} <= {_PAD_FACTOR} samples)"
        )
    sos = butter(FILTER_ORDER, [lo_hz, hi_hz], btype="bandpass", fs=rec.sample_rate_hz, output="sos")
    filtered = sosfiltfilt(sos, rec.channels.astype(np.float64), axis=-1,
                           padtype="even", padlen=_PAD_FACTOR)
    return Recording(
        subject_id=rec.subject_id,
        label=rec.label,
        sample_rate_hz=rec.sample_rate_hz,
        channels=filtered.astype(np.float32),
        channel_names=list(rec.channel_names),
    )


def segment(rec: Recording, window_seconds: float = 2.0) -> list[Window]:
    """Non-overlapping, gap-free windows; the tail remainder is discarded."""
    L = int(round(window_seconds * rec.sample_rate_hz))
    n = rec.n_samples // L
    if n == 0:
        warnings.warn(
            f"subject {rec.subject_id}: recording shorter than one window "
            f"({rec.n_samples} < {L} samples)"
        )
        return []
    return [
        Window(rec.subject_id, rec.label, rec.channels[:, i * L:(i + 1) * L], i)
        for i in range(n)
    ]


def standardize(w: Window, eps: float = 1e-8) -> Window:
    """Per-window, per-channel zero mean and unit variance."""
    mu = w.samples.mean(axis=1, keepdims=True, dtype=np.float64)
    sd = w.samples.std(axis=1, keepdims=True, dtype=np.float64)
    out = (w.samples - mu) / np.maximum(sd, eps)
    return Window(w.subject_id, w.label, out.astype(np.float32), w.window_index)


def preprocess(rec: Recording, ref_names: list[str] | None = None,
               band: tuple[float, float] | None = (0.5, 80.0),
               window_seconds: float = 2.0) -> list[Window]:
    """Full chain: re-reference, band-pass, segment, standardize."""
    if ref_names:
        rec = rereference(rec, ref_names)
    if band is not None:
        rec = bandpass(rec, band[0], band[1])
    return [standardize(w) for w in segment(rec, window_seconds)]


# ---------------------------------------------------------------------------
# static PCC graph
# ---------------------------------------------------------------------------

def pcc_matrix(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absolute Pearson correlation of (C, L) samples.

    Returns (adjacency float32, dead-channel mask); dead channels get zero
    off-diagonal entries instead of NaNs.
    """
    x = samples.astype(np.float64)
    xc = x - x.mean(axis=1, keepdims=True)
    sd = np.sqrt((xc * xc).mean(axis=1))
    dead = sd == 0.0
    denom = np.where(dead, 1.0, sd)
    r = np.abs((xc @ xc.T) / x.shape[1] / np.outer(denom, denom))
    r[dead, :] = 0.0
    r[:, dead] = 0.0
    r = np.clip((r + r.T) / 2.0, 0.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r.astype(np.float32), dead


def pcc_graph(w: Window) -> StaticGraph:
    """Absolute Pearson correlation between channels; unit diagonal.

    Zero-variance channels get zero off-diagonal entries and a warning
    rather than NaNs.
    """
    adjacency, dead = pcc_matrix(w.samples)
    if dead.any():
        warnings.warn(
            f"subject {w.subject_id} window {w.window_index}: zero-variance "
            f"channels {np.flatnonzero(dead).tolist()}"
        )
    return StaticGraph(adjacency=adjacency)


# ---------------------------------------------------------------------------
# synthetic cohorts with planted cross-channel coupling
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Desk-scale cohort: band-limited noise plus class-dependent coupling.

    For each planted edge (i, j) of a subject's class, channel j receives a
    lagged, scaled copy of channel i's band-limited source. HC and PD use
    disjoint edge sets, so classes differ only in cross-channel structure.
    """

    n_hc: int = 4
    n_pd: int = 4
    channels: int = 8
    duration_s: float = 60.0
    sample_rate_hz: int = 128
    edges_hc: list = field(default_factory=lambda: [[0, 2], [1, 3], [4, 6], [5, 7]])
    edges_pd: list = field(default_factory=lambda: [[0, 1], [2, 3], [4, 5], [6, 7]])
    coupling: float = 0.8
    noise_level: float = 1.0
    band: tuple = (1.0, 40.0)
    lag_samples: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        cfg = cls(**d)
        return cfg


def synth_cohort(cfg: SynthConfig, seed: int) -> list[Recording]:
    """Generate a labeled cohort; bit-identical for a given (cfg, seed)."""
    C = cfg.channels
    for edge_set, name in ((cfg.edges_hc, "HC"), (cfg.edges_pd, "PD")):
        for i, j in edge_set:
            if not (0 <= i < C and 0 <= j < C):
                raise DatasetError(f"{name} planted edge ({i}, {j}) outside {C} channels")
    if not 0.0 < cfg.band[0] < cfg.band[1] < cfg.sample_rate_hz / 2.0:
        raise DatasetError(
            f"synth band {cfg.band} invalid for sample rate {cfg.sample_rate_hz} Hz"
        )
    n = int(round(cfg.duration_s * cfg.sample_rate_hz))
    sos = butter(FILTER_ORDER, list(cfg.band), btype="bandpass",
                 fs=cfg.sample_rate_hz, output="sos")
    names = [f"ch{c}" for c in range(C)]
    recs = []
    labels = ["HC"] * cfg.n_hc + ["PD"] * cfg.n_pd
    for idx, label in enumerate(labels):
        rng = seeded_rng(seed, "synth", idx)
        raw = rng.standard_normal((C, n))
        sources = sosfiltfilt(sos, raw, axis=-1)
        sources /= sources.std(axis=1, keepdims=True)
        signals = cfg.noise_level * sources
        edges = cfg.edges_pd if label == "PD" else cfg.edges_hc
        lag = cfg.lag_samples
        for i, j in edges:
            delayed = np.concatenate([np.zeros(lag), sources[i, :n - lag]]) if lag else sources[i]
            signals[j] = signals[j] + cfg.coupling * delayed
        recs.append(
            Recording(
                subject_id=f"{label.lower()}{idx:02d}",
                label=label,
                sample_rate_hz=cfg.sample_rate_hz,
                channels=signals.astype(np.float32),
                channel_names=list(names),
            )
        )
    return recs


def write_cohort(recs: list[Recording], out_dir) -> str:
    """Serialize a cohort as per-subject tensor files plus a manifest.

    Returns the manifest path; the output is loadable by load_dataset.
    """
    os.makedirs(out_dir, exist_ok=True)
    subjects = []
    for rec in recs:
        fname = f"{rec.subject_id}.bin"
        ad.save_tensors(os.path.join(out_dir, fname), {"signal": rec.channels})
        subjects.append(
            {
                "id": rec.subject_id,
                "label": rec.label,
                "file": fname,
                "sample_rate_hz": rec.sample_rate_hz,
                "channel_names": rec.channel_names,
            }
        )
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump({"subjects": subjects}, fh, indent=2)
    return manifest_path


# ---------------------------------------------------------------------------
# window cache
# ---------------------------------------------------------------------------

def save_window_cache(windows: list[Window], channel_names: list[str],
                      sample_rate_hz: int, out_dir) -> None:
    """One (n_windows, C, L) tensor per subject plus a sidecar labels file."""
    os.makedirs(out_dir, exist_ok=True)
    by_subject: dict[str, list[Window]] = {}
    for w in windows:
        by_subject.setdefault(w.subject_id, []).append(w)
    sidecar = {"sample_rate_hz": sample_rate_hz, "channel_names": channel_names, "subjects": []}
    for sid in sorted(by_subject):
        ws = sorted(by_subject[sid], key=lambda w: w.window_index)
        stack = np.stack([w.samples for w in ws])
        ad.save_tensors(os.path.join(out_dir, f"{sid}.windows.bin"), {"windows": stack})
        sidecar["subjects"].append(
            {"id": sid, "label": ws[0].label, "n_windows": len(ws), "file": f"{sid}.windows.bin"}
        )
    with open(os.path.join(out_dir, "labels.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_window_cache(cache_dir) -> tuple[list[Window], dict]:
    """Inverse of save_window_cache; returns (windows, sidecar meta)."""
    with open(os.path.join(cache_dir, "labels.json")) as fh:
        sidecar = json.load(fh)
    windows = []
    for entry in sidecar["subjects"]:
        named, _ = ad.load_tensors(os.path.join(cache_dir, entry["file"]))
        stack = named["windows"]
        if stack.shape[0] != entry["n_windows"]:
            raise DatasetError(f"subject {entry['id']}: cache window count mismatch")
        for i in range(stack.shape[0]):
            windows.append(Window(entry["id"], entry["label"], stack[i], i))
    return windows, sidecar
