"""Gradient-weighted graph attention explanations.

For a trained multi-head model, each head's learned adjacency A_h is
weighted by the Frobenius norm of the target-class logit gradient with
respect to that adjacency, averaged over heads:

    A_raw = (1 / H) * sum_h ||dY/dA_h||_F * A_h

Entries outside two standard deviations of A_raw's entry distribution are
clamped to the nearer bound, then the matrix is min-max normalized to
[0, 1]. The unweighted head average (same clamp and normalization) is the
baseline these explanations are compared against.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from eeg_gsl import autodiff as ad
from eeg_gsl.autodiff import Tape, Tensor, backward
from eeg_gsl.model import Model
from eeg_gsl.signal import LABELS, Window


@dataclass
class Explanation:
    adjacency: np.ndarray              # (C, C) in [0, 1]
    target_class: str
    sample_ref: tuple[str, int]
    head_grad_norms: list[float]
    degenerate: bool = False


@dataclass
class GroupExplanation:
    adjacency: np.ndarray
    group: str
    n_samples: int


def _clamp_normalize(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Clamp entries to mu +- 2 sigma, then min-max normalize to [0, 1].

    A constant (or all-zero) raw matrix maps to zeros and is flagged.
    """
    raw = raw.astype(np.float64)
    mu, sigma = raw.mean(), raw.std()
    clipped = np.clip(raw, mu - 2.0 * sigma, mu + 2.0 * sigma)
    lo, hi = clipped.min(), clipped.max()
    if hi - lo < 1e-12:
        return np.zeros_like(raw, dtype=np.float32), True
    return ((clipped - lo) / (hi - lo)).astype(np.float32), False


def head_gradients(model: Model, window: Window, target_class: str) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-head dY/dA_h for the target-class logit, plus the A_h values.

    One eval-mode forward and one backward per sample; A_h are tape
    intermediates, so their gradients populate directly.
    """
    if model.mode != "mhgsl":
        raise ValueError(f"head_gradients: model mode {model.mode!r} has no learned adjacency")
    target = LABELS.index(target_class)
    xs = window.samples[None, :, :]
    with Tape():
        logits, graphs = model.forward(xs, train=False)
        onehot = np.zeros((1, 2), np.float32)
        onehot[0, target] = 1.0
        y = ad.tsum(ad.mul(logits, Tensor(onehot)))
        backward(y)
    grads, values = [], []
    for adj in graphs.adjacency:
        g = np.zeros_like(adj.data[0]) if adj.grad is None else adj.grad[0].copy()
        grads.append(g)
        values.append(adj.data[0].copy())
    return grads, values


def explain(adjacencies: list[np.ndarray], gradients: list[np.ndarray],
            target_class: str = "PD", sample_ref: tuple[str, int] = ("", -1)) -> Explanation:
    """Gradient-norm-weighted head average, clamped and normalized."""
    if not adjacencies or len(adjacencies) != len(gradients):
        raise ValueError("explain: need matching non-empty adjacency and gradient lists")
    norms = [float(np.linalg.norm(g)) for g in gradients]
    raw = sum(n * a.astype(np.float64) for n, a in zip(norms, adjacencies)) / len(adjacencies)
    if all(n == 0.0 for n in norms):
        return Explanation(np.zeros_like(adjacencies[0], dtype=np.float32),
                           target_class, sample_ref, norms, degenerate=True)
    adjacency, degenerate = _clamp_normalize(raw)
    return Explanation(adjacency, target_class, sample_ref, norms, degenerate)


def explain_window(model: Model, window: Window, target_class: str | None = None) -> Explanation:
    """Explanation for one sample; defaults to the predicted class."""
    if target_class is None:
        logits, _ = model.forward(window.samples[None], train=False)
        target_class = LABELS[int(np.argmax(logits.data[0]))]
    grads, values = head_gradients(model, window, target_class)
    return explain(values, grads, target_class, (window.subject_id, window.window_index))


def mean_attention_baseline(adjacencies: list[np.ndarray]) -> np.ndarray:
    """Unweighted head average with the same clamp and normalization."""
    if not adjacencies:
        raise ValueError("mean_attention_baseline: need at least one head")
    raw = sum(a.astype(np.float64) for a in adjacencies) / len(adjacencies)
    return _clamp_normalize(raw)[0]


def group_mean(explanations: list[Explanation], group: str) -> GroupExplanation:
    """Entrywise mean over a set of explanations (callers pass only
    correctly classified samples)."""
    if not explanations:
        raise ValueError(f"group_mean: empty group {group!r}")
    shapes = {e.adjacency.shape for e in explanations}
    if len(shapes) != 1:
        raise ValueError(f"group_mean: mixed channel counts {sorted(shapes)}")
    mean = np.mean([e.adjacency for e in explanations], axis=0).astype(np.float32)
    return GroupExplanation(mean, group, len(explanations))


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def write_adjacency_csv(matrix: np.ndarray, channel_names: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(channel_names)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_adjacency_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0]
    matrix = np.array([[float(v) for v in row] for row in rows[1:]], np.float32)
    return matrix, names


def write_pgm_heatmap(matrix: np.ndarray, path) -> None:
    """8-bit grayscale PGM (P5): 0 maps to black, 1 to white."""
    gray = np.clip(np.round(matrix * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())
