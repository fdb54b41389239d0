"""Optimization: AdamW, the multistep schedule, InfoNCE pretraining, and
the supervised loop for the ablation grid.

Reproducibility scheme: every source of randomness is derived statelessly
from (run seed, role, epoch, ...) via seeded_rng, so an interrupted run
resumed from a checkpoint replays the identical loss sequence, and two
runs with one seed are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eeg_gsl import autodiff as ad
from eeg_gsl.autodiff import Tape, Tensor, backward
from eeg_gsl._util import seeded_rng
from eeg_gsl.augment import AugmentPolicy, sample_pair
from eeg_gsl.encoder import EncoderConfig, LongConvEncoder
from eeg_gsl.graph import GSLConfig
from eeg_gsl.model import Model
from eeg_gsl.signal import Window

ABLATIONS = ("encoder_only", "static_pcc", "mhgsl_scratch", "cl_freeze", "cl_finetune")
_ABLATION_MODE = {
    "encoder_only": "encoder_only",
    "static_pcc": "static_pcc",
    "mhgsl_scratch": "mhgsl",
    "cl_freeze": "mhgsl",
    "cl_finetune": "mhgsl",
}


@dataclass
class TrainConfig:
    mode: str = "supervised"            # {"pretrain", "supervised"}
    ablation: str = "mhgsl_scratch"
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 60
    lr_milestones: list[int] | None = None   # default: 50% and 75% of epochs
    gamma: float = 0.1
    temperature: float = 0.005
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.lr_milestones is None:
            self.lr_milestones = sorted({self.epochs // 2, (3 * self.epochs) // 4})
        if sorted(self.lr_milestones) != list(self.lr_milestones):
            raise ValueError("lr_milestones must be sorted ascending")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "ablation": self.ablation, "lr": self.lr,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "lr_milestones": list(self.lr_milestones), "gamma": self.gamma,
            "temperature": self.temperature, "weight_decay": self.weight_decay,
            "betas": list(self.betas), "eps": self.eps, "seed": self.seed,
        }


def multistep_lr(epoch: int, base_lr: float, milestones, gamma: float) -> float:
    """base_lr * gamma^(number of milestones <= epoch)."""
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class AdamWState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.m.items():
            out[f"opt.m.{k}"] = v.copy()
        for k, v in self.v.items():
            out[f"opt.v.{k}"] = v.copy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int) -> "AdamWState":
        st = cls()
        st.step = step
        for k, v in arrays.items():
            if k.startswith("opt.m."):
                st.m[k[len("opt.m."):]] = v.astype(np.float32).copy()
            elif k.startswith("opt.v."):
                st.v[k[len("opt.v."):]] = v.astype(np.float32).copy()
        return st


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay update from the gradients stored on params.

    param <- param - lr * mhat / (sqrt(vhat) + eps) - lr * wd * param.
    Parameters without a gradient this step still decay.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * np.square(g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data = p.data - lr * (mhat / (np.sqrt(vhat) + eps)) - lr * weight_decay * p.data


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

def info_nce(z: Tensor, temperature: float) -> Tensor:
    """NT-Xent over 2N projected embeddings; rows i and i+N are a pair.

    Rows are L2-normalized, pairwise cosine similarities are divided by
    the temperature, the self-similarity is masked out, and each anchor's
    positive is scored against the remaining 2N-2 negatives.
    """
    if z.ndim != 2 or z.shape[0] % 2:
        raise ad.ShapeError(f"info_nce: expected (2N, d) embeddings, got {z.shape}")
    two_n = z.shape[0]
    n = two_n // 2
    if n < 2:
        raise ValueError("info_nce: need N >= 2 pairs for negatives")
    zn = ad.l2_normalize(z, axis=1)
    sim = ad.scalar_mul(ad.matmul(zn, ad.transpose(zn)), 1.0 / temperature)
    mask = Tensor(np.where(np.eye(two_n, dtype=bool), -1e9, 0.0).astype(np.float32))
    logits = ad.add(sim, mask)
    labels = (np.arange(two_n) + n) % two_n
    return ad.cross_entropy_with_logits(logits, labels)


class Projector:
    """Two-layer head used only during pretraining; discarded afterwards."""

    def __init__(self, d_m: int, d_out: int, rng: np.random.Generator):
        s1 = np.sqrt(2.0 / (2 * d_m))
        s2 = np.sqrt(2.0 / (d_m + d_out))
        self.params = {
            "projector.w1": ad.parameter(rng.normal(0, s1, (d_m, d_m)).astype(np.float32)),
            "projector.b1": ad.parameter(np.zeros(d_m, np.float32)),
            "projector.w2": ad.parameter(rng.normal(0, s2, (d_m, d_out)).astype(np.float32)),
            "projector.b2": ad.parameter(np.zeros(d_out, np.float32)),
        }

    def project(self, x: Tensor) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, self.params["projector.w1"]), self.params["projector.b1"]))
        out = ad.add(ad.matmul(h, self.params["projector.w2"]), self.params["projector.b2"])
        return ad.l2_normalize(out, axis=1)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _window_refs(windows) -> list[list]:
    return sorted({(w.subject_id, int(w.window_index)) for w in windows})


def _batches(order: np.ndarray, batch_size: int, drop_small: int = 1):
    for lo in range(0, len(order) - drop_small + 1, batch_size):
        idx = order[lo:lo + batch_size]
        if len(idx) >= drop_small:
            yield idx


def pretrain(encoder: LongConvEncoder, windows: list[Window], policy: AugmentPolicy,
             cfg: TrainConfig, projector_dim: int = 128) -> dict:
    """SimCLR loop: minimize info_nce over paired views; the checkpoint
    carries the encoder only."""
    if cfg.batch_size < 2:
        raise ValueError("pretrain: batch_size must be >= 2")
    projector = Projector(encoder.cfg.d_m, projector_dim, seeded_rng(cfg.seed, "projector"))
    params = dict(encoder.parameters())
    params.update(projector.params)
    opt = AdamWState()
    history = []
    for epoch in range(cfg.epochs):
        order = seeded_rng(cfg.seed, "order", epoch).permutation(len(windows))
        lr = multistep_lr(epoch, cfg.lr, cfg.lr_milestones, cfg.gamma)
        losses = []
        for idx in _batches(order, cfg.batch_size, drop_small=2):
            batch = [windows[i] for i in idx]
            views_a, views_b = [], []
            for w in batch:
                rng = seeded_rng(cfg.seed, "aug", w.subject_id, w.window_index, epoch)
                va, vb = sample_pair(w, policy, rng)
                views_a.append(va.samples)
                views_b.append(vb.samples)
            stacked = np.stack(views_a + views_b)  # (2B, C, L)
            with Tape():
                emb = encoder.encode(stacked, train=True)
                pooled = ad.tmean(emb, axis=1)
                z = projector.project(pooled)
                loss = info_nce(z, cfg.temperature)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"pretrain: non-finite loss at epoch {epoch}, "
                        f"subjects {[w.subject_id for w in batch]}"
                    )
                backward(loss)
            adamw_step(params, opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            for p in params.values():
                p.zero_grad()
            losses.append(value)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr})
    return {
        "arrays": encoder.state_arrays(),
        "meta": {
            "kind": "encoder",
            "config": {"encoder": encoder.cfg.to_dict(), "train": cfg.to_dict(),
                       "augment": policy.to_dict()},
            "epoch": cfg.epochs,
            "rng": {"seed": cfg.seed},
        },
        "history": history,
        "train_refs": _window_refs(windows),
    }


def build_model(enc_cfg: EncoderConfig, gsl_cfg: GSLConfig, ablation: str,
                seed: int, encoder_state: dict | None = None) -> Model:
    """Model for an ablation; CL variants load (and maybe freeze) the
    pretrained encoder state."""
    model = Model(enc_cfg, gsl_cfg, _ABLATION_MODE[ablation], seeded_rng(seed, "init", ablation))
    model.freeze_encoder = False
    if ablation in ("cl_freeze", "cl_finetune"):
        if encoder_state is None:
            raise ValueError(f"{ablation} requires a pretrained encoder state")
        model.encoder.load_state(encoder_state)
        if ablation == "cl_freeze":
            model.encoder.set_trainable(False)
            model.freeze_encoder = True
    return model


def _forward_loss(model: Model, xs: np.ndarray, ys: np.ndarray, train: bool,
                  rng: np.random.Generator | None):
    # frozen encoders run in eval mode: batch-norm statistics stay fixed
    enc_train = train and not getattr(model, "freeze_encoder", False)
    logits, _ = model.forward(xs, train=train, rng=rng, encoder_train=enc_train)
    loss = ad.cross_entropy_with_logits(logits, ys)
    return loss, logits


def evaluate_model(model: Model, windows: list[Window], batch_size: int = 32):
    """Eval-mode loss, accuracy, and PD-probability scores."""
    losses, correct, scores, preds, trues = [], 0, [], [], []
    for lo in range(0, len(windows), batch_size):
        batch = windows[lo:lo + batch_size]
        xs = np.stack([w.samples for w in batch])
        ys = np.array([w.label_index for w in batch])
        logits, _ = model.forward(xs, train=False)
        loss = ad.cross_entropy_with_logits(logits, ys)
        losses.append(float(loss.data) * len(batch))
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        pred = p[:, 1] > 0.5
        correct += int((pred == ys.astype(bool)).sum())
        scores.extend(p[:, 1].tolist())
        preds.extend(pred.astype(int).tolist())
        trues.extend(ys.tolist())
    n = len(windows)
    return {
        "loss": sum(losses) / n,
        "accuracy": correct / n,
        "scores": scores,
        "predicted": preds,
        "true": trues,
    }


def train_supervised(model: Model, train_windows: list[Window], val_windows: list[Window],
                     cfg: TrainConfig) -> tuple[dict, list[dict]]:
    """Cross-entropy training with best-validation-loss checkpoint selection.

    Returns (checkpoint dict, per-epoch history). The checkpoint carries
    the best-epoch parameters, optimizer state at that point, and the
    train/val window references for the leakage audit.
    """
    val_labels = {w.label for w in val_windows}
    if val_labels != {"HC", "PD"}:
        raise ValueError(f"validation set must contain both classes, got {sorted(val_labels)}")
    params = model.trainable_parameters(freeze_encoder=getattr(model, "freeze_encoder", False))
    opt = AdamWState()
    history = []
    best = None
    for epoch in range(cfg.epochs):
        order = seeded_rng(cfg.seed, "order", epoch).permutation(len(train_windows))
        drop_rng = seeded_rng(cfg.seed, "dropout", epoch)
        lr = multistep_lr(epoch, cfg.lr, cfg.lr_milestones, cfg.gamma)
        losses = []
        for idx in _batches(order, cfg.batch_size, drop_small=1):
            batch = [train_windows[i] for i in idx]
            xs = np.stack([w.samples for w in batch])
            ys = np.array([w.label_index for w in batch])
            with Tape():
                loss, _ = _forward_loss(model, xs, ys, train=True, rng=drop_rng)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise FloatingPointError(
                        f"train_supervised: non-finite loss at epoch {epoch}, "
                        f"subjects {[w.subject_id for w in batch]}"
                    )
                backward(loss)
            adamw_step(params, opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)
            for p in params.values():
                p.zero_grad()
            losses.append(value)
        val = evaluate_model(model, val_windows)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_loss": val["loss"],
            "val_acc": val["accuracy"],
            "lr": lr,
        }
        history.append(entry)
        if best is None or val["loss"] < best["val_loss"]:
            best = {"val_loss": val["loss"], "epoch": epoch,
                    "arrays": model.state_arrays(), "opt": opt.arrays(), "opt_step": opt.step}
    model.load_state(best["arrays"])
    checkpoint = {
        "arrays": best["arrays"],
        "opt": best["opt"],
        "meta": {
            "kind": "model",
            "config": {**model.config_echo(), "train": cfg.to_dict()},
            "epoch": best["epoch"],
            "opt_step": best["opt_step"],
            "rng": {"seed": cfg.seed},
        },
        "history": history,
        "train_refs": _window_refs(train_windows),
        "val_refs": _window_refs(val_windows),
    }
    return checkpoint, history


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

def save_checkpoint(path, checkpoint: dict) -> None:
    arrays = dict(checkpoint["arrays"])
    arrays.update(checkpoint.get("opt", {}))
    meta = dict(checkpoint["meta"])
    meta["history"] = checkpoint.get("history", [])
    meta["train_refs"] = checkpoint.get("train_refs", [])
    meta["val_refs"] = checkpoint.get("val_refs", [])
    ad.save_tensors(path, arrays, meta=meta)


def load_checkpoint(path) -> dict:
    arrays, meta = ad.load_tensors(path)
    model_arrays = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return {
        "arrays": model_arrays,
        "opt": opt_arrays,
        "meta": {k: v for k, v in meta.items() if k not in ("history", "train_refs", "val_refs")},
        "history": meta.get("history", []),
        "train_refs": [tuple(r) for r in meta.get("train_refs", [])],
        "val_refs": [tuple(r) for r in meta.get("val_refs", [])],
    }
