"""Temporal feature encoder: masked 1D convolutions interleaved with
structured long convolutions.

Each electrode is processed independently as a single-channel sequence
with shared weights, which is what makes the output a per-electrode
embedding matrix (C, d_m) with exact permutation equivariance. A block is
[causal conv, batch norm, GELU, causal depthwise long conv]; blocks are
followed by max pooling, a width-1 projection conv, and mean pooling over
the remaining time axis.

The long kernel for a channel is a concatenation of `slconv_scales`
learned sub-kernels: scale s holds `slconv_base_len` weights upsampled
nearest-neighbour by 2**s and damped by decay**s. The concatenation is
truncated to the input length and L2-normalized, so one kernel spans the
whole window at a parameter cost of scales * base_len.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from eeg_gsl import autodiff as ad
from eeg_gsl.autodiff import BatchNormState, Tensor


@dataclass
class EncoderConfig:
    d_m: int = 64
    n_blocks: int = 2
    hidden: int = 32
    slconv_scales: int = 6
    slconv_base_len: int = 32
    decay: float = 0.5
    pool_stride: int = 4
    conv_kernel_len: int = 5

    def __post_init__(self):
        if self.d_m < 1:
            raise ValueError("d_m must be >= 1")
        if self.slconv_base_len < 1:
            raise ValueError("slconv_base_len must be >= 1")
        if self.slconv_scales < 1:
            raise ValueError("slconv_scales must be >= 1")

    @property
    def kernel_coverage(self) -> int:
        """Total kernel extent before truncation."""
        return self.slconv_base_len * (2 ** self.slconv_scales - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "d_m": self.d_m, "n_blocks": self.n_blocks, "hidden": self.hidden,
            "slconv_scales": self.slconv_scales, "slconv_base_len": self.slconv_base_len,
            "decay": self.decay, "pool_stride": self.pool_stride,
            "conv_kernel_len": self.conv_kernel_len,
        }


def build_slconv_kernel(cfg: EncoderConfig, weights: Tensor, length: int) -> Tensor:
    """One channel's long kernel from its (scales, base_len) learned weights.

    Upsample-by-2**s, damp by decay**s, concatenate, truncate to `length`,
    L2-normalize. Differentiable in `weights`.
    """
    if cfg.kernel_coverage < length:
        raise ValueError(
            f"slconv kernel coverage {cfg.kernel_coverage} < input length {length}; "
            f"increase slconv_scales or slconv_base_len"
        )
    pieces = []
    for s in range(cfg.slconv_scales):
        sub = ad.reshape(ad.narrow(weights, 0, s, 1), (cfg.slconv_base_len,))
        up = ad.repeat_interleave(sub, 2 ** s, axis=0)
        pieces.append(ad.scalar_mul(up, cfg.decay ** s))
    kernel = ad.concat(pieces, axis=0)
    kernel = ad.narrow(kernel, 0, 0, length)
    return ad.l2_normalize(kernel, axis=0)


class LongConvEncoder:
    """Shared-weight per-electrode encoder producing (B, C, d_m) embeddings."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        k = cfg.conv_kernel_len
        for b in range(cfg.n_blocks):
            cin = 1 if b == 0 else cfg.hidden
            std = np.sqrt(2.0 / (cin * k))
            self._add(f"block{b}.conv.w", rng.normal(0, std, (cfg.hidden, cin, k)))
            self._add(f"block{b}.conv.b", np.zeros(cfg.hidden))
            self._add(f"block{b}.bn.gamma", np.ones(cfg.hidden))
            self._add(f"block{b}.bn.beta", np.zeros(cfg.hidden))
            self.bn_states[f"block{b}.bn"] = BatchNormState(cfg.hidden)
            self._add(f"block{b}.slconv.w", rng.normal(0, 1.0, (cfg.hidden, cfg.slconv_scales, cfg.slconv_base_len)))
        std = np.sqrt(2.0 / cfg.hidden)
        self._add("proj.w", rng.normal(0, std, (cfg.d_m, cfg.hidden, 1)))
        self._add("proj.b", np.zeros(cfg.d_m))

    def _add(self, name: str, value) -> None:
        self.params[name] = ad.parameter(np.asarray(value, dtype=np.float32), name=name)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def encode(self, windows, train: bool = False) -> Tensor:
        """windows: (B, C, L) array or Tensor. Returns (B, C, d_m)."""
        x = windows if isinstance(windows, Tensor) else Tensor(np.asarray(windows, np.float32))
        if x.ndim != 3:
            raise ad.ShapeError(f"encode: expected (B, C, L), got {x.shape}")
        B, C, L = x.shape
        cfg = self.cfg
        h = ad.reshape(x, (B * C, 1, L))
        for b in range(cfg.n_blocks):
            k = cfg.conv_kernel_len
            h = ad.conv1d(h, self.params[f"block{b}.conv.w"], self.params[f"block{b}.conv.b"],
                          pad=(k - 1, 0))
            h = ad.batch_norm(h, self.params[f"block{b}.bn.gamma"], self.params[f"block{b}.bn.beta"],
                              self.bn_states[f"block{b}.bn"], train=train)
            h = ad.gelu(h)
            self._check_finite(h, f"block{b}.pre_slconv")
            bank = self.params[f"block{b}.slconv.w"]
            kernels = [
                ad.reshape(build_slconv_kernel(cfg, _channel_weights(bank, c), L), (1, 1, L))
                for c in range(cfg.hidden)
            ]
            kernel = ad.concat(kernels, axis=0)  # (hidden, 1, L)
            h = ad.conv1d(h, kernel, pad=(L - 1, 0), groups=cfg.hidden)
            self._check_finite(h, f"block{b}.slconv")
        h = ad.max_pool1d(h, cfg.pool_stride)
        h = ad.conv1d(h, self.params["proj.w"], self.params["proj.b"])
        emb = ad.tmean(h, axis=2)  # (B*C, d_m)
        self._check_finite(emb, "proj")
        return ad.reshape(emb, (B, C, cfg.d_m))

    @staticmethod
    def _check_finite(t: Tensor, layer: str) -> None:
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"encoder: non-finite activation after {layer}")

    # checkpoint surface: parameter arrays plus batch-norm running stats
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.params.items()}
        for name, st in self.bn_states.items():
            out[f"{name}.running_mean"] = st.mean.copy()
            out[f"{name}.running_var"] = st.var.copy()
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"encoder state missing {name}")
            if arrays[name].shape != p.data.shape:
                raise ad.ShapeError(f"encoder state {name}: {arrays[name].shape} vs {p.data.shape}")
            p.data = arrays[name].astype(np.float32).copy()
        for name, st in self.bn_states.items():
            st.mean = arrays[f"{name}.running_mean"].astype(np.float32).copy()
            st.var = arrays[f"{name}.running_var"].astype(np.float32).copy()


def _channel_weights(w: Tensor, channel: int) -> Tensor:
    """(scales, base_len) slice of the (hidden, scales, base_len) bank."""
    sl = ad.narrow(w, 0, channel, 1)
    return ad.reshape(sl, (w.shape[1], w.shape[2]))
