"""Classifier assemblies for the ablation grid.

Three architectures share the temporal encoder:

- encoder_only: mean-pool the per-electrode embeddings, linear classifier.
- static_pcc: one Chebyshev layer driven by the window's absolute-PCC
  graph (no learned adjacency, no W_q/W_k parameters).
- mhgsl: the full model; every attention head learns an adjacency and
  drives its own Chebyshev layer.
"""

from __future__ import annotations

import numpy as np

from eeg_gsl import autodiff as ad
from eeg_gsl.autodiff import Tensor
from eeg_gsl.encoder import EncoderConfig, LongConvEncoder
from eeg_gsl.graph import GSLConfig, HeadGraphs, cheb_conv, fuse_and_classify, mhgsl, scaled_laplacian
from eeg_gsl.signal import pcc_matrix

MODES = ("encoder_only", "static_pcc", "mhgsl")


class Model:
    def __init__(self, enc_cfg: EncoderConfig, gsl_cfg: GSLConfig, mode: str,
                 rng: np.random.Generator):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.enc_cfg = enc_cfg
        self.gsl_cfg = gsl_cfg
        self.encoder = LongConvEncoder(enc_cfg, rng)
        self.params: dict[str, Tensor] = {}
        d_m = enc_cfg.d_m

        def glorot(name, fan_in, fan_out, shape=None):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            arr = rng.normal(0.0, std, shape or (fan_in, fan_out))
            self.params[name] = ad.parameter(arr.astype(np.float32), name=name)

        if mode == "mhgsl":
            d_k = gsl_cfg.resolved_d_k(d_m)
            for h in range(gsl_cfg.heads):
                glorot(f"gsl.head{h}.wq", d_m, d_k)
                glorot(f"gsl.head{h}.wk", d_m, d_k)
        n_graph_heads = {"encoder_only": 0, "static_pcc": 1}.get(mode, gsl_cfg.heads)
        for h in range(n_graph_heads):
            for k in range(gsl_cfg.cheb_k):
                glorot(f"cheb.head{h}.theta{k}", d_m, d_m)
        if n_graph_heads:
            glorot("fuse.w", n_graph_heads * d_m, d_m)
            self.params["fuse.b"] = ad.parameter(np.zeros(d_m, np.float32), name="fuse.b")
        glorot("cls.w", d_m, 2)
        self.params["cls.b"] = ad.parameter(np.zeros(2, np.float32), name="cls.b")

    # ------------------------------------------------------------------
    def forward(self, windows: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                encoder_train: bool | None = None) -> tuple[Tensor, HeadGraphs | None]:
        """windows: (B, C, L) standardized. Returns (logits, head graphs).

        encoder_train overrides the encoder's mode; a frozen pretrained
        encoder runs in eval mode while the head still trains.
        """
        emb = self.encoder.encode(windows, train=train if encoder_train is None else encoder_train)
        if self.mode == "encoder_only":
            pooled = ad.tmean(emb, axis=1)
            logits = ad.add(ad.matmul(pooled, self.params["cls.w"]), self.params["cls.b"])
            return logits, None

        if self.mode == "static_pcc":
            adj = np.stack([pcc_matrix(w)[0] for w in np.asarray(windows)])
            graphs = HeadGraphs([], [], [Tensor(adj)])
        else:
            heads = self.gsl_cfg.heads
            graphs = mhgsl(
                emb,
                [self.params[f"gsl.head{h}.wq"] for h in range(heads)],
                [self.params[f"gsl.head{h}.wk"] for h in range(heads)],
            )

        outputs = []
        for h, adj in enumerate(graphs.adjacency):
            lap = scaled_laplacian(adj)
            thetas = [self.params[f"cheb.head{h}.theta{k}"] for k in range(self.gsl_cfg.cheb_k)]
            outputs.append(cheb_conv(emb, lap, thetas, self.gsl_cfg.dropout, rng, train))
        _, logits = fuse_and_classify(
            emb, outputs,
            self.params["fuse.w"], self.params["fuse.b"],
            self.params["cls.w"], self.params["cls.b"],
        )
        return logits, graphs

    # ------------------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.parameters().items()}
        out.update(self.params)
        return out

    def trainable_parameters(self, freeze_encoder: bool = False) -> dict[str, Tensor]:
        if freeze_encoder:
            return dict(self.params)
        return self.parameters()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.state_arrays().items()}
        out.update({k: p.data.copy() for k, p in self.params.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        enc_state = {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")}
        self.encoder.load_state(enc_state)
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"model state missing {name}")
            p.data = arrays[name].astype(np.float32).copy()

    def config_echo(self) -> dict:
        return {
            "mode": self.mode,
            "encoder": self.enc_cfg.to_dict(),
            "gsl": self.gsl_cfg.to_dict(),
        }
