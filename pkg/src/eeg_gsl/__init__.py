"""EEG graph-structure-learning pipeline.

Library layout:

- autodiff: float32 tensors with a reverse-mode gradient tape
- signal: recording ingestion, preprocessing, PCC graphs, synthetic cohorts
- augment: stochastic view generation for contrastive pretraining
- encoder: long-kernel temporal feature encoder
- graph: multi-head graph structure learner + Chebyshev graph convolution
- train: optimizers, InfoNCE pretraining, supervised training
- explain: gradient-weighted graph attention explanations
- harness: leave-one-subject-out evaluation, metrics, experiment matrix
"""

from eeg_gsl.autodiff import Tensor, Tape, backward, grad_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "grad_check", "__version__"]
