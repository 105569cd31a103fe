"""Label-noise robust classification with entropic optimal transport."""

from .data import BatchSampler, LabeledDataset, load_csv, save_csv, split, two_moons
from .losses import LossKind, bootstrap_soft, corrected_loss, cross_entropy, robust_loss
from .nn import DenseNet, SgdMomentum, mlp
from .noise import FlipSpec, apply_noise, asymmetric_matrix, symmetric_matrix
from .objective import CleotConfig, cleot_batch_loss, ground_cost, iterative_cleot, propagate_labels
from .ot import exact_assignment, sinkhorn, sinkhorn_backward, sinkhorn_unrolled
from .training import train

__version__ = "0.1.0"
