"""Joint tissue and lesion segmentation from hetero-modal, disjointly annotated data.

The package bundles a small reverse-mode autodiff engine, the probabilistic
Jaccard loss and its tissue/lesion split, a modality-averaging segmentation
network, a synthetic two-modality phantom generator, the upper-bound training
objective and the tools to audit it.
"""

from .labels import DEFAULT_TAXONOMY, ClassTaxonomy
from .losses import ClassWeights, default_weights, jaccard_loss, split_loss
from .network import ModalityMask, ModelParams, NetworkConfig, forward, init_params
from .phantom import PhantomConfig, PhantomDataset, Sample
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "DEFAULT_TAXONOMY", "ClassTaxonomy", "ClassWeights", "default_weights", "jaccard_loss", "split_loss",
    "ModalityMask", "ModelParams", "NetworkConfig", "forward", "init_params", "PhantomConfig",
    "PhantomDataset", "Sample", "Tensor", "backward", "no_grad", "TrainConfig", "load_checkpoint",
    "save_checkpoint", "train",
]
