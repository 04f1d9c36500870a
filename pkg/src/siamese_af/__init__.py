"""Joint ECG/PPG representation learning for atrial fibrillation detection.

One encoder is trained on time-synchronized ECG/PPG pairs with a cross-modal
agreement loss plus classification loss; at inference either modality alone
is scored by the same encoder and classifier.
"""

__version__ = "0.1.0"

from . import checkpoint, data, eval, loss, model, numerics, train
from .checkpoint import load_checkpoint, save_checkpoint
from .data import PairedDataset, split_by_patient, synthesize_dataset
from .loss import LossWeights, agreement_loss, joint_loss, joint_loss_with_unpaired
from .model import EncoderConfig, HeadConfig, build_model, forward_pass, stage_activations
from .train import TrainConfig, train_baseline_single_modality, train_joint
