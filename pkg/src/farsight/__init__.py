"""Dual-path vision-language gender/attribute recognition at long range."""

from .encoders import FreezePolicy, TextEncoder, VisualEncoder, Vocabulary
from .losses import LossWeights, attribute_loss, gender_loss, total_loss
from .model import DualPathModel, ForwardOutputs, ModelConfig
from .optim import AdamW, Group, Parameter, clip_global_norm
from .tensor import Tensor, no_grad
from .training import TrainConfig, lr_at, train

__version__ = "0.1.0"
