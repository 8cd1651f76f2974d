"""Stroke-lesion segmentation on CT perfusion maps, from autodiff up to cross-validation.

Submodules:

* ``autodiff`` - tensors, tape and reverse-mode gradients
* ``kernels`` - convolution, pooling, batch norm, resampling
* ``models`` - PSPNet, 2D U-Net, freezing and checkpoints
* ``losses`` - cross entropy, weighted cross entropy, focal loss
* ``data`` - scan stacks, folds, augmentation, synthetic phantoms
* ``metrics`` - DSC, surface distances, precision/recall, AVD, reports
* ``training`` - RMSProp, LR schedule, fine-tuning, prediction, ensembles
"""

from . import autodiff, data, kernels, losses, metrics, models, training
from .autodiff import Parameter, Tape, Tensor, backward, grad_check, no_grad, tensor_from
from .data import AugmentParams, FoldPlan, ScanStack, make_folds, read_dataset, synth_generate, write_dataset
from .errors import CtpSegError
from .losses import LossConfig, ce_loss, focal_loss, wce_loss
from .metrics import aggregate_report, assd, dsc, evaluate_scan, hausdorff
from .models import PspConfig, UNetConfig, build_model, build_pspnet, build_unet2d, load_checkpoint, save_checkpoint
from .training import TrainConfig, ensemble_predict, fine_tune_two_phase, fit, predict_mask, train

__version__ = "0.1.0"

__all__ = [
    "autodiff", "data", "kernels", "losses", "metrics", "models", "training",
    "Parameter", "Tape", "Tensor", "backward", "grad_check", "no_grad", "tensor_from",
    "AugmentParams", "FoldPlan", "ScanStack", "make_folds", "read_dataset", "synth_generate", "write_dataset",
    "CtpSegError",
    "LossConfig", "ce_loss", "focal_loss", "wce_loss",
    "aggregate_report", "assd", "dsc", "evaluate_scan", "hausdorff",
    "PspConfig", "UNetConfig", "build_model", "build_pspnet", "build_unet2d", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "ensemble_predict", "fine_tune_two_phase", "fit", "predict_mask", "train",
]
