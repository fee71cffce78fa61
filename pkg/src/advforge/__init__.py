"""advforge: transferable multi-step adversaries and superimposition defenses
for small image classifiers, on a self-contained numpy autodiff core."""

from .tensor import Tensor, Tape, backward, finite_diff_check
from .models import ModelSpec, build_model, predict, accuracy, save_checkpoint, load_checkpoint
from .data import LabeledDataset, MixConfig, load_idx, load_cifar_binary, holdout_split, \
    balance_classes, sample_alpha, mix_images, synthetic_glyphs
from .attacks import AttackConfig, AdversarialSet, fgsm, normalize_gradient, \
    iteration_count, ensemble_step, craft_adversaries, extract_adversarial_set
from .training import DefenseVariant, TrainConfig, TrainReport, train
from .analysis import evaluate_transfer, landscape_grid, loss_curve, flatness_metrics

__version__ = "0.1.0"
