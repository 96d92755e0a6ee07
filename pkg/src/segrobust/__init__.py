"""Adversarial robustness of a residual 3D U-Net: gradient-sign attacks,
distillation and adversarial-training defenses, and the evaluation harness."""

from segrobust.attacks import AttackSpec, Method, fgsm, ifgsm, run_attack, tifgsm
from segrobust.data import Dataset, Subject, generate_phantom, make_dataset
from segrobust.defenses import DefenseKind, DefenseSpec, TrainLog, adversarial_train, augmentation_train, train_baseline, train_distilled
from segrobust.evaluation import RobustnessReport, evaluate_robustness, iteration_sweep
from segrobust.losses import DiceConfig, dice_coefficient, dice_loss, distillation_dice_loss
from segrobust.stats import bonferroni, wilcoxon_signed_rank
from segrobust.unet import SegModel, UNetConfig, build, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
