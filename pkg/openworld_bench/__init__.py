"""
Open-World Evasion Bench

This package trains small image classifiers, crafts targeted adversarial examples
from in-distribution and out-of-distribution starting points, and measures how
OOD detectors, adversarial-example detectors and robust training hold up.
"""

from .attacks import AttackConfig, AttackResult, PerturbationConstraint, blackbox_attack, eot_attack, pgd_attack
from .config import ExperimentConfig, load_config
from .datasets import LabeledDataset, UnlabeledDataset, gen_gaussian_noise_ood, gen_synthetic_shapes
from .downloader import fetch_mnist
from .experiment import run_experiment
from .models import Classifier, build_classifier, predict, train_classifier
from .report import EvalReport, emit_report
from .utils import BenchError

__all__ = [
    'AttackConfig',
    'AttackResult',
    'BenchError',
    'Classifier',
    'EvalReport',
    'ExperimentConfig',
    'LabeledDataset',
    'PerturbationConstraint',
    'UnlabeledDataset',
    'blackbox_attack',
    'build_classifier',
    'emit_report',
    'eot_attack',
    'fetch_mnist',
    'gen_gaussian_noise_ood',
    'gen_synthetic_shapes',
    'load_config',
    'pgd_attack',
    'predict',
    'run_experiment',
    'train_classifier',
]
