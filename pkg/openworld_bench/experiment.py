"""
Experiment runner for the open-world evaluation matrix.

Loads or trains the classifier and its defended twins, attacks in-distribution and
OOD starting points, calibrates and applies detectors on all four data kinds, and
writes the report together with every artifact needed to recompute it.
"""

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .adv_detectors import FeatureSqueezing, MagNet, magnet_train
from .attacks import (AttackError, AttackResult, evaluate_under_magnet, evaluate_under_squeezing, is_feasible,
                      run_attack, select_target, stack_results)
from .checkpoint import load_autoencoder, load_classifier, read_meta, save_checkpoint
from .config import (DEFAULT_SHAPE, AttackSpec, DataSource, DefenseSpec, DetectorSpec, Epsilon, ExperimentConfig,
                     TrainSpec)
from .datasets import (DatasetError, LabeledDataset, UnlabeledDataset, gen_gaussian_noise_ood, gen_synthetic_shapes,
                       load_idx, load_manifest, load_mnist, load_pgm_folder)
from .metrics import (auroc, detection_rates, mean_perturbation, mean_target_confidence,
                      minmax_expected_confidence, target_success_rate, transform_success_rate)
from .models import (Classifier, ModelError, TrainReport, build_autoencoder, build_classifier, confidences,
                     evaluate_model, train_classifier)
from .ood_detectors import DetectorVerdict, OodDetector, train_confidence_calibrated, tune_odin
from .report import NONE_LABEL, EvalReport, ReportRow, emit_report
from .robust_training import (BackgroundConfig, RobustTrainConfig, adversarial_train, alp_train,
                              background_class_train, ood_rejection_rate)
from .transforms import pixel_shift
from .utils import BenchError, SeedLog, derive_seed, parallel_map

logger = logging.getLogger(__name__)

STAGES = ('clean', 'attacks', 'detectors')
ProgressCallback = Optional[Callable[[str], None]]


class ExperimentError(BenchError):
    """A stage failed; ``partial_report`` holds every row completed before the failure."""

    def __init__(self, message: str, partial_report: EvalReport):
        super().__init__(message)
        self.partial_report = partial_report


def slug(text: str) -> str:
    """File-name-safe form of a matrix label."""
    return re.sub(r'[^A-Za-z0-9._@+-]+', '_', text)


# --- data ---

@dataclass
class DataBundle:
    train: LabeledDataset
    test: LabeledDataset
    calibration: np.ndarray
    ood_fit: Dict[str, UnlabeledDataset] = field(default_factory=dict)
    ood_eval: Dict[str, UnlabeledDataset] = field(default_factory=dict)

    @property
    def input_shape(self):
        return self.train.input_shape


def load_source(spec: DataSource, shape: Sequence[int], seed: int) -> Union[LabeledDataset, UnlabeledDataset]:
    """Load or generate one configured data source; generated images use ``spec.shape`` or ``shape``."""
    target_shape = tuple(spec.shape or shape)
    if spec.kind == 'mnist':
        data = load_mnist(spec.path, spec.split)
    elif spec.kind == 'idx':
        data = load_idx(spec.path, spec.labels, name=spec.name)
    elif spec.kind == 'pgm-folder':
        data = load_pgm_folder(spec.path, target_shape, spec.name)
    elif spec.kind == 'manifest':
        data = load_manifest(spec.path, target_shape)
    elif spec.kind == 'shapes':
        data = gen_synthetic_shapes(spec.count, target_shape, spec.classes, seed, spec.name)
    else:
        data = gen_gaussian_noise_ood(spec.count, target_shape, spec.mean, spec.stddev, seed, spec.name)
    if spec.limit is not None and spec.limit < len(data):
        data = data.take(spec.limit, seed=derive_seed(seed, 'limit'))
    return data


def _load_labelled(spec: DataSource, shape: Sequence[int], seed: int) -> LabeledDataset:
    data = load_source(spec, shape, seed)
    if not isinstance(data, LabeledDataset):
        raise DatasetError(f"In-distribution source '{spec.name}' has no labels")
    return LabeledDataset(data.images, data.labels, data.label_names, spec.name)


def prepare_data(cfg: ExperimentConfig, seeds: Optional[SeedLog] = None) -> DataBundle:
    """
    Load every configured dataset.

    Without an explicit test source the in-distribution data is split by
    ``test_fraction``. Each OOD source is split into a fit part (defense training,
    ODIN tuning) and an evaluation part of ``ood_holdout`` share.
    """
    seeds = seeds or SeedLog(cfg.experiment.seed)
    in_spec = cfg.in_data
    default_shape = in_spec.shape or DEFAULT_SHAPE
    full = _load_labelled(in_spec, default_shape, seeds('in-data'))
    if in_spec.test is not None:
        train = full
        test = _load_labelled(in_spec.test, train.input_shape, seeds('in-test'))
        if test.label_names != train.label_names:
            raise DatasetError(f"Test labels {test.label_names} differ from training labels {train.label_names}")
        if test.input_shape != train.input_shape:
            raise DatasetError(f"Test shape {test.input_shape} differs from training shape {train.input_shape}")
    else:
        train, test = full.split(1.0 - in_spec.test_fraction, seeds('in-split'))
    if len(train) == 0 or len(test) == 0:
        raise DatasetError("In-distribution train and test splits must both be non-empty")
    test = LabeledDataset(test.images, test.labels, test.label_names, in_spec.name)
    calibration = train.take(cfg.experiment.calibration_size, seeds('calibration')).images
    bundle = DataBundle(train, test, calibration)

    for spec in cfg.ood_data:
        data = load_source(spec, train.input_shape, seeds('ood', spec.name))
        images = data.images
        if tuple(images.shape[1:]) != train.input_shape:
            raise DatasetError(f"OOD source '{spec.name}' has shape {images.shape[1:]}, "
                               f"model input is {train.input_shape}")
        if len(images) < 2:
            raise DatasetError(f"OOD source '{spec.name}' needs at least two images to split")
        held_out, fit = UnlabeledDataset(images, spec.name).split(cfg.experiment.ood_holdout,
                                                                  seeds('ood-split', spec.name))
        bundle.ood_eval[spec.name], bundle.ood_fit[spec.name] = held_out, fit
        logger.info("OOD source %s: %d fit / %d eval", spec.name, len(fit), len(held_out))
    return bundle


# --- models ---

@dataclass
class ModelEntry:
    label: str
    model: Classifier
    defense: Optional[str] = None
    train_report: Optional[TrainReport] = None
    checkpoint: Optional[Path] = None


def _fresh(spec: TrainSpec, data: DataBundle, seed: int, background_names: Sequence[str] = ()) -> Classifier:
    return build_classifier(spec.arch, data.input_shape, data.train.label_names, seed=seed,
                            background_names=background_names, **spec.options)


def _check_loaded(model: Classifier, data: DataBundle, what: str) -> Classifier:
    if model.input_shape != data.input_shape:
        raise ModelError(f"{what}: checkpoint input {model.input_shape} does not match data {data.input_shape}")
    if model.label_names[:model.num_in_classes] != data.train.label_names:
        raise ModelError(f"{what}: checkpoint classes {model.label_names} do not match data "
                         f"{data.train.label_names}")
    return model


def build_base_model(cfg: ExperimentConfig, data: DataBundle, progress_callback: ProgressCallback = None,
                     seeds: Optional[SeedLog] = None) -> ModelEntry:
    label = cfg.model.label
    if cfg.model.checkpoint is not None:
        model = _check_loaded(load_classifier(cfg.model.checkpoint), data, label)
        return ModelEntry(label, model, checkpoint=cfg.model.checkpoint)
    seeds = seeds or SeedLog(cfg.experiment.seed)
    spec = cfg.model.train
    model = _fresh(spec, data, seeds('init', label))
    report = train_classifier(model, data.train, spec.train_config(seeds('train', label)),
                              progress_callback)
    return ModelEntry(label, model, train_report=report)


def build_defended_model(cfg: ExperimentConfig, defense: DefenseSpec, base_label: str, data: DataBundle,
                         progress_callback: ProgressCallback = None, seeds: Optional[SeedLog] = None) -> ModelEntry:
    """
    Train (or load) the defended twin of the base model.

    Twins share the base model's initialisation seed and batch order when they share
    its training spec, so differences come from the defense alone.
    """
    label = f"{base_label}+{defense.name}"
    if defense.checkpoint is not None:
        model = _check_loaded(load_classifier(defense.checkpoint), data, label)
        return ModelEntry(label, model, defense.name, checkpoint=defense.checkpoint)

    seeds = seeds or SeedLog(cfg.experiment.seed)
    spec = defense.train or cfg.model.train or TrainSpec()
    init_seed = seeds('init', base_label)
    train_cfg = spec.train_config(seeds('train', base_label))
    robust = RobustTrainConfig(alpha=defense.alpha, inner_attack=defense.inner_attack(), base=train_cfg,
                               alp_weight=defense.alp_weight)
    sources = [data.ood_fit[name] for name in defense.sources]
    logger.info("Training defended model %s (%s)", label, defense.kind)

    if defense.kind == 'adversarial':
        model = _fresh(spec, data, init_seed)
        report = adversarial_train(model, data.train, robust, progress_callback)
    elif defense.kind == 'alp':
        model = _fresh(spec, data, init_seed)
        report = alp_train(model, data.train, robust, progress_callback)
    elif defense.kind == 'background':
        background = BackgroundConfig(sources, defense.samples_per_source, defense.one_class_per_source,
                                      defense.mix_alpha)
        names = defense.sources if defense.one_class_per_source else (['background'] if sources else [])
        model = _fresh(spec, data, init_seed, background_names=names)
        robust.background = background
        report = background_class_train(model, data.train, robust, progress_callback)
    else:
        proxy = UnlabeledDataset(np.concatenate([s.images for s in sources]), '+'.join(defense.sources))
        model = _fresh(spec, data, init_seed)
        report = train_confidence_calibrated(model, data.train, proxy, defense.beta, train_cfg, progress_callback)
    return ModelEntry(label, model, defense.name, report)


# --- detectors ---

@dataclass
class DeployedDetector:
    """A calibrated detector bound to the model it protects."""
    name: str
    kind: str
    polarity: str
    model: Classifier
    detector: Union[OodDetector, FeatureSqueezing, MagNet]
    tuning_auroc: Optional[float] = None

    @property
    def threshold(self) -> float:
        return self.detector.threshold

    def scores(self, images: np.ndarray) -> np.ndarray:
        if len(images) == 0:
            return np.zeros(0)
        if isinstance(self.detector, MagNet):
            return self.detector.scores(images)
        return self.detector.scores(self.model, images)

    def verdicts(self, scores: np.ndarray) -> List[DetectorVerdict]:
        return [DetectorVerdict(float(s), self.threshold, self.polarity) for s in scores]

    def rescore(self, result: AttackResult) -> AttackResult:
        """The result as seen through this deployment; success also requires evasion."""
        if isinstance(self.detector, MagNet):
            return evaluate_under_magnet(self.model, self.detector, result)
        if isinstance(self.detector, FeatureSqueezing):
            return evaluate_under_squeezing(self.model, self.detector.config, self.threshold, result)
        score = float(self.scores(result.adv_example[None])[0])
        evaded = score >= self.threshold
        return replace(result, success=result.success and evaded, detector_score=score, evaded=evaded)

    def to_dict(self) -> Dict[str, Any]:
        record = {'name': self.name, **self.detector.to_dict()}
        if self.tuning_auroc is not None:
            record['tuning_auroc'] = self.tuning_auroc
        return record


class DetectorFactory:
    """Builds detectors per model; MagNet autoencoders do not depend on the classifier and are shared."""

    def __init__(self, cfg: ExperimentConfig, data: DataBundle, out_dir: Path,
                 progress_callback: ProgressCallback = None, seeds: Optional[SeedLog] = None):
        self.cfg = cfg
        self.seeds = seeds or SeedLog(cfg.experiment.seed)
        self.data = data
        self.out_dir = out_dir
        self.progress_callback = progress_callback
        self._magnets: Dict[str, MagNet] = {}

    def _magnet(self, spec: DetectorSpec) -> MagNet:
        if spec.name in self._magnets:
            return self._magnets[spec.name]
        if spec.autoencoder is not None:
            autoencoder = load_autoencoder(spec.autoencoder)
            if autoencoder.input_shape != self.data.input_shape:
                raise ModelError(f"Autoencoder input {autoencoder.input_shape} does not match data "
                                 f"{self.data.input_shape}")
            stored = read_meta(spec.autoencoder).get('detector')
            if stored and stored.get('recon_norm') != spec.recon_norm:
                logger.warning("Autoencoder %s was calibrated with %s reconstruction error; recalibrating with %s",
                               spec.autoencoder, stored.get('recon_norm'), spec.recon_norm)
        else:
            autoencoder = build_autoencoder(self.data.input_shape, seed=self.seeds('ae-init', spec.name))
            magnet_train(autoencoder, self.data.train, spec.noise_level,
                         spec.train.train_config(self.seeds('ae-train', spec.name)), self.progress_callback)
        magnet = MagNet(autoencoder, spec.magnet_config(self._fpr(spec)))
        magnet.calibrate(self.data.calibration)
        if spec.autoencoder is None:
            save_checkpoint(self.out_dir / 'models' / f"{slug(spec.name)}.npz", autoencoder, detector=magnet.to_dict())
        self._magnets[spec.name] = magnet
        return magnet

    def _fpr(self, spec: DetectorSpec) -> float:
        return spec.fpr_target if spec.fpr_target is not None else self.cfg.experiment.fpr_target

    def _tpr(self, spec: DetectorSpec) -> float:
        return spec.target_tpr if spec.target_tpr is not None else self.cfg.experiment.target_tpr

    def build(self, spec: DetectorSpec, model: Classifier) -> DeployedDetector:
        tuning = None
        if spec.kind == 'baseline':
            detector = OodDetector('baseline', target_tpr=self._tpr(spec))
        elif spec.kind == 'odin':
            odin = spec.odin_config()
            tune_on = spec.tune_source or next(iter(self.data.ood_fit), None)
            if spec.tune and tune_on is None:
                logger.warning("Detector %s: no OOD source to tune on; using configured T and eps", spec.name)
            elif spec.tune:
                odin, tuning = tune_odin(model, self.data.calibration, self.data.ood_fit[tune_on].images)
            detector = OodDetector('odin', odin=odin, target_tpr=self._tpr(spec))
        elif spec.kind == 'feature-squeezing':
            detector = FeatureSqueezing(spec.squeezer_config(), fpr_target=self._fpr(spec))
        else:
            detector = self._magnet(spec)
            return DeployedDetector(spec.name, spec.kind, 'adversarial', model, detector)
        detector.calibrate(model, self.data.calibration)
        return DeployedDetector(spec.name, spec.kind, spec.polarity, model, detector, tuning)


# --- attacks ---

@dataclass
class AttackCell:
    model_label: str
    source: str
    data_kind: str
    attack: str
    spec: AttackSpec
    epsilon: Epsilon
    results: List[AttackResult]
    defense: str = NONE_LABEL
    extras: Dict[str, Any] = field(default_factory=dict)


class ExperimentRunner:
    """
    Runs the configured evaluation matrix and assembles the report.

    Example:
        >>> runner = ExperimentRunner(load_config('configs/toy.yaml'))
        >>> report = runner.run()
    """

    def __init__(self, cfg: ExperimentConfig, stages: Sequence[str] = STAGES,
                 progress_callback: ProgressCallback = None):
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ValueError(f"Unknown stages {sorted(unknown)}. Available: {STAGES}")
        self.cfg = cfg
        self.stages = tuple(stages)
        self.progress_callback = progress_callback
        self.seed = cfg.experiment.seed
        self.out_dir = Path(cfg.experiment.output_path)
        self.report = EvalReport(meta={'experiment': cfg.experiment.name, 'seed': self.seed,
                                       'stages': list(self.stages)})
        self.data: Optional[DataBundle] = None
        self.models: List[ModelEntry] = []
        self.detectors: Dict[str, Dict[str, DeployedDetector]] = {}
        self.cells: List[AttackCell] = []
        self.artifacts: List[Dict[str, str]] = []
        self.seed_log = SeedLog(self.seed)

    def _progress(self, message: str) -> None:
        if self.progress_callback:
            self.progress_callback(message)

    @property
    def seeds(self) -> Dict[str, int]:
        return self.seed_log.seeds

    def _seed(self, *labels: object) -> int:
        return self.seed_log(*labels)

    # stages

    def run(self) -> EvalReport:
        """
        Execute every stage and write report.csv, report.json and manifest.json.

        Raises:
            ExperimentError: Carrying the partial report (also written to disk) when a stage fails
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        try:
            self._progress('Loading data')
            self.data = prepare_data(self.cfg, self.seed_log)
            self._progress('Preparing models')
            self._prepare_models()
            if 'detectors' in self.stages or any(a.detector for a in self.cfg.attacks):
                self._deploy_detectors()
            if 'clean' in self.stages:
                self._clean_rows()
            if 'attacks' in self.stages:
                self._attack_rows()
            if 'detectors' in self.stages:
                self._detector_rows()
        except Exception as e:
            self.report.partial = True
            logger.warning("Stage failed (%s); writing partial report with %d rows", e, len(self.report.rows))
            self._write()
            raise ExperimentError(f"Experiment '{self.cfg.experiment.name}' failed: {e}", self.report) from e
        self._write()
        return self.report

    def _prepare_models(self) -> None:
        base = build_base_model(self.cfg, self.data, self.progress_callback, self.seed_log)
        self.models = [base]
        for defense in self.cfg.defenses:
            self.models.append(build_defended_model(self.cfg, defense, base.label, self.data,
                                                    self.progress_callback, self.seed_log))
        for entry in self.models:
            if entry.checkpoint is None:
                entry.checkpoint = save_checkpoint(self.out_dir / 'models' / f"{slug(entry.label)}.npz", entry.model)

    def _deploy_detectors(self) -> None:
        factory = DetectorFactory(self.cfg, self.data, self.out_dir, self.progress_callback, self.seed_log)
        for entry in self.models:
            self.detectors[entry.label] = {spec.name: factory.build(spec, entry.model)
                                           for spec in self.cfg.detectors}

    def _clean_rows(self) -> None:
        in_name = self.cfg.in_data.name
        for entry in self.models:
            model = entry.model
            evaluation = evaluate_model(model, self.data.test)
            self.report.add(ReportRow(entry.label, in_name, 'in-unmod', accuracy=evaluation.accuracy,
                                      mean_conf=evaluation.mean_confidence,
                                      extras={'mean_conf_undefined': evaluation.confidence_undefined}))
            for source, ood in self.data.ood_eval.items():
                probs = confidences(model, ood.images)
                low, high = minmax_expected_confidence(probs, model.num_in_classes)
                extras = {'min_expected_conf': low, 'max_expected_conf': high}
                if model.background_indices:
                    extras['rejection_rate'] = ood_rejection_rate(model, ood)
                self.report.add(ReportRow(entry.label, source, 'ood-unmod',
                                          mean_conf=float(np.mean(probs.max(axis=-1))), extras=extras))

    def _starts(self, source: str, count: int) -> np.ndarray:
        seed = self._seed('starts', source)
        if source == self.cfg.in_data.name:
            return self.data.test.take(count, seed).images
        return self.data.ood_eval[source].take(count, seed).images

    def _attack_rows(self) -> None:
        in_name = self.cfg.in_data.name
        for entry in self.models:
            for spec in self.cfg.attacks:
                sources = spec.sources or [in_name] + list(self.data.ood_eval)
                for eps in spec.epsilon:
                    for source in sources:
                        cell = self._attack_cell(entry, spec, eps, source)
                        self.cells.append(cell)
                        self._cell_row(cell)

    def _attack_cell(self, entry: ModelEntry, spec: AttackSpec, eps: Epsilon, source: str) -> AttackCell:
        model = entry.model
        label = spec.label(eps)
        count = spec.starts or self.cfg.experiment.starts
        starts = self._starts(source, count)
        if spec.pixel_shift > 0:
            starts = pixel_shift(starts, spec.pixel_shift)
        targets = [select_target(model, x, spec.targeting, self._seed('target', source, i),
                                 num_targets=model.num_in_classes)
                   for i, x in enumerate(starts)]
        options: Dict[str, Any] = {}
        defense = NONE_LABEL
        if spec.kind in ('bpda', 'magnet-adaptive'):
            deployed = self.detectors[entry.label][spec.detector]
            defense = deployed.name
            if spec.kind == 'bpda':
                options.update(squeezers=deployed.detector.config, threshold=deployed.threshold)
            else:
                options['magnet'] = deployed.detector
        elif spec.kind == 'eot':
            options.update(sampler=spec.sampler(), samples_per_step=spec.samples_per_step)
        elif spec.kind == 'blackbox':
            options.update(budget=spec.query_budget, group_size=spec.group_size, h=spec.fd_step)

        attack_seeds = [self._seed('attack', entry.label, source, label, i) for i in range(len(starts))]

        def attack_all(extra: Dict[str, Any]) -> List[AttackResult]:
            def one(i: int) -> AttackResult:
                acfg = spec.attack_config(eps, attack_seeds[i])
                return run_attack(spec.kind, model, starts[i], targets[i], acfg, **options, **extra)
            return parallel_map(one, list(range(len(starts))), self.cfg.experiment.workers)

        self._progress(f"Attacking {entry.label} / {source} with {label}")
        extras: Dict[str, Any] = {'epsilon': {'value': eps.value, 'scale': eps.scale}}
        if spec.kind == 'magnet-adaptive':
            sweep = {}
            best = None
            for lam in spec.lambda_recon:
                results = attack_all({'lambda_recon': lam})
                rate = target_success_rate(results)
                sweep[f"{lam:g}"] = rate
                if best is None or rate > best[1]:
                    best = (results, rate, lam)
            results = best[0]
            extras.update(lambda_recon=best[2], lambda_sweep=sweep)
        else:
            results = attack_all({})

        constraint = spec.attack_config(eps, 0).constraint
        infeasible = sum(not is_feasible(r.adv_example, r.start, constraint) for r in results)
        if infeasible:
            raise AttackError(f"{infeasible} results of {label} on {source} left the feasible set")
        kind = 'in-adv' if source == self.cfg.in_data.name else 'ood-adv'
        return AttackCell(entry.label, source, kind, label, spec, eps, results, defense, extras)

    def _cell_row(self, cell: AttackCell, deployed: Optional[DeployedDetector] = None,
                  results: Optional[List[AttackResult]] = None, **values: Any) -> ReportRow:
        results = cell.results if results is None else results
        model = next(e.model for e in self.models if e.label == cell.model_label)
        conf = mean_target_confidence(results)
        extras = dict(cell.extras)
        extras.update(mean_conf_undefined=conf.undefined,
                      mean_l2=mean_perturbation(results, 'l2').value,
                      mean_linf=mean_perturbation(results, 'linf').value)
        tsr = target_success_rate(results)
        if cell.spec.kind == 'eot':
            extras['fixed_tsr'] = tsr
            tsr = transform_success_rate(results)
        probs = confidences(model, np.stack([r.adv_example for r in results]))
        low, high = minmax_expected_confidence(probs, model.num_in_classes, np.array([r.target for r in results]))
        extras.update(min_expected_conf=low, max_expected_conf=high)
        queries = [r.queries_used for r in results if r.queries_used is not None]
        row = ReportRow(cell.model_label, cell.source, cell.data_kind, cell.attack,
                        deployed.name if deployed else cell.defense, tsr=tsr, mean_conf=conf.value,
                        queries=float(np.mean(queries)) if queries else None, extras=extras, **values)
        self._save_cell(cell, results, row.defense)
        return self.report.add(row)

    def _save_cell(self, cell: AttackCell, results: List[AttackResult], defense: str) -> None:
        name = '__'.join(slug(part) for part in (cell.model_label, cell.source, cell.attack, defense)) + '.npz'
        path = self.out_dir / 'adversarial' / name
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, **stack_results(results))
        self.artifacts.append({'path': path.relative_to(self.out_dir).as_posix(), 'type': 'adversarial',
                               'model': cell.model_label, 'data_source': cell.source,
                               'data_kind': cell.data_kind, 'attack': cell.attack, 'defense': defense})

    def _detector_rows(self) -> None:
        in_name = self.cfg.in_data.name
        for entry in self.models:
            for name, deployed in self.detectors.get(entry.label, {}).items():
                self._progress(f"Scoring {entry.label} with {name}")
                stored: Dict[str, np.ndarray] = {'threshold': np.array(deployed.threshold)}
                benign = deployed.scores(self.data.test.images)
                stored['in-unmod'] = benign
                benign_verdicts = deployed.verdicts(benign)
                summary = detection_rates(benign_verdicts, ['in-unmod'] * len(benign_verdicts))
                fpr = summary.fpr
                self.report.add(ReportRow(entry.label, in_name, 'in-unmod', NONE_LABEL, name,
                                          det_rate=fpr, fpr=fpr, extras={'threshold': deployed.threshold}))
                for source, ood in self.data.ood_eval.items():
                    scores = deployed.scores(ood.images)
                    stored[f"ood-unmod__{slug(source)}"] = scores
                    verdicts = deployed.verdicts(scores)
                    rates = detection_rates(verdicts, ['ood-unmod'] * len(verdicts))
                    extras = {'auroc': self._auroc(deployed, benign, scores)}
                    self.report.add(ReportRow(entry.label, source, 'ood-unmod', NONE_LABEL, name,
                                              det_rate=rates.per_kind['ood-unmod'], fpr=fpr, extras=extras))
                for cell in self.cells:
                    if cell.model_label != entry.label or cell.defense != NONE_LABEL:
                        continue
                    self._protected_row(cell, deployed, fpr, stored)
                path = self.out_dir / 'scores' / f"{slug(entry.label)}__{slug(name)}.npz"
                path.parent.mkdir(parents=True, exist_ok=True)
                np.savez(path, **stored)
                self.artifacts.append({'path': path.relative_to(self.out_dir).as_posix(), 'type': 'scores',
                                       'model': entry.label, 'defense': name})

    @staticmethod
    def _auroc(deployed: DeployedDetector, benign: np.ndarray, other: np.ndarray) -> Optional[float]:
        if len(benign) == 0 or len(other) == 0:
            return None
        if deployed.polarity == 'ood':
            return auroc(benign, other)
        return auroc(other, benign)

    def _protected_row(self, cell: AttackCell, deployed: DeployedDetector, fpr: float,
                       stored: Dict[str, np.ndarray]) -> None:
        """Row for a plain attack cell seen through a deployed detector."""
        scores = deployed.scores(np.stack([r.adv_example for r in cell.results]))
        stored[f"adv__{slug(cell.source)}__{slug(cell.attack)}"] = scores
        successful = np.array([r.success for r in cell.results], dtype=bool)
        extras: Dict[str, Any] = {}
        det_rate = None
        if successful.any():
            verdicts = deployed.verdicts(scores[successful])
            det_rate = detection_rates(verdicts, [cell.data_kind] * len(verdicts)).per_kind[cell.data_kind]
        else:
            extras['det_rate_undefined'] = True
        rescored = [deployed.rescore(r) for r in cell.results]
        protected = AttackCell(cell.model_label, cell.source, cell.data_kind, cell.attack, cell.spec,
                               cell.epsilon, rescored, deployed.name, {**cell.extras, **extras})
        self._cell_row(protected, deployed, det_rate=det_rate, fpr=fpr)

    # output

    def _write(self) -> None:
        emit_report(self.report, self.out_dir)
        manifest = {
            'experiment': self.cfg.experiment.name,
            'partial': self.report.partial,
            'config': self.cfg.model_dump(mode='json'),
            'seed': self.seed,
            'derived_seeds': dict(sorted(self.seeds.items())),
            'models': [{'label': e.label, 'defense': e.defense, 'arch': e.model.arch,
                        'checkpoint': str(e.checkpoint) if e.checkpoint else None,
                        'final_loss': e.train_report.final_loss if e.train_report else None}
                       for e in self.models],
            'detectors': {label: {name: d.to_dict() for name, d in deployed.items()}
                          for label, deployed in self.detectors.items()},
            'artifacts': sorted(self.artifacts, key=lambda a: a['path']),
        }
        path = self.out_dir / 'manifest.json'
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + '\n', encoding='utf-8')
        logger.info("Manifest written to %s", path)


def run_experiment(cfg: ExperimentConfig, stages: Sequence[str] = STAGES,
                   progress_callback: ProgressCallback = None) -> EvalReport:
    """Run the configured matrix; see ``ExperimentRunner.run``."""
    return ExperimentRunner(cfg, stages, progress_callback).run()
