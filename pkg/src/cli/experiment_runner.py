from dataclasses import dataclass
import json
import logging
import os
from typing import Any, Dict, List, Optional

from joblib import Parallel, delayed
from matplotlib import colormaps
import numpy as np
import pandas as pd

from src.esmlr import esmlr_core, evaluation
from src.esmlr.emaps import EmapStack, build_emaps, describe_emaps, emap_block, save_emaps
from src.esmlr.esmlr_core import FeatureMode, TrainedModel
from src.esmlr.evaluation import MetricsReport, Stopwatch
from src.esmlr.hsi_data import (
    GroundTruth, HsiCube, LabeledDataset, flatten_labeled, load_cube, load_ground_truth,
    normalize_unit_max, split_per_class,
)
from src.models.config import ExperimentConfig, SweepSpec
from src.models.types import EmapsDescriptor, TrialRow
from src.utils.errors import DataError, EsmlrError
from src.utils import raster_io


@dataclass
class PreparedScene:
    """Everything a trial needs that does not depend on the split or the classifier."""
    cube: HsiCube
    ground_truth: Optional[GroundTruth]
    dataset: Optional[LabeledDataset]
    emaps: Optional[EmapStack]

    def labeled_input(self, mode: FeatureMode) -> np.ndarray:
        spatial = emap_block(self.emaps, self.dataset).H if self.emaps is not None else None
        return esmlr_core.assemble_input(mode, self.dataset.features, spatial)

    def scene_input(self, mode: FeatureMode) -> np.ndarray:
        spatial = self.emaps.pixel_features() if self.emaps is not None else None
        return esmlr_core.assemble_input(mode, self.cube.pixel_matrix(), spatial)


@dataclass
class TrialResult:
    trial: int
    report: MetricsReport
    label_map: np.ndarray
    full_map: Optional[np.ndarray]
    nnz: int


class ExperimentRunner:
    """Runs the emaps / experiment / sweep commands for one resolved configuration."""

    def __init__(self, config: ExperimentConfig, logger: Optional[logging.Logger] = None):
        self.config = config
        self.logger = logger or logging.getLogger('esmlr.runner')
        self.scene: Optional[PreparedScene] = None
        self.outputs: List[str] = []

    # ------------------------------------------------------------------ data

    def prepare(self, need_labels: bool = True) -> PreparedScene:
        """Load and normalize the cube, flatten labeled pixels, build EMAPs when the mode uses them."""
        cube = normalize_unit_max(load_cube(self.config.cube))

        gt = None
        dataset = None
        if need_labels:
            gt = load_ground_truth(self.config.ground_truth, shape=(cube.height, cube.width))
            dataset = flatten_labeled(cube, gt)
            self.logger.info(f"Class sizes: {gt.class_sizes()}")

        stack = None
        if not need_labels or self.config.mode_enum is not FeatureMode.SPECTRAL:
            stack = build_emaps(cube, self.config.ap_spec(), float(self.config.share))

        self.scene = PreparedScene(cube=cube, ground_truth=gt, dataset=dataset, emaps=stack)
        return self.scene

    # ---------------------------------------------------------------- trials

    def run_trial(self, trial: int, config: Optional[ExperimentConfig] = None,
                  X: Optional[np.ndarray] = None) -> TrialResult:
        config = config or self.config
        scene = self.scene
        ds = scene.dataset
        seed = config.trial_seed(trial)
        mode = config.mode_enum
        if X is None:
            X = scene.labeled_input(mode)

        split = split_per_class(ds, config.split_spec(seed))
        train_labels = ds.labels[split.train_idx]
        test_labels = ds.labels[split.test_idx]

        with Stopwatch() as train_clock:
            model = esmlr_core.train(config.variant_enum, mode, X[:, split.train_idx], train_labels,
                                     ds.class_count, config.model_config(),
                                     seed=seed + int(config.seed_offset), emaps=self._emaps_descriptor(config),
                                     spectral_dim=scene.cube.bands)
        with Stopwatch() as test_clock:
            predicted = esmlr_core.predict(model, X[:, split.test_idx])

        report = evaluation.score(test_labels, predicted, ds.class_count,
                                  train_seconds=train_clock.seconds, test_seconds=test_clock.seconds,
                                  trial_seed=seed)
        self.logger.info(f"Trial {trial} (seed {seed}): OA {report.oa:.4f}, AA {report.aa:.4f}, "
                         f"kappa {report.kappa:.4f}, train {report.train_seconds:.2f}s, "
                         f"test {report.test_seconds:.2f}s")

        # test pixels only, so OA recomputed from map and ground truth matches the report
        label_map = np.zeros((scene.cube.height, scene.cube.width), dtype=np.uint8)
        test_pixels = ds.pixel_index[split.test_idx]
        label_map[test_pixels[:, 0], test_pixels[:, 1]] = predicted

        full_map = None
        if config.full_map:
            full_map = esmlr_core.predict(model, scene.scene_input(mode)).reshape(
                scene.cube.height, scene.cube.width).astype(np.uint8)

        if config.save_models:
            self._save_model(model, config, trial, seed)

        return TrialResult(trial=trial, report=report, label_map=label_map, full_map=full_map,
                           nnz=model.regressor.nnz)

    def _emaps_descriptor(self, config: ExperimentConfig) -> Optional[EmapsDescriptor]:
        if self.scene.emaps is None:
            return None
        return describe_emaps(self.scene.emaps, config.ap_spec(), float(config.share))

    def run_trials(self, config: Optional[ExperimentConfig] = None) -> List[TrialResult]:
        """All trials of one configuration; results are merged in trial order."""
        config = config or self.config
        if self.scene is None:
            self.prepare()
        if self.scene.dataset.class_count > 255:
            raise DataError(f"{self.scene.dataset.class_count} classes do not fit in an 8-bit label map")

        X = self.scene.labeled_input(config.mode_enum)
        trials = int(config.trials)
        workers = min(config.resolved_threads(), trials)
        self.logger.info(f"Running {trials} {config.variant}/{config.mode} trials on {workers} worker(s)")

        if workers == 1:
            results = [self.run_trial(k, config, X) for k in range(trials)]
        else:
            results = Parallel(n_jobs=workers, prefer='threads')(
                delayed(self.run_trial)(k, config, X) for k in range(trials)
            )
        return sorted(results, key=lambda r: r.trial)

    def _save_model(self, model: TrainedModel, config: ExperimentConfig, trial: int, seed: int) -> None:
        model.extras = {'trial': trial, 'trial_seed': seed, 'b': config.resolved_b(), 'a': float(config.a)}
        prefix = os.path.join(config.output_dir, 'models', f'model_trial{trial}')
        esmlr_core.save_model(model, prefix)
        self.outputs.append(prefix + '.json')

    # --------------------------------------------------------------- writers

    def _path(self, name: str) -> str:
        os.makedirs(self.config.output_dir, exist_ok=True)
        path = os.path.join(self.config.output_dir, name)
        self.outputs.append(path)
        return path

    def write_legend(self, class_count: int) -> str:
        """legend.csv: label, class name and an RGB colour per class."""
        names = self.config.resolved_class_names(class_count)
        palette = colormaps['tab20']
        rows = []
        for label in range(1, class_count + 1):
            r, g, b, _ = palette((label - 1) % palette.N)
            rows.append({'label': label, 'class_name': names[label - 1],
                         'r': int(round(r * 255)), 'g': int(round(g * 255)), 'b': int(round(b * 255))})
        path = self._path('legend.csv')
        pd.DataFrame(rows).to_csv(path, index=False, lineterminator='\n')
        return path

    def write_manifest(self, command: str, status: str, extra: Optional[Dict[str, Any]] = None,
                       error: Optional[str] = None) -> str:
        manifest: Dict[str, Any] = {
            'command': command,
            'status': status,
            'config': self.config.to_dict(),
            'trial_seeds': [self.config.trial_seed(k) for k in range(int(self.config.trials))],
        }
        if self.scene is not None:
            manifest['scene'] = {'height': self.scene.cube.height, 'width': self.scene.cube.width,
                                 'bands': self.scene.cube.bands}
            if self.scene.emaps is not None:
                manifest['emap_features'] = self.scene.emaps.count
        if extra:
            manifest.update(extra)
        if error is not None:
            manifest['error'] = error
        path = os.path.join(self.config.output_dir, 'manifest.json')
        os.makedirs(self.config.output_dir, exist_ok=True)
        manifest['outputs'] = sorted(set(self.outputs))
        with open(path, 'w') as fh:
            json.dump(manifest, fh, indent=2, default=str)
        return path

    def _guarded(self, command: str, body) -> Any:
        """Run a command body; on failure flag the manifest as failed and re-raise."""
        try:
            return body()
        except EsmlrError as e:
            self.logger.error(f"{command} failed: {e}")
            self.write_manifest(command, 'failed', error=str(e))
            raise
        except (FloatingPointError, np.linalg.LinAlgError) as e:
            self.logger.error(f"{command} failed numerically: {e}")
            self.write_manifest(command, 'failed', error=str(e))
            raise

    # -------------------------------------------------------------- commands

    def cmd_emaps(self) -> str:
        def body() -> str:
            scene = self.prepare(need_labels=False)
            spec = self.config.ap_spec()
            path = self._path('emaps.bsq')
            save_emaps(path, scene.emaps, spec, float(self.config.share))
            self.outputs.append(raster_io.sidecar_path(path))
            self.write_manifest('emaps', 'ok', {'emap_features': scene.emaps.count})
            return path

        return self._guarded('emaps', body)

    def cmd_experiment(self) -> Dict[str, Any]:
        def body() -> Dict[str, Any]:
            self.prepare()
            results = self.run_trials()
            return self._write_experiment(results)

        return self._guarded('experiment', body)

    def _write_experiment(self, results: List[TrialResult]) -> Dict[str, Any]:
        config = self.config
        rows: List[TrialRow] = [evaluation.trial_row(config.variant, config.mode, r.trial, r.report)
                                for r in results]
        evaluation.write_csv(evaluation.trials_frame(rows), self._path('trials.csv'))
        evaluation.write_csv(evaluation.timings_frame(rows), self._path('timings.csv'))

        for r in results:
            raster_io.write_pgm(self._path(f'map_trial{r.trial}.pgm'), r.label_map)
            if r.full_map is not None:
                raster_io.write_pgm(self._path(f'fullmap_trial{r.trial}.pgm'), r.full_map)

        class_count = self.scene.dataset.class_count
        self.write_legend(class_count)

        summary: Dict[str, Any] = {
            'variant': config.variant,
            'mode': config.mode,
            'class_names': config.resolved_class_names(class_count),
            'metrics': evaluation.aggregate([r.report for r in results]),
            'trials': [dict(r.report.to_dict(), trial=r.trial, nnz=r.nnz) for r in results],
        }
        with open(self._path('summary.json'), 'w') as fh:
            json.dump(summary, fh, indent=2)

        metrics = summary['metrics']
        self.logger.info(f"{config.variant}/{config.mode} over {metrics['trials']} trials: "
                         f"OA {metrics['oa_mean']:.4f} +/- {metrics['oa_std']:.4f}, "
                         f"AA {metrics['aa_mean']:.4f}, kappa {metrics['kappa_mean']:.4f}")
        self.write_manifest('experiment', 'ok')
        return summary

    def cmd_sweep(self, sweep: SweepSpec) -> pd.DataFrame:
        def body() -> pd.DataFrame:
            self.prepare()
            frames = []
            for value in sweep.values:
                config = sweep.apply(self.config, value)
                config.validate()
                self.logger.info(f"Sweep {sweep.axis} = {value}")
                results = self.run_trials(config)
                rows = [evaluation.trial_row(config.variant, config.mode, r.trial, r.report) for r in results]
                frame = evaluation.trials_frame(rows)
                frame.insert(0, 'value', value)
                frame.insert(0, 'axis', sweep.axis)
                frames.append(frame)

            table = pd.concat(frames, ignore_index=True)
            evaluation.write_csv(table, self._path(f'sweep_{sweep.axis}.csv'))
            self.write_manifest('sweep', 'ok', {'sweep': {'axis': sweep.axis, 'values': sweep.values}})
            return table

        return self._guarded('sweep', body)
