import copy
import logging
import os
from typing import Any, Dict, List, Optional, Sequence

import yaml

from src.esmlr.emaps import DEFAULT_SHARE, DEFAULT_THRESHOLDS, ApSpec
from src.esmlr.esmlr_core import FeatureMode, ModelConfig, Variant, validate_combination
from src.esmlr.feature_maps import ActivationKind
from src.esmlr.hsi_data import SplitSpec
from src.models.presets import get_preset
from src.utils.errors import ConfigError

logger = logging.getLogger('esmlr.config')

SECTIONS: Dict[str, List[str]] = {
    'data': ['cube', 'ground_truth', 'preset', 'class_names'],
    'model': ['variant', 'mode', 'L', 'activation', 'a', 'b', 'sigma', 'kernel_input',
              'mu', 'max_iter', 'tol', 'seed_offset'],
    'emaps': ['thresholds', 'connectivity', 'share'],
    'split': ['q', 'counts', 'cap_rule'],
    'run': ['trials', 'base_seed', 'threads', 'output_dir', 'full_map', 'log_file', 'save_models'],
}

FIELDS = [name for names in SECTIONS.values() for name in names]

DEFAULT_GRIDS: Dict[str, List[float]] = {
    'L': list(range(50, 1501, 50)),
    'a': list(range(1, 21)),
    'b': list(range(-20, 1)),
    'Q': list(range(5, 41, 5)),
}


class ExperimentConfig:
    """Configuration container for one experiment (dataset, classifier, split and run protocol)."""

    def __init__(
        self,
        cube: str,
        ground_truth: Optional[str] = None,
        preset: Optional[str] = None,
        class_names: Optional[List[str]] = None,
        variant: str = 'ESMLR',
        mode: str = 'spectral',
        L: Optional[int] = None,  # 300 for spectral/EMAPs, 500 for MFL when unset
        activation: str = 'sigmoid',
        a: float = 10.0,  # C = 2^a
        b: Optional[float] = None,  # lambda = 2^b; preset or -10 when unset
        sigma: Optional[float] = None,
        kernel_input: str = 'raw',
        mu: Optional[float] = None,
        max_iter: int = 200,
        tol: float = 1e-6,
        seed_offset: int = 0,  # random map seed = trial seed + seed_offset
        thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
        connectivity: int = 4,
        share: float = DEFAULT_SHARE,
        q: Optional[int] = None,
        counts: Optional[Dict[int, int]] = None,
        cap_rule: bool = True,
        trials: int = 10,
        base_seed: int = 0,
        threads: Optional[int] = None,
        output_dir: str = 'results',
        full_map: bool = False,
        log_file: Optional[str] = None,
        save_models: bool = False,
    ):
        self.cube = cube
        self.ground_truth = ground_truth
        self.preset = preset
        self.class_names = class_names
        self.variant = variant
        self.mode = mode
        self.L = L
        self.activation = activation
        self.a = a
        self.b = b
        self.sigma = sigma
        self.kernel_input = kernel_input
        self.mu = mu
        self.max_iter = max_iter
        self.tol = tol
        self.seed_offset = seed_offset
        self.thresholds = tuple(int(t) for t in thresholds)
        self.connectivity = connectivity
        self.share = share
        self.q = q
        self.counts = counts
        self.cap_rule = cap_rule
        self.trials = trials
        self.base_seed = base_seed
        self.threads = threads
        self.output_dir = output_dir
        self.full_map = full_map
        self.log_file = log_file
        self.save_models = save_models

    @property
    def variant_enum(self) -> Variant:
        return Variant(self.variant)

    @property
    def mode_enum(self) -> FeatureMode:
        return FeatureMode(self.mode)

    def resolved_b(self) -> float:
        if self.b is not None:
            return float(self.b)
        preset = get_preset(self.preset)
        if preset is not None:
            return float(preset['b_by_mode'][self.mode])
        return -10.0

    def resolved_sigma(self) -> float:
        if self.sigma is not None:
            return float(self.sigma)
        preset = get_preset(self.preset)
        return float(preset['sigma']) if preset is not None else 0.85

    def resolved_counts(self) -> Optional[Dict[int, int]]:
        if self.q is not None:
            return None
        if self.counts is not None:
            return {int(k): int(v) for k, v in self.counts.items()}
        preset = get_preset(self.preset)
        return dict(preset['train_counts']) if preset is not None else None

    def resolved_class_names(self, class_count: int) -> List[str]:
        names = self.class_names
        if names is None:
            preset = get_preset(self.preset)
            names = preset['class_names'] if preset is not None else None
        if names is None or len(names) != class_count:
            return [f'class_{m}' for m in range(1, class_count + 1)]
        return list(names)

    def resolved_threads(self) -> int:
        if self.threads:
            return max(int(self.threads), 1)
        env = os.getenv('ESMLR_THREADS')
        if env:
            try:
                return max(int(env), 1)
            except ValueError:
                logger.warning(f"Ignoring non-integer ESMLR_THREADS={env!r}")
        return os.cpu_count() or 1

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            L=self.L, activation=ActivationKind(self.activation), a=float(self.a),
            b=self.resolved_b(), sigma=self.resolved_sigma(), kernel_input=self.kernel_input,
            mu=self.mu, max_iter=int(self.max_iter), tol=float(self.tol),
        )

    def split_spec(self, seed: int) -> SplitSpec:
        return SplitSpec(q=self.q, counts=self.resolved_counts(), seed=seed, cap_rule=self.cap_rule)

    def ap_spec(self) -> ApSpec:
        return ApSpec(thresholds=self.thresholds, connectivity=int(self.connectivity))

    def trial_seed(self, trial: int) -> int:
        return int(self.base_seed) + trial

    def with_changes(self, **changes: Any) -> 'ExperimentConfig':
        updated = copy.deepcopy(self)
        for key, value in changes.items():
            if key not in FIELDS:
                raise ConfigError(f"Unknown config field {key!r}")
            setattr(updated, key, value)
        if 'thresholds' in changes:
            updated.thresholds = tuple(int(t) for t in updated.thresholds)
        return updated

    def validate(self, require_ground_truth: bool = True) -> None:
        """Raise ConfigError for anything that would fail later for configuration reasons."""
        if not self.cube or not os.path.exists(self.cube):
            raise ConfigError(f"Cube file not found: {self.cube}")
        if require_ground_truth:
            if not self.ground_truth:
                raise ConfigError("data.ground_truth is required")
            if not os.path.exists(self.ground_truth):
                raise ConfigError(f"Ground truth file not found: {self.ground_truth}")
        if self.preset and get_preset(self.preset) is None:
            raise ConfigError(f"Unknown preset {self.preset!r}")

        try:
            variant, mode = self.variant_enum, self.mode_enum
            ActivationKind(self.activation)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        validate_combination(variant, mode)

        if self.kernel_input not in ('raw', 'mapped'):
            raise ConfigError(f"kernel_input must be 'raw' or 'mapped', got {self.kernel_input!r}")
        if self.L is not None and int(self.L) < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if int(self.trials) < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not 0 < float(self.share) <= 1:
            raise ConfigError(f"emaps.share must lie in (0, 1], got {self.share}")
        if require_ground_truth and self.q is None and self.resolved_counts() is None:
            raise ConfigError("Split needs split.q, split.counts or a dataset preset")

        # constructing these runs their own checks
        self.ap_spec()
        self.model_config().lorsal()
        if require_ground_truth:
            self.split_spec(self.base_seed)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        """Sectioned view with every default and preset value filled in."""
        out: Dict[str, Dict[str, Any]] = {}
        for section, names in SECTIONS.items():
            out[section] = {name: getattr(self, name) for name in names}
        out['model']['b'] = self.resolved_b()
        out['model']['sigma'] = self.resolved_sigma()
        out['model']['L'] = self.model_config().feature_dim(self.mode_enum)
        out['emaps']['thresholds'] = list(self.thresholds)
        counts = self.resolved_counts()
        out['split']['counts'] = {str(k): v for k, v in counts.items()} if counts else None
        out['run']['threads'] = self.resolved_threads()
        return out


class SweepSpec:
    """One axis (L, a, b or Q) and a strictly increasing list of values to run."""

    AXES = ('L', 'a', 'b', 'Q')

    def __init__(self, axis: str, values: Optional[Sequence[float]] = None):
        if axis not in self.AXES:
            raise ConfigError(f"Sweep axis must be one of {self.AXES}, got {axis!r}")
        values = list(DEFAULT_GRIDS[axis] if values is None else values)
        if not values:
            raise ConfigError("Sweep needs at least one value")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError(f"Sweep values must be strictly increasing, got {values}")
        if axis in ('L', 'Q') and any(int(v) != v or v < 1 for v in values):
            raise ConfigError(f"{axis} sweep values must be positive integers, got {values}")
        self.axis = axis
        self.values = [int(v) if axis in ('L', 'Q') else float(v) for v in values]

    def apply(self, config: ExperimentConfig, value: float) -> ExperimentConfig:
        if self.axis == 'Q':
            return config.with_changes(q=int(value), counts=None)
        return config.with_changes(**{self.axis: value})


def parse_override(raw: str) -> Any:
    """CLI override text read as a YAML scalar or list: '300' -> 300, '[100, 200]' -> list."""
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def load_config_from_yaml(path: str, overrides: Optional[Dict[str, Any]] = None,
                          require_ground_truth: bool = True) -> Optional[ExperimentConfig]:
    """Load a JSON/YAML experiment document, apply flat overrides, validate.

    Returns None (after logging why) on any failure.
    """
    try:
        logger.info(f"Loading configuration from {path}...")

        if not os.path.exists(path):
            logger.error(f"Config file not found: {path}")
            return None

        with open(path, 'r') as file:
            config_data = yaml.safe_load(file)

        if not isinstance(config_data, dict):
            logger.error(f"{path} is empty or not a mapping")
            return None

        unknown = [s for s in config_data if s not in SECTIONS]
        if unknown:
            logger.error(f"Unknown config sections: {unknown}")
            return None

        values: Dict[str, Any] = {}
        for section, names in SECTIONS.items():
            section_data = config_data.get(section) or {}
            stray = [k for k in section_data if k not in names]
            if stray:
                logger.error(f"Unknown fields in '{section}': {stray}")
                return None
            values.update(section_data)

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in FIELDS:
                logger.error(f"Unknown override --{key}")
                return None
            values[key] = value

        if 'cube' not in values:
            logger.error("data.cube is required")
            return None

        config = ExperimentConfig(**values)
        config.validate(require_ground_truth=require_ground_truth)

        logger.info(f"Config loaded: {config.variant}/{config.mode} on {config.cube}, "
                    f"{config.trials} trials from seed {config.base_seed}")
        return config

    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return None
    except Exception as e:
        logger.error(f"Error loading config: {e}")
        return None
