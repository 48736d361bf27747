"""Sparse multinomial logistic regression over random, identity or kernel features.

Shape conventions used throughout:
    W  (M-1) x L'   regressor; the M-th class row is implicitly zero
    H  L' x n       features, one column per sample
    Y  (M-1) x n    one-hot targets, class-M columns all zero
"""

from dataclasses import dataclass, field
from enum import Enum
import json
import logging
import os
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh, eigvalsh, solve, LinAlgError
from scipy.special import logsumexp, softmax

from src.esmlr.feature_maps import (
    ActivationKind, BlockTag, FeatureBlock, KernelConfig, RandomFeatureMap,
    apply_map, column_stable_product, concat_mfl, generate_map, identity_features, raw_block,
    rbf_features,
)
from src.models.types import EmapsDescriptor, KernelDescriptor, MflLayout, PipelineDescriptor, RasterHeader
from src.utils.errors import ConfigError, DataError, NumericalError, SolverError
from src.utils import raster_io

logger = logging.getLogger('esmlr.esmlr_core')

ArrayOrBlock = Union[np.ndarray, FeatureBlock]

MONOTONE_SLACK = 1e-9


class Variant(str, Enum):
    SMLR = 'SMLR'
    K_SMLR = 'K-SMLR'
    ESMLR = 'ESMLR'
    K_ESMLR = 'K-ESMLR'

    @property
    def is_kernel(self) -> bool:
        return self in (Variant.K_SMLR, Variant.K_ESMLR)

    @property
    def is_extreme(self) -> bool:
        return self in (Variant.ESMLR, Variant.K_ESMLR)


class FeatureMode(str, Enum):
    SPECTRAL = 'spectral'
    EMAPS = 'emaps'
    MFL = 'mfl'


DEFAULT_L = {FeatureMode.SPECTRAL: 300, FeatureMode.EMAPS: 300, FeatureMode.MFL: 500}


@dataclass(frozen=True)
class TargetMatrix:
    Y: np.ndarray


@dataclass(frozen=True)
class Regressor:
    W: np.ndarray
    history: Tuple[float, ...] = ()

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.W))


@dataclass(frozen=True)
class RidgeConfig:
    C: float

    def __post_init__(self):
        if not self.C > 0:
            raise ConfigError(f"Ridge weight C must be > 0, got {self.C}")

    @classmethod
    def from_exponent(cls, a: float) -> 'RidgeConfig':
        return cls(C=2.0 ** a)


@dataclass(frozen=True)
class LorsalConfig:
    lam: float
    mu: Optional[float] = None
    max_iter: int = 200
    tol: float = 1e-6
    inner_iter: int = 30

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"Sparsity weight lambda must be >= 0, got {self.lam}")
        if self.mu is not None and not self.mu > 0:
            raise ConfigError(f"Penalty mu must be > 0, got {self.mu}")
        if self.max_iter < 1 or self.inner_iter < 1:
            raise ConfigError("Iteration caps must be >= 1")
        if not self.tol > 0:
            raise ConfigError(f"Tolerance must be > 0, got {self.tol}")

    @classmethod
    def from_exponent(cls, b: float, **kwargs) -> 'LorsalConfig':
        return cls(lam=2.0 ** b, **kwargs)

    @property
    def penalty(self) -> float:
        if self.mu is not None:
            return self.mu
        if self.lam == 0:
            return 1e-2
        return max(0.1 * self.lam, 1e-4)


@dataclass(frozen=True)
class ModelConfig:
    L: Optional[int] = None
    activation: ActivationKind = ActivationKind.SIGMOID
    a: float = 10.0
    b: float = -10.0
    sigma: float = 0.85
    kernel_input: str = 'raw'
    add_bias_row: bool = True
    mu: Optional[float] = None
    max_iter: int = 200
    tol: float = 1e-6
    inner_iter: int = 30

    def feature_dim(self, mode: FeatureMode) -> int:
        return int(self.L) if self.L else DEFAULT_L[mode]

    def lorsal(self) -> LorsalConfig:
        return LorsalConfig.from_exponent(self.b, mu=self.mu, max_iter=self.max_iter,
                                          tol=self.tol, inner_iter=self.inner_iter)


@dataclass
class TrainedModel:
    regressor: Regressor
    pipeline: PipelineDescriptor
    class_count: int
    feature_map: Optional[RandomFeatureMap] = None
    kernel: Optional[KernelConfig] = None
    extras: Dict[str, object] = field(default_factory=dict)


def _matrix(H: ArrayOrBlock) -> np.ndarray:
    return H.H if isinstance(H, FeatureBlock) else np.asarray(H, dtype=np.float64)


def one_hot_targets(labels: np.ndarray, M: int) -> TargetMatrix:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > M):
        raise DataError(f"Labels must lie in 1..{M}")
    Y = np.zeros((M - 1, labels.size))
    rows = labels - 1
    keep = rows < M - 1
    Y[rows[keep], np.flatnonzero(keep)] = 1.0
    return TargetMatrix(Y)


def ridge_init(H: ArrayOrBlock, Y: TargetMatrix, cfg: RidgeConfig, form: str = 'auto') -> Regressor:
    """Closed-form minimizer of 1/2 ||W||_F^2 + C/2 ||W H - Y||_F^2.

    Primal form (L' <= n): W = Y H^T (H H^T + I/C)^-1
    Dual form   (L' >  n): W = Y (H^T H + I/C)^-1 H^T
    """
    Hm = _matrix(H)
    if not np.all(np.isfinite(Hm)):
        raise DataError("Ridge initialization got non-finite features")
    rows, n = Hm.shape
    if form == 'auto':
        form = 'primal' if rows <= n else 'dual'

    try:
        if form == 'primal':
            gram = Hm @ Hm.T + np.eye(rows) / cfg.C
            W = solve(gram, Hm @ Y.Y.T, assume_a='pos').T
        elif form == 'dual':
            gram = Hm.T @ Hm + np.eye(n) / cfg.C
            W = solve(gram, Y.Y.T, assume_a='pos').T @ Hm.T
        else:
            raise ConfigError(f"Unknown ridge form {form!r}")
    except LinAlgError as e:
        raise NumericalError(f"Ridge initialization solve failed: {e}") from e

    if not np.all(np.isfinite(W)):
        raise NumericalError("Ridge initialization produced non-finite coefficients")
    return Regressor(W)


def _scores(W: np.ndarray, Hm: np.ndarray) -> np.ndarray:
    """M x n class scores with the gauge-fixed zero row last."""
    return np.vstack([W @ Hm, np.zeros((1, Hm.shape[1]))])


def mlr_posteriors(W: Union[np.ndarray, Regressor], H: ArrayOrBlock) -> np.ndarray:
    Wm = W.W if isinstance(W, Regressor) else W
    Hm = _matrix(H)
    if Wm.shape[1] != Hm.shape[0]:
        raise DataError(f"Regressor has {Wm.shape[1]} columns but features have {Hm.shape[0]} rows")
    if not np.all(np.isfinite(Hm)):
        raise DataError("Posterior evaluation got non-finite features")
    # fixed-order sums, so a column's posteriors do not depend on the rest of the batch
    scores = np.vstack([column_stable_product(Wm, Hm), np.zeros((1, Hm.shape[1]))])
    weights = np.exp(scores - scores.max(axis=0))
    total = np.zeros(Hm.shape[1])
    for row in weights:
        total += row
    return weights / total


def log_likelihood(W: np.ndarray, H: ArrayOrBlock, labels: np.ndarray) -> float:
    Hm = _matrix(H)
    scores = _scores(W, Hm)
    picked = scores[np.asarray(labels) - 1, np.arange(Hm.shape[1])]
    return float(picked.sum() - logsumexp(scores, axis=0).sum())


def log_likelihood_gradient(W: np.ndarray, H: ArrayOrBlock, Y: TargetMatrix) -> np.ndarray:
    """(Y - P_{1..M-1}) H^T."""
    Hm = _matrix(H)
    P = softmax(_scores(W, Hm), axis=0)
    return (Y.Y - P[:-1]) @ Hm.T


def map_objective(W: Union[np.ndarray, Regressor], H: ArrayOrBlock, labels: np.ndarray, lam: float) -> float:
    """l(W) - lambda ||W||_1."""
    Wm = W.W if isinstance(W, Regressor) else W
    return log_likelihood(Wm, H, labels) - lam * float(np.abs(Wm).sum())


def soft_threshold(v, t: float):
    if t < 0:
        raise ConfigError(f"Threshold must be >= 0, got {t}")
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


class _BohningSystem:
    """Factorizations of (alpha_i H H^T + mu I) for the eigenvalues alpha_i of
    the bound matrix 1/2 (I - 11^T/M); computed once per training call."""

    def __init__(self, Hm: np.ndarray, M: int, mu: float):
        k = M - 1
        self.A = 0.5 * (np.eye(k) - np.ones((k, k)) / M)
        self.alpha, self.Q = eigh(self.A)
        self.R = Hm @ Hm.T
        self.mu = mu
        eye = np.eye(self.R.shape[0])

        self.groups: List[Tuple[np.ndarray, tuple]] = []
        for value in np.unique(np.round(self.alpha, 12)):
            members = np.flatnonzero(np.isclose(self.alpha, value, rtol=0, atol=1e-12))
            factor = cho_factor(float(self.alpha[members[0]]) * self.R + mu * eye, lower=True)
            self.groups.append((members, factor))

        # Separable bound used for the fallback proximal step
        top = eigvalsh(self.R, subset_by_index=[self.R.shape[0] - 1, self.R.shape[0] - 1])[0]
        self.lipschitz = max(float(self.alpha.max()) * float(top), 1e-12)

    def curvature(self, D: np.ndarray) -> np.ndarray:
        """A D R, the bound's Hessian (up to sign) applied to D."""
        return self.A @ D @ self.R

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """X with A X R + mu X = rhs."""
        rotated = self.Q.T @ rhs
        out = np.empty_like(rotated)
        for members, factor in self.groups:
            out[members] = cho_solve(factor, rotated[members].T).T
        return self.Q @ out


def lorsal_train(H: ArrayOrBlock, labels: np.ndarray, W0: Union[np.ndarray, Regressor],
                 cfg: LorsalConfig) -> Regressor:
    """Maximize l(W) - lambda ||W||_1.

    Outer loop: majorize l at the current W with the Boehning quadratic bound.
    Inner loop: ADMM on the bound with the splitting U = W; the W-step reuses
    the cached factorizations, the U-step soft-thresholds by lambda/mu. An
    outer step is taken only if the MAP objective does not decrease; if the
    sparse ADMM iterate fails that test, a proximal step on the separable
    bound is used instead, which cannot decrease it.
    """
    Hm = _matrix(H)
    W = np.array(W0.W if isinstance(W0, Regressor) else W0, dtype=np.float64)
    if W.shape[1] != Hm.shape[0]:
        raise DataError(f"Initial regressor has {W.shape[1]} columns but features have {Hm.shape[0]} rows")

    M = W.shape[0] + 1
    labels = np.asarray(labels)
    Y = one_hot_targets(labels, M)
    lam, mu = cfg.lam, cfg.penalty

    try:
        system = _BohningSystem(Hm, M, mu)
    except LinAlgError as e:
        raise NumericalError(f"Bound system factorization failed: {e}") from e

    U = W.copy()
    dual = np.zeros_like(W)
    objective = map_objective(W, Hm, labels, lam)
    history = [objective]
    tiny = np.sqrt(W.size) * 1e-10

    for iteration in range(cfg.max_iter):
        gradient = log_likelihood_gradient(W, Hm, Y)
        base = gradient + system.curvature(W)

        for _ in range(cfg.inner_iter):
            X = system.solve(base + mu * (U - dual))
            U_prev = U
            U = soft_threshold(X + dual, lam / mu)
            dual = dual + X - U
            primal_res = np.linalg.norm(X - U)
            dual_res = mu * np.linalg.norm(U - U_prev)
            scale = max(np.linalg.norm(X), np.linalg.norm(U), 1.0)
            if primal_res <= tiny + 1e-8 * scale and dual_res <= tiny + 1e-8 * scale:
                break

        # the splitting state (U, dual) carries over as the next warm start
        candidate = U
        value = map_objective(candidate, Hm, labels, lam)
        if not np.isfinite(value) or not np.all(np.isfinite(candidate)):
            raise NumericalError(f"LORSAL iterate became non-finite at iteration {iteration + 1}")

        proximal_step = value < objective
        if proximal_step:
            candidate = soft_threshold(W + gradient / system.lipschitz, lam / system.lipschitz)
            value = map_objective(candidate, Hm, labels, lam)
            if value < objective - MONOTONE_SLACK:
                raise SolverError(
                    f"MAP objective decreased from {objective:.12g} to {value:.12g} at iteration {iteration + 1}"
                )
            if value <= objective:
                logger.debug(f"LORSAL stalled at iteration {iteration + 1}; keeping current regressor")
                break

        change = abs(value - objective) / max(abs(objective), 1.0)
        W = candidate
        objective = value
        history.append(objective)

        # slow proximal steps are not taken as a sign of convergence
        if change < cfg.tol and not proximal_step:
            logger.debug(f"LORSAL converged after {iteration + 1} iterations (relative change {change:.3g})")
            break

    logger.debug(f"LORSAL finished: objective {objective:.6f}, nnz {int(np.count_nonzero(W))}/{W.size}")
    return Regressor(W=W, history=tuple(history))


def validate_combination(variant: Variant, mode: FeatureMode) -> None:
    if variant.is_kernel and mode is FeatureMode.MFL:
        raise ConfigError(f"{variant.value} cannot be combined with linear MFL")


def assemble_input(mode: FeatureMode, spectral: Optional[np.ndarray] = None,
                   spatial: Optional[np.ndarray] = None) -> np.ndarray:
    """The raw input block for a feature mode: spectra, EMAP features, or both stacked."""
    mode = FeatureMode(mode)
    if mode is FeatureMode.SPECTRAL:
        if spectral is None:
            raise DataError("Spectral mode needs the spectral block")
        return spectral
    if spatial is None:
        raise DataError(f"{mode.value} mode needs the EMAP block")
    if mode is FeatureMode.EMAPS:
        return spatial
    if spectral is None:
        raise DataError("MFL mode needs the spectral block")
    return concat_mfl(raw_block(spectral, BlockTag.SPECTRAL), raw_block(spatial, BlockTag.SPATIAL)).H


def _mode_tag(mode: FeatureMode) -> BlockTag:
    return {FeatureMode.SPECTRAL: BlockTag.SPECTRAL, FeatureMode.EMAPS: BlockTag.SPATIAL,
            FeatureMode.MFL: BlockTag.MFL}[mode]


def build_features(model: TrainedModel, X: np.ndarray) -> FeatureBlock:
    """Rebuild h(.) for new inputs from the model's pipeline."""
    X = np.asarray(X, dtype=np.float64)
    pipeline = model.pipeline
    if X.ndim != 2 or X.shape[0] != pipeline['input_dim']:
        raise DataError(f"Model expects {pipeline['input_dim']} input rows, got shape {X.shape}")

    mode = FeatureMode(pipeline['mode'])
    variant = Variant(pipeline['variant'])

    if variant.is_kernel:
        kernel_input = X
        if pipeline['kernel']['kernel_input'] == 'mapped':
            kernel_input = apply_map(model.feature_map, X, _mode_tag(mode)).core()
        return rbf_features(model.kernel, kernel_input)
    if variant is Variant.ESMLR:
        return apply_map(model.feature_map, X, _mode_tag(mode))
    return identity_features(X, _mode_tag(mode))


def train(variant: Variant, mode: FeatureMode, X: np.ndarray, labels: np.ndarray, class_count: int,
          config: ModelConfig = ModelConfig(), seed: int = 0, emaps: Optional[EmapsDescriptor] = None,
          spectral_dim: Optional[int] = None) -> TrainedModel:
    """Fit one of SMLR, K-SMLR, ESMLR, K-ESMLR on the raw input block X (d x n).

    EMAPs and MFL modes record `emaps` (how the spatial rows were built) in the
    pipeline; MFL also records the split of X into `spectral_dim` spectral rows
    followed by the spatial rows.
    """
    variant, mode = Variant(variant), FeatureMode(mode)
    validate_combination(variant, mode)
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.shape[1] != labels.size:
        raise DataError(f"Input has {X.shape[1]} columns but {labels.size} labels")

    mfl_layout = None
    if mode is not FeatureMode.SPECTRAL:
        if emaps is None:
            raise ConfigError(f"{mode.value} mode needs the EMAP description of its spatial rows")
        spatial_rows = X.shape[0]
        if mode is FeatureMode.MFL:
            if not spectral_dim or spectral_dim < 1:
                raise ConfigError("MFL mode needs the number of spectral rows")
            spatial_rows -= int(spectral_dim)
            mfl_layout = MflLayout(spectral_rows=int(spectral_dim), spatial_rows=spatial_rows)
        if spatial_rows != emaps['features']:
            raise DataError(f"Input has {spatial_rows} spatial rows, EMAP stack has {emaps['features']}")

    feature_map = None
    kernel = None
    kernel_desc: Optional[KernelDescriptor] = None

    if variant.is_extreme and not (variant is Variant.K_ESMLR and config.kernel_input == 'raw'):
        feature_map = generate_map(config.feature_dim(mode), X.shape[0], config.activation, seed,
                                   config.add_bias_row)

    if variant.is_kernel:
        if config.kernel_input not in ('raw', 'mapped'):
            raise ConfigError(f"kernel_input must be 'raw' or 'mapped', got {config.kernel_input!r}")
        anchors = X if feature_map is None else apply_map(feature_map, X).core()
        kernel = KernelConfig(sigma=config.sigma, anchors=np.ascontiguousarray(anchors))
        kernel_desc = KernelDescriptor(sigma=config.sigma, kernel_input=config.kernel_input,
                                       anchor_count=int(anchors.shape[1]))

    pipeline = PipelineDescriptor(
        variant=variant.value,
        mode=mode.value,
        input_dim=int(X.shape[0]),
        feature_dim=0,
        random_map=feature_map.describe() if feature_map is not None else None,
        kernel=kernel_desc,
        mfl_layout=mfl_layout,
        emaps=dict(emaps) if mode is not FeatureMode.SPECTRAL else None,
    )
    model = TrainedModel(regressor=Regressor(np.zeros((0, 0))), pipeline=pipeline,
                         class_count=class_count, feature_map=feature_map, kernel=kernel)

    H = build_features(model, X)
    pipeline['feature_dim'] = H.rows
    logger.info(f"{variant.value}/{mode.value}: {H.rows} features over {H.n} training samples")

    if variant.is_extreme:
        W0 = ridge_init(H, one_hot_targets(labels, class_count), RidgeConfig.from_exponent(config.a))
    else:
        W0 = Regressor(np.zeros((class_count - 1, H.rows)))

    fitted = lorsal_train(H, labels, W0, config.lorsal())
    # float32-representable so the saved regressor reloads bit-identically
    W = fitted.W.astype(np.float32).astype(np.float64)
    model.regressor = Regressor(W=W, history=fitted.history)
    logger.info(f"{variant.value}/{mode.value}: {len(fitted.history) - 1} solver iterations, "
                f"nnz {model.regressor.nnz}/{W.size}")
    return model


def predict_proba(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    return mlr_posteriors(model.regressor, build_features(model, X))


def predict(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    """Class labels 1..M; ties go to the smallest class index."""
    return np.argmax(predict_proba(model, X), axis=0) + 1


def save_model(model: TrainedModel, prefix: str) -> None:
    """`<prefix>.json` descriptor, `<prefix>.w.f32` regressor, `<prefix>.anchors.f64` for kernels."""
    directory = os.path.dirname(prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)

    W = model.regressor.W
    descriptor = {
        'pipeline': model.pipeline,
        'class_count': model.class_count,
        'regressor_shape': list(W.shape),
        'extras': model.extras,
    }
    raster_io.write_raw(prefix + '.w.f32', W, 'f32le')
    if model.kernel is not None:
        descriptor['anchors_shape'] = list(model.kernel.anchors.shape)
        raster_io.write_raw(prefix + '.anchors.f64', model.kernel.anchors, 'f64le')

    with open(prefix + '.json', 'w') as fh:
        json.dump(descriptor, fh, indent=2)
    logger.debug(f"Saved model to {prefix}.json")


def load_model(prefix: str) -> TrainedModel:
    try:
        with open(prefix + '.json', 'r') as fh:
            descriptor = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read model descriptor {prefix}.json: {e}") from e

    pipeline: PipelineDescriptor = descriptor['pipeline']
    rows, cols = descriptor['regressor_shape']
    W = raster_io.read_raw(prefix + '.w.f32', RasterHeader(
        height=rows, width=cols, bands=1, interleave='bsq', dtype='f32le')).astype(np.float64)

    feature_map = None
    if pipeline['random_map'] is not None:
        spec = pipeline['random_map']
        feature_map = generate_map(spec['L'], spec['input_dim'], ActivationKind(spec['activation']),
                                   spec['seed'], spec['add_bias_row'])

    kernel = None
    if pipeline['kernel'] is not None:
        shape = descriptor['anchors_shape']
        anchors = raster_io.read_raw(prefix + '.anchors.f64', RasterHeader(
            height=shape[0], width=shape[1], bands=1, interleave='bsq', dtype='f64le')).reshape(shape)
        kernel = KernelConfig(sigma=pipeline['kernel']['sigma'], anchors=anchors)

    return TrainedModel(regressor=Regressor(W.reshape(rows, cols)), pipeline=pipeline,
                        class_count=descriptor['class_count'], feature_map=feature_map,
                        kernel=kernel, extras=descriptor.get('extras', {}))
