from typing import List, Optional, TypedDict


class RasterHeader(TypedDict):
    """JSON sidecar next to every raw raster (`<name>.json`)."""
    height: int
    width: int
    bands: int
    interleave: str
    dtype: str


class LayoutEntry(TypedDict):
    component: int
    position: int
    operator: str          # 'thickening', 'original' or 'thinning'
    threshold: Optional[int]


class MapDescriptor(TypedDict):
    L: int
    input_dim: int
    activation: str
    seed: int
    add_bias_row: bool


class KernelDescriptor(TypedDict):
    sigma: float
    kernel_input: str      # 'raw' or 'mapped'
    anchor_count: int


class EmapsDescriptor(TypedDict):
    thresholds: List[int]
    connectivity: int
    share: float
    components: int
    features: int


class MflLayout(TypedDict):
    spectral_rows: int
    spatial_rows: int


class PipelineDescriptor(TypedDict):
    variant: str
    mode: str
    input_dim: int
    feature_dim: int
    random_map: Optional[MapDescriptor]
    kernel: Optional[KernelDescriptor]
    mfl_layout: Optional[MflLayout]
    emaps: Optional[EmapsDescriptor]


class TrialRow(TypedDict):
    variant: str
    mode: str
    trial: int
    seed: int
    oa: float
    aa: float
    kappa: float
    per_class: List[float]
    train_s: float
    test_s: float


class MetricsSummary(TypedDict):
    trials: int
    oa_mean: float
    oa_std: float
    aa_mean: float
    aa_std: float
    kappa_mean: float
    kappa_std: float
    per_class_mean: List[float]
    per_class_std: List[float]
    train_seconds_mean: float
    test_seconds_mean: float
    total_seconds_mean: float
