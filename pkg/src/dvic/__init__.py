"""Diffusion-geometry clustering for hyperspectral images.

Implements D-VIC (purity-weighted diffusion clustering backed by a
HySime/AVMAX/NNLS spectral-unmixing stack), the LUND density-based
clusterer, K-Means and spectral-clustering baselines, dataset loaders and
synthetic generators, and an evaluation/grid-search harness.
"""

from .clustering import (
    Clustering,
    ModeScore,
    dist_to_better,
    dvic,
    kmeans,
    lund,
    propagate_labels,
    select_modes,
    spectral_clustering,
    zeta,
)
from .datasets import (
    DatasetSpec,
    SyntheticTriangleTruth,
    load_csv,
    load_dataset,
    load_envi,
    preprocess,
    save_csv,
    synth_moons,
    synth_triangle,
)
from .errors import (
    ConvergenceError,
    DegenerateSimplexError,
    DisconnectedGraphError,
    LoadError,
    ParameterError,
)
from .evaluation import (
    EvalReport,
    GridSpec,
    align_and_score,
    grid_search,
    n_grid,
    sigma_grid,
    t_grid,
)
from .graph import (
    DensityField,
    MarkovGraph,
    NeighborTable,
    PointCloud,
    SpectralDecomposition,
    build_knn_graph,
    diffusion_distance,
    diffusion_embedding,
    kde,
    knn_table,
    spectral_decompose,
)
from .unmixing import (
    NoiseEstimate,
    UnmixingResult,
    abundances_and_purity,
    avmax,
    estimate_noise,
    hysime,
    nnls,
)

__version__ = "0.1.0"
