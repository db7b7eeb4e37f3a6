"""Saliency-guided bag-of-features scene recognition.

The package covers the full pipeline: bottom-up saliency maps, dense
multi-scale descriptors, codebook learning, spatial-pyramid encoding
under four regimes (baseline, prune, weight, salient/non-salient split),
chi-squared kernel SVMs, and two-kernel fusion, plus an experiment
harness with deterministic splits and caching.
"""

from .classify import (
    KernelMatrix,
    MklModel,
    SvmModel,
    chi2_distance,
    chi2_kernel_matrix,
    combine_kernels,
    load_model,
    predict,
    save_model,
    train_mkl,
    train_svm,
)
from .core import (
    DatasetIndex,
    ImagePlane,
    SplitSet,
    export_splits,
    load_image,
    make_splits,
    resize_to_height,
    scan_dataset,
    to_luminance,
)
from .encoding import (
    Codebook,
    SpmVector,
    assign,
    assign_batch,
    load_codebook,
    load_spm_vector,
    save_codebook,
    save_spm_vector,
    spm_encode,
    train_codebook,
)
from .errors import ConfigError, DataError, SalrecError
from .features import (
    DescriptorSet,
    PruneSpec,
    attach_saliency,
    dense_sift,
    load_descriptors,
    prune_top_fraction,
    save_descriptors,
    split_by_threshold,
)
from .pipeline import (
    ExperimentConfig,
    ResultsTable,
    emit_plot_data,
    emit_results_csv,
    run_experiment,
)
from .saliency import (
    SaliencyMap,
    gaussian_center_saliency,
    itti_saliency,
    load_external_saliency,
    normalize_max1,
    peak_normalize,
)

__version__ = "0.1.0"
