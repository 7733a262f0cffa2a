"""Forest and ground height estimation from multi-baseline Pol-TomoSAR stacks.

The pipeline: simulate (or ingest) a complex multi-baseline
multi-polarization stack, estimate per-pixel covariance matrices by
spatial averaging, encode them as real feature channels, quantize the
reference heights into 1 m classes, train a U-Net pixel classifier on
W x W patches, and invert full scenes by tile stitching.  Beamforming
and Capon vertical spectra are included as classical baselines.
"""

from .config import (
    ConfigError,
    RunConfig,
    feature_channel_count,
    load_config,
    pol_count,
)
from .covariance import (
    CovarianceField,
    FeatureCube,
    FeatureStats,
    TomoStack,
    estimate_covariance,
    extract_features,
    features_from_stack,
    normalize_features,
    select_polarizations,
)
from .dataset import (
    HeightQuantizer,
    PatchDataset,
    PatchSet,
    average_reference,
    build_dataset,
    split_patches,
    tile_patches,
)
from .geometry import (
    AcquisitionGeometry,
    afrisar_geometry,
    steering_matrix,
    steering_vector,
    tropisar_geometry,
    vertical_wavenumbers,
)
from .network import (
    ModelState,
    UNetConfig,
    count_conv_layers,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    softmax_cross_entropy,
    unet_backward,
    unet_forward,
    xavier_init,
)
from .simulate import (
    PolarimetricModel,
    SceneTruth,
    make_scene,
    pixel_covariance_truth,
    sample_stack,
)
from .spectral import (
    VerticalSpectrum,
    beamforming_spectrum,
    capon_spectrum,
    extract_heights,
)
from .tenio import TensorFormatError, read_tensor, write_tensor
from .training import (
    EvalReport,
    TrainReport,
    evaluate_prediction,
    fine_tune,
    joint_histogram,
    predict_map,
    rmse,
    train,
)

__version__ = "0.1.0"
