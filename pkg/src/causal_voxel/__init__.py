"""Causal synthesis and counterfactual editing of volumetric brain phantoms.

A structural causal model over demographic and clinical variables drives a
deterministic styled voxel generator; latent inversion and regression-based
style edits turn factual phantom images into counterfactual ones, and an
evaluation suite quantifies the result.
"""

from .cohort import default_ad_graph, ground_truth_mechanisms
from .inversion import InversionResult, OptimizerConfig, invert, invert_style, recover_noise
from .latent_edit import (
    EditRequest,
    VolumeRegression,
    counterfactual_image,
    edit_latent,
    fit_regression,
)
from .mechanisms import (
    ConditionalAffineMechanism,
    TrainConfig,
    eval_loglik_table,
    linear_gaussian_mechanism,
    train_mechanisms,
)
from .flows import MonotoneFlowMechanism, train_flow_mechanism
from .metrics import (
    FeatureExtractor,
    MetricsReport,
    frechet_distance,
    gaussian_stats,
    mmd2,
    ssim3d,
    volume_change_eval,
)
from .phantom import (
    GridSpec,
    MappingNetwork,
    PhantomGenerator,
    ShapeParams,
    StyleDecoder,
    Volumes,
    VoxelGrid,
    estimate_shape,
    measure_volumes,
)
from .scm import (
    CausalGraph,
    CycleError,
    GraphError,
    VariableSpec,
    abduct,
    counterfactual,
    intervene,
    predict,
    sample_prior,
    validate_and_order,
)

__version__ = "0.1.0"
