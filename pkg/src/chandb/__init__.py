"""Location-indexed channel-gain databases: build, synthesize, interpolate.

The package turns scattered (x1, x2, gain_dB) measurements into a gridded
database and completes the missing cells three ways: a Gaussian-process
MMSE estimator with fitted path-loss/correlation parameters, plain KNN
averaging, and a two-step KNN-then-CNN refinement. A synthetic field
generator and an RMSE harness make every method verifiable end to end.
"""

from .grid import (
    ChannelGrid,
    GridSpec,
    Sample,
    build_grid,
    cell_distances,
    map_coordinate,
    split_valid,
)
from .field_synth import (
    FieldParams,
    ShadowingSampler,
    field_to_samples,
    mean_field,
    sample_shadowing,
    synth_field,
)
from .gp_model import (
    GpParams,
    Neighborhood,
    d0_loss_curve,
    fit_d0,
    fit_gp,
    fit_pathloss,
    gp_interpolate,
    gp_interpolate_detailed,
    mmse_predict,
    predict_mse,
    residual_fading,
)
from .knn import KnnConfig, knn_fill, nearest_valid
from .convnet import (
    AdamState,
    ConvNet,
    LayerSpec,
    Normalizer,
    TrainConfig,
    adam_step,
    backward,
    conv_output_size,
    forward,
    load_model,
    masked_loss,
    masked_rmse,
    output_shape,
    pad_input,
    parse_structure,
    save_model,
    structure_string,
    total_shrink,
    train_network,
)
from .pipeline import (
    EvalReport,
    ExperimentConfig,
    benchmark_instance,
    default_sweep_configs,
    evaluate,
    fullnn_baseline,
    reference_benchmark,
    run_experiment,
    sweep,
    two_step_interpolate,
    two_step_train,
)

__version__ = "0.1.0"
