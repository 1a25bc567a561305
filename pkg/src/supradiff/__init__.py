"""Information diffusion on interconnected multilayer networks.

Submodules
----------
network
    Multilayer network containers and supra-Laplacian assembly.
dynamics
    Matrix-exponential drift, Ornstein-Uhlenbeck simulation and
    diffusion-constant fitting.
laplearn
    Learning the vectorized diffusion operator from trajectories.
kalman
    Discrete Kalman predictor for partially observed node states.
evaluation
    Error metric, synthetic scenarios and the predictor comparison.
"""
from .errors import NumericalError, SupradiffError, ValidationError
from .network import (
    InterCoupling,
    LayerSpec,
    MultilayerNetwork,
    SupraLaplacian,
    assemble_supra,
    build_intra_laplacian,
    node_index,
    node_of,
)
from .dynamics import (
    FitResult,
    Trajectory,
    fit_diffusion_constants,
    matrix_exp,
    predict_drift,
    simulate_ou,
)
from .laplearn import (
    LambdaEstimate,
    LearnConfig,
    LearnResult,
    devectorize,
    initial_lambda,
    learn_lambda,
    residual_covariance,
    vectorize,
)
from .kalman import (
    FilterResult,
    KalmanState,
    NoiseCov,
    ObservationMask,
    kalman_predict,
    kalman_update,
    make_transition,
    run_filter,
)
from .evaluation import (
    ExperimentConfig,
    ExperimentResult,
    SyntheticParams,
    generate_synthetic,
    normalized_frobenius_error,
    run_experiment,
)

__version__ = "0.1.0"
