"""Selective sampling with neural tangent kernel features, plus model selection over complexity."""
from .bounds import (
    BoundaryQuery,
    bernstein_boundary,
    elliptical_check,
    hoeffding_boundary,
    l_term,
)
from .environment import (
    EnvironmentModel,
    ExperimentLog,
    NoiseProfile,
    Stream,
    StreamRecord,
    build_rkhs_model,
    generate,
    online_to_batch,
    score,
    verify_noise,
)
from .estimators import ModelSelectionSampler, NTKSelectiveSampler
from .learner import AugmentedPoint, BaseLearner, Decision, LearnerConfig, LearnerState, make_learner
from .model_selection import LearnerSpec, MetaConfig, MetaLearner, MetaState, make_pool
from .network import NetworkParams, TrainConfig, feature_map, forward, gradient, init_network, train_nn
from .ntk import NTKTransformer, NtkReport, complexity_S, d_diagnostic, ntk_matrix

__version__ = "0.1.0"
