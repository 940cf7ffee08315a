"""Adaptive regression-based MPC: condensed QP control with learned
horizon and sample-count selection, plus the benchmark harness."""

from .dataset import Dataset, DatasetRecord, build_dataset, label_cycle, read_dataset, write_dataset
from .features import (FeatureVector, ReferenceWindow, WaveletPlan, curvature, dwt,
                       extract_features, idwt, maneuver_references, synthesize_references)
from .mpc import (ControlSolution, MpcConfig, MpcProblem, average_cost, build_qp,
                  condense, interpolation_weights, relative_loss, solve_mpc)
from .plants import (ConstraintSet, ContinuousModel, DiscreteModel, ModelConfig,
                     RobotParams, StateEstimate, VehicleParams, build_plant,
                     discretize, estimate, load_config, robot_lpv, step, vehicle_model)
from .qp import QpProblem, QpSolution, QpSolver, QpStatus, solve_qp
from .runtime import (AdaptiveController, FixedController, RunConfig, RunReport,
                      ablation_run, feasibility_experiment, motivation_experiment,
                      run_loop, train_predictors)
from .svr import (GridSearchSpec, SvrModel, grid_search_cv, load_model, predict,
                  round_and_clamp, save_model, train_svr)

__version__ = "0.1.0"
