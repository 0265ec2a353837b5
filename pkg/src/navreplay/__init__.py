"""Navigation learning on pose graphs replayed from recorded traversals."""

from .env import Action, EnvFactory, NavigationEnv, RewardLayout, place_rewards
from .evaluation import EvalReport, evaluate, planner_optimal_bound, random_walk_baseline
from .graph import PoseGraph, build_pose_graph, generate_synthetic_environment, graph_diameter_steps
from .observation import EncoderSpec, ObservationModel, encode_synthetic, sample_observation
from .qnet import NetworkConfig, ParameterSet, backward, forward, init_params
from .trainers import TrainerConfig, train

__all__ = [
    "Action", "EnvFactory", "NavigationEnv", "RewardLayout", "place_rewards",
    "EvalReport", "evaluate", "planner_optimal_bound", "random_walk_baseline",
    "PoseGraph", "build_pose_graph", "generate_synthetic_environment", "graph_diameter_steps",
    "EncoderSpec", "ObservationModel", "encode_synthetic", "sample_observation",
    "NetworkConfig", "ParameterSet", "backward", "forward", "init_params",
    "TrainerConfig", "train",
]
