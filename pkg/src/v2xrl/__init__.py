"""V2X spectrum-sharing simulator with a from-scratch deep-RL stack."""

__version__ = "0.1.0"

from .channel_env import (Decision, Environment, LinkRates, PayloadTracker,
                          ScenarioConfig, ScenarioKind, build_scenario,
                          compute_rates, highway_scenario, pathloss_db,
                          rural_scenario, scenario_by_name,
                          success_probability, urban_scenario)
from .drl_core import (AgentNets, Experience, JointPolicy, QuantizedDqnPolicy,
                       RandomPolicy, ReplayBuffer, TrainConfig,
                       evaluate_policy, run_algorithm1)
from .mdp import (ActionDescriptor, PrevSlotRecords, RewardWeights,
                  discounted_return, observe, observe_all, reward)
from .meta import (MetaConfig, TaskSpec, inner_adapt, make_task_set,
                   meta_adapt, outer_update, run_meta_training, sample_tasks)
from .neuralnet import (ActivationSpec, AdamState, Head, ParamSet, adam_step,
                        backward, blend, forward, init_params, sgd_step)
