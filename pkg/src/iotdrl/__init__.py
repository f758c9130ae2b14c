"""Double-DQN channel selection for distributed IoT end devices, learned from ACK feedback."""

from .dqn import (Architecture, EpsilonSchedule, Hyperparams, QNetwork, ReplayBuffer,
                  Transition, double_dqn_target, epsilon_at, forward, init_network,
                  load_checkpoint, sample_minibatch, save_checkpoint, select_action,
                  sync_target, train_step)
from .env import (Cause, Channel, ChannelPlan, LinkModel, SlotOutcome, expected_fsr_oracle,
                  feedback, resolve_slot)
from .sim import (AgentState, EpisodeMetrics, RunState, TrainingDiverged,
                  run_baseline_untrained, run_testing, run_training)

__version__ = "0.1.0"
