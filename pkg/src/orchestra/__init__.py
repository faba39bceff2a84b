"""Continual reinforcement learning with an orchestra of checkpointed
policies, a PPO base learner, a progressive-network baseline, and the
MiniProc procedural gridworld suite."""

__version__ = "0.1.0"
