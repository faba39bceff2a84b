"""Progressive-network baseline: per-task actor/critic columns plus
trainable adapters that inject earlier columns' hidden features into the
active column. Task labels are supplied by the caller; inactive columns are
never touched by an update.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .nn import (Adam, Mlp, load_mlp_arrays, load_params, mlp_named_arrays,
                 save_params)
from .ppo import (ActionSource, GaeOutput, PpoConfig, RolloutBuffer,
                  UpdateStats, ppo_update)


@dataclass
class AdapterParams:
    """One affine link (src column -> dst column) on the last hidden layer.

    Zero-initialized so a freshly added column behaves exactly like a
    standalone network; the affine acts on ReLU-gated source features, which
    keeps the zero init trainable.
    """

    weight: Tensor
    bias: Tensor

    @property
    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass
class Column:
    task_id: str
    actor: Mlp
    critic: Mlp
    actor_opt: Adam
    critic_opt: Adam


class PnnStack:
    def __init__(self, obs_dim: int, n_actions: int, hidden: int,
                 learning_rate: float, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden
        self.learning_rate = learning_rate
        self._rng = rng
        self.columns: list[Column] = []
        self.task_index: dict[str, int] = {}
        # (net, src, dst) -> AdapterParams
        self.adapters: dict[tuple[str, int, int], AdapterParams] = {}
        self.adapter_opts: dict[int, Adam] = {}  # keyed by dst column

    def add_column(self, task_id: str) -> int:
        if task_id in self.task_index:
            raise ConfigError(f"duplicate task id {task_id!r}")
        dst = len(self.columns)
        actor = Mlp([self.obs_dim, self.hidden, self.hidden, self.n_actions], self._rng)
        critic = Mlp([self.obs_dim, self.hidden, self.hidden, 1], self._rng)
        col = Column(task_id, actor, critic,
                     Adam(actor.parameters, self.learning_rate),
                     Adam(critic.parameters, self.learning_rate))
        self.columns.append(col)
        self.task_index[task_id] = dst
        new_params: list[Tensor] = []
        for net in ("actor", "critic"):
            for src in range(dst):
                adp = AdapterParams(
                    Tensor(np.zeros((self.hidden, self.hidden)), requires_grad=True),
                    Tensor(np.zeros(self.hidden), requires_grad=True),
                )
                self.adapters[(net, src, dst)] = adp
                new_params.extend(adp.parameters)
        if new_params:
            self.adapter_opts[dst] = Adam(new_params, self.learning_rate)
        return dst

    def _column(self, task_id: str) -> int:
        if task_id not in self.task_index:
            raise ConfigError(f"unknown task id {task_id!r}; add_column first")
        return self.task_index[task_id]

    def _net_forward_np(self, col_idx: int, net: str, x: np.ndarray) -> np.ndarray:
        mlp: Mlp = getattr(self.columns[col_idx], net)
        out, h = mlp.forward_np(x, return_hidden=True)
        if col_idx == 0:
            return out
        h_aug = h.copy()
        for src in range(col_idx):
            src_mlp: Mlp = getattr(self.columns[src], net)
            _, src_h = src_mlp.forward_np(x, return_hidden=True)
            adp = self.adapters[(net, src, col_idx)]
            h_aug += np.maximum(src_h, 0.0) @ adp.weight.data + adp.bias.data
        return h_aug @ mlp.weights[-1].data + mlp.biases[-1].data

    def _net_forward_graph(self, col_idx: int, net: str, x: np.ndarray):
        mlp: Mlp = getattr(self.columns[col_idx], net)
        h = Tensor(x)
        for i in range(len(mlp.weights) - 1):
            h = (h @ mlp.weights[i] + mlp.biases[i]).tanh()
        extras: list[Tensor] = []
        for src in range(col_idx):
            src_mlp: Mlp = getattr(self.columns[src], net)
            _, src_h = src_mlp.forward_np(x, return_hidden=True)
            adp = self.adapters[(net, src, col_idx)]
            h = h + (Tensor(np.maximum(src_h, 0.0)) @ adp.weight + adp.bias)
            extras.extend(adp.parameters)
        out = h @ mlp.weights[-1] + mlp.biases[-1]
        return out, extras

    def forward_with_adapters(self, task_id: str, obs: np.ndarray):
        """(logits, value) for a batch of observations under the task's column."""
        col = self._column(task_id)
        x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        logits = self._net_forward_np(col, "actor", x)
        values = self._net_forward_np(col, "critic", x)[:, 0]
        return logits, values

    def standalone_forward(self, col_idx: int, obs: np.ndarray) -> np.ndarray:
        """Column forward ignoring every adapter (the no-forgetting probe)."""
        return self.columns[col_idx].actor.forward_np(np.atleast_2d(obs))


class ColumnSource(ActionSource):
    def __init__(self, stack: PnnStack, task_id: str):
        self.stack = stack
        self.task_id = task_id

    def logits_and_aux(self, obs_batch: np.ndarray):
        logits, _ = self.stack.forward_with_adapters(self.task_id, obs_batch)
        return logits, [None] * obs_batch.shape[0]


def pnn_update(stack: PnnStack, task_id: str, buffer: RolloutBuffer,
               gae: GaeOutput, cfg: PpoConfig,
               rng: np.random.Generator) -> UpdateStats:
    """PPO update routing gradients to the active column and its adapters."""
    col_idx = stack._column(task_id)
    col = stack.columns[col_idx]
    B = buffer.num_steps * buffer.num_envs
    obs_flat = buffer.obs.reshape(B, -1)

    def logits_fn(idx):
        return stack._net_forward_graph(col_idx, "actor", obs_flat[idx])

    def values_fn(idx):
        return stack._net_forward_graph(col_idx, "critic", obs_flat[idx])

    extra_opts = [stack.adapter_opts[col_idx]] if col_idx in stack.adapter_opts else []
    return ppo_update(buffer, gae, col.actor, col.critic, cfg,
                      col.actor_opt, col.critic_opt, rng,
                      logits_fn=logits_fn, values_fn=values_fn,
                      extra_opts=extra_opts)


def save_stack(stack: PnnStack, directory):
    """Per-column weight blobs, adapter blobs, and a manifest."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tasks": [c.task_id for c in stack.columns],
        "obs_dim": stack.obs_dim,
        "n_actions": stack.n_actions,
        "hidden": stack.hidden,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    for i, col in enumerate(stack.columns):
        named = mlp_named_arrays(col.actor, "actor.")
        named.update(mlp_named_arrays(col.critic, "critic."))
        save_params(directory / f"column{i}.blob", named)
    adapter_arrays = {}
    for (net, src, dst), adp in stack.adapters.items():
        adapter_arrays[f"{net}.{src}.{dst}.w"] = adp.weight.data
        adapter_arrays[f"{net}.{src}.{dst}.b"] = adp.bias.data
    if adapter_arrays:
        save_params(directory / "adapters.blob", adapter_arrays)


def load_stack(directory, learning_rate: float = 5e-4) -> PnnStack:
    import json

    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    stack = PnnStack(manifest["obs_dim"], manifest["n_actions"],
                     manifest["hidden"], learning_rate, np.random.default_rng(0))
    for i, task in enumerate(manifest["tasks"]):
        stack.add_column(task)
        named = load_params(directory / f"column{i}.blob")
        load_mlp_arrays(stack.columns[i].actor, named, "actor.")
        load_mlp_arrays(stack.columns[i].critic, named, "critic.")
    if stack.adapters:
        named = load_params(directory / "adapters.blob")
        for (net, src, dst), adp in stack.adapters.items():
            adp.weight.data = named[f"{net}.{src}.{dst}.w"]
            adp.bias.data = named[f"{net}.{src}.{dst}.b"]
    return stack
