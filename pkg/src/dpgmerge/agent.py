"""TD3 agent with elite deterministic policy gradients and gradient merging.

Three training variants share one loop:

* ``td3``: clipped double Q-learning, target policy smoothing, delayed
  deterministic policy updates.
* ``td3_im``: the policy update is the convex interpolation
  (1 - upsilon) * g_conventional + upsilon * g_elite, where g_elite is a
  DPG over elite-buffer states augmented with a pull toward a reference
  action (VAE decode or stored elite action).
* ``td3_2m``: two-step merging. A transient plain-ascent step
  theta' = theta + alpha * (1 - upsilon) * g_conventional is taken first,
  the elite gradient is evaluated at theta', and the merged direction
  (1 - upsilon) * g_conventional + upsilon * g_elite(theta') is applied
  at the original theta.

With upsilon = 0 and lambda = 0 all three variants follow bitwise-identical
parameter trajectories for a given seed because every stochastic consumer
(exploration, each buffer, the VAE, smoothing noise, evaluation) owns an
independent child RNG stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import genmodel, nets
from .envs import PointMassEnv, Transition
from .genmodel import VaeModel
from .nets import AdamState, GradVector, NetworkParams
from .replay import Batch, EliteErb, EmptyBufferError, FullErb, Trajectory

VARIANTS = ("td3", "td3_im", "td3_2m")
REGULARIZER_MODES = ("vae", "sampled_action", "none")


@dataclass
class MergeConfig:
    upsilon: float = 0.25          # elite gradient weight
    lam: float = 0.1               # reference-pull regularizer weight
    alpha: float = 0.0003          # policy learning rate
    kappa: int = 30                # elite buffer capacity (trajectories)
    gamma: float = 0.99
    exploration_std: float = 0.2
    smoothing_std: float = 0.2
    smoothing_clip: float = 0.5
    policy_delay: int = 2
    polyak: float = 0.01
    batch_size: int = 256
    warmup_steps: int = 1000
    regularizer_mode: str = "vae"
    critic_rate: float = 0.0003
    vae_rate: float = 0.001
    hidden: tuple = (32, 32)
    buffer_capacity: int = 100_000
    eval_interval: int = 1000
    eval_episodes: int = 10

    def validate(self) -> None:
        if not 0.0 <= self.upsilon <= 1.0:
            raise ValueError("upsilon must lie in [0, 1]")
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        for name in ("alpha", "critic_rate", "vae_rate", "exploration_std",
                     "smoothing_std", "smoothing_clip"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha <= 0.0 or self.critic_rate <= 0.0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 <= self.polyak <= 1.0:
            raise ValueError("polyak must lie in [0, 1]")
        if self.kappa < 1 or self.policy_delay < 1 or self.batch_size < 1:
            raise ValueError("kappa, policy_delay and batch_size must be >= 1")
        if self.warmup_steps < 0 or self.buffer_capacity < 1:
            raise ValueError("bad buffer configuration")
        if self.regularizer_mode not in REGULARIZER_MODES:
            raise ValueError(f"regularizer_mode must be one of {REGULARIZER_MODES}")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ValueError("evaluation settings must be >= 1")


@dataclass
class CurveRow:
    step: int
    episode: int
    train_return: float
    eval_return: float
    critic_loss: float
    vae_loss: float
    policy_update_count: int


@dataclass
class AgentState:
    config: MergeConfig
    policy: NetworkParams
    policy_target: NetworkParams
    critic1: NetworkParams
    critic2: NetworkParams
    critic1_target: NetworkParams
    critic2_target: NetworkParams
    policy_adam: AdamState
    critic1_adam: AdamState
    critic2_adam: AdamState
    vae: VaeModel
    full_erb: FullErb
    elite_erb: EliteErb
    rngs: dict
    critic_updates: int = 0
    policy_updates: int = 0

    @classmethod
    def create(cls, config: MergeConfig, seed: int,
               state_dim: int = PointMassEnv.state_dim,
               action_dim: int = PointMassEnv.action_dim) -> "AgentState":
        config.validate()
        ss = np.random.SeedSequence(seed)
        names = ("init", "env", "explore", "full", "elite", "vae", "smooth", "eval")
        rngs = {n: np.random.default_rng(s) for n, s in zip(names, ss.spawn(len(names)))}
        h = list(config.hidden)
        acts_pi = ["relu"] * len(h) + ["tanh"]
        acts_q = ["relu"] * len(h) + ["identity"]
        r = rngs["init"]
        policy = nets.init_network([state_dim, *h, action_dim], acts_pi, r)
        critic1 = nets.init_network([state_dim + action_dim, *h, 1], acts_q, r)
        critic2 = nets.init_network([state_dim + action_dim, *h, 1], acts_q, r)
        vae = VaeModel.create(state_dim, action_dim, h, config.vae_rate, r)
        return cls(
            config=config,
            policy=policy, policy_target=policy.copy(),
            critic1=critic1, critic2=critic2,
            critic1_target=critic1.copy(), critic2_target=critic2.copy(),
            policy_adam=AdamState.for_net(policy, config.alpha),
            critic1_adam=AdamState.for_net(critic1, config.critic_rate),
            critic2_adam=AdamState.for_net(critic2, config.critic_rate),
            vae=vae,
            full_erb=FullErb(config.buffer_capacity, state_dim, action_dim),
            elite_erb=EliteErb(config.kappa),
            rngs=rngs,
        )


def behavior_action(policy: NetworkParams, state, std: float, rng) -> np.ndarray:
    """Deterministic policy output plus Gaussian exploration noise, clipped to [-1, 1]."""
    a = nets.forward(policy, np.asarray(state, dtype=np.float64))
    noise = rng.normal(0.0, std, size=a.shape) if std > 0 else 0.0
    return np.clip(a + noise, -1.0, 1.0)


def _critic_values(critic: NetworkParams, states, actions):
    X = np.concatenate([states, actions], axis=1)
    return nets.forward(critic, X)[:, 0]


def critic_update(agent: AgentState, batch: Batch) -> float:
    """One clipped double-Q TD step on both critics. Returns the summed MSE loss."""
    cfg = agent.config
    S, A, R = batch.states, batch.actions, batch.rewards
    S2, D = batch.next_states, batch.terminals
    a2 = nets.forward(agent.policy_target, S2)
    noise = np.clip(agent.rngs["smooth"].normal(0.0, cfg.smoothing_std, size=a2.shape),
                    -cfg.smoothing_clip, cfg.smoothing_clip)
    a2 = np.clip(a2 + noise, -1.0, 1.0)
    q_next = np.minimum(_critic_values(agent.critic1_target, S2, a2),
                        _critic_values(agent.critic2_target, S2, a2))
    target = R + cfg.gamma * (1.0 - D) * q_next
    X = np.concatenate([S, A], axis=1)
    n = len(batch)
    loss = 0.0
    for critic, adam in ((agent.critic1, agent.critic1_adam),
                         (agent.critic2, agent.critic2_adam)):
        q, cache = nets.forward_cached(critic, X)
        err = q[:, 0] - target
        loss += float(err @ err) / n
        g, _ = nets.backprop(critic, cache, (2.0 * err / n)[:, None])
        nets.adam_step(adam, critic, g, "descent")
    agent.critic_updates += 1
    return loss


def _dq_da_from_critic(critic: NetworkParams, state_dim: int):
    """Action-gradient callable of a Q network: (states, actions) -> dQ/da."""
    def dq_da(S, A):
        X = np.concatenate([S, A], axis=1)
        _, cache = nets.forward_cached(critic, X)
        _, gx = nets.backprop(critic, cache, np.ones((X.shape[0], 1)))
        return gx[:, state_dim:]
    return dq_da


def dpg_gradient(policy: NetworkParams, states, dq_da, reference=None,
                 lam: float = 0.0) -> GradVector:
    """Deterministic policy gradient averaged over a batch of states.

    grad_theta mean_s [ Q(s, pi(s)) - lam * ||pi(s) - reference(s)||^2 ],
    with the reference held constant under differentiation. The chain rule
    is realized as one reverse pass through the policy with upstream
    dQ/da - 2 * lam * (pi(s) - reference(s)).
    """
    S = np.asarray(states, dtype=np.float64)
    A, cache = nets.forward_cached(policy, S)
    upstream = dq_da(S, A)
    if reference is not None and lam != 0.0:
        upstream = upstream - 2.0 * lam * (A - np.asarray(reference, dtype=np.float64))
    g, _ = nets.backprop(policy, cache, upstream / S.shape[0])
    return GradVector(g, "parameters")


def _reference_for(agent: AgentState, batch: Batch):
    mode = agent.config.regularizer_mode
    if mode == "none" or agent.config.lam == 0.0:
        return None
    if mode == "vae":
        return genmodel.reference_action(agent.vae, batch.states)
    return batch.actions  # sampled_action


def conventional_dpg(agent: AgentState, batch: Batch) -> GradVector:
    """Plain DPG through the first critic over a full-buffer batch."""
    dq = _dq_da_from_critic(agent.critic1, batch.states.shape[1])
    return dpg_gradient(agent.policy, batch.states, dq)


def elite_dpg(agent: AgentState, batch: Batch, at_params: NetworkParams | None = None) -> GradVector:
    """Regularized DPG over an elite batch, optionally at transient parameters."""
    if batch.source != "elite":
        raise ValueError("elite_dpg requires an elite batch")
    policy = agent.policy if at_params is None else at_params
    dq = _dq_da_from_critic(agent.critic1, batch.states.shape[1])
    return dpg_gradient(policy, batch.states, dq,
                        reference=_reference_for(agent, batch), lam=agent.config.lam)


def interpolation_merge(g_conv: GradVector, g_elite: GradVector, upsilon: float) -> GradVector:
    if g_conv.values.shape != g_elite.values.shape:
        raise nets.ShapeError("gradients must have equal length")
    return GradVector((1.0 - upsilon) * g_conv.values + upsilon * g_elite.values, "parameters")


def two_step_merge(agent: AgentState, g_conv: GradVector, elite_batch: Batch) -> GradVector:
    """Evaluate the elite gradient after a transient conventional ascent step.

    theta' = theta + alpha * (1 - upsilon) * g_conv exists only inside this
    call; the returned direction is applied at the original theta.
    """
    cfg = agent.config
    transient = agent.policy.with_values(
        agent.policy.values + cfg.alpha * (1.0 - cfg.upsilon) * g_conv.values)
    g_elite = elite_dpg(agent, elite_batch, at_params=transient)
    return interpolation_merge(g_conv, g_elite, cfg.upsilon)


def merged_policy_gradient(agent: AgentState, variant: str, full_batch: Batch,
                           elite_batch: Batch | None) -> GradVector:
    """The policy-ascent direction for one update of the given variant.

    Falls back to the conventional gradient when no elite data is available.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    g_conv = conventional_dpg(agent, full_batch)
    if variant == "td3" or elite_batch is None:
        return g_conv
    if variant == "td3_im":
        return interpolation_merge(g_conv, elite_dpg(agent, elite_batch),
                                   agent.config.upsilon)
    return two_step_merge(agent, g_conv, elite_batch)


def _polyak(target: NetworkParams, online: NetworkParams, tau: float) -> None:
    target.values *= 1.0 - tau
    target.values += tau * online.values


def policy_update(agent: AgentState, variant: str, full_batch: Batch,
                  elite_batch: Batch | None) -> GradVector:
    """One delayed policy step: Adam ascent on the merged gradient plus
    Polyak averaging of all three target networks."""
    g = merged_policy_gradient(agent, variant, full_batch, elite_batch)
    nets.adam_step(agent.policy_adam, agent.policy, g, "ascent")
    tau = agent.config.polyak
    _polyak(agent.policy_target, agent.policy, tau)
    _polyak(agent.critic1_target, agent.critic1, tau)
    _polyak(agent.critic2_target, agent.critic2, tau)
    agent.policy_updates += 1
    return g


def evaluate_policy(policy: NetworkParams, rng, episodes: int = 10,
                    horizon: int = PointMassEnv.horizon,
                    dt: float = PointMassEnv.dt,
                    initial_positions=None) -> float:
    """Mean noise-free episodic return over fresh start states (batched rollout)."""
    if initial_positions is None:
        pos = rng.uniform(-1.0, 1.0, size=episodes)
    else:
        pos = np.asarray(initial_positions, dtype=np.float64).copy()
    vel = np.zeros_like(pos)
    ret = np.zeros_like(pos)
    for _ in range(horizon):
        S = np.stack([pos, vel], axis=1)
        a = np.clip(nets.forward(policy, S)[:, 0], -1.0, 1.0)
        ret -= pos * pos + 0.1 * a * a
        pos = pos + dt * vel
        vel = vel + dt * a
    return float(ret.mean())


def train(agent: AgentState, env: PointMassEnv, total_steps: int, variant: str,
          snapshot_steps=(), on_snapshot=None) -> list[CurveRow]:
    """Run the shared training loop and return the learning curve.

    One critic update per post-warmup environment step; policy updates every
    ``policy_delay`` critic updates; elite sampling and VAE training only for
    the merging variants. ``on_snapshot(step, agent)`` fires at the listed
    steps with training state frozen.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    cfg = agent.config
    rngs = agent.rngs
    snapshot_steps = set(int(s) for s in snapshot_steps)
    rows: list[CurveRow] = []
    episode = 0
    last_train_return = np.nan
    critic_loss = np.nan
    vae_loss = np.nan
    state = env.reset(rngs["env"])
    traj: list = []
    for step in range(1, total_steps + 1):
        if step <= cfg.warmup_steps:
            # Uniform exploration before updates begin: keeps the bootstrap
            # data near the start distribution instead of letting the
            # untrained policy drift the state far out of range.
            action = rngs["explore"].uniform(-1.0, 1.0, size=agent.policy.out_dim)
        else:
            action = behavior_action(agent.policy, state, cfg.exploration_std,
                                     rngs["explore"])
        t = env.step(action)
        agent.full_erb.push(t)
        traj.append(t)
        if t.terminal:
            agent.elite_erb.end_trajectory(Trajectory(
                np.stack([x.state for x in traj]),
                np.stack([x.next_state for x in traj]),
                np.stack([x.action for x in traj]),
                np.array([x.reward for x in traj]),
                np.array([1.0 if x.terminal else 0.0 for x in traj]),
            ))
            last_train_return = sum(x.reward for x in traj)
            episode += 1
            traj = []
            state = env.reset(rngs["env"])
        else:
            state = t.next_state

        if step > cfg.warmup_steps:
            full_batch = agent.full_erb.sample(cfg.batch_size, rngs["full"])
            critic_loss = critic_update(agent, full_batch)
            elite_batch = None
            if variant != "td3" and len(agent.elite_erb):
                elite_batch = agent.elite_erb.sample(cfg.batch_size, rngs["elite"])
                # The VAE exists solely to supply the regularizer's reference
                # action, so it is only trained when that term is active.
                if cfg.regularizer_mode == "vae" and cfg.lam > 0.0:
                    vae_loss = genmodel.vae_train_step(agent.vae, elite_batch, rngs["vae"])
            if agent.critic_updates % cfg.policy_delay == 0:
                g = policy_update(agent, variant, full_batch, elite_batch)
                if not np.all(np.isfinite(agent.policy.values)):
                    raise RuntimeError(f"non-finite policy parameters at step {step}")
            if not np.isfinite(critic_loss):
                raise RuntimeError(f"non-finite critic loss at step {step}")

        if step % cfg.eval_interval == 0 or step == total_steps:
            eval_ret = evaluate_policy(agent.policy, rngs["eval"], cfg.eval_episodes)
            rows.append(CurveRow(step, episode, float(last_train_return), eval_ret,
                                 float(critic_loss), float(vae_loss), agent.policy_updates))
        if step in snapshot_steps and on_snapshot is not None:
            on_snapshot(step, agent)
    return rows


def dpg_variance_probe(agent: AgentState, n_resamples: int, rng) -> dict:
    """Per-coordinate variance of each gradient rule under batch resampling.

    The agent is frozen: batches are redrawn ``n_resamples`` times from the
    current buffers with an independent RNG, the three rules are evaluated at
    the current parameters, and the empirical variance per parameter
    coordinate is averaged into one scalar per rule.
    """
    if n_resamples < 2:
        raise ValueError("need at least 2 resamples for a variance")
    if agent.full_erb.size == 0 or len(agent.elite_erb) == 0:
        raise EmptyBufferError("variance probe needs populated full and elite buffers")
    cfg = agent.config
    stacks = {"conventional": [], "interpolation": [], "two_step": []}
    for _ in range(n_resamples):
        full_batch = agent.full_erb.sample(cfg.batch_size, rng)
        elite_batch = agent.elite_erb.sample(cfg.batch_size, rng)
        g_conv = conventional_dpg(agent, full_batch)
        g_elite = elite_dpg(agent, elite_batch)
        stacks["conventional"].append(g_conv.values)
        stacks["interpolation"].append(
            interpolation_merge(g_conv, g_elite, cfg.upsilon).values)
        stacks["two_step"].append(two_step_merge(agent, g_conv, elite_batch).values)
    return {rule: float(np.var(np.stack(vs), axis=0, ddof=1).mean())
            for rule, vs in stacks.items()}


def curve_to_csv(rows: list[CurveRow], path) -> None:
    cols = ("step", "episode", "train_return", "eval_return",
            "critic_loss", "vae_loss", "policy_update_count")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            d = asdict(r)
            fh.write(",".join(
                str(d[c]) if c in ("step", "episode", "policy_update_count")
                else repr(float(d[c])) for c in cols) + "\n")
