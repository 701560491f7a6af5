"""Environments and exact oracles.

A continuous point-mass control task for agent training, plus finite-state
MDPs with action-Lipschitz transitions on which long-term return, Q values,
visitation distributions and total-variation distances are computed exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Transition:
    state: np.ndarray
    next_state: np.ndarray
    action: np.ndarray
    reward: float
    terminal: bool


class PointMassEnv:
    """Double integrator: pos' = pos + dt*vel, vel' = vel + dt*a.

    Reward is -(pos^2 + 0.1*a^2), so returns are never positive. Episodes
    start at position ~ Uniform[-1, 1] with zero velocity and run for a
    fixed horizon.
    """

    state_dim = 2
    action_dim = 1
    dt = 0.05
    horizon = 200

    def __init__(self):
        self.state = np.zeros(2)
        self.step_index = 0
        self.clip_count = 0

    def reset(self, rng) -> np.ndarray:
        self.state = np.array([rng.uniform(-1.0, 1.0), 0.0])
        self.step_index = 0
        return self.state.copy()

    def step(self, action) -> Transition:
        t = point_mass_step(self.state, action, self.step_index, self.horizon, self.dt)
        if np.any(np.abs(np.asarray(action, dtype=np.float64)) > 1.0):
            self.clip_count += 1
        self.state = t.next_state.copy()
        self.step_index += 1
        return t


def point_mass_step(state, action, step_index: int, horizon: int = 200, dt: float = 0.05) -> Transition:
    """One Euler step of the point mass. Out-of-bounds actions are clipped."""
    state = np.asarray(state, dtype=np.float64)
    a = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
    pos, vel = state
    reward = -(pos * pos + 0.1 * a * a)
    next_state = np.array([pos + dt * vel, vel + dt * a])
    terminal = step_index + 1 >= horizon
    return Transition(state.copy(), next_state, np.array([a]), reward, terminal)


def lqr_gain(dt: float = 0.05, q_pos: float = 1.0, r_ctrl: float = 0.1,
             tol: float = 1e-10, max_iter: int = 10 ** 6) -> np.ndarray:
    """Stationary feedback gain from discrete-time Riccati iteration."""
    F = np.array([[1.0, dt], [0.0, 1.0]])
    G = np.array([[0.0], [dt]])
    Q = np.diag([q_pos, 0.0])
    R = np.array([[r_ctrl]])
    P = Q.copy()
    for _ in range(max_iter):
        GtP = G.T @ P
        K = np.linalg.solve(R + GtP @ G, GtP @ F)
        P_next = Q + F.T @ P @ (F - G @ K)
        if np.max(np.abs(P_next - P)) < tol:
            return np.linalg.solve(R + G.T @ P_next @ G, G.T @ P_next @ F)
        P = P_next
    raise RuntimeError("Riccati iteration did not converge")


def lqr_rollout_return(initial_positions, dt: float = 0.05, horizon: int = 200) -> np.ndarray:
    """Episodic returns of the clipped LQR controller from given start positions."""
    K = lqr_gain(dt=dt)
    pos = np.asarray(initial_positions, dtype=np.float64).copy()
    vel = np.zeros_like(pos)
    ret = np.zeros_like(pos)
    for _ in range(horizon):
        a = np.clip(-(K[0, 0] * pos + K[0, 1] * vel), -1.0, 1.0)
        ret -= pos * pos + 0.1 * a * a
        pos = pos + dt * vel
        vel = vel + dt * a
    return ret


def lqr_oracle_return(n_samples: int = 10_000, seed: int = 20240601,
                      dt: float = 0.05, horizon: int = 200) -> float:
    """Average return of the optimal linear-feedback controller, fixed-seed MC."""
    rng = np.random.default_rng(seed)
    starts = rng.uniform(-1.0, 1.0, size=n_samples)
    return float(lqr_rollout_return(starts, dt=dt, horizon=horizon).mean())


# ---------------------------------------------------------------------------
# Finite-state MDPs with action-Lipschitz transitions


@dataclass
class FiniteMdp:
    """Small MDP over a 1-D action grid in [-1, 1].

    transitions has shape (n_states, n_states, g): Pr(s, s', a_k). Off-grid
    actions are handled by linear interpolation of the transition tensor and
    reward table, which preserves the per-state-pair Lipschitz condition
    max |Pr(s, s', a) - Pr(s, s', a')| <= (lipschitz_c / n_states) |a - a'|.
    """

    n_states: int
    action_grid: np.ndarray
    transitions: np.ndarray
    rewards: np.ndarray  # (n_states, g)
    lipschitz_c: float
    gamma: float
    rho0: np.ndarray

    def validate(self, atol: float = 1e-12) -> None:
        n, g = self.n_states, self.action_grid.size
        if self.transitions.shape != (n, n, g):
            raise ValueError("transition tensor shape mismatch")
        if self.rewards.shape != (n, g):
            raise ValueError("reward table shape mismatch")
        if not np.allclose(self.transitions.sum(axis=1), 1.0, atol=atol):
            raise ValueError("transition rows must sum to 1")
        if abs(self.rho0.sum() - 1.0) > atol:
            raise ValueError("rho0 must sum to 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        da = np.diff(self.action_grid)
        slopes = np.abs(np.diff(self.transitions, axis=2)) / da
        if slopes.size and slopes.max() > self.lipschitz_c / n + 1e-12:
            raise ValueError("transition tensor violates the declared Lipschitz constant")

    # interpolation helpers -------------------------------------------------

    def _locate(self, actions):
        a = np.clip(np.asarray(actions, dtype=np.float64), self.action_grid[0], self.action_grid[-1])
        idx = np.clip(np.searchsorted(self.action_grid, a, side="right") - 1, 0,
                      self.action_grid.size - 2)
        lo = self.action_grid[idx]
        hi = self.action_grid[idx + 1]
        frac = (a - lo) / (hi - lo)
        return idx, frac

    def transition_matrix(self, policy_actions) -> np.ndarray:
        """Row-stochastic matrix P[s, s'] for one continuous action per state."""
        idx, frac = self._locate(policy_actions)
        s = np.arange(self.n_states)
        left = self.transitions[s, :, idx]
        right = self.transitions[s, :, idx + 1]
        return left + frac[:, None] * (right - left)

    def reward_vector(self, policy_actions) -> np.ndarray:
        idx, frac = self._locate(policy_actions)
        s = np.arange(self.n_states)
        return self.rewards[s, idx] + frac * (self.rewards[s, idx + 1] - self.rewards[s, idx])


@dataclass
class TabularPolicy:
    """One continuous action in [-1, 1] per state."""

    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if np.any(np.abs(self.actions) > 1.0):
            raise ValueError("policy actions must lie in [-1, 1]")


def interp_q(mdp: FiniteMdp, q_table: np.ndarray, actions) -> np.ndarray:
    """Q(s, a) per state for continuous actions, linear in a between grid nodes."""
    idx, frac = mdp._locate(actions)
    s = np.arange(mdp.n_states)
    return q_table[s, idx] + frac * (q_table[s, idx + 1] - q_table[s, idx])


def interp_q_slope(mdp: FiniteMdp, q_table: np.ndarray, actions) -> np.ndarray:
    """dQ/da per state at continuous actions (segment slope of the interpolant)."""
    idx, _ = mdp._locate(actions)
    s = np.arange(mdp.n_states)
    da = mdp.action_grid[idx + 1] - mdp.action_grid[idx]
    return (q_table[s, idx + 1] - q_table[s, idx]) / da


def exact_q(mdp: FiniteMdp, policy: TabularPolicy, tol: float = 1e-12) -> np.ndarray:
    """Fixed point of Q(s,a) = r(s,a) + gamma * sum_s' Pr(s,s',a) Q(s', pi(s')).

    Returned as a table over (state, grid action); convergence is guaranteed
    by the gamma-contraction.
    """
    q = np.zeros_like(mdp.rewards)
    while True:
        v = interp_q(mdp, q, policy.actions)
        q_next = mdp.rewards + mdp.gamma * np.einsum("ijk,j->ik", mdp.transitions, v)
        if np.max(np.abs(q_next - q)) < tol:
            return q_next
        q = q_next


def exact_j(mdp: FiniteMdp, policy: TabularPolicy, rho0=None, q_table=None) -> float:
    """J(pi) = sum_s rho0(s) Q(s, pi(s)), exact within solver tolerance."""
    if q_table is None:
        q_table = exact_q(mdp, policy)
    rho0 = mdp.rho0 if rho0 is None else np.asarray(rho0, dtype=np.float64)
    return float(rho0 @ interp_q(mdp, q_table, policy.actions))


def visitation(mdp: FiniteMdp, policy: TabularPolicy, t_max=None, rho0=None):
    """Per-step state distributions and the discounted visitation.

    Returns (rhos, discounted) where rhos[t] is the distribution at step t
    and discounted = (1-gamma) * sum_t gamma^t rhos[t], the series truncated
    once gamma^t < 1e-12 (or at t_max if given).
    """
    rho = (mdp.rho0 if rho0 is None else np.asarray(rho0, dtype=np.float64)).copy()
    P = mdp.transition_matrix(policy.actions)
    rhos = [rho.copy()]
    disc = rho.copy()
    weight = 1.0
    t = 0
    while True:
        if t_max is not None and t >= t_max:
            break
        weight *= mdp.gamma
        if t_max is None and weight < 1e-12:
            break
        rho = rho @ P
        rhos.append(rho.copy())
        disc += weight * rho
        t += 1
    return rhos, (1.0 - mdp.gamma) * disc


def discounted_visitation_raw(mdp: FiniteMdp, policy: TabularPolicy, rho0=None) -> np.ndarray:
    """Unnormalized sum_t gamma^t rho_t, truncated at gamma^t < 1e-12."""
    _, disc = visitation(mdp, policy, rho0=rho0)
    return disc / (1.0 - mdp.gamma)


def tv_distance(p, q) -> float:
    """Total variation distance, half the l1 distance."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions must share the same support")
    return 0.5 * float(np.abs(p - q).sum())


def random_mdp(rng, n_states: int = 6, n_actions: int = 11, gamma: float = 0.9,
               smoothing_passes: int = 3) -> FiniteMdp:
    """Random action-Lipschitz MDP.

    Dirichlet(1,...,1) transition rows are smoothed across the action grid by
    repeated [1/4, 1/2, 1/4] convolution, then the Lipschitz constant is set
    from an exhaustive scan of adjacent grid actions (exact at grid scope).
    """
    grid = np.linspace(-1.0, 1.0, n_actions)
    trans = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    trans = np.transpose(trans, (0, 2, 1))  # (s, s', a)
    kernel = np.array([0.25, 0.5, 0.25])
    for _ in range(smoothing_passes):
        padded = np.concatenate([trans[:, :, :1], trans, trans[:, :, -1:]], axis=2)
        trans = (kernel[0] * padded[:, :, :-2] + kernel[1] * padded[:, :, 1:-1]
                 + kernel[2] * padded[:, :, 2:])
    trans /= trans.sum(axis=1, keepdims=True)
    da = np.diff(grid)
    slopes = np.abs(np.diff(trans, axis=2)) / da
    c = float(n_states * slopes.max()) * (1.0 + 1e-9) + 1e-15
    rewards = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    mdp = FiniteMdp(n_states, grid, trans, rewards, c, gamma, rho0)
    mdp.validate()
    return mdp


def save_mdp(mdp: FiniteMdp, path) -> None:
    """Plain-text format: 'n_states g gamma c', rho0, reward rows, then the
    g transition matrices row-major, whitespace-separated decimals."""
    with open(path, "w") as fh:
        g = mdp.action_grid.size
        fh.write(f"{mdp.n_states} {g} {float(mdp.gamma)!r} {float(mdp.lipschitz_c)!r}\n")
        fh.write(" ".join(repr(float(x)) for x in mdp.rho0) + "\n")
        for row in mdp.rewards:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")
        for k in range(g):
            for s in range(mdp.n_states):
                fh.write(" ".join(repr(float(x)) for x in mdp.transitions[s, :, k]) + "\n")


def load_mdp(path) -> FiniteMdp:
    with open(path) as fh:
        tokens = fh.read().split()
    it = iter(tokens)
    n = int(next(it))
    g = int(next(it))
    gamma = float(next(it))
    c = float(next(it))
    rho0 = np.array([float(next(it)) for _ in range(n)])
    rewards = np.array([[float(next(it)) for _ in range(g)] for _ in range(n)])
    trans = np.empty((n, n, g))
    for k in range(g):
        for s in range(n):
            trans[s, :, k] = [float(next(it)) for _ in range(n)]
    mdp = FiniteMdp(n, np.linspace(-1.0, 1.0, g), trans, rewards, c, gamma, rho0)
    mdp.validate()
    return mdp
