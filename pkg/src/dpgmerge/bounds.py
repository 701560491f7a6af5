"""Brute-force verification of surrogate-objective and gradient-bias bounds.

All quantities are computed exactly (to linear-solver tolerance) on small
action-Lipschitz finite MDPs:

* an off-policy evaluation identity relating the start-state value of one
  policy under another policy's start distribution to the latter's return
  plus a discounted advantage sum;
* surrogate-error bounds for a behavior policy, for the interpolated
  surrogate, and for the two-step surrogate (extra term from the transient
  policy shift);
* a per-step visitation drift bound that grows linearly in time via the
  transition Lipschitz constant;
* the same surrogate bounds under a uniformly perturbed ("learned") critic;
* an l1 bias bound for the deterministic policy gradient computed from the
  perturbed critic and an off-policy visitation, plus its interpolated and
  two-step merged versions;
* a monotone-improvement chain for exhaustive surrogate maximization.

Every check returns measured left-hand and right-hand sides; the suite
asserts non-negative slack with a small numerical allowance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .envs import (FiniteMdp, TabularPolicy, discounted_visitation_raw, exact_j,
                   exact_q, interp_q, interp_q_slope, random_mdp, tv_distance,
                   visitation)

SLACK_TOL = 1e-9
IDENTITY_TOL = 1e-8


class GradientOracleError(RuntimeError):
    """Finite differences disagree with the closed-form exact policy gradient."""


@dataclass
class CheckResult:
    """One inequality: name, measured sides, slack = rhs - lhs."""

    name: str
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def ok(self) -> bool:
        return self.slack >= -SLACK_TOL


def q_lipschitz(mdp: FiniteMdp, q_table: np.ndarray) -> float:
    """Exact action-Lipschitz constant of the piecewise-linear Q interpolant."""
    da = np.diff(mdp.action_grid)
    return float(np.max(np.abs(np.diff(q_table, axis=1)) / da))


def exact_policy_gradient(mdp: FiniteMdp, policy: TabularPolicy, rho0=None) -> np.ndarray:
    """dJ/d theta_s = d_pi(s) * dQ^pi(s, a)/da at a = pi(s).

    d_pi is the unnormalized discounted visitation. Exact for this MDP class
    because rewards and transitions are piecewise-linear in the action with
    shared nodes, so the Q interpolant's segment slope is the true derivative.
    """
    q = exact_q(mdp, policy)
    d = discounted_visitation_raw(mdp, policy, rho0=rho0)
    return d * interp_q_slope(mdp, q, policy.actions)


def finite_diff_policy_gradient(mdp: FiniteMdp, policy: TabularPolicy,
                                h: float = 1e-5) -> np.ndarray:
    g = np.empty(mdp.n_states)
    for s in range(mdp.n_states):
        for sign, store in ((1.0, "plus"), (-1.0, "minus")):
            a = policy.actions.copy()
            a[s] += sign * h
            val = exact_j(mdp, TabularPolicy(a))
            if store == "plus":
                j_plus = val
            else:
                j_minus = val
        g[s] = (j_plus - j_minus) / (2.0 * h)
    return g


def check_gradient_oracle(mdp: FiniteMdp, policy: TabularPolicy,
                          h: float = 1e-5, tol: float = 1e-6) -> float:
    """Cross-validate the closed-form gradient against central differences."""
    exact = exact_policy_gradient(mdp, policy)
    fd = finite_diff_policy_gradient(mdp, policy, h=h)
    err = float(np.max(np.abs(exact - fd)))
    if err > tol * max(1.0, float(np.max(np.abs(exact)))):
        raise GradientOracleError(f"gradient mismatch {err:.3e} exceeds tolerance")
    return err


# ---------------------------------------------------------------------------
# Surrogate objectives


def _policy_values(mdp: FiniteMdp, q_table: np.ndarray, policy: TabularPolicy):
    return interp_q(mdp, q_table, policy.actions)


def surrogate(mdp: FiniteMdp, target: TabularPolicy, behavior: TabularPolicy,
              q_table: np.ndarray, rho0_behavior=None) -> float:
    """J(behavior) + sum_t gamma^t E_{rho_t^behavior}[Q(s, target(s)) - Q(s, behavior(s))].

    With q_table = Q^target this equals the off-policy evaluation identity's
    right-hand side; with a perturbed table it is the practical surrogate.
    """
    rho0_b = mdp.rho0 if rho0_behavior is None else rho0_behavior
    j_b = exact_j(mdp, behavior, rho0=rho0_b)
    d_b = discounted_visitation_raw(mdp, behavior, rho0=rho0_b)
    adv = _policy_values(mdp, q_table, target) - _policy_values(mdp, q_table, behavior)
    return j_b + float(d_b @ adv)


def lemma_value_identity(mdp: FiniteMdp, pi: TabularPolicy, beta: TabularPolicy,
                         rho0_beta=None) -> CheckResult:
    """E_{rho0^beta}[Q^pi(s, pi(s))] equals J(beta) plus the discounted
    advantage of pi under beta's visitation (exact identity)."""
    rho0_b = mdp.rho0 if rho0_beta is None else rho0_beta
    q_pi = exact_q(mdp, pi)
    lhs = float(np.asarray(rho0_b) @ _policy_values(mdp, q_pi, pi))
    rhs = surrogate(mdp, pi, beta, q_pi, rho0_behavior=rho0_b)
    return CheckResult("value_identity", lhs, rhs)


def visitation_drift_check(mdp: FiniteMdp, pi: TabularPolicy, beta: TabularPolicy,
                           t_max: int, rho0_pi=None, rho0_beta=None) -> list[CheckResult]:
    """D_TV(rho_t^pi, rho_t^beta) <= (t c / 2) max_s |pi(s)-beta(s)| + D_TV at t=0."""
    rhos_pi, _ = visitation(mdp, pi, t_max=t_max, rho0=rho0_pi)
    rhos_beta, _ = visitation(mdp, beta, t_max=t_max, rho0=rho0_beta)
    delta = float(np.max(np.abs(pi.actions - beta.actions)))
    d0 = tv_distance(rhos_pi[0], rhos_beta[0])
    return [CheckResult(f"visitation_drift_t{t}",
                        tv_distance(rhos_pi[t], rhos_beta[t]),
                        0.5 * t * mdp.lipschitz_c * delta + d0)
            for t in range(len(rhos_pi))]


# ---------------------------------------------------------------------------
# Instance construction


@dataclass
class BoundInstance:
    """One randomized verification scenario on a finite MDP.

    beta1 mirrors the full replay buffer: same start distribution as pi,
    slightly perturbed actions. beta2 mirrors the elite buffer: an empirical
    start distribution from finitely many sampled starts, with its own
    actions on a random subset of states. pi_prime is pi after one exact
    ascent step of size alpha, the transient policy of two-step merging.
    """

    mdp: FiniteMdp
    pi: TabularPolicy
    pi_prime: TabularPolicy
    beta1: TabularPolicy
    beta2: TabularPolicy
    rho0_beta2: np.ndarray
    upsilon: float
    alpha: float
    critic_pert: np.ndarray  # (n_states, g) perturbation of Q^pi


def make_instance(rng, upsilon: float = 0.25, alpha: float = 0.05,
                  n_states: int = 6, n_actions: int = 11, gamma: float = 0.9,
                  n_init_samples: int = 5, pert_scale: float = 0.05) -> BoundInstance:
    mdp = random_mdp(rng, n_states=n_states, n_actions=n_actions, gamma=gamma)
    pi = TabularPolicy(rng.uniform(-0.95, 0.95, size=n_states))
    grad = exact_policy_gradient(mdp, pi)
    pi_prime = TabularPolicy(np.clip(pi.actions + alpha * grad, -1.0, 1.0))
    beta1 = TabularPolicy(np.clip(pi.actions + rng.uniform(-0.1, 0.1, n_states), -1.0, 1.0))
    subset = rng.random(n_states) < 0.5
    if not subset.any():
        subset[rng.integers(n_states)] = True
    b2_actions = pi.actions.copy()
    b2_actions[subset] = rng.uniform(-0.95, 0.95, size=int(subset.sum()))
    beta2 = TabularPolicy(b2_actions)
    starts = rng.choice(n_states, size=n_init_samples, p=mdp.rho0)
    rho0_beta2 = np.bincount(starts, minlength=n_states) / n_init_samples
    pert = rng.uniform(-pert_scale, pert_scale, size=(n_states, n_actions))
    return BoundInstance(mdp, pi, pi_prime, beta1, beta2, rho0_beta2,
                         upsilon, alpha, pert)


# ---------------------------------------------------------------------------
# Surrogate-error bounds


def _common(inst: BoundInstance):
    mdp = inst.mdp
    q_pi = exact_q(mdp, inst.pi)
    j = float(mdp.rho0 @ _policy_values(mdp, q_pi, inst.pi))
    zeta = float(np.max(np.abs(_policy_values(mdp, q_pi, inst.pi))))
    dtv = tv_distance(mdp.rho0, inst.rho0_beta2)
    chi2 = float(np.max(np.abs(inst.pi.actions - inst.pi_prime.actions)) / inst.alpha)
    return q_pi, j, zeta, dtv, chi2


def surrogate_bounds_check(inst: BoundInstance) -> list[CheckResult]:
    """Surrogate error under the exact critic Q^pi.

    * elite surrogate alone: |J - Jt(pi, beta2)| <= 2 zeta D_TV(rho0, rho0^beta2)
    * interpolated:          |J - Jt_im|        <= 2 zeta upsilon D_TV
    * two-step:              |J - Jt_2m|        <= 2 zeta upsilon D_TV
                                                   + upsilon chi1 chi2 alpha / (1-gamma)
    beta1 shares rho0 with pi, so its surrogate term is exact and only the
    elite component contributes distribution error.
    """
    mdp, up, al = inst.mdp, inst.upsilon, inst.alpha
    q_pi, j, zeta, dtv, chi2 = _common(inst)
    chi1 = q_lipschitz(mdp, q_pi)
    inv = 1.0 / (1.0 - mdp.gamma)
    jt_b1 = surrogate(mdp, inst.pi, inst.beta1, q_pi)
    jt_b2 = surrogate(mdp, inst.pi, inst.beta2, q_pi, rho0_behavior=inst.rho0_beta2)
    jt_b2_prime = surrogate(mdp, inst.pi_prime, inst.beta2, q_pi,
                            rho0_behavior=inst.rho0_beta2)
    jt_im = (1.0 - up) * jt_b1 + up * jt_b2
    jt_2m = (1.0 - up) * jt_b1 + up * jt_b2_prime
    return [
        CheckResult("surrogate_elite", abs(j - jt_b2), 2.0 * zeta * dtv),
        CheckResult("surrogate_interpolated", abs(j - jt_im), 2.0 * zeta * up * dtv),
        CheckResult("surrogate_two_step", abs(j - jt_2m),
                    2.0 * zeta * up * dtv + up * chi1 * chi2 * al * inv),
    ]


def perturbed_surrogate_bounds_check(inst: BoundInstance) -> list[CheckResult]:
    """Same bounds with the critic replaced by Q^pi + perturbation.

    Each bound picks up 2 chi3 / (1-gamma) where chi3 is the sup-norm of the
    perturbation; the two-step variant's shift term uses the perturbed
    critic's Lipschitz constant chi4.
    """
    mdp, up, al = inst.mdp, inst.upsilon, inst.alpha
    q_pi, j, zeta, dtv, chi2 = _common(inst)
    q_hat = q_pi + inst.critic_pert
    chi3 = float(np.max(np.abs(inst.critic_pert)))
    chi4 = q_lipschitz(mdp, q_hat)
    inv = 1.0 / (1.0 - mdp.gamma)
    jh_b1 = surrogate(mdp, inst.pi, inst.beta1, q_hat)
    jh_b2 = surrogate(mdp, inst.pi, inst.beta2, q_hat, rho0_behavior=inst.rho0_beta2)
    jh_b2_prime = surrogate(mdp, inst.pi_prime, inst.beta2, q_hat,
                            rho0_behavior=inst.rho0_beta2)
    jh_im = (1.0 - up) * jh_b1 + up * jh_b2
    jh_2m = (1.0 - up) * jh_b1 + up * jh_b2_prime
    approx = 2.0 * chi3 * inv
    return [
        CheckResult("perturbed_elite", abs(j - jh_b2), 2.0 * zeta * dtv + approx),
        CheckResult("perturbed_interpolated", abs(j - jh_im),
                    2.0 * zeta * up * dtv + approx),
        CheckResult("perturbed_two_step", abs(j - jh_2m),
                    2.0 * zeta * up * dtv + approx + up * chi2 * chi4 * al * inv),
    ]


# ---------------------------------------------------------------------------
# Gradient-bias bounds


def _offpolicy_gradient(mdp: FiniteMdp, q_table, at: TabularPolicy,
                        behavior: TabularPolicy, rho0_behavior=None) -> np.ndarray:
    d = discounted_visitation_raw(mdp, behavior, rho0=rho0_behavior)
    return d * interp_q_slope(mdp, q_table, at.actions)


def gradient_bias_bounds_check(inst: BoundInstance,
                               check_oracle: bool = True) -> list[CheckResult]:
    """l1 bias of approximate deterministic policy gradients.

    With the perturbed critic and behavior visitations, the plain off-policy
    gradient error is bounded by

        psi1/(1-gamma) + gamma c psi2 Delta/(1-gamma)^2 + 2 psi2 D_TV(rho0)/(1-gamma)

    (psi1 = worst slope error at pi's actions, psi2 = worst perturbed slope
    magnitude, Delta = max action gap, c = transition Lipschitz constant).
    The interpolated estimator splits the drift terms by weight; the
    two-step estimator adds psi3 chi2 alpha/(1-gamma) for evaluating the
    elite component at the transient policy, where psi3 is the measured
    slope-change rate between pi and pi_prime.
    """
    mdp, up, al = inst.mdp, inst.upsilon, inst.alpha
    gamma, c = mdp.gamma, mdp.lipschitz_c
    inv = 1.0 / (1.0 - gamma)
    if check_oracle:
        check_gradient_oracle(mdp, inst.pi)
    q_pi = exact_q(mdp, inst.pi)
    q_hat = q_pi + inst.critic_pert
    grad_j = exact_policy_gradient(mdp, inst.pi)

    slope_pi = interp_q_slope(mdp, q_pi, inst.pi.actions)
    slope_hat = interp_q_slope(mdp, q_hat, inst.pi.actions)
    slope_hat_prime = interp_q_slope(mdp, q_hat, inst.pi_prime.actions)
    psi1 = float(np.max(np.abs(slope_pi - slope_hat)))
    psi2 = float(np.max(np.abs(slope_hat)))
    gap = np.abs(inst.pi.actions - inst.pi_prime.actions)
    rates = np.abs(slope_hat - slope_hat_prime)[gap > 0] / gap[gap > 0]
    psi3 = float(rates.max()) if rates.size else 0.0
    chi2 = float(np.max(gap) / al)

    d_tv0 = tv_distance(mdp.rho0, inst.rho0_beta2)
    delta1 = float(np.max(np.abs(inst.pi.actions - inst.beta1.actions)))
    delta2 = float(np.max(np.abs(inst.pi.actions - inst.beta2.actions)))

    g_b2 = _offpolicy_gradient(mdp, q_hat, inst.pi, inst.beta2, inst.rho0_beta2)
    g_b1 = _offpolicy_gradient(mdp, q_hat, inst.pi, inst.beta1)
    g_im = (1.0 - up) * g_b1 + up * g_b2
    g_b2_prime = _offpolicy_gradient(mdp, q_hat, inst.pi_prime, inst.beta2,
                                     inst.rho0_beta2)
    g_2m = (1.0 - up) * g_b1 + up * g_b2_prime

    rhs_plain = (psi1 * inv + gamma * c * psi2 * delta2 * inv ** 2
                 + 2.0 * psi2 * d_tv0 * inv)
    rhs_im = (psi1 * inv
              + (1.0 - up) * gamma * c * psi2 * delta1 * inv ** 2
              + up * gamma * c * psi2 * delta2 * inv ** 2
              + 2.0 * up * psi2 * d_tv0 * inv)
    shift = psi3 * chi2 * al * inv
    lhs_plain = float(np.abs(grad_j - g_b2).sum())
    lhs_im = float(np.abs(grad_j - g_im).sum())
    lhs_2m = float(np.abs(grad_j - g_2m).sum())
    return [
        CheckResult("grad_bias_elite", lhs_plain, rhs_plain),
        CheckResult("grad_bias_interpolated", lhs_im, rhs_im),
        CheckResult("grad_bias_two_step", lhs_2m, rhs_im + shift),
        CheckResult("grad_bias_two_step_vs_interpolated", lhs_2m, lhs_im + shift),
    ]


# ---------------------------------------------------------------------------
# Monotone surrogate improvement


def _grid_policy_returns(mdp: FiniteMdp) -> tuple[np.ndarray, np.ndarray]:
    """Returns of every grid-action policy, via batched linear solves."""
    n, g = mdp.n_states, mdp.action_grid.size
    if g ** n > 100_000:
        raise ValueError("grid policy space too large for exhaustive search")
    combos = np.stack(np.meshgrid(*[np.arange(g)] * n, indexing="ij"),
                      axis=-1).reshape(-1, n)
    s = np.arange(n)
    P = mdp.transitions[s[None, :], :, combos]            # (M, n, n)
    r = mdp.rewards[s[None, :], combos]                   # (M, n)
    V = np.linalg.solve(np.eye(n)[None] - mdp.gamma * P, r[..., None])[..., 0]
    return combos, V @ mdp.rho0


def monotone_surrogate_check(mdp: FiniteMdp, pi0: TabularPolicy,
                             n_iters: int = 5) -> dict:
    """Iterate exhaustive surrogate maximization over all grid policies.

    The surrogate M(pi_i, beta) evaluated through the off-policy identity,
    minus the start-distribution penalty 2 zeta D_TV(rho0^pi_i, rho0^beta)
    (zero here: every candidate shares the MDP's start distribution), is
    maximized exactly. The improvement chain

        J(pi_{i+1}) >= M(pi_i, pi_{i+1}) >= M(pi_i, pi_i) = J(pi_i)

    must hold at every iteration within IDENTITY_TOL.
    """
    combos, returns = _grid_policy_returns(mdp)
    actions_of = mdp.action_grid[combos]
    pi = pi0
    j_seq = [exact_j(mdp, pi)]
    checks: list[CheckResult] = []
    for i in range(n_iters):
        q_pi = exact_q(mdp, pi)
        best = int(np.argmax(returns))
        pi_next = TabularPolicy(actions_of[best])
        q_next = exact_q(mdp, pi_next)
        m_next = surrogate(mdp, pi_next, pi, q_next)
        m_self = surrogate(mdp, pi, pi, q_pi)
        j_next = exact_j(mdp, pi_next, q_table=q_next)
        checks.append(CheckResult(f"iter{i}_j_vs_m", m_next, j_next + IDENTITY_TOL))
        checks.append(CheckResult(f"iter{i}_m_improves", m_self, m_next + IDENTITY_TOL))
        checks.append(CheckResult(f"iter{i}_m_self_identity",
                                  abs(m_self - j_seq[-1]), IDENTITY_TOL))
        pi = pi_next
        j_seq.append(j_next)
    ok = all(c.ok for c in checks) and all(
        j_seq[i + 1] >= j_seq[i] - IDENTITY_TOL for i in range(n_iters))
    return {"ok": ok, "j_sequence": j_seq, "checks": checks}


# ---------------------------------------------------------------------------
# Randomized suite


def run_instance_checks(inst: BoundInstance, t_max: int = 20,
                        check_oracle: bool = True) -> list[CheckResult]:
    """All inequality checks for one instance."""
    ident = lemma_value_identity(inst.mdp, inst.pi, inst.beta2, inst.rho0_beta2)
    # the identity must hold to numerical tolerance, expressed as |lhs-rhs| <= tol
    out = [CheckResult("value_identity", abs(ident.lhs - ident.rhs), IDENTITY_TOL)]
    out += surrogate_bounds_check(inst)
    out += perturbed_surrogate_bounds_check(inst)
    out += visitation_drift_check(inst.mdp, inst.pi, inst.beta2, t_max,
                                  rho0_beta=inst.rho0_beta2)
    out += gradient_bias_bounds_check(inst, check_oracle=check_oracle)
    return out


def instance_constants(inst: BoundInstance) -> dict:
    """The measured constants entering the right-hand sides, for reporting."""
    mdp = inst.mdp
    q_pi = exact_q(mdp, inst.pi)
    q_hat = q_pi + inst.critic_pert
    slope_pi = interp_q_slope(mdp, q_pi, inst.pi.actions)
    slope_hat = interp_q_slope(mdp, q_hat, inst.pi.actions)
    return {
        "gamma": mdp.gamma,
        "lipschitz_c": mdp.lipschitz_c,
        "upsilon": inst.upsilon,
        "alpha": inst.alpha,
        "zeta": float(np.max(np.abs(interp_q(mdp, q_pi, inst.pi.actions)))),
        "chi1": q_lipschitz(mdp, q_pi),
        "chi2": float(np.max(np.abs(inst.pi.actions - inst.pi_prime.actions)) / inst.alpha),
        "chi3": float(np.max(np.abs(inst.critic_pert))),
        "chi4": q_lipschitz(mdp, q_hat),
        "psi1": float(np.max(np.abs(slope_pi - slope_hat))),
        "psi2": float(np.max(np.abs(slope_hat))),
        "dtv0": tv_distance(mdp.rho0, inst.rho0_beta2),
    }


def run_bound_suite(n_instances: int, seed: int, monotone_every: int = 10,
                    **instance_kw) -> dict:
    """Randomized verification campaign. Returns per-check worst slacks,
    failures, and monotone-chain results on a subsample of instances."""
    rng = np.random.default_rng(seed)
    rows = []
    constants = []
    failures = []
    worst: dict[str, float] = {}
    monotone_ok = True
    n_monotone = 0
    for i in range(n_instances):
        inst = make_instance(rng, **instance_kw)
        constants.append(instance_constants(inst))
        for c in run_instance_checks(inst):
            rows.append((i, c))
            key = c.name.split("_t")[0] if c.name.startswith("visitation_drift") else c.name
            worst[key] = min(worst.get(key, np.inf), c.slack)
            if not c.ok:
                failures.append((i, c))
        if monotone_every and i % monotone_every == 0:
            small = random_mdp(rng, n_states=4, n_actions=5,
                               gamma=inst.mdp.gamma)
            start = TabularPolicy(
                small.action_grid[rng.integers(small.action_grid.size,
                                               size=small.n_states)])
            res = monotone_surrogate_check(small, start, n_iters=3)
            monotone_ok = monotone_ok and res["ok"]
            n_monotone += 1
    return {"rows": rows, "constants": constants, "failures": failures,
            "worst_slack": worst, "monotone_ok": monotone_ok,
            "n_monotone": n_monotone, "ok": not failures and monotone_ok}


def suite_to_csv(result: dict, path) -> None:
    """One row per (instance, check) with the instance's measured constants."""
    const_keys = sorted(result["constants"][0]) if result["constants"] else []
    with open(path, "w") as fh:
        fh.write("instance,check,lhs,rhs,slack,ok"
                 + "".join("," + k for k in const_keys) + "\n")
        for i, c in result["rows"]:
            consts = result["constants"][i]
            fh.write(f"{i},{c.name},{float(c.lhs)!r},{float(c.rhs)!r},"
                     f"{float(c.slack)!r},{int(c.ok)}"
                     + "".join(f",{float(consts[k])!r}" for k in const_keys) + "\n")

