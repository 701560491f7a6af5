"""Command-line front end.

Subcommands
-----------
train      Run one or more training variants over one or more seeds; writes a
           learning-curve CSV per (variant, seed), elite-buffer dumps, policy
           snapshots, one aggregate mean/std file, and a summary.
nqa        Monte-Carlo verification of the noisy-quadratic stationary laws;
           one per-iteration CSV per update rule plus a summary table.
bounds     Randomized bound-verification campaign on finite MDPs.
gradcheck  Finite-difference validation of the analytic gradients (networks,
           VAE objective, tabular policy gradient).
probe      Train briefly, then measure per-rule gradient variance under
           batch resampling.

Settings come from built-in defaults, overridden by an optional
``--config FILE`` of ``key = value`` lines (``#`` comments allowed), then by
``--key=value`` flags. ``--seeds=1,2,3`` gives an explicit seed list
(otherwise ``seed .. seed+n_seeds-1`` is used), ``--out`` is an alias for
``--outdir``, and the command can also be passed as ``--command=NAME``.
Unknown keys are rejected. All floats are written with full ``repr``
precision, so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import dataclasses
import os
import sys

import numpy as np

from . import agent as agent_mod
from . import bounds as bounds_mod
from . import genmodel, nets, nqa
from .agent import AgentState, MergeConfig, VARIANTS
from .envs import PointMassEnv, lqr_oracle_return, random_mdp, TabularPolicy

COMMANDS = ("train", "nqa", "bounds", "gradcheck", "probe")


@dataclasses.dataclass
class RunConfig:
    command: str = ""
    outdir: str = "runs"
    seed: int = 0
    n_seeds: int = 1
    seeds: str = ""                # explicit comma list; overrides seed/n_seeds
    # train / probe
    variant: str = "td3"           # comma list allowed for train
    total_steps: int = 5000
    snapshot_interval: int = 0     # parameter snapshot every N steps (0 = final only)
    probe_resamples: int = 20
    # noisy quadratic analysis
    nqa_a: float = 1.0
    nqa_epsilon: float = 1.0
    nqa_sigma1: float = 1.0
    nqa_sigma2: float = 0.01
    nqa_alpha: float = 0.1
    nqa_seeds: int = 2000
    nqa_iters: int = 2000
    # bounds campaign
    bound_instances: int = 50
    # agent hyperparameters (mirrors MergeConfig)
    upsilon: float = 0.25
    lam: float = 0.1
    alpha: float = 0.0003
    kappa: int = 30
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
    hidden: str = "32,32"
    buffer_capacity: int = 100000
    eval_interval: int = 1000
    eval_episodes: int = 10

    def merge_config(self) -> MergeConfig:
        hidden = tuple(int(x) for x in str(self.hidden).split(",") if x.strip())
        return MergeConfig(
            upsilon=self.upsilon, lam=self.lam, alpha=self.alpha, kappa=self.kappa,
            gamma=self.gamma, exploration_std=self.exploration_std,
            smoothing_std=self.smoothing_std, smoothing_clip=self.smoothing_clip,
            policy_delay=self.policy_delay, polyak=self.polyak,
            batch_size=self.batch_size, warmup_steps=self.warmup_steps,
            regularizer_mode=self.regularizer_mode, critic_rate=self.critic_rate,
            vae_rate=self.vae_rate, hidden=hidden,
            buffer_capacity=self.buffer_capacity, eval_interval=self.eval_interval,
            eval_episodes=self.eval_episodes)

    def seed_list(self) -> list[int]:
        if self.seeds.strip():
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        return list(range(self.seed, self.seed + self.n_seeds))

    def variant_list(self) -> list[str]:
        out = [v.strip() for v in self.variant.split(",") if v.strip()]
        for v in out:
            if v not in VARIANTS:
                raise ValueError(f"variant must be among {VARIANTS}, got {v!r}")
        return out


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_ALIASES = {"out": "outdir"}


def _coerce(key: str, raw: str):
    default = getattr(RunConfig(), key)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _read_config_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = _ALIASES.get(key, key)
            if key not in _FIELDS:
                raise ValueError(f"{path}:{lineno}: unknown setting {key!r}")
            out[key] = _coerce(key, value)
    return out


def parse_config(argv) -> RunConfig:
    command = None
    config_path = None
    flag_overrides = {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in ("-h", "--help"):
            print(__doc__)
            raise SystemExit(0)
        if not tok.startswith("--"):
            if command is not None:
                raise ValueError(f"unexpected argument {tok!r}")
            command = tok
            i += 1
            continue
        body = tok[2:]
        if "=" in body:
            key, raw = body.split("=", 1)
        else:
            key = body
            i += 1
            if i >= len(argv):
                raise ValueError(f"flag --{key} needs a value")
            raw = argv[i]
        key = _ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
        if key == "command":
            command = raw
        elif key == "config":
            config_path = raw
        elif key in _FIELDS:
            flag_overrides[key] = _coerce(key, raw)
        else:
            raise ValueError(f"unknown setting {key!r}")
        i += 1
    if command not in COMMANDS:
        raise ValueError(f"command must be one of {COMMANDS}, got {command!r}")
    overrides = _read_config_file(config_path) if config_path else {}
    overrides.update(flag_overrides)  # flags win over the config file
    cfg = RunConfig(command=command)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def _fmt(x) -> str:
    return repr(float(x))


def _ensure_outdir(cfg: RunConfig) -> str:
    os.makedirs(cfg.outdir, exist_ok=True)
    return cfg.outdir


def _write_summary(out: str, lines: list[str]) -> None:
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: RunConfig) -> int:
    out = _ensure_outdir(cfg)
    summary = []
    aggregate = []
    for variant in cfg.variant_list():
        finals = []
        for seed in cfg.seed_list():
            agent = AgentState.create(cfg.merge_config(), seed)
            snaps = (range(cfg.snapshot_interval, cfg.total_steps + 1,
                           cfg.snapshot_interval)
                     if cfg.snapshot_interval else ())

            def save_snapshot(step, ag, _v=variant, _s=seed):
                nets.save_params(ag.policy,
                                 os.path.join(out, f"policy_{_v}_seed{_s}_step{step}.bin"))

            rows = agent_mod.train(agent, PointMassEnv(), cfg.total_steps, variant,
                                   snapshot_steps=snaps, on_snapshot=save_snapshot)
            agent_mod.curve_to_csv(rows, os.path.join(out, f"curve_{variant}_seed{seed}.csv"))
            if len(agent.elite_erb):
                agent.elite_erb.dump_csv(os.path.join(out, f"elite_{variant}_seed{seed}.csv"))
            nets.save_params(agent.policy, os.path.join(out, f"policy_{variant}_seed{seed}.bin"))
            final = rows[-1].eval_return if rows else float("nan")
            finals.append(final)
            line = f"variant={variant} seed={seed} final_eval_return={_fmt(final)}"
            summary.append(line)
            print(line)
        arr = np.array(finals)
        aggregate.append((variant, arr.mean(), arr.std(ddof=1) if len(arr) > 1 else 0.0))
    with open(os.path.join(out, "aggregate.csv"), "w") as fh:
        fh.write("variant,metric,mean,std\n")
        for variant, mean, std in aggregate:
            fh.write(f"{variant},final_eval_return,{_fmt(mean)},{_fmt(std)}\n")
    oracle = lqr_oracle_return()
    summary.append(f"lqr_oracle_return={_fmt(oracle)}")
    print(summary[-1])
    _write_summary(out, summary)
    return 0


def cmd_nqa(cfg: RunConfig) -> int:
    out = _ensure_outdir(cfg)
    spec = nqa.QuadraticSpec(
        a_diag=np.array([cfg.nqa_a]), epsilon=cfg.nqa_epsilon,
        sigma1=cfg.nqa_sigma1, sigma2=cfg.nqa_sigma2,
        alpha=cfg.nqa_alpha, upsilon=cfg.upsilon)
    rng = np.random.default_rng(cfg.seed)
    report = nqa.verify(spec, cfg.nqa_seeds, cfg.nqa_iters, rng)
    for rule in nqa.RULES:
        nqa.rule_to_csv(report, rule, os.path.join(out, f"nqa_{rule}_seed{cfg.seed}.csv"),
                        thin=max(1, cfg.nqa_iters // 200))
    ok = True
    lines = nqa.summary_lines(report)
    for rule in nqa.RULES:
        r = report[rule]
        mean_ok = bool(np.all(r["mean_abs_error"] <= 4.0 * r["mean_se"] + 1e-12))
        var_ok = bool(np.all(r["variance_abs_error"] <= 4.0 * r["variance_se"] + 1e-12))
        ok = ok and mean_ok and var_ok
        lines.append(f"{rule}: {'OK' if mean_ok and var_ok else 'MISMATCH'}")
    _write_summary(out, lines)
    print("\n".join(lines))
    return 0 if ok else 1


def cmd_bounds(cfg: RunConfig) -> int:
    out = _ensure_outdir(cfg)
    result = bounds_mod.run_bound_suite(cfg.bound_instances, cfg.seed)
    bounds_mod.suite_to_csv(result, os.path.join(out, f"bounds_seed{cfg.seed}.csv"))
    lines = [f"{name}: worst_slack={_fmt(slack)}"
             for name, slack in sorted(result["worst_slack"].items())]
    lines.append(f"monotone_ok={result['monotone_ok']} ({result['n_monotone']} chains)")
    lines.append(f"ok={result['ok']} failures={len(result['failures'])}")
    _write_summary(out, lines)
    print("\n".join(lines))
    return 0 if result["ok"] else 1


def cmd_gradcheck(cfg: RunConfig) -> int:
    rng = np.random.default_rng(cfg.seed)
    ok = True
    lines = []

    net = nets.init_network([3, 8, 2], ["relu", "tanh"], rng)
    x = rng.standard_normal(3)
    u = rng.standard_normal(2)
    analytic = nets.grad_params(net, x, u).values
    fd = nets.finite_diff_grad(
        lambda v: float(u @ nets.forward(net.with_values(v), x)),
        net.values, 1e-6).values
    err = float(np.max(np.abs(analytic - fd)) / max(1.0, np.max(np.abs(analytic))))
    lines.append(f"network_param_gradient rel_err={_fmt(err)}")
    ok = ok and err < 1e-6

    vae = genmodel.VaeModel.create(2, 1, [8], rate=1e-3, rng=rng)
    S = rng.standard_normal((4, 2))
    A = np.tanh(rng.standard_normal((4, 1)))
    noise = rng.standard_normal((4, vae.latent_dim))
    _, enc_g, dec_g = genmodel.elbo_loss_and_grads(vae, S, A, noise)
    for tag, net_, analytic in (("encoder", vae.encoder, enc_g),
                                ("decoder", vae.decoder, dec_g)):
        def loss_at(v, _net=net_):
            old = _net.values.copy()
            _net.values[:] = v
            val = genmodel.elbo_loss(vae, S, A, noise)
            _net.values[:] = old
            return val
        fd = nets.finite_diff_grad(loss_at, net_.values, 1e-6).values
        scale = max(1.0, float(np.max(np.abs(analytic))))
        err = float(np.max(np.abs(analytic - fd)) / scale)
        lines.append(f"vae_{tag}_gradient rel_err={_fmt(err)}")
        ok = ok and err < 1e-3

    mdp = random_mdp(rng)
    pi = TabularPolicy(rng.uniform(-0.9, 0.9, mdp.n_states))
    err = bounds_mod.check_gradient_oracle(mdp, pi)
    lines.append(f"tabular_policy_gradient abs_err={_fmt(err)}")
    lines.append("gradcheck " + ("PASS" if ok else "FAIL"))
    print("\n".join(lines))
    return 0 if ok else 1


def cmd_probe(cfg: RunConfig) -> int:
    out = _ensure_outdir(cfg)
    lines = []
    for seed in cfg.seed_list():
        agent = AgentState.create(cfg.merge_config(), seed)
        agent_mod.train(agent, PointMassEnv(), cfg.total_steps, cfg.variant_list()[0])
        rng = np.random.default_rng(np.random.SeedSequence([seed, 9001]))
        result = agent_mod.dpg_variance_probe(agent, cfg.probe_resamples, rng)
        path = os.path.join(out, f"probe_seed{seed}.csv")
        with open(path, "w") as fh:
            fh.write("rule,mean_coordinate_variance\n")
            for rule, v in result.items():
                fh.write(f"{rule},{_fmt(v)}\n")
                lines.append(f"seed={seed} {rule}: mean_coordinate_variance={_fmt(v)}")
    _write_summary(out, lines)
    print("\n".join(lines))
    return 0


def main(argv=None) -> int:
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else argv)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handler = {"train": cmd_train, "nqa": cmd_nqa, "bounds": cmd_bounds,
               "gradcheck": cmd_gradcheck, "probe": cmd_probe}[cfg.command]
    try:
        return handler(cfg)
    except Exception as exc:  # aborted run -> nonzero exit
        print(f"aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
