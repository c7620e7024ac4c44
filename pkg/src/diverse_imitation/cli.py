"""Command-line entry point: ``python -m diverse_imitation <command> ...``.

Every command reads a config (``--config``, or the defaults for ``--env``),
takes an optional ``--seed`` override and writes into ``--out``; each run
leaves ``<command>.manifest.json`` listing inputs and outputs with hashes.
Exit status: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import envs, gail, theory, trpo, vae
from . import metrics as M
from .autodiff import NumericalError, ParamVector
from .checkpoint import CheckpointError, file_sha256, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, rng_stream

log = logging.getLogger("diverse_imitation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_dataset(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return envs.load_trajectories(path)


def default_env(cfg: TrainConfig):
    return envs.make_env(cfg.env.kind)


def save_vae(prefix, params: vae.VaeParams, specs: vae.VaeSpecs, cfg: TrainConfig, loss_log) -> dict:
    return save_checkpoint(prefix, params.flatten(), {
        "kind": "vae", "env": cfg.env.kind, "seed": cfg.env.seed, "specs": dataclasses.asdict(specs),
        "loss_log": [float(x) for x in loss_log], "config": cfg.to_ini()})


def load_vae(prefix) -> tuple[vae.VaeParams, vae.VaeSpecs, dict]:
    flat, manifest = load_checkpoint(prefix)
    meta = manifest["meta"]
    if meta.get("kind") != "vae":
        raise CheckpointError(f"{prefix}: not a VAE checkpoint (kind={meta.get('kind')!r})")
    specs = vae.VaeSpecs(**_tuples(meta["specs"]))
    layout = vae.init_vae(specs, np.random.default_rng(0)).flatten()
    flat, _ = load_checkpoint(prefix, expected=layout)
    return vae.VaeParams.from_flat(flat), specs, manifest


GAIL_PARTS = ("policy", "discriminator", "critic", "norm")


def save_gail(prefix, res: gail.GailResult, cfg: TrainConfig, vae_hash: str | None) -> dict:
    norm = ParamVector.from_arrays({"mean": res.norm.mean, "std": res.norm.std})
    flat = ParamVector.concat({"policy": res.policy.theta, "discriminator": res.psi, "critic": res.critic,
                               "norm": norm})
    return save_checkpoint(prefix, flat, {
        "kind": "gail", "env": cfg.env.kind, "seed": cfg.env.seed,
        "conditional": res.policy.alpha is not None, "vae_sha256": vae_hash,
        "specs": dataclasses.asdict(res.policy.specs), "gamma": cfg.gail.gamma, "lam": cfg.gail.lam,
        "config": cfg.to_ini()})


def load_gail(prefix, vae_model=None):
    flat, manifest = load_checkpoint(prefix)
    meta = manifest["meta"]
    if meta.get("kind") != "gail":
        raise CheckpointError(f"{prefix}: not a GAIL checkpoint (kind={meta.get('kind')!r})")
    specs = gail.GailSpecs(**_tuples(meta["specs"]))
    parts = flat.split(GAIL_PARTS)
    alpha = vae_specs = None
    if meta["conditional"]:
        if vae_model is None:
            raise UsageError("a conditional GAIL checkpoint needs --vae")
        alpha, vae_specs = vae_model[0].action_decoder, vae_model[1]
    policy = gail.ResidualPolicy(specs, parts["policy"], alpha, vae_specs)
    norm = gail.Standardizer(parts["norm"]["mean"], parts["norm"]["std"])
    return policy, parts["discriminator"], norm, manifest


def _task(meta):
    t = meta.get("task")
    return t if not isinstance(t, list) else [float(x) for x in t]


# --------------------------------------------------------------- commands

def cmd_gen_demos(cfg, args, out: Path):
    train, test = envs.generate_dataset(cfg.dataset_config(), rng_stream(cfg.env.seed, "dataset"))
    envs.save_trajectories(out / "train.jsonl", train)
    envs.save_trajectories(out / "test.jsonl", test)
    log.info("wrote %d train and %d test trajectories", len(train), len(test))
    return [], [out / "train.jsonl", out / "test.jsonl"]


def cmd_train_vae(cfg, args, out: Path):
    path = Path(args.dataset or out / "train.jsonl")
    data = load_dataset(path)
    env = default_env(cfg)
    specs = cfg.vae_specs(env.obs_dim, env.action_dim)
    params = vae.init_vae(specs, rng_stream(cfg.env.seed, "init"))
    res = vae.train_vae(data, specs, cfg.vae_train_config(), rng_stream(cfg.env.seed, "training"),
                        env.observe, params)
    save_vae(out / "vae", res.params, specs, cfg, res.loss_log)
    write_csv(out / "vae_loss.csv", [{"epoch": i, "loss": v} for i, v in enumerate(res.loss_log)])
    return [path], [out / "vae.json", out / "vae.bin", out / "vae_loss.csv"]


def _vae_arg(args, out):
    return Path(args.vae) if args.vae else out / "vae"


def cmd_train_gail(cfg, args, out: Path):
    path = Path(args.dataset or out / "train.jsonl")
    data = load_dataset(path)
    env = default_env(cfg)
    rng = rng_stream(cfg.env.seed, "training.gail")
    name = "gail_unconditional" if args.unconditional else "gail"
    inputs = [path]
    if args.unconditional:
        res = gail.unconditional_gail_train(data, env, cfg.gail_specs(env.obs_dim, env.action_dim, False),
                                            cfg.gail_config(), rng)
        vae_hash = None
    else:
        prefix = _vae_arg(args, out)
        params, vspecs, _ = load_vae(prefix)
        res = gail.diverse_gail_train(params, vspecs, data, env, cfg.gail_specs(env.obs_dim, env.action_dim),
                                      cfg.gail_config(), rng)
        vae_hash = file_sha256(prefix.with_suffix(".bin"))
        inputs += [prefix.with_suffix(".json"), prefix.with_suffix(".bin")]
    save_gail(out / name, res, cfg, vae_hash)
    metric = "mean_speed_diff" if env.kind == "walker" else "mean_endpoint_err"
    write_csv(out / f"{name}_metrics.csv", res.metrics,
              ["iteration", "mean_reward", "disc_loss", "policy_kl_step", metric])
    write_csv(out / f"{name}_trpo.csv", [dict(iteration=i, **dataclasses.asdict(d))
                                         for i, d in enumerate(res.trpo_log)])
    outs = [out / f"{name}.json", out / f"{name}.bin", out / f"{name}_metrics.csv", out / f"{name}_trpo.csv"]
    return inputs, outs


def evaluate(env, demos, imitations, cfg: TrainConfig, label: str) -> M.EvalReport:
    if env.kind == "walker":
        rep = M.EvalReport("speed_diff", cfg.eval.coverage_tol)
        for k, (d, i) in enumerate(zip(demos, imitations)):
            rep.add(k, _task(d.meta), M.speed_diff(d, i), policy=label, imitation_speed=M.mean_speed(i))
    else:
        rep = M.EvalReport("endpoint_error", cfg.eval.endpoint_tol)
        for k, (d, i) in enumerate(zip(demos, imitations)):
            rep.add(k, _task(d.meta), M.endpoint_error(d, i), policy=label,
                    imitation_end=[float(x) for x in i.states[-1, :2]])
    return rep


def vae_imitations(params, specs, env, demos, rng, deterministic=True):
    Z, _ = vae.posterior(params, specs, demos, env.observe)
    X0 = np.stack([d.states[0] for d in demos])
    S, A = vae.imitate_batch(params, specs, envs.batch_env(env, demos), Z, X0, demos[0].T, rng, deterministic)
    return [envs.Trajectory(S[j], A[j], dict(d.meta)) for j, d in enumerate(demos)]


def cmd_eval(cfg, args, out: Path):
    path = Path(args.dataset or out / "train.jsonl")
    demos = load_dataset(path)
    env = default_env(cfg)
    rng = rng_stream(cfg.env.seed + cfg.eval.seed_offset, "eval")
    inputs = [path]
    reports = {}
    vae_model = None
    if args.vae or not args.gail or (out / "vae.json").exists():
        prefix = _vae_arg(args, out)
        params, specs, _ = load_vae(prefix)
        vae_model = (params, specs)
        inputs += [prefix.with_suffix(".json"), prefix.with_suffix(".bin")]
        reports["vae"] = evaluate(env, demos, vae_imitations(params, specs, env, demos, rng), cfg, "vae")
    for g in args.gail or []:
        g = Path(g)
        policy, _, _, manifest = load_gail(g, vae_model)
        if manifest["meta"]["conditional"]:
            Z, _ = vae.posterior(vae_model[0], vae_model[1], demos, env.observe)
        else:
            Z = np.zeros((len(demos), 0))
        ims = gail.imitate_with_policy(policy, env, demos, Z, rng)
        reports[g.name] = evaluate(env, demos, ims, cfg, g.name)
        inputs += [g.with_suffix(".json"), g.with_suffix(".bin")]
    summary = {}
    rows = []
    for label, rep in reports.items():
        agg = rep.aggregates()
        if env.kind == "walker":
            speeds = [r["imitation_speed"] for r in rep.records]
            agg["mode_coverage"] = M.coverage_of_speeds(speeds, cfg.dataset.target_speeds,
                                                        cfg.eval.coverage_tol)
        summary[label] = agg
        (out / f"eval_{label}.json").write_text(rep.to_json() + "\n")
        rows += [{k: v for k, v in r.items() if not isinstance(v, list)} | {"task": json.dumps(r["task"])}
                 for r in rep.records]
    write_json(out / "eval_summary.json", summary)
    write_csv(out / "eval.csv", rows)
    outs = [out / f"eval_{k}.json" for k in reports] + [out / "eval_summary.json", out / "eval.csv"]
    return inputs, outs


def segment_deviation(e1, e2, ends) -> np.ndarray:
    """Distance of each end point from segment [e1, e2], relative to its length."""
    seg = e2 - e1
    L2 = float(seg @ seg)
    if L2 == 0.0:
        raise NumericalError("interpolation pair has identical endpoints")
    u = np.clip(((ends - e1) @ seg) / L2, 0.0, 1.0)
    return np.linalg.norm(ends - (e1 + u[:, None] * seg), axis=1) / np.sqrt(L2)


def interpolation_pairs(demos, n_pairs: int):
    """Pairs of distinct experts: (expert k, expert k+1 mod E), first rollout of each."""
    first = {}
    for i, d in enumerate(demos):
        first.setdefault(d.meta.get("expert", i), i)
    experts = sorted(first)
    if len(experts) < 2:
        raise UsageError("interpolation needs demonstrations from at least two experts")
    E = len(experts)
    return [(first[experts[k % E]], first[experts[(k + 1) % E]]) for k in range(n_pairs)]


def cmd_interpolate(cfg, args, out: Path):
    path = Path(args.dataset or out / "test.jsonl")
    demos = load_dataset(path)
    env = default_env(cfg)
    prefix = _vae_arg(args, out)
    params, specs, _ = load_vae(prefix)
    rng = rng_stream(cfg.env.seed + cfg.eval.seed_offset, "eval")
    Zm, _ = vae.posterior(params, specs, demos, env.observe)
    alphas = list(cfg.eval.alphas)
    rows, summary = [], []
    for k, (i, j) in enumerate(interpolation_pairs(demos, cfg.eval.interpolation_pairs)):
        zs = np.stack(vae.interpolate_embeddings(Zm[i], Zm[j], alphas))
        X0 = np.tile(demos[i].states[0], (len(alphas), 1))
        S, _ = vae.imitate_batch(params, specs, envs.batch_env(env, [demos[i]] * len(alphas)), zs, X0,
                                 demos[i].T, rng)
        if env.kind == "walker":
            ends = S[:, :, 1].mean(axis=1)[:, None]
            e1, e2 = np.array([M.mean_speed(demos[i])]), np.array([M.mean_speed(demos[j])])
        else:
            ends = S[:, -1, :2]
            e1, e2 = demos[i].states[-1, :2], demos[j].states[-1, :2]
        dev = segment_deviation(e1, e2, ends)
        for a, e, d in zip(alphas, ends, dev):
            rows.append({"pair": k, "demo_a": i, "demo_b": j, "alpha": a,
                         **{f"end_{c}": float(v) for c, v in enumerate(e)}, "deviation": float(d)})
        summary.append({"pair": k, "demo_a": i, "demo_b": j, "max_deviation": float(dev.max())})
    write_csv(out / "interpolation.csv", rows)
    write_json(out / "interpolation_summary.json", summary)
    return [path, prefix.with_suffix(".json"), prefix.with_suffix(".bin")], \
        [out / "interpolation.csv", out / "interpolation_summary.json"]


def _pick(demos, task):
    for i, d in enumerate(demos):
        if d.meta.get("task") == task:
            return i
    raise UsageError(f"no demonstration with task {task!r}")


def cmd_blend(cfg, args, out: Path):
    path = Path(args.dataset or out / "train.jsonl")
    demos = load_dataset(path)
    env = default_env(cfg)
    prefix = _vae_arg(args, out)
    params, specs, _ = load_vae(prefix)
    rng = rng_stream(cfg.env.seed + cfg.eval.seed_offset, "eval")
    if args.pair:
        i, j = args.pair
    elif env.kind == "walker":
        i, j = _pick(demos, 1.0), _pick(demos, 3.0)
    else:
        i, j = interpolation_pairs(demos, 1)[0]
    for k in (i, j):
        if not 0 <= k < len(demos):
            raise UsageError(f"demonstration index {k} out of range (have {len(demos)})")
    Zm, _ = vae.posterior(params, specs, [demos[i], demos[j]], env.observe)
    T = demos[i].T
    window = cfg.eval.blend_window
    switch = args.switch if args.switch is not None else (T - window) // 2
    tr = vae.blend_rollout(params, specs, envs.batch_env(env, [demos[i]]), Zm[0], Zm[1], switch, window, T,
                           rng, demos[i].states[0])
    w = vae.blend_schedule(switch, window, T)
    rows = [{"t": t, "weight": float(w[t]), **{f"x{c}": float(v) for c, v in enumerate(tr.states[t])}}
            for t in range(T)]
    write_csv(out / "blend.csv", rows)
    summary = {"demo_a": int(i), "demo_b": int(j), "switch_t": int(switch), "window": int(window)}
    if env.kind == "walker":
        late = tr.states[T - T // 4:, 1].mean()
        summary |= {"late_mean_speed": float(late), "speed_a": M.mean_speed(demos[i]),
                    "speed_b": M.mean_speed(demos[j])}
    else:
        summary |= {"end": tr.states[-1, :2].tolist(), "end_a": demos[i].states[-1, :2].tolist(),
                    "end_b": demos[j].states[-1, :2].tolist()}
    write_json(out / "blend_summary.json", summary)
    return [path, prefix.with_suffix(".json"), prefix.with_suffix(".bin")], \
        [out / "blend.csv", out / "blend_summary.json"]


def cmd_verify_theorem(cfg, args, out: Path):
    rows = theory.verify(cfg.eval.theorem_instances, cfg.env.seed)
    write_csv(out / "theorem.csv", rows)
    worst = max(max(r["theorem_residual"], r["jsd_residual"]) for r in rows)
    controls = sum(r["wrong_posterior_gap"] > 1e-3 for r in rows)
    write_json(out / "theorem_summary.json", {"instances": len(rows), "max_residual": worst,
                                              "negative_controls_above_1e-3": controls})
    if worst >= 1e-10:
        raise NumericalError(f"verify-theorem: residual {worst:.3e} exceeds 1e-10")
    return [], [out / "theorem.csv", out / "theorem_summary.json"]


def gradient_suite(seed: int = 0) -> list[dict]:
    """Finite-difference checks of the three training objectives on T = 3 data."""
    rng = np.random.default_rng(seed)
    rows = []
    vs = vae.VaeSpecs(obs_dim=3, action_dim=1, latent_dim=2, encoder_width=3, action_sizes=(4,), channels=2,
                      wavenet_layers=2, mixture_components=2)
    p = vae.init_vae(vs, rng).flatten()
    p = p.with_data(p.data + 0.2 * rng.normal(size=p.size))
    tr = envs.Trajectory(rng.normal(size=(4, 4)), rng.normal(size=(3, 1)))
    obs, acts = vae._stack([tr], envs.WalkerEnv().observe)
    eps = rng.normal(size=(1, 2))
    rows.append({"objective": "vae_loss", "parameters": p.size,
                 "max_rel_err": ad.check_gradient(lambda q: vae.batch_loss(q, vs, obs, acts, eps), p)})
    gs = gail.GailSpecs(obs_dim=3, action_dim=1, latent_dim=2, policy_sizes=(5,), disc_sizes=(5, 4))
    psi = gail.init_discriminator(gs, rng)
    grp = lambda: [(rng.normal(size=(3, 3)), rng.normal(size=(3, 1)), rng.normal(size=2)) for _ in range(2)]
    expert, fake = grp(), grp()
    rows.append({"objective": "discriminator_loss", "parameters": psi.size,
                 "max_rel_err": ad.check_gradient(lambda q: gail.discriminator_loss(q, gs, expert, fake), psi)})
    th = gail.init_policy_params(gs, rng)
    th = th.with_data(th.data + 0.3 * rng.normal(size=th.size))
    o, z, mu = rng.normal(size=(3, 3)), rng.normal(size=(3, 2)), rng.normal(size=(3, 1))
    b = trpo.RolloutBatch(o, o, z, rng.normal(size=(3, 1)), mu, rng.normal(size=3), np.zeros(3), (3,),
                          advantages=rng.normal(size=3))
    fn = gail.batch_dist_fn(gs)
    old = trpo._old_dist(fn, th, b)
    th2 = th.with_data(th.data + 0.1 * rng.normal(size=th.size))
    for k, label in enumerate(("trpo_surrogate", "trpo_kl")):
        rows.append({"objective": label, "parameters": th2.size, "max_rel_err": ad.check_gradient(
            lambda q, k=k: trpo.surrogate_and_kl(fn, q, b, old)[k], th2)})
    return rows


def cmd_gradcheck(cfg, args, out: Path):
    rows = gradient_suite(cfg.env.seed)
    write_csv(out / "gradcheck.csv", rows)
    bad = [r["objective"] for r in rows if not r["max_rel_err"] <= 1e-4]
    if bad:
        raise NumericalError(f"gradcheck: relative error above 1e-4 for {', '.join(bad)}")
    return [], [out / "gradcheck.csv"]


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train-vae": cmd_train_vae,
    "train-gail": cmd_train_gail,
    "eval": cmd_eval,
    "interpolate": cmd_interpolate,
    "blend": cmd_blend,
    "verify-theorem": cmd_verify_theorem,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diverse_imitation", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file (default: built-in defaults for --env)")
        p.add_argument("--env", choices=("walker", "reacher"), default="walker",
                       help="defaults to use when no --config is given")
        p.add_argument("--seed", type=int, help="override [env] seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train-vae", "train-gail", "eval", "interpolate", "blend"):
            p.add_argument("--dataset", help="trajectory file (.jsonl)")
        if name in ("train-gail", "eval", "interpolate", "blend"):
            p.add_argument("--vae", help="VAE checkpoint prefix (default: <out>/vae)")
        if name == "train-gail":
            p.add_argument("--unconditional", action="store_true", help="train the no-embedding baseline")
        if name == "eval":
            p.add_argument("--gail", action="append", help="GAIL checkpoint prefix (repeatable)")
        if name == "blend":
            p.add_argument("--pair", type=int, nargs=2, metavar=("FROM", "TO"), help="demonstration indices")
            p.add_argument("--switch", type=int, help="first step of the blend (default: centred)")
    return parser


def _rel(path: Path, out: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(out.resolve()))
    except ValueError:
        return str(path)


def run_command(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as err:  # --help
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = TrainConfig.load(args.config) if args.config else TrainConfig.default(args.env)
        cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](cfg, args, out)
        write_json(out / f"{args.command}.manifest.json", {
            "command": args.command, "seed": cfg.env.seed, "config": cfg.to_ini(),
            "inputs": {_rel(p, out): file_sha256(p) for p in inputs},
            "outputs": {_rel(p, out): file_sha256(p) for p in outputs}})
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
