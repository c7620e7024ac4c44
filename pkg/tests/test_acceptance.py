"""Acceptance suite: one PASS/FAIL line per criterion.

The training pipelines run through the real command-line entry point.  Their
outputs are cached under ``.acceptance_runs/`` in a directory keyed by the
config and the package sources, so a re-run with unchanged code only repeats
the cheap checks.  Delete the directory to force a fresh run.
"""

import csv
import hashlib
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

import diverse_imitation
from diverse_imitation import autodiff as ad
from diverse_imitation import cli, nets, theory, trpo, vae
from diverse_imitation.autodiff import Var
from diverse_imitation.checkpoint import file_sha256
from diverse_imitation.config import TrainConfig
from diverse_imitation.gail import GailSpecs, batch_dist_fn, init_policy_params, policy_dist
from diverse_imitation.nets import StateDecoderSpec

ROOT = Path(__file__).resolve().parents[1]
RUNS = ROOT / ".acceptance_runs"
SRC = Path(diverse_imitation.__file__).parent


def _source_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(SRC.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _run(out: Path, *argv):
    code = cli.run_command([*argv, "--out", str(out)])
    assert code == 0, f"{argv[0]} exited with {code}"


class Pipeline:
    """A cached sequence of subcommands sharing one output directory."""

    def __init__(self, tag: str, cfg: TrainConfig):
        ini = cfg.to_ini()
        key = hashlib.sha256((ini + _source_hash()).encode()).hexdigest()[:16]
        self.out = RUNS / f"{tag}-{key}"
        self.out.mkdir(parents=True, exist_ok=True)
        self.config = self.out / "config.ini"
        self.config.write_text(ini)
        self._times = self.out / "timings.json"

    def timings(self) -> dict:
        return json.loads(self._times.read_text()) if self._times.exists() else {}

    def step(self, name: str, *argv):
        """Run ``argv`` once; later calls reuse the recorded outputs."""
        times = self.timings()
        if name in times:
            return times[name]
        t0 = time.perf_counter()
        _run(self.out, *argv, "--config", str(self.config))
        times[name] = time.perf_counter() - t0
        self._times.write_text(json.dumps(times, indent=1, sort_keys=True))
        return times[name]

    def json(self, name):
        return json.loads((self.out / name).read_text())


@pytest.fixture(scope="session")
def reacher_run():
    p = Pipeline("reacher", TrainConfig.default("reacher"))
    p.step("gen-demos", "gen-demos")
    p.step("train-vae", "train-vae")
    p.step("eval-test", "eval", "--dataset", str(p.out / "test.jsonl"))
    shutil.copy(p.out / "eval_summary.json", p.out / "heldout_summary.json")
    p.step("interpolate", "interpolate")
    return p


@pytest.fixture(scope="session")
def walker_run():
    p = Pipeline("walker", TrainConfig.default("walker"))
    p.step("gen-demos", "gen-demos")
    p.step("train-vae", "train-vae")
    p.step("train-gail", "train-gail")
    p.step("train-gail-unconditional", "train-gail", "--unconditional")
    p.step("eval", "eval", "--gail", str(p.out / "gail"), "--gail", str(p.out / "gail_unconditional"))
    p.step("blend", "blend")
    return p


# ------------------------------------------------------------ exact maths

def test_c01_posterior_mixing_identity(criterion):
    t0 = time.perf_counter()
    rows = theory.verify(100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r["theorem_residual"] for r in rows)
    controls = sum(r["wrong_posterior_gap"] > 1e-3 for r in rows)
    sizes_ok = all(r["nz"] <= 4 and r["ny"] <= 8 for r in rows)
    ok = worst < 1e-10 and controls >= 95 and elapsed < 10 and sizes_ok
    criterion(1, ok, f"max residual {worst:.2e}, negative controls {controls}/100, {elapsed:.2f}s")
    assert ok


def test_c02_jsd_identity(criterion):
    t0 = time.perf_counter()
    rows = theory.verify(100, seed=0)
    worst = max(r["jsd_residual"] for r in rows)
    rng = np.random.default_rng(1)
    exact = []
    for _ in range(100):
        inst = theory.random_instance(rng)
        same = theory.DiscreteGanInstance(inst.pz, inst.py_given_z, inst.py_given_z.copy(), inst.d)
        exact.append(theory.c_of_g(same) == -theory.LOG4)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and all(exact) and elapsed < 10
    criterion(2, ok, f"max residual {worst:.2e}, C(G=p) exact on {sum(exact)}/100, {elapsed:.2f}s")
    assert ok


def test_c03_gradient_suite(criterion):
    t0 = time.perf_counter()
    rows = cli.gradient_suite(seed=0)
    elapsed = time.perf_counter() - t0
    errs = {r["objective"]: r["max_rel_err"] for r in rows}
    ok = set(errs) == {"vae_loss", "discriminator_loss", "trpo_surrogate", "trpo_kl"} \
        and max(errs.values()) <= 1e-4 and elapsed < 120
    criterion(3, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.1f}s")
    assert ok


def _mc_within(samples, exact, k=3.0):
    se = samples.std(ddof=1) / np.sqrt(samples.size)
    return abs(samples.mean() - exact) <= k * se, abs(samples.mean() - exact) / se


def test_c04_closed_form_kls(criterion):
    rng = np.random.default_rng(4)
    n, D = 10 ** 6, 3
    zs = []
    for _ in range(10):
        m, ls = rng.normal(size=D), 0.5 * rng.normal(size=D)
        exact = float(vae.kl_standard_normal(m, ls))
        x = m + np.exp(ls) * rng.standard_normal((n, D))
        ratio = norm.logpdf(x, m, np.exp(ls)).sum(axis=1) - norm.logpdf(x).sum(axis=1)
        zs.append(_mc_within(ratio, exact))

        m0, s0, m1, s1 = rng.normal(size=D), 0.5 * rng.normal(size=D), rng.normal(size=D), 0.5 * rng.normal(size=D)
        exact = float(trpo.diag_gaussian_kl(m0[None], s0[None], m1[None], s1[None])[0])
        x = m0 + np.exp(s0) * rng.standard_normal((n, D))
        ratio = norm.logpdf(x, m0, np.exp(s0)).sum(axis=1) - norm.logpdf(x, m1, np.exp(s1)).sum(axis=1)
        zs.append(_mc_within(ratio, exact))
    ok = all(z[0] for z in zs)
    criterion(4, ok, f"{sum(z[0] for z in zs)}/20 within 3 SE, worst {max(z[1] for z in zs):.2f} SE")
    assert ok


def test_c05_state_decoder_causality(criterion):
    bad = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        D = int(rng.integers(2, 7))
        spec = StateDecoderSpec(D, 3, channels=int(rng.integers(2, 6)), num_layers=int(rng.integers(1, 4)),
                                mixture_components=int(rng.integers(1, 4)))
        p = nets.init_state_decoder(spec, rng)
        p = p.with_data(p.data + 0.3 * rng.normal(size=p.size))
        B = 3
        z, xp = rng.normal(size=(B, 3)), rng.normal(size=(B, D))
        xn = Var(rng.normal(size=(B, D)))
        lp = nets.state_decoder_component_log_probs(p.arrays(), spec, z, xp, xn)
        for d in range(D):
            g, = ad.grad(ad.sum(ad.index(lp, (slice(None), slice(0, d + 1)))), [xn])
            bad += not (np.all(g[:, d + 1:] == 0.0) and np.all(g[:, : d + 1] != 0.0))
    criterion(5, bad == 0, f"20 instances, {bad} prefix sums with future dependence")
    assert bad == 0


# ------------------------------------------------------------- TRPO

def _bandit(steps=50, seed=0, max_kl=0.01):
    rng = np.random.default_rng(seed)
    specs = GailSpecs(obs_dim=1, action_dim=1, latent_dim=0, policy_sizes=(), init_log_std=0.0)
    th = init_policy_params(specs, rng)
    fn = batch_dist_fn(specs)
    N = 256
    obs, none, zero = np.ones((N, 1)), np.zeros((N, 0)), np.zeros((N, 1))
    log, mean = [], None
    for _ in range(steps):
        m, s = (np.asarray(v) for v in policy_dist(th.arrays(), specs, obs, none, zero))
        a = m + np.exp(s) * rng.standard_normal((N, 1))
        r = -((a[:, 0] - 2.0) ** 2)
        adv = (r - r.mean()) / (r.std() + 1e-8)
        lp = np.asarray(ad.gaussian_log_prob(a, m, s, axis=1))
        b = trpo.RolloutBatch(obs, obs, none, a, zero, lp, r, (1,) * N, advantages=adv)
        th, diag = trpo.trpo_step(fn, th, b, max_kl=max_kl)
        log.append(diag)
        mean = float(np.asarray(policy_dist(th.arrays(), specs, obs[:1], none[:1], zero[:1])[0])[0, 0])
        if abs(mean - 2.0) < 0.1:
            break
    return mean, log


def _contract_violations(rows, max_kl):
    return [r for r in rows if r["accepted"] and not (r["kl"] <= 1.5 * max_kl
                                                       and r["surrogate_after"] >= r["surrogate_before"])]


def test_c06_trpo_contract(criterion, walker_run):
    cfg = TrainConfig.from_ini(walker_run.config.read_text())
    with open(walker_run.out / "gail_trpo.csv") as fh:
        rows = [{"accepted": r["accepted"] == "True", "kl": float(r["kl"]),
                 "surrogate_before": float(r["surrogate_before"]),
                 "surrogate_after": float(r["surrogate_after"])} for r in csv.DictReader(fh)]
    bad = _contract_violations(rows, cfg.gail.max_kl)
    mean, log = _bandit()
    bandit_rows = [{"accepted": d.accepted, "kl": d.kl, "surrogate_before": d.surrogate_before,
                    "surrogate_after": d.surrogate_after} for d in log]
    bad += _contract_violations(bandit_rows, 0.01)
    accepted = sum(r["accepted"] for r in rows)
    ok = len(rows) >= 100 and not bad and abs(mean - 2.0) < 0.1 and len(log) <= 50
    criterion(6, ok, f"{len(rows)} walker steps ({accepted} accepted), {len(bad)} violations; "
                     f"bandit mean {mean:.3f} after {len(log)} steps")
    assert ok


# ------------------------------------------------------------- reacher

def test_c07_reacher_imitation(criterion, reacher_run):
    cfg = TrainConfig.from_ini(reacher_run.config.read_text())
    n_train = len(cli.load_dataset(reacher_run.out / "train.jsonl"))
    agg = reacher_run.json("heldout_summary.json")["vae"]
    minutes = reacher_run.timings()["train-vae"] / 60
    frac = agg["fraction_within_tolerance"]
    ok = cfg.eval.endpoint_tol == 0.1 and n_train == 200 and frac >= 0.8 and minutes <= 30
    criterion(7, ok, f"{frac:.0%} of {agg['count']} held-out demos within 0.1 "
                     f"(median error {agg['median']:.3f}), VAE training {minutes:.1f} min")
    assert ok


def test_c08_latent_interpolation(criterion, reacher_run):
    pairs = reacher_run.json("interpolation_summary.json")
    with open(reacher_run.out / "interpolation.csv") as fh:
        alphas = sorted({float(r["alpha"]) for r in csv.DictReader(fh)})
    devs = np.array([p["max_deviation"] for p in pairs])
    frac = float(np.mean(devs <= 0.25))
    ok = len(pairs) == 10 and alphas == [0.0, 0.25, 0.5, 0.75, 1.0] and frac >= 0.8
    criterion(8, ok, f"{frac:.0%} of {len(pairs)} pairs within 25% (deviations {np.round(devs, 2).tolist()})")
    assert ok


def test_reacher_embeddings_group_by_expert(reacher_run):
    """Two rollouts of one expert embed closer together than rollouts of different experts."""
    params, specs, _ = cli.load_vae(reacher_run.out / "vae")
    demos = cli.load_dataset(reacher_run.out / "test.jsonl")
    Z, _ = vae.posterior(params, specs, demos, lambda s: s[..., :4])
    by = {}
    for i, d in enumerate(demos):
        by.setdefault(d.meta["expert"], []).append(i)
    experts = [e for e, idx in by.items() if len(idx) >= 2]
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(200):
        e, f = rng.choice(experts, 2, replace=False)
        a, b = rng.choice(by[e], 2, replace=False)
        c = rng.choice(by[f])
        wins += np.linalg.norm(Z[a] - Z[b]) < np.linalg.norm(Z[a] - Z[c])
    assert wins / 200 >= 0.7


# -------------------------------------------------------------- walker

def test_c09_adversarial_improvement(criterion, walker_run):
    cfg = TrainConfig.from_ini(walker_run.config.read_text())
    summary = walker_run.json("eval_summary.json")
    n_train = len(cli.load_dataset(walker_run.out / "train.jsonl"))
    base, ours = summary["vae"]["median"], summary["gail"]["median"]
    minutes = walker_run.timings()["train-gail"] / 60
    reduction = 1.0 - ours / base if base > 0 else float("-inf")
    ok = n_train == 60 and cfg.gail.iterations <= 300 and minutes <= 60 and reduction >= 0.3
    criterion(9, ok, f"median speed_diff VAE {base:.4f} vs diverse GAIL {ours:.4f} "
                     f"({reduction:+.0%} reduction), {cfg.gail.iterations} iterations in {minutes:.1f} min")
    assert ok


def test_c10_mode_coverage(criterion, walker_run):
    summary = walker_run.json("eval_summary.json")
    cond, uncond = summary["gail"]["mode_coverage"], summary["gail_unconditional"]["mode_coverage"]
    ok = cond >= 0.75 and uncond < cond
    criterion(10, ok, f"mode coverage conditional {cond:.2f}, unconditional {uncond:.2f}")
    assert ok


def test_walker_blend_moves_toward_second_speed(walker_run):
    s = walker_run.json("blend_summary.json")
    assert abs(s["late_mean_speed"] - s["speed_b"]) < abs(s["late_mean_speed"] - s["speed_a"])


# -------------------------------------------------------- determinism

SMALL = {
    "walker": "[env]\nkind = walker\n[dataset]\nrollouts = 1\ntest_rollouts = 1\n"
              "[vae]\nepochs = 2\nencoder_width = 8\naction_sizes = 8\nchannels = 4\nwavenet_layers = 2\n"
              "[gail]\niterations = 3\nn = 4\ndisc_steps = 2\npolicy_sizes = 8\ndisc_sizes = 8\n"
              "critic_sizes = 8\n[eval]\ntheorem_instances = 20\ninterpolation_pairs = 2\n",
    "reacher": "[env]\nkind = reacher\n[dataset]\ntrain_targets = 6\nrollouts = 2\ntest_targets = 3\n"
               "[vae]\nepochs = 2\nencoder_width = 8\naction_sizes = 8\nchannels = 4\nwavenet_layers = 2\n"
               "[gail]\niterations = 2\nn = 4\ndisc_steps = 2\npolicy_sizes = 8\ndisc_sizes = 8\n"
               "critic_sizes = 8\n[eval]\ninterpolation_pairs = 3\n",
}

SEQUENCE = [
    ["gen-demos"], ["train-vae"], ["train-gail"], ["train-gail", "--unconditional"],
    ["eval", "--gail", "{out}/gail", "--gail", "{out}/gail_unconditional"],
    ["interpolate"], ["blend"], ["verify-theorem"], ["gradcheck"],
]


def _all_outputs(out: Path) -> dict:
    return {p.name: file_sha256(p) for p in sorted(out.iterdir()) if p.is_file()}


def _sequence(out: Path, config: Path):
    for argv in SEQUENCE:
        _run(out, *[a.format(out=out) for a in argv], "--config", str(config))


def test_c11_determinism(criterion, tmp_path, walker_run):
    mismatched, compared = [], 0
    for kind, ini in SMALL.items():
        config = tmp_path / f"{kind}.ini"
        config.write_text(ini)
        a, b = tmp_path / kind / "a", tmp_path / kind / "b"
        _sequence(a, config)
        _sequence(b, config)
        ha, hb = _all_outputs(a), _all_outputs(b)
        compared += len(ha)
        mismatched += [f"{kind}/{k}" for k in sorted(set(ha) | set(hb)) if ha.get(k) != hb.get(k)]
    # the full-scale walker pipeline: re-run the cheap commands against its cached outputs
    fresh = tmp_path / "walker-full"
    fresh.mkdir()
    for name in ("train.jsonl", "test.jsonl", "vae.json", "vae.bin", "gail.json", "gail.bin",
                 "gail_unconditional.json", "gail_unconditional.bin"):
        shutil.copy(walker_run.out / name, fresh / name)
    config = walker_run.config
    _run(fresh / "demos", "gen-demos", "--config", str(config))
    _run(fresh, "eval", "--gail", str(fresh / "gail"), "--gail", str(fresh / "gail_unconditional"),
         "--config", str(config))
    _run(fresh, "blend", "--config", str(config))
    for name in ("train.jsonl", "test.jsonl"):
        compared += 1
        if file_sha256(fresh / "demos" / name) != file_sha256(walker_run.out / name):
            mismatched.append(f"walker-full/{name}")
    for name in ("eval.csv", "eval_summary.json", "blend.csv", "blend_summary.json"):
        compared += 1
        if file_sha256(fresh / name) != file_sha256(walker_run.out / name):
            mismatched.append(f"walker-full/{name}")
    ok = not mismatched
    criterion(11, ok, f"{compared} output files compared across re-runs, mismatches: {mismatched or 'none'}")
    assert ok
