"""Acceptance suite: end-to-end properties of the full pipeline.

These tests exercise the default configuration at full scale (training
runs included), so the module takes tens of minutes. Heavy artifacts are
built once in session fixtures and shared across criteria.
"""

import copy
import time

import numpy as np
import pytest

from noiseproj.diffusion import (DiffusionEngine, GuidanceConfig, Mixture,
                                 NoiseSchedule, ScheduleConfig)
from noiseproj.evalharness import diversity_probe, eval_alignment
from noiseproj.nets import BackboneConfig, Decoder, Projector, RewardModel
from noiseproj.projector import (FrozenReward, TrainingHyperparams,
                                 kl_constraint, logit_loss, pretrain, refine,
                                 train_final, unweighted_dpo_loss,
                                 weight_vector)
from noiseproj.reward import generate_dataset, train_reward
from noiseproj.tensor import Tensor
from noiseproj.testbed import WorldConfig, make_world, seed_to_noise

RNG = lambda key: np.random.Generator(np.random.Philox(key=key))


@pytest.fixture(scope="session")
def world():
    return make_world(WorldConfig())


@pytest.fixture(scope="session")
def engine(world):
    return DiffusionEngine(world, NoiseSchedule(ScheduleConfig()))


@pytest.fixture(scope="session")
def timings():
    return {}


@pytest.fixture(scope="session")
def dataset(world, engine, timings):
    t0 = time.monotonic()
    ds = generate_dataset(world, engine, [p.prompt_id for p in world.prompts],
                          (0, 300))
    timings["gen_data"] = time.monotonic() - t0
    return ds


@pytest.fixture(scope="session")
def reward_run(dataset, world, timings):
    model = RewardModel(BackboneConfig(), RNG(11))
    t0 = time.monotonic()
    report = train_reward(dataset, model, world)
    timings["train_reward"] = time.monotonic() - t0
    return model, report


@pytest.fixture(scope="session")
def frozen(reward_run):
    return FrozenReward(reward_run[0])


@pytest.fixture(scope="session")
def warmup_run(world, timings):
    projector = Projector(BackboneConfig(), RNG(13))
    decoder = Decoder(BackboneConfig(), RNG(17))
    t0 = time.monotonic()
    report = pretrain(projector, decoder, world)
    timings["warmup"] = time.monotonic() - t0
    return projector, report


@pytest.fixture(scope="session")
def final_run(warmup_run, frozen, world, engine, timings):
    projector = copy.deepcopy(warmup_run[0])
    t0 = time.monotonic()
    report = train_final(projector, frozen, world, engine)
    timings["train_final"] = time.monotonic() - t0
    return projector, report


@pytest.fixture(scope="session")
def final_run_tau0(warmup_run, frozen, world, engine):
    projector = copy.deepcopy(warmup_run[0])
    from dataclasses import replace
    hyper = replace(TrainingHyperparams(), tau=0.0)
    report = train_final(projector, frozen, world, engine, hyper)
    return projector, report


@pytest.fixture(scope="session")
def unseen_evals(final_run, world, engine, timings):
    t0 = time.monotonic()
    base = eval_alignment(engine, world, None, (350, 500))
    proj = eval_alignment(engine, world, final_run[0], (350, 500))
    timings["eval"] = time.monotonic() - t0
    return base, proj


# ------------------------------------------------------- 1: gradients


def test_gradient_correctness_of_final_objective():
    # the full final-stage loss graph (refine -> frozen reward -> weighted
    # softplus + tau * KL) against central finite differences in float64.
    # Per-block and per-loss checks live in the unit suites; this is the
    # composite.
    cfg = BackboneConfig(latent_shape=(2, 4, 4), d_model=8, n_heads=2,
                         n_experts=2, expert_hidden=8, unet_channels=6, d_txt=8)
    wcfg = WorldConfig(latent_shape=(2, 4, 4), d_txt=8, n_tokens=4,
                       n_prompts=2, tokens_per_prompt=2)
    w = make_world(wcfg)
    projector = Projector(cfg, RNG(1), dtype=np.float64)
    g = RNG(2)
    for p in projector.parameters():
        p.data = p.data + g.normal(0.0, 0.05, size=p.data.shape)
    frozen = FrozenReward(RewardModel(cfg, RNG(3), dtype=np.float64))
    hyper = TrainingHyperparams(tau=2.0)
    batch = [(0, 0), (1, 0), (2, 1)]

    def scalar():
        logit, kl, _ = logit_loss(batch, projector, frozen, w, hyper)
        return float((logit + kl * hyper.tau).item())

    projector.zero_grad()
    logit, kl, _ = logit_loss(batch, projector, frozen, w, hyper)
    (logit + kl * hyper.tau).backward()

    h = 1e-5
    checked = 0
    for name, p in projector.named_parameters():
        # tensors whose true gradient sits at the float64 finite-difference
        # noise floor (~1e-11 absolute) cannot meet a relative tolerance
        if p.grad is None or p.data.size > 80 or np.abs(p.grad).max() < 1e-5:
            continue
        num = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            i = it.multi_index
            orig = p.data[i]
            p.data[i] = orig + h
            fp = scalar()
            p.data[i] = orig - h
            fm = scalar()
            p.data[i] = orig
            num[i] = (fp - fm) / (2 * h)
            it.iternext()
        denom = max(np.abs(num).max(), 1e-8)
        assert np.abs(p.grad - num).max() / denom < 1e-4, name
        checked += 1
        if checked >= 3:
            break
    assert checked >= 1


# ------------------------------------------------------- 2: exact score


def test_exact_epsilon_matches_finite_difference_score():
    g = RNG(5)
    wcfg = WorldConfig(latent_shape=(2, 2, 2), d_txt=4, n_tokens=2,
                       n_prompts=2, tokens_per_prompt=1)
    w = make_world(wcfg)
    eng = DiffusionEngine(w, NoiseSchedule(ScheduleConfig()))
    dim = 8
    h = 1e-4
    for case in range(100):
        t = int(g.integers(1, eng.schedule.config.T))
        pid = [0, 1, None][case % 3]
        x = g.normal(0.0, 1.5, size=dim)
        got = eng.eps_exact(x, t, pid)
        marg = eng.mixture(pid).marginal(t, eng.schedule)
        sigma = eng.schedule.sigma[t]
        grad = np.zeros(dim)
        for i in range(dim):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            grad[i] = float(marg.log_density(xp) - marg.log_density(xm)) / (2 * h)
        want = -sigma * grad
        assert np.abs(got - want).max() / max(np.abs(want).max(), 1e-8) < 1e-5


# ------------------------------------------------------- 3: pushforward


def test_ode_pushforward_recovers_single_gaussian():
    dim = 8
    m = np.linspace(-1.0, 1.0, dim)
    wcfg = WorldConfig(latent_shape=(2, 2, 2), d_txt=4, n_tokens=1,
                       n_prompts=1, tokens_per_prompt=1)
    w = make_world(wcfg)
    w.data[0].means = m[None, :].copy()
    w.data[0].variances = np.ones((1, dim))
    w.data[0].weights = np.array([1.0])
    # a finer time grid than the pipeline default: the DDIM discretization
    # bias otherwise dominates the covariance tolerance
    fine = NoiseSchedule(ScheduleConfig(T=200, beta_min=1e-3, beta_max=0.09))
    eng = DiffusionEngine(w, fine)
    g = RNG(7)
    eps = g.standard_normal((10_000, dim))
    x0 = eng.sample_ode(eps, 0, guidance=GuidanceConfig(w=0.0))
    assert np.abs(x0.mean(axis=0) - m).max() < 0.05
    cov = np.cov(x0, rowvar=False)
    assert np.linalg.norm(cov - np.eye(dim), ord="fro") < 0.1


# ------------------------------------------------------- 4: identities


def test_loss_identities():
    for value in (1.3, -0.2):
        z = Tensor(np.array(value))
        assert abs(unweighted_dpo_loss(z, z).item() - np.log(2.0)) < 1e-9

    mu = Tensor(np.zeros((3, 4)))
    sigma = Tensor(np.ones((3, 4)))
    assert kl_constraint(mu, sigma).item() == 0.0

    w = weight_vector(5.0)
    assert w[0] == 5.0 + 1.0 - 1.0  # 1 + w_max - w_max^0 = w_max
    assert w[9] == 1.0
    assert all(w[i] > w[i + 1] for i in range(9))


def test_weighted_loss_with_unit_weights_reduces_to_plain_sum(monkeypatch):
    import noiseproj.projector as proj_mod
    cfg = BackboneConfig(latent_shape=(2, 4, 4), d_model=8, n_heads=2,
                         n_experts=2, expert_hidden=8, unet_channels=6, d_txt=8)
    wcfg = WorldConfig(latent_shape=(2, 4, 4), d_txt=8, n_tokens=4,
                       n_prompts=2, tokens_per_prompt=2)
    w = make_world(wcfg)
    projector = Projector(cfg, RNG(1))
    frozen = FrozenReward(RewardModel(cfg, RNG(3)))
    hyper = TrainingHyperparams(beta_dpo=1.0)
    batch = [(0, 0), (1, 1), (2, 0)]
    monkeypatch.setattr(proj_mod, "weight_vector", lambda w_max: np.ones(10))
    logit, _, _ = logit_loss(batch, projector, frozen, w, hyper)

    total = 0.0
    shape = w.config.latent_shape
    for seed, pid in batch:
        eps = np.stack([seed_to_noise(seed, shape)])
        text = proj_mod._prompt_text(w, pid, 1)
        refined, _, _ = refine(projector, eps, text)
        r_ref, _ = proj_mod._batch_rewards(frozen, refined, w, pid, True)
        r_init, _ = proj_mod._batch_rewards(frozen, Tensor(eps), w, pid, False)
        total += unweighted_dpo_loss(r_ref, Tensor(r_init.astype(np.float32))).item()
    assert abs(logit.item() - total) < 1e-4


# ------------------------------------------------------- 5: identity init


def test_fresh_projector_is_bit_exact_identity(world, engine):
    projector = Projector(BackboneConfig(), RNG(13))
    g = RNG(31)
    shape = world.config.latent_shape
    for _ in range(100):
        seed = int(g.integers(0, 10_000))
        pid = int(g.integers(0, len(world.prompts)))
        eps = np.stack([seed_to_noise(seed, shape)])
        from noiseproj.projector import _prompt_text
        refined, _, _ = refine(projector, eps, _prompt_text(world, pid, 1))
        assert np.array_equal(refined.data, eps.astype(np.float32))

    base = eval_alignment(engine, world, None, (600, 620))
    via = eval_alignment(engine, world, projector, (600, 620))
    assert base.sentence_scores == via.sentence_scores


# ------------------------------------------------------- 6: distillation


def test_reward_distillation_quality(reward_run, timings):
    final = reward_run[1]["epochs"][-1]
    assert final["holdout_within1"] >= 0.9
    assert final["holdout_spearman"] >= 0.8
    assert timings["train_reward"] < 300.0


# ------------------------------------------------------- 7: warmup


def test_warmup_gaussian_proximity(warmup_run, world):
    projector = warmup_run[0]
    from noiseproj.projector import _prompt_text
    shape = world.config.latent_shape
    n = 10_000
    per_prompt = n // len(world.prompts)
    mus, sigmas, refined = [], [], []
    g = RNG(41)
    for prompt in world.prompts:
        eps = g.standard_normal((per_prompt,) + shape).astype(np.float32)
        text = _prompt_text(world, prompt.prompt_id, per_prompt)
        for s in range(0, per_prompt, 500):
            out, mu, sigma = refine(projector, eps[s:s + 500],
                                    text[s:s + 500])
            mus.append(mu.data)
            sigmas.append(sigma.data)
            refined.append(out.data)
    mus = np.concatenate(mus)
    sigmas = np.concatenate(sigmas)
    refined = np.concatenate(refined).reshape(len(mus), -1)
    assert np.mean(np.abs(mus)) < 0.1
    assert np.mean(np.abs(sigmas - 1.0)) < 0.1
    assert np.abs(refined.mean(axis=0)).max() < 0.05
    assert np.abs(refined.var(axis=0) - 1.0).max() < 0.1


# ------------------------------------------------------- 8: alignment


def test_projector_improves_unseen_alignment(final_run, unseen_evals,
                                             world, engine, timings):
    base_unseen, proj_unseen = unseen_evals
    unseen_gain = proj_unseen.mean - base_unseen.mean
    assert unseen_gain >= 3.0

    hyper = TrainingHyperparams()
    base_seen = eval_alignment(engine, world, None, hyper.train_seed_range)
    proj_seen = eval_alignment(engine, world, final_run[0], hyper.train_seed_range)
    seen_gain = proj_seen.mean - base_seen.mean
    assert seen_gain >= unseen_gain

    total = sum(timings[k] for k in
                ("gen_data", "train_reward", "warmup", "train_final", "eval"))
    assert total < 1200.0


# ------------------------------------------------------- 9: diversity


def test_projector_narrows_output_diversity(final_run, world, engine):
    record = diversity_probe(engine, world, final_run[0], prompt_id=0,
                             n_samples=1000)
    assert record["projector"]["split_fid"] < record["pretrained"]["split_fid"]
    assert record["projector"]["is_like"] < record["pretrained"]["is_like"]


# ------------------------------------------------------- 10: tau role


def test_zero_tau_inflates_constraint_and_degrades_alignment(
        final_run, final_run_tau0, unseen_evals, world, engine):
    kl_tau200 = final_run[1]["final"]["mean_kl"]
    kl_tau0 = final_run_tau0[1]["final"]["mean_kl"]
    assert kl_tau0 >= 5.0 * kl_tau200

    tau0_unseen = eval_alignment(engine, world, final_run_tau0[0], (350, 500))
    assert unseen_evals[1].mean >= tau0_unseen.mean


# ------------------------------------------------------- 11: determinism


def test_stage_reruns_are_byte_identical(tmp_path):
    from noiseproj.cli import main

    cfg_text = """
latent_shape = [2, 4, 4]
d_txt = 8
n_tokens = 4
n_prompts = 2
tokens_per_prompt = 2
T = 10
d_model = 8
n_heads = 2
n_experts = 2
expert_hidden = 8
unet_channels = 6
reward_epochs = 2
reward_batch_size = 16
train_epochs_warmup = 2
train_epochs_final = 2
train_batch_size = 4
train_train_seed_range = [0, 6]
train_probe_seed_range = [20, 24]
data_seed_range = [0, 10]
eval_seed_range = [20, 26]
diversity_samples = 120
tau_values = [50.0]
"""
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(cfg_text)
    out = tmp_path / "out"
    stages = ["make-world", "gen-data", "train-reward", "warmup",
              "train-projector", "eval", "diversity"]
    artifacts = ["world.json", "reward_dataset.jsonl", "reward.ckpt",
                 "train_reward_report.json", "projector-warmup.ckpt",
                 "projector-final.ckpt", "train_projector_report.json",
                 "eval_report.json", "eval_summary.csv",
                 "diversity_report.json"]

    def run_all():
        for stage in stages:
            assert main([stage, "--config", str(cfg), "--out", str(out)]) == 0
        return {name: (out / name).read_bytes() for name in artifacts}

    first = run_all()
    import shutil
    shutil.rmtree(out)
    second = run_all()
    for name in artifacts:
        assert first[name] == second[name], name
