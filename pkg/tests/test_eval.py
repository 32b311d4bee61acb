import numpy as np
import pytest

from noiseproj.diffusion import DiffusionEngine, NoiseSchedule, ScheduleConfig
from noiseproj.evalharness import (
    EvalReport, diversity_probe, eval_alignment, frechet_distance,
    frechet_from_moments, inception_like_score, split_fid,
)
from noiseproj.nets import BackboneConfig, Projector
from noiseproj.testbed import WorldConfig, make_world


def rng(key=0):
    return np.random.Generator(np.random.Philox(key=key))


@pytest.fixture(scope="module")
def tiny():
    world = make_world(WorldConfig(latent_shape=(2, 4, 4), n_tokens=4, n_prompts=2,
                                   tokens_per_prompt=2, d_txt=8))
    engine = DiffusionEngine(world, NoiseSchedule(ScheduleConfig(T=10)))
    return world, engine


def test_frechet_distance_zero_for_identical_sets():
    x = rng(1).standard_normal((200, 4))
    assert frechet_distance(x, x.copy()) < 1e-8


def test_frechet_from_moments_scalar_analytic():
    # 1-D Gaussians: (mu_a-mu_b)^2 + (sqrt(va)-sqrt(vb))^2
    d = frechet_from_moments(np.array([1.0]), np.array([[4.0]]),
                             np.array([3.0]), np.array([[9.0]]))
    assert np.isclose(d, (1 - 3) ** 2 + (2 - 3) ** 2)


def test_frechet_distance_grows_with_mean_shift():
    g = rng(2)
    a = g.standard_normal((300, 3))
    near = frechet_distance(a, g.standard_normal((300, 3)) + 0.1)
    far = frechet_distance(a, g.standard_normal((300, 3)) + 2.0)
    assert near < far


def test_frechet_distance_needs_enough_samples():
    with pytest.raises(ValueError):
        frechet_distance(np.zeros((3, 5)), np.zeros((3, 5)))


def test_split_fid_small_for_iid_features():
    feats = rng(3).standard_normal((400, 4))
    val = split_fid(feats)
    assert 0.0 <= val < 0.5
    assert split_fid(feats) == val   # deterministic


def test_inception_like_score_bounds(tiny):
    world, _ = tiny
    g = rng(4)
    samples = g.standard_normal((50, world.latent_size))
    score = inception_like_score(samples, world)
    assert score >= 1.0
    with pytest.raises(ValueError):
        inception_like_score(samples[:5], world)


def test_eval_alignment_baseline_deterministic(tiny):
    world, engine = tiny
    a = eval_alignment(engine, world, None, (0, 10))
    b = eval_alignment(engine, world, None, (0, 10))
    assert a.to_json() == b.to_json()
    assert a.method == "pretrained"
    assert len(a.all_scores) == 10 * len(world.prompts)
    assert 0.0 <= a.mean <= 99.0
    with pytest.raises(ValueError):
        eval_alignment(engine, world, None, (5, 5))


def test_eval_alignment_identity_projector_matches_baseline(tiny):
    world, engine = tiny
    cfg = BackboneConfig(latent_shape=world.config.latent_shape, d_model=8,
                         n_heads=2, n_experts=2, expert_hidden=8,
                         unet_channels=6, d_txt=world.config.d_txt)
    proj = Projector(cfg, rng(5))
    base = eval_alignment(engine, world, None, (0, 8))
    via = eval_alignment(engine, world, proj, (0, 8))
    assert via.method == "projector"
    assert via.sentence_scores == base.sentence_scores
    assert via.token_scores == base.token_scores


def test_eval_report_json_shape(tiny):
    world, engine = tiny
    rep = eval_alignment(engine, world, None, (0, 6))
    j = rep.to_json()
    assert set(j) == {"method", "seed_range", "mean", "std",
                      "sentence_scores", "token_scores"}
    assert j["seed_range"] == [0, 6]
    assert np.isclose(j["std"], rep.std)


def test_diversity_probe_structure(tiny):
    world, engine = tiny
    record = diversity_probe(engine, world, None, prompt_id=0, n_samples=120)
    assert set(record) == {"pretrained"}
    assert record["pretrained"]["split_fid"] >= 0.0
    assert record["pretrained"]["is_like"] >= 1.0
    with pytest.raises(ValueError):
        diversity_probe(engine, world, None, prompt_id=0, n_samples=10)
