"""Evaluation: oracle alignment over seed ranges, within-distribution
diversity probes (split Frechet distance and an inception-style score
built on the oracle's token profile), and the tau ablation driver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionEngine
from .projector import _prompt_text, refine
from .testbed import World, oracle_sentence_score, oracle_token_score, seed_to_noise


@dataclass
class EvalReport:
    method: str                   # "pretrained" | "projector"
    seed_range: tuple
    sentence_scores: dict = field(default_factory=dict)  # prompt_id -> [scores]
    token_scores: dict = field(default_factory=dict)     # prompt_id -> [[per-token]]

    @property
    def all_scores(self):
        out = []
        for pid in sorted(self.sentence_scores):
            out.extend(self.sentence_scores[pid])
        return out

    @property
    def mean(self):
        return float(np.mean(self.all_scores))

    @property
    def std(self):
        return float(np.std(self.all_scores))

    def to_json(self):
        return {
            "method": self.method,
            "seed_range": list(self.seed_range),
            "mean": self.mean,
            "std": self.std,
            "sentence_scores": {str(k): v for k, v in sorted(self.sentence_scores.items())},
            "token_scores": {str(k): v for k, v in sorted(self.token_scores.items())},
        }


def eval_alignment(engine: DiffusionEngine, world: World, projector, seed_range):
    """Oracle sentence scores for every (seed, prompt); projector=None is
    the pretrained baseline, otherwise the noise is refined first."""
    lo, hi = seed_range
    if hi <= lo:
        raise ValueError(f"empty seed range [{lo}, {hi})")
    shape = world.config.latent_shape
    eps = np.stack([seed_to_noise(s, shape) for s in range(lo, hi)])
    report = EvalReport(method="projector" if projector is not None else "pretrained",
                        seed_range=(lo, hi))
    for prompt in world.prompts:
        pid = prompt.prompt_id
        if projector is not None:
            text = _prompt_text(world, pid, len(eps))
            refined, _, _ = refine(projector, eps, text)
            flat = refined.data.reshape(len(eps), -1).astype(np.float64)
        else:
            flat = eps.reshape(len(eps), -1).astype(np.float64)
        x0 = engine.sample_ode(flat, pid)
        report.sentence_scores[pid] = [oracle_sentence_score(x, prompt, world) for x in x0]
        report.token_scores[pid] = [
            [oracle_token_score(x, world.token(tid)) for tid in prompt.token_ids]
            for x in x0
        ]
    return report


def frechet_distance(features_a, features_b, eps_reg=1e-6):
    """Frechet distance between Gaussians fit to two feature sets:
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The matrix square root uses a symmetric eigendecomposition with
    negative eigenvalues clamped at zero; degenerate covariances are
    regularized with eps_reg * I.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    dim = a.shape[1]
    if len(a) < dim + 1 or len(b) < dim + 1:
        raise ValueError(f"need at least dim+1={dim + 1} samples per set")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(dim, dim)
    cov_b = np.cov(b, rowvar=False).reshape(dim, dim)
    for cov in (cov_a, cov_b):
        if np.linalg.eigvalsh(cov).min() < eps_reg:
            cov += eps_reg * np.eye(dim)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b):
    # (S_a S_b)^{1/2} via A = S_a^{1/2}: Tr((A S_b A)^{1/2}) is symmetric-safe
    sqrt_a = _sym_sqrt(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    tr_sqrt = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0.0, None)))
    diff = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def _sym_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _oracle_posterior(x0, world):
    """Oracle token-score profile over the full vocabulary, normalized."""
    profile = np.array([oracle_token_score(x0, t) for t in world.tokens], dtype=np.float64)
    total = profile.sum()
    if total == 0.0:
        return np.full(len(profile), 1.0 / len(profile))
    return profile / total


def inception_like_score(samples, world, n_folds=10, fold_seed=0):
    """exp(mean over folds of mean KL(p(y|x) || pooled posterior)), using
    the oracle token profile as the classifier posterior. Always >= 1."""
    samples = np.asarray(samples)
    if len(samples) < n_folds:
        raise ValueError(f"need at least {n_folds} samples, got {len(samples)}")
    posts = np.stack([_oracle_posterior(x, world) for x in samples])
    marginal = posts.mean(axis=0)
    rng = np.random.Generator(np.random.Philox(key=fold_seed))
    order = rng.permutation(len(samples))
    folds = np.array_split(order, n_folds)
    kls = []
    for fold in folds:
        p = posts[fold]
        kl = np.sum(p * (np.log(p + 1e-12) - np.log(marginal + 1e-12)), axis=1)
        kls.append(float(np.mean(kl)))
    return float(np.exp(np.mean(kls)))


def split_fid(features, n_shuffles=10, shuffle_seed=0):
    """Split the set into two halves, FID between them, averaged over
    n_shuffles deterministic reshuffles."""
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.Generator(np.random.Philox(key=shuffle_seed))
    n = len(features)
    vals = []
    for _ in range(n_shuffles):
        order = rng.permutation(n)
        half = n // 2
        vals.append(frechet_distance(features[order[:half]], features[order[half:half * 2]]))
    return float(np.mean(vals))


def diversity_probe(engine: DiffusionEngine, world: World, projector, prompt_id,
                    n_samples=1000, seed_start=1000):
    """Generate n_samples outputs for one prompt with and without the
    projector; report split-FID and the inception-like score for both.
    Features are the flattened output latents."""
    if n_samples < 100:
        raise ValueError("diversity_probe needs n_samples >= 100")
    shape = world.config.latent_shape
    eps = np.stack([seed_to_noise(s, shape) for s in range(seed_start, seed_start + n_samples)])
    flat = eps.reshape(n_samples, -1).astype(np.float64)
    record = {}
    x0_base = engine.sample_ode(flat, prompt_id)
    record["pretrained"] = {
        "split_fid": split_fid(x0_base),
        "is_like": inception_like_score(x0_base, world),
    }
    if projector is not None:
        text = _prompt_text(world, prompt_id, n_samples)
        refined, _, _ = refine(projector, eps, text)
        x0_proj = engine.sample_ode(refined.data.reshape(n_samples, -1).astype(np.float64),
                                    prompt_id)
        record["projector"] = {
            "split_fid": split_fid(x0_proj),
            "is_like": inception_like_score(x0_proj, world),
        }
    return record
