"""Projector training: VAE-style warmup (KL constraint + reconstruction),
then weighted DPO-style preference refinement against the frozen reward
model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nets import Decoder, Projector, RewardModel
from .optim import Adam, clip_grad_norm
from .reward import SCORE_VALUES, argmax_score, scalar_reward
from .tensor import Tensor
from .testbed import World, oracle_sentence_score, seed_to_noise


@dataclass
class TrainingHyperparams:
    lambda_kl: float = 1.0
    tau: float = 200.0
    beta_dpo: float = 1.0
    w_max: float = 5.0
    lr_warmup: float = 1e-3
    lr_final: float = 2e-4
    epochs_warmup: int = 30
    epochs_final: int = 25
    batch_size: int = 32
    grad_clip: float = 1.0
    train_seed_range: tuple = (0, 100)
    probe_seed_range: tuple = (350, 370)
    shuffle_seed: int = 321

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.w_max <= 1:
            raise ValueError("w_max must be > 1")
        if self.beta_dpo <= 0:
            raise ValueError("beta_dpo must be > 0")
        self.train_seed_range = tuple(self.train_seed_range)
        self.probe_seed_range = tuple(self.probe_seed_range)

    def to_json(self):
        d = dict(self.__dict__)
        d["train_seed_range"] = list(self.train_seed_range)
        d["probe_seed_range"] = list(self.probe_seed_range)
        return d

    @staticmethod
    def from_json(d):
        return TrainingHyperparams(**d)


def weight_vector(w_max):
    """w[i] = 1 + w_max - w_max^(i/9); strictly decreasing, w[0] = w_max,
    w[9] = 1."""
    if w_max <= 1:
        raise ValueError("w_max must be > 1")
    i = np.arange(10, dtype=np.float64)
    return 1.0 + w_max - w_max ** (i / 9.0)


def kl_constraint(mu_hat, sigma_hat, lam=1.0):
    """Mean over elements of (lam/2)(mu^2 + sigma^2 - 2 log sigma - 1);
    zero exactly at (mu, sigma) = (0, 1)."""
    if float(sigma_hat.data.min() if isinstance(sigma_hat, Tensor) else np.min(sigma_hat)) <= 0:
        raise ValueError("kl_constraint: sigma must be positive")
    if not isinstance(mu_hat, Tensor):
        mu_hat = Tensor(mu_hat)
    if not isinstance(sigma_hat, Tensor):
        sigma_hat = Tensor(sigma_hat)
    per_elem = mu_hat * mu_hat + sigma_hat * sigma_hat - 2.0 * sigma_hat.log() - 1.0
    return per_elem.mean() * (lam / 2.0)


def reconstruction_loss(backbone_out, decoded):
    """Mean squared error; symmetric in its arguments."""
    if backbone_out.shape != decoded.shape:
        raise ValueError(
            f"reconstruction_loss: shape mismatch {backbone_out.shape} vs {decoded.shape}")
    diff = backbone_out - decoded
    return (diff * diff).mean()


def unweighted_dpo_loss(r_refined, r_init):
    """log(1 + exp(-(r_refined - r_init))): softplus of the negative gap."""
    gap = r_refined - r_init
    if isinstance(gap, Tensor):
        return (-gap).softplus()
    return float(np.logaddexp(0.0, -gap))


def refine(projector: Projector, eps_init, text):
    """eps_refined = mu_hat + sigma_hat * eps_init (the final-training
    reparameterization: the input noise itself, no fresh draw).

    eps_init: (B, C, H, W) Tensor or array; text: (B, R, d_txt).
    Returns (eps_refined, mu_hat, sigma_hat).
    """
    if not isinstance(eps_init, Tensor):
        eps_init = Tensor(np.asarray(eps_init, dtype=np.float32))
    if not isinstance(text, Tensor):
        text = Tensor(np.asarray(text, dtype=np.float32))
    mu, sigma = projector(eps_init, text)
    return mu + sigma * eps_init, mu, sigma


def _prompt_text(world, prompt_id, batch, dtype=np.float32):
    rows = world.prompt(prompt_id).sentence_embedding.astype(dtype)
    return np.broadcast_to(rows, (batch,) + rows.shape).copy()


def pretrain(projector: Projector, decoder: Decoder, world: World,
             hyper: TrainingHyperparams = None):
    """Warmup: minimize KL constraint + reconstruction over random
    (seed, prompt) batches, drawing a fresh epsilon_normal per step for
    the reparameterization. The decoder is only needed here; callers
    drop it afterwards.
    """
    hyper = hyper or TrainingHyperparams()
    rng = np.random.Generator(np.random.Philox(key=hyper.shuffle_seed))
    shape = world.config.latent_shape
    lo, hi = hyper.train_seed_range
    seeds = np.arange(lo, hi)
    params = projector.parameters() + decoder.parameters()
    opt = Adam(params, lr=hyper.lr_warmup)
    steps_per_epoch = max(1, len(seeds) * len(world.prompts) // hyper.batch_size)
    report = {"epochs": []}
    initial = None
    bad_epochs = 0
    for epoch in range(hyper.epochs_warmup):
        epoch_loss = epoch_kl = epoch_rec = 0.0
        for _ in range(steps_per_epoch):
            pid = int(rng.integers(len(world.prompts)))
            batch_seeds = rng.choice(seeds, size=hyper.batch_size, replace=False)
            eps_init = np.stack([seed_to_noise(int(s), shape) for s in batch_seeds])
            text = Tensor(_prompt_text(world, pid, len(batch_seeds)))
            eps_t = Tensor(eps_init)
            mu, sigma, features = projector.forward_with_features(eps_t, text)
            eps_normal = Tensor(rng.standard_normal(eps_init.shape).astype(np.float32))
            eps_refined = mu + sigma * eps_normal
            l_kl = kl_constraint(mu, sigma, hyper.lambda_kl)
            l_rec = reconstruction_loss(features, decoder(eps_refined))
            loss = l_kl + l_rec
            for m in (projector, decoder):
                m.zero_grad()
            loss.backward()
            clip_grad_norm(params, hyper.grad_clip)
            opt.step()
            epoch_loss += loss.item()
            epoch_kl += l_kl.item()
            epoch_rec += l_rec.item()
        entry = {"epoch": epoch,
                 "loss": epoch_loss / steps_per_epoch,
                 "kl": epoch_kl / steps_per_epoch,
                 "reconstruction": epoch_rec / steps_per_epoch}
        report["epochs"].append(entry)
        if initial is None:
            initial = entry["loss"]
        bad_epochs = bad_epochs + 1 if entry["loss"] > 10.0 * max(initial, 1e-8) else 0
        if bad_epochs >= 3:
            raise RuntimeError(f"pretrain diverged at epoch {epoch} "
                               f"(loss {entry['loss']:.3g} vs initial {initial:.3g})")
    report["final"] = dict(report["epochs"][-1])
    return report


class FrozenReward:
    """Reward model with parameters frozen; verifies the freeze hash on use.

    Gradients still flow through the noise input, which is exactly what
    the refined-branch objective needs.
    """

    def __init__(self, model: RewardModel):
        model.set_requires_grad(False)
        self.model = model
        self.frozen_hash = model.param_hash()

    def check(self):
        h = self.model.param_hash()
        if h != self.frozen_hash:
            raise RuntimeError("frozen reward model parameters changed "
                               f"({self.frozen_hash} -> {h})")

    def __call__(self, eps, token_embedding):
        return self.model(eps, token_embedding)


def _batch_rewards(frozen: FrozenReward, eps, world, prompt_id, differentiable):
    """Per-token 10-way distributions averaged over the prompt's tokens.

    Returns (scalar_rewards, avg_dist_data): a Tensor (B,) when
    differentiable, else numpy; avg_dist_data is always numpy (B, 10).
    """
    prompt = world.prompt(prompt_id)
    if not differentiable and isinstance(eps, Tensor):
        eps = eps.detach()
    b = eps.shape[0]
    dists = []
    for tid in prompt.token_ids:
        tok = np.broadcast_to(world.token(tid).embedding.astype(np.float32),
                              (b, world.config.d_txt)).copy()
        dists.append(frozen(eps if isinstance(eps, Tensor) else Tensor(eps), Tensor(tok)))
    n = float(len(dists))
    avg = dists[0]
    for d in dists[1:]:
        avg = avg + d
    avg = avg * (1.0 / n)
    scalars = scalar_reward(avg)
    if differentiable:
        return scalars, avg.data
    return scalars.data.copy(), avg.data


def logit_loss(batch, projector: Projector, frozen: FrozenReward, world: World,
               hyper: TrainingHyperparams, init_reward_cache=None):
    """Weighted quasi-DPO objective over a batch of (seed, prompt_id):

      sum_i  w[r_i] * log(1 + exp(-beta * (R_refined_i - R_init_i)))

    where r_i is the argmax of the refined noise's token-averaged score
    distribution and the R_init branch is gradient-detached.
    Returns (loss Tensor, stats dict).
    """
    w = weight_vector(hyper.w_max)
    total = None
    sum_ref = sum_init = 0.0
    kl_terms = []
    by_prompt = {}
    for seed, pid in batch:
        by_prompt.setdefault(pid, []).append(seed)
    shape = world.config.latent_shape
    for pid, seeds in sorted(by_prompt.items()):
        eps_init = np.stack([seed_to_noise(int(s), shape) for s in seeds])
        text = _prompt_text(world, pid, len(seeds))
        eps_refined, mu, sigma = refine(projector, eps_init, text)
        kl_terms.append(kl_constraint(mu, sigma, 1.0) * (len(seeds) / len(batch)))
        r_ref, avg_dist = _batch_rewards(frozen, eps_refined, world, pid, differentiable=True)
        if init_reward_cache is not None:
            r_init = np.array([init_reward_cache[(int(s), pid)] for s in seeds])
        else:
            r_init, _ = _batch_rewards(frozen, eps_init, world, pid, differentiable=False)
        r_idx = np.array([argmax_score(dd) for dd in avg_dist])
        weights = Tensor(w[r_idx].astype(np.float32))
        gap = r_ref - Tensor(r_init.astype(np.float32))
        term = (weights * ((-gap) * hyper.beta_dpo).softplus()).sum()
        total = term if total is None else total + term
        sum_ref += float(r_ref.data.sum())
        sum_init += float(np.sum(r_init))
    kl = kl_terms[0]
    for t in kl_terms[1:]:
        kl = kl + t
    stats = {"mean_r_refined": sum_ref / len(batch),
             "mean_r_init": sum_init / len(batch)}
    return total, kl, stats


def train_final(projector: Projector, frozen: FrozenReward, world: World,
                engine, hyper: TrainingHyperparams = None):
    """Final stage: minimize L_logit + tau * L_constraint with Adam and
    gradient clipping; the reward model stays frozen (hash-checked).

    Reports per-epoch mean refined/initial rewards, the constraint value,
    and oracle sentence alignment on a held probe set.
    """
    hyper = hyper or TrainingHyperparams()
    rng = np.random.Generator(np.random.Philox(key=hyper.shuffle_seed + 1))
    lo, hi = hyper.train_seed_range
    pairs = [(s, p.prompt_id) for s in range(lo, hi) for p in world.prompts]
    shape = world.config.latent_shape

    # static initial-branch rewards: the frozen model never changes, so
    # cache R_init per (seed, prompt) up front
    cache = {}
    for pid in [p.prompt_id for p in world.prompts]:
        eps = np.stack([seed_to_noise(s, shape) for s in range(lo, hi)])
        r, _ = _batch_rewards(frozen, eps, world, pid, differentiable=False)
        for i, s in enumerate(range(lo, hi)):
            cache[(s, pid)] = float(r[i])

    opt = Adam(projector.parameters(), lr=hyper.lr_final)
    report = {"epochs": [], "frozen_reward_hash": frozen.frozen_hash}
    best = None
    for epoch in range(hyper.epochs_final):
        order = rng.permutation(len(pairs))
        ep = {"logit": 0.0, "kl": 0.0, "r_ref": 0.0, "r_init": 0.0, "n": 0}
        for start in range(0, len(pairs), hyper.batch_size):
            batch = [pairs[i] for i in order[start:start + hyper.batch_size]]
            loss_logit, kl, stats = logit_loss(batch, projector, frozen, world,
                                               hyper, init_reward_cache=cache)
            loss = loss_logit + kl * hyper.tau
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"train_final: non-finite loss at epoch {epoch}")
            projector.zero_grad()
            loss.backward()
            clip_grad_norm(projector.parameters(), hyper.grad_clip)
            opt.step()
            ep["logit"] += loss_logit.item()
            ep["kl"] += kl.item() * len(batch)
            ep["r_ref"] += stats["mean_r_refined"] * len(batch)
            ep["r_init"] += stats["mean_r_init"] * len(batch)
            ep["n"] += len(batch)
        frozen.check()
        entry = {
            "epoch": epoch,
            "mean_logit_loss": ep["logit"] / ep["n"],
            "mean_kl": ep["kl"] / ep["n"],
            "mean_r_refined": ep["r_ref"] / ep["n"],
            "mean_r_init": ep["r_init"] / ep["n"],
        }
        entry["probe_alignment"] = probe_alignment(projector, world, engine,
                                                   hyper.probe_seed_range)
        report["epochs"].append(entry)
        best = entry if best is None else best
    report["final"] = dict(report["epochs"][-1])
    return report


def probe_alignment(projector, world, engine, seed_range):
    """Mean oracle sentence score of refined probe noises (never trained on)."""
    lo, hi = seed_range
    shape = world.config.latent_shape
    scores = []
    eps = np.stack([seed_to_noise(s, shape) for s in range(lo, hi)])
    for prompt in world.prompts:
        text = _prompt_text(world, prompt.prompt_id, len(eps))
        eps_ref, _, _ = refine(projector, eps, text)
        flat = eps_ref.data.reshape(len(eps), -1).astype(np.float64)
        x0 = engine.sample_ode(flat, prompt.prompt_id)
        scores.extend(oracle_sentence_score(x, prompt, world) for x in x0)
    return float(np.mean(scores))
