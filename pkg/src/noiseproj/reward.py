"""Reward distillation: generate token-level scored triplets by pushing
seeded noises through the sampler and the oracle, then fit the 10-way
reward model with cross-entropy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DiffusionEngine
from .nets import RewardModel
from .optim import Adam, clip_grad_norm
from .tensor import Tensor
from .testbed import World, oracle_token_score, seed_to_noise

SCORE_VALUES = np.arange(10, dtype=np.float64)  # v = (0, 1, ..., 9)


@dataclass
class ScoredTriplet:
    seed: int
    prompt_id: int
    token_id: int
    score: int


@dataclass
class RewardDataset:
    world_hash: str
    schedule_hash: str
    seed_range: tuple
    prompt_ids: list
    triplets: list
    x0_cache: np.ndarray = None      # (n_pairs, D), ordered by (seed, prompt)
    pair_index: list = field(default_factory=list)  # [(seed, prompt_id), ...]

    def write(self, path):
        with open(path, "w") as f:
            header = {
                "world_hash": self.world_hash,
                "schedule_hash": self.schedule_hash,
                "seed_range": list(self.seed_range),
                "prompt_ids": list(self.prompt_ids),
            }
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for t in self.triplets:
                f.write(json.dumps({"seed": t.seed, "prompt_id": t.prompt_id,
                                    "token_id": t.token_id, "score": t.score},
                                   sort_keys=True) + "\n")

    @staticmethod
    def read(path):
        with open(path) as f:
            header = json.loads(f.readline())
            triplets = [ScoredTriplet(**json.loads(line)) for line in f]
        return RewardDataset(
            world_hash=header["world_hash"],
            schedule_hash=header["schedule_hash"],
            seed_range=tuple(header["seed_range"]),
            prompt_ids=header["prompt_ids"],
            triplets=triplets,
        )


def generate_dataset(world: World, engine: DiffusionEngine, prompt_ids, seed_range):
    """One triplet per (seed, prompt, token): run the PF-ODE from the seeded
    noise and grade each of the prompt's tokens with the oracle.
    Pure function of its inputs; x0 samples are cached for reuse.
    """
    lo, hi = seed_range
    if hi <= lo:
        raise ValueError(f"empty seed range [{lo}, {hi})")
    d = world.latent_size
    seeds = list(range(lo, hi))
    eps = np.stack([seed_to_noise(s, (d,)) for s in seeds])
    triplets = []
    pair_index = []
    x0_rows = []
    for pid in prompt_ids:
        prompt = world.prompt(pid)
        x0 = engine.sample_ode(eps, pid)
        for i, seed in enumerate(seeds):
            pair_index.append((seed, pid))
            x0_rows.append(x0[i])
            for tid in prompt.token_ids:
                score = oracle_token_score(x0[i], world.token(tid))
                triplets.append(ScoredTriplet(seed=seed, prompt_id=pid,
                                              token_id=tid, score=score))
    triplets.sort(key=lambda t: (t.seed, t.prompt_id, t.token_id))
    order = sorted(range(len(pair_index)), key=lambda i: pair_index[i])
    schedule_hash = _schedule_hash(engine)
    return RewardDataset(
        world_hash=world.hash(),
        schedule_hash=schedule_hash,
        seed_range=(lo, hi),
        prompt_ids=list(prompt_ids),
        triplets=triplets,
        x0_cache=np.stack([x0_rows[i] for i in order]).astype(np.float32),
        pair_index=[pair_index[i] for i in order],
    )


def _schedule_hash(engine):
    import hashlib
    blob = json.dumps(engine.schedule.config.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def scalar_reward(dist):
    """Expected score of a 10-way distribution: dot with v = (0..9).

    Accepts a numpy distribution (returns float) or a Tensor batch of
    distributions (returns a Tensor, differentiable).
    """
    if isinstance(dist, Tensor):
        v = Tensor(SCORE_VALUES.astype(dist.dtype).reshape(10, 1))
        return dist.matmul(v).reshape(dist.shape[:-1])
    return float(np.dot(np.asarray(dist, dtype=np.float64), SCORE_VALUES))


def argmax_score(dist):
    """Index of the maximal probability; ties break toward the lower index."""
    arr = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    return int(np.argmax(arr))


@dataclass
class RewardTrainConfig:
    epochs: int = 25
    lr: float = 2e-3
    batch_size: int = 64
    grad_clip: float = 1.0
    weight_decay: float = 3e-3
    augment: bool = True     # train-time within-channel permutations of eps
    holdout_mod: int = 10    # seeds with seed % holdout_mod == holdout_mod-1 held out
    shuffle_seed: int = 123


def _cross_entropy(logits, labels):
    """Mean CE of (B, 10) logits against integer labels."""
    logp = logits.log_softmax(axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logp * Tensor(onehot)).sum() * (1.0 / len(labels))


def _accuracy(probs, labels, slack=0):
    pred = probs.argmax(axis=-1)
    return float(np.mean(np.abs(pred - labels) <= slack))


def train_reward(dataset: RewardDataset, model: RewardModel, world: World,
                 config: RewardTrainConfig = None):
    """Fit R_phi with cross-entropy over (eps, token-embedding, score)
    triplets; returns a per-epoch report with train/held-out CE and
    top-1 / within-+-1 accuracy.

    When config.augment is set, each training batch sees the noises under
    fresh within-channel spatial permutations. The conditional laws are
    constant within every channel block, so the generated image's block
    means -- and with them the oracle labels -- are invariant under these
    permutations; the augmentation multiplies the effective number of
    training noises without touching the labels.
    """
    config = config or RewardTrainConfig()
    if not dataset.triplets:
        raise ValueError("train_reward: empty dataset")
    shape = world.config.latent_shape

    seeds = sorted({t.seed for t in dataset.triplets})
    noise = {s: seed_to_noise(s, shape) for s in seeds}
    emb = {t.token_id: t.embedding.astype(np.float32) for t in world.tokens}

    def pack(triplets):
        eps = np.stack([noise[t.seed] for t in triplets])
        tok = np.stack([emb[t.token_id] for t in triplets])
        labels = np.array([t.score for t in triplets], dtype=np.int64)
        return eps, tok, labels

    held = [t for t in dataset.triplets if t.seed % config.holdout_mod == config.holdout_mod - 1]
    train = [t for t in dataset.triplets if t.seed % config.holdout_mod != config.holdout_mod - 1]
    if not train:
        train, held = list(dataset.triplets), []
    train_eps, train_tok, train_labels = pack(train)
    if held:
        held_eps, held_tok, held_labels = pack(held)

    opt = Adam(model.parameters(), lr=config.lr,
               weight_decay=config.weight_decay)
    rng = np.random.Generator(np.random.Philox(key=config.shuffle_seed))
    n = len(train)
    report = {"epochs": [], "n_train": n, "n_holdout": len(held)}

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_ce = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            eps_batch = train_eps[idx]
            if config.augment:
                b, c, h, w = eps_batch.shape
                flat = eps_batch.reshape(b, c, h * w)
                perm = rng.random(flat.shape).argsort(axis=-1)
                eps_batch = np.take_along_axis(flat, perm, axis=-1).reshape(eps_batch.shape)
            logits = model.logits(Tensor(eps_batch), Tensor(train_tok[idx]))
            loss = _cross_entropy(logits, train_labels[idx])
            if not np.isfinite(loss.item()):
                raise RuntimeError(f"train_reward: non-finite loss at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            clip_grad_norm(model.parameters(), config.grad_clip)
            opt.step()
            epoch_ce += loss.item() * len(idx)
        entry = {"epoch": epoch, "train_ce": epoch_ce / n}
        if held:
            probs = evaluate_probs(model, held_eps, held_tok)
            ce = -float(np.mean(np.log(probs[np.arange(len(held_labels)), held_labels] + 1e-12)))
            entry.update({
                "holdout_ce": ce,
                "holdout_top1": _accuracy(probs, held_labels),
                "holdout_within1": _accuracy(probs, held_labels, slack=1),
                "holdout_spearman": spearman(probs @ SCORE_VALUES, held_labels),
            })
        report["epochs"].append(entry)

    report["final"] = dict(report["epochs"][-1])
    return report


def evaluate_probs(model: RewardModel, eps, tok, batch_size=256):
    """Forward in evaluation mode (numpy in, numpy out)."""
    outs = []
    for start in range(0, len(eps), batch_size):
        probs = model(Tensor(eps[start:start + batch_size]),
                      Tensor(tok[start:start + batch_size]))
        outs.append(probs.data)
    return np.concatenate(outs)


def spearman(a, b):
    """Spearman rank correlation with average ranks for ties."""
    def ranks(x):
        x = np.asarray(x, dtype=np.float64)
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(len(x), dtype=np.float64)
        # average tied ranks
        for v in np.unique(x):
            mask = x == v
            r[mask] = r[mask].mean()
        return r

    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra ** 2).sum() * (rb ** 2).sum()))
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)
