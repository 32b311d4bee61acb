"""Synthetic conditional world: token vocabulary, prompt-conditional
Gaussian-mixture data, deterministic seed->noise mapping, and the rubric
oracle that grades how well a clean latent expresses each prompt token.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np


class InfeasibleWorldError(ValueError):
    """Raised when a prompt's token predicates cannot all be satisfied."""


def seed_to_noise(seed, shape):
    """Map a 64-bit seed to a standard-normal latent.

    Counter-based (Philox) so the value of each element is fully determined
    by (seed, element index), independent of platform or call order.
    """
    if any(s <= 0 for s in shape):
        raise ValueError(f"seed_to_noise: non-positive shape {shape}")
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    return gen.standard_normal(shape, dtype=np.float32)


@dataclass
class AttributeToken:
    """One vocabulary entry: a conditioning embedding plus the oracle-only
    predicate (the mean over a coordinate block of the flattened latent,
    compared against a scalar center within a radius). The embedding is
    random and carries no predicate info.
    """

    token_id: int
    embedding: np.ndarray          # (d_txt,)
    coord_offset: int              # start of the predicate block in the flat latent
    block_len: int                 # number of coordinates averaged by the predicate
    center: float
    radius: float

    def project(self, x0_flat):
        return float(np.mean(x0_flat[self.coord_offset:self.coord_offset + self.block_len]))


@dataclass
class PromptSpec:
    prompt_id: int
    token_ids: list
    sentence_embedding: np.ndarray  # (n_tokens, d_txt), rows = member embeddings


@dataclass
class ConditionalData:
    """Prompt-conditional clean-data distribution: a diagonal Gaussian
    mixture whose component means satisfy every token predicate.
    """

    prompt_id: int
    weights: np.ndarray            # (K,), nonnegative, sums to 1
    means: np.ndarray              # (K, D) over the flattened latent
    variances: np.ndarray          # (K, D) diagonal covariances

    def sample(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.means.shape[1]))
        return self.means[comp] + np.sqrt(self.variances[comp]) * eps


@dataclass
class World:
    config: "WorldConfig"
    tokens: list
    prompts: list
    data: list

    def token(self, token_id):
        return self.tokens[token_id]

    def prompt(self, prompt_id):
        return self.prompts[prompt_id]

    def conditional(self, prompt_id):
        return self.data[prompt_id]

    @property
    def latent_size(self):
        return int(np.prod(self.config.latent_shape))

    def to_json(self):
        return {
            "config": self.config.to_json(),
            "tokens": [
                {
                    "token_id": t.token_id,
                    "embedding": t.embedding.tolist(),
                    "coord_offset": t.coord_offset,
                    "block_len": t.block_len,
                    "center": t.center,
                    "radius": t.radius,
                }
                for t in self.tokens
            ],
            "prompts": [
                {"prompt_id": p.prompt_id, "token_ids": list(p.token_ids)}
                for p in self.prompts
            ],
            "data": [
                {
                    "prompt_id": d.prompt_id,
                    "weights": d.weights.tolist(),
                    "means": d.means.tolist(),
                    "variances": d.variances.tolist(),
                }
                for d in self.data
            ],
        }

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class WorldConfig:
    latent_shape: tuple = (4, 8, 8)
    d_txt: int = 32
    n_tokens: int = 8
    n_prompts: int = 5
    tokens_per_prompt: int = 3
    region_radius: float = 0.25
    components_per_prompt: int = 1
    world_seed: int = 7

    def to_json(self):
        d = dict(self.__dict__)
        d["latent_shape"] = list(self.latent_shape)
        return d

    @staticmethod
    def from_json(d):
        cfg = WorldConfig(**d)
        cfg.latent_shape = tuple(cfg.latent_shape)
        return cfg


def _near_orthogonal_embeddings(rng, n, dim):
    # QR of a Gaussian matrix: exactly orthonormal rows, cosine similarity 0
    if n > dim:
        raise ValueError(f"need n_tokens <= d_txt for near-orthogonal embeddings ({n} > {dim})")
    g = rng.standard_normal((dim, dim))
    q, _ = np.linalg.qr(g)
    return q[:n].astype(np.float64)


_CENTER_SCALE = 0.35       # magnitude of the two opposed predicate centers per channel
_JITTER_FRACTION = 0.35    # realization offset from the center, as a fraction of radius
_BLOCK_STD = 0.9           # per-coordinate data std inside a predicate block
_BASE_STD = 0.5            # per-coordinate data std elsewhere


def make_world(config: WorldConfig) -> World:
    """Build a deterministic world from the config.

    Tokens come in opposed pairs: tokens i and i+C (C = channel count) both
    grade the mean of channel i but demand opposite signs, so a prompt can
    never hold both. Prompt token sets are drawn over distinct channels and
    redrawn until every token is used by at least one prompt. Every prompt's
    mixture components are constructed to satisfy all of its token
    predicates; if two tokens claim overlapping latent coordinates with
    irreconcilable centers, raises InfeasibleWorldError naming them.
    """
    rng = np.random.Generator(np.random.Philox(key=config.world_seed))
    channels = config.latent_shape[0]
    block = int(np.prod(config.latent_shape[1:]))
    d = channels * block
    if config.n_tokens > 2 * channels:
        raise ValueError(
            f"need n_tokens <= 2 * channels ({config.n_tokens} > {2 * channels})")
    if config.tokens_per_prompt > channels:
        raise ValueError(
            f"need tokens_per_prompt <= channels ({config.tokens_per_prompt} > {channels})")

    emb = _near_orthogonal_embeddings(rng, config.n_tokens, config.d_txt)
    tokens = []
    # Each token gets one canonical in-region realization, shared by every
    # prompt that uses it: the token's meaning doesn't change with context.
    realizations = []
    for i in range(config.n_tokens):
        sign = 1.0 if i < channels else -1.0
        center = sign * _CENTER_SCALE
        realizations.append(
            center + rng.uniform(-_JITTER_FRACTION, _JITTER_FRACTION) * config.region_radius)
        tokens.append(AttributeToken(
            token_id=i,
            embedding=emb[i].copy(),
            coord_offset=(i % channels) * block,
            block_len=block,
            center=center,
            radius=config.region_radius,
        ))

    token_sets = _sample_prompt_tokens(rng, config, channels)

    prompts = []
    data = []
    for pid, ids in enumerate(token_sets):
        sentence = np.stack([tokens[i].embedding for i in ids])
        prompts.append(PromptSpec(prompt_id=pid, token_ids=ids, sentence_embedding=sentence))

        members = [tokens[i] for i in ids]
        _check_feasible(members)

        n_comp = config.components_per_prompt
        means = np.zeros((n_comp, d))
        variances = np.zeros((n_comp, d))
        for c in range(n_comp):
            # Means and variances are constant within every channel block, so
            # the conditional laws (and the pooled unconditional) are invariant
            # under within-channel coordinate permutations. Alignment then
            # depends on the noise only through channel-wise statistics.
            mean = np.repeat(rng.normal(0.0, 0.25, size=channels), block)
            var = np.full(d, _BASE_STD ** 2)
            for tok in members:
                lo, hi = tok.coord_offset, tok.coord_offset + tok.block_len
                mean[lo:hi] = realizations[tok.token_id]
                var[lo:hi] = _BLOCK_STD ** 2
            means[c] = mean
            variances[c] = var
            for tok in members:
                dist = abs(tok.project(mean) - tok.center)
                if dist > tok.radius:
                    raise InfeasibleWorldError(
                        f"prompt {pid}: component {c} violates token {tok.token_id}")
        w = rng.uniform(0.5, 1.5, size=n_comp)
        weights = w / w.sum()
        data.append(ConditionalData(prompt_id=pid, weights=weights,
                                    means=means, variances=variances))

    return World(config=config, tokens=tokens, prompts=prompts, data=data)


def _sample_prompt_tokens(rng, config, channels):
    """Draw each prompt's tokens over distinct channels; redraw the whole
    batch until every token appears in at least one prompt (coverage makes
    the scored dataset span the vocabulary)."""
    if config.n_prompts * config.tokens_per_prompt < config.n_tokens:
        raise ValueError("too few prompt slots to cover every token")
    occupied = min(channels, config.n_tokens)   # channels that have a token at all
    if config.tokens_per_prompt > occupied:
        raise ValueError("tokens_per_prompt exceeds the number of occupied channels")
    for _ in range(10000):
        sets = []
        for _pid in range(config.n_prompts):
            chans = rng.choice(occupied, size=config.tokens_per_prompt, replace=False)
            ids = sorted(int(ch) + channels * int(rng.integers(0, 2))
                         if int(ch) + channels < config.n_tokens else int(ch)
                         for ch in chans)
            sets.append(ids)
        if len({i for ids in sets for i in ids}) == config.n_tokens:
            return sets
    raise InfeasibleWorldError("could not cover every token with the prompt budget")


def _check_feasible(members):
    for i, a in enumerate(members):
        for b in members[i + 1:]:
            lo = max(a.coord_offset, b.coord_offset)
            hi = min(a.coord_offset + a.block_len, b.coord_offset + b.block_len)
            if lo >= hi:
                continue
            if abs(a.center - b.center) > a.radius + b.radius:
                raise InfeasibleWorldError(
                    f"tokens {a.token_id} and {b.token_id} claim overlapping "
                    f"latent coordinates [{lo},{hi}) with disjoint regions")


_CORE_FRACTION = 0.3  # inside this fraction of the radius the rubric saturates


def token_alignment(x0, token):
    """Continuous rubric value g in (0, 1]; 1 inside the core zone."""
    flat = np.asarray(x0, dtype=np.float64).reshape(-1)
    dist = abs(token.project(flat) - token.center)
    if dist <= _CORE_FRACTION * token.radius:
        return 1.0
    return math.exp(-dist * dist / (2.0 * token.radius * token.radius))


def oracle_token_score(x0, token):
    """Discrete 0-9 grade of how well x0 expresses the token."""
    if not np.all(np.isfinite(np.asarray(x0))):
        raise ValueError("oracle_token_score: non-finite latent")
    g = token_alignment(x0, token)
    return min(9, int(math.floor(10.0 * g)))


def oracle_sentence_score(x0, prompt, world):
    """Discrete 0-99 grade over all of the prompt's tokens."""
    scores = [oracle_token_score(x0, world.token(tid)) for tid in prompt.token_ids]
    return int(math.floor(99.0 * (sum(scores) / len(scores)) / 9.0))
