"""Shared backbone (cross-attention -> MoE -> UNet-lite) and the two task
heads: the projector's VAE encoder head emitting (mu_hat, sigma_hat) and
the reward model's MLP + 10-way classification head.

The projector and reward model share this architecture but never share
parameters: each is an independent instance.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, avg_pool_2x, concat, conv2d_3x3, layer_norm


@dataclass
class BackboneConfig:
    latent_shape: tuple = (4, 8, 8)
    d_model: int = 64
    n_heads: int = 4
    n_experts: int = 4
    expert_hidden: int = 128
    unet_channels: int = 64
    d_txt: int = 32
    sigma_min: float = 0.1
    sigma_max: float = 3.0
    hard_routing: bool = False

    def __post_init__(self):
        self.latent_shape = tuple(self.latent_shape)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        _, h, w = self.latent_shape
        if h % 2 or w % 2:
            raise ValueError("latent H and W must be even for the UNet-lite downsample")

    def to_json(self):
        d = dict(self.__dict__)
        d["latent_shape"] = list(self.latent_shape)
        return d

    @staticmethod
    def from_json(d):
        return BackboneConfig(**d)


class Module:
    """Minimal parameter container with recursive traversal."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{key}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def set_requires_grad(self, flag):
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_hash(self):
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())
        return h.hexdigest()[:16]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def _init_weight(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero_init=False, dtype=np.float32):
        if zero_init:
            self.weight = Tensor(np.zeros((d_in, d_out), dtype=dtype), requires_grad=True)
        else:
            self.weight = _init_weight(rng, (d_in, d_out), d_in, dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return x.matmul(self.weight) + self.bias


class CrossAttention(Module):
    """Noise tokens attend over text rows; pre-norm residual: the layer
    norm feeds the queries while the residual stream stays untouched, so
    batch-wide linear statistics of the noise survive to later layers."""

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(cfg.d_txt, d, rng, dtype=dtype)
        self.wv = Linear(cfg.d_txt, d, rng, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)
        self.ln_gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.ln_bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)

    def __call__(self, tokens, text):
        """tokens: (B, P, d_model); text: (B, R, d_txt) -> (B, P, d_model)."""
        if text.shape[-1] != self.wk.weight.shape[0]:
            raise ShapeError("cross_attention", tokens.shape, text.shape)
        b, p, d = tokens.shape
        r = text.shape[-2]
        normed = layer_norm(tokens, self.ln_gain, self.ln_bias)
        q = self.wq(normed).reshape((b, p, self.n_heads, self.d_head)).transpose((0, 2, 1, 3))
        k = self.wk(text).reshape((b, r, self.n_heads, self.d_head)).transpose((0, 2, 3, 1))
        v = self.wv(text).reshape((b, r, self.n_heads, self.d_head)).transpose((0, 2, 1, 3))
        attn = (q.matmul(k) * (1.0 / math.sqrt(self.d_head))).softmax(axis=-1)
        mixed = attn.matmul(v).transpose((0, 2, 1, 3)).reshape((b, p, d))
        return tokens + self.wo(mixed)


class Expert(Module):
    def __init__(self, d_model, hidden, rng, dtype=np.float32):
        self.fc1 = Linear(d_model, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, d_model, rng, dtype=dtype)

    def __call__(self, x):
        return self.fc2(self.fc1(x).gelu())


class MoE(Module):
    """Per-token soft mixture of expert MLPs, residual-added.

    With hard_routing the top-1 expert gets weight 1 (ties to the lower
    index via argmax); gradients then flow through that expert only.
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.router = Linear(cfg.d_model, cfg.n_experts, rng, dtype=dtype)
        self.experts = [Expert(cfg.d_model, cfg.expert_hidden, rng, dtype=dtype)
                        for _ in range(cfg.n_experts)]
        self.hard = cfg.hard_routing

    def gates(self, x):
        g = self.router(x).softmax(axis=-1)
        if self.hard:
            one_hot = (g.data == g.data.max(axis=-1, keepdims=True)).astype(g.data.dtype)
            one_hot = one_hot / one_hot.sum(axis=-1, keepdims=True)
            g = Tensor(one_hot)
        return g

    def __call__(self, x):
        g = self.gates(x)
        out = None
        for e, expert in enumerate(self.experts):
            term = expert(x) * g[..., e:e + 1]
            out = term if out is None else out + term
        return x + out


class UNetLite(Module):
    """Two-level encoder/decoder over the spatial grid with one skip."""

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        c = cfg.unet_channels
        d = cfg.d_model
        self.conv_in = Conv3x3(d, c, rng, dtype=dtype)
        self.conv_mid = Conv3x3(c, c, rng, dtype=dtype)
        self.conv_out = Conv3x3(2 * c, c, rng, dtype=dtype)

    def __call__(self, x):
        enc = self.conv_in(x).gelu()
        down = avg_pool_2x(enc)
        mid = self.conv_mid(down).gelu()
        up = mid.repeat2x()
        return self.conv_out(concat([up, enc], axis=1))


class Conv3x3(Module):
    def __init__(self, c_in, c_out, rng, zero_init=False, dtype=np.float32):
        fan_in = c_in * 9
        if zero_init:
            self.weight = Tensor(np.zeros((c_out, c_in, 3, 3), dtype=dtype), requires_grad=True)
        else:
            self.weight = _init_weight(rng, (c_out, c_in, 3, 3), fan_in, dtype)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return conv2d_3x3(x, self.weight, self.bias)


class Backbone(Module):
    """m_theta0: per-position channel embed -> cross-attention -> MoE ->
    UNet-lite, producing a (B, unet_channels, H, W) feature map.
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        c, h, w = cfg.latent_shape
        p = h * w
        # linear embedding of the C channels, shared across positions:
        # sharing keeps channel-wide statistics visible to the pooled
        # features instead of asking every position to rediscover them
        bound = 1.0 / math.sqrt(c)
        self.embed = Tensor(rng.uniform(-bound, bound, size=(c, cfg.d_model)).astype(dtype),
                            requires_grad=True)
        # additive positional code: without it, position identity only
        # reaches the router multiplied by the noise values, and the
        # router cannot learn which grid cells a token talks about
        self.pos_bias = Tensor(rng.normal(0.0, 0.2, size=(p, cfg.d_model)).astype(dtype),
                               requires_grad=True)
        self.attn = CrossAttention(cfg, rng, dtype=dtype)
        self.moe = MoE(cfg, rng, dtype=dtype)
        self.unet = UNetLite(cfg, rng, dtype=dtype)

    def tokens(self, eps):
        """(B, C, H, W) -> (B, H*W, d_model)."""
        b, c, h, w = eps.shape
        seq = eps.reshape((b, c, h * w)).transpose((0, 2, 1))      # (B, P, C)
        return seq.matmul(self.embed) + self.pos_bias

    def __call__(self, eps, text):
        """eps: (B, C, H, W) Tensor; text: (B, R, d_txt) Tensor."""
        if tuple(eps.shape[1:]) != self.cfg.latent_shape:
            raise ShapeError("backbone", eps.shape, self.cfg.latent_shape)
        b = eps.shape[0]
        _, h, w = self.cfg.latent_shape
        x = self.attn(self.tokens(eps), text)
        x = self.moe(x)
        grid = x.transpose((0, 2, 1)).reshape((b, self.cfg.d_model, h, w))
        return self.unet(grid)


class Projector(Module):
    """Noise projector P_theta = backbone . VAE-encoder head.

    The head's final layers are zero-initialized so the projector is the
    identity refinement at init: mu_hat = 0, sigma_hat = 1 exactly.
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng, dtype=dtype)
        c = cfg.latent_shape[0]
        self.head_mu = Linear(cfg.unet_channels, c, rng, zero_init=True, dtype=dtype)
        self.head_logsigma = Linear(cfg.unet_channels, c, rng, zero_init=True, dtype=dtype)

    def _heads(self, features):
        b = features.shape[0]
        c, h, w = self.cfg.latent_shape
        flat = features.transpose((0, 2, 3, 1))                    # (B, H, W, c_feat)
        mu = self.head_mu(flat).transpose((0, 3, 1, 2))
        log_sigma = self.head_logsigma(flat).transpose((0, 3, 1, 2))
        log_sigma = log_sigma.clamp(math.log(self.cfg.sigma_min), math.log(self.cfg.sigma_max))
        return mu, log_sigma.exp()

    def __call__(self, eps, text):
        """-> (mu_hat, sigma_hat), each shaped like eps."""
        return self._heads(self.backbone(eps, text))

    def forward_with_features(self, eps, text):
        features = self.backbone(eps, text)
        mu, sigma = self._heads(features)
        return mu, sigma, features


class Decoder(Module):
    """p_psi: reconstructs the backbone feature map from a refined noise.
    Only used during projector pretraining; discarded afterwards.
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        c = cfg.latent_shape[0]
        self.conv_in = Conv3x3(c, cfg.unet_channels, rng, dtype=dtype)
        self.conv_out = Conv3x3(cfg.unet_channels, cfg.unet_channels, rng, dtype=dtype)

    def __call__(self, eps_refined):
        return self.conv_out(self.conv_in(eps_refined).gelu())


class RewardModel(Module):
    """R_phi: backbone -> global mean pool -> MLP -> 10-way distribution.

    Conditions on a single token embedding, not a sentence matrix.
    """

    def __init__(self, cfg: BackboneConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng, dtype=dtype)
        self.fc1 = Linear(cfg.unet_channels, cfg.d_model, rng, dtype=dtype)
        self.fc2 = Linear(cfg.d_model, 10, rng, dtype=dtype)

    def logits(self, eps, token_embedding):
        """eps: (B, C, H, W); token_embedding: (B, d_txt) single rows."""
        if len(token_embedding.shape) != 2 or token_embedding.shape[-1] != self.cfg.d_txt:
            raise ShapeError("reward_forward expects single token rows (B, d_txt)",
                             token_embedding.shape)
        b = eps.shape[0]
        text = token_embedding.reshape((b, 1, self.cfg.d_txt))
        features = self.backbone(eps, text)
        pooled = features.mean(axis=(2, 3))
        return self.fc2(self.fc1(pooled).gelu())

    def __call__(self, eps, token_embedding):
        """-> (B, 10) normalized score distributions."""
        return self.logits(eps, token_embedding).softmax(axis=-1)
