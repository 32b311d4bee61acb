"""Variance-preserving diffusion with an analytically exact noise predictor.

The clean-data distribution is a diagonal Gaussian mixture, so every
marginal p_t is itself a Gaussian mixture and the score (hence the ideal
epsilon-prediction) is available in closed form. Sampling integrates the
deterministic probability-flow reverse process with DDIM-style updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .testbed import ConditionalData, World


@dataclass
class ScheduleConfig:
    T: int = 50
    # Scaled for T=50 so that alpha_bar_T ~ 1e-5 (x_T is effectively pure
    # noise); the classic 1e-4..0.02 range only reaches that at T~1000.
    beta_min: float = 1e-3
    beta_max: float = 0.35
    cfg_w: float = 2.0

    def to_json(self):
        return dict(self.__dict__)

    @staticmethod
    def from_json(d):
        return ScheduleConfig(**d)


class NoiseSchedule:
    """Discrete VP schedule: alpha_bar_t = prod_{s<=t}(1-beta_s), with
    alpha_bar_0 = 1 and sigma(t)^2 = 1 - alpha_bar_t exactly.
    """

    def __init__(self, config: ScheduleConfig = None):
        self.config = config or ScheduleConfig()
        T = self.config.T
        self.T = T
        self.betas = np.linspace(self.config.beta_min, self.config.beta_max, T)
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        self.sigma = np.sqrt(1.0 - self.alpha_bar)

    def check_step(self, t):
        if not (0 <= t <= self.T):
            raise ValueError(f"step {t} outside [0, {self.T}]")


@dataclass
class GuidanceConfig:
    w: float = 2.0

    def __post_init__(self):
        if not np.isfinite(self.w):
            raise ValueError("guidance weight must be finite")


@dataclass
class Mixture:
    """Diagonal Gaussian mixture over the flattened latent."""

    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, D)
    variances: np.ndarray  # (K, D)

    @staticmethod
    def from_conditional(data: ConditionalData):
        return Mixture(weights=data.weights, means=data.means, variances=data.variances)

    @staticmethod
    def pooled(world: World):
        """Unconditional data distribution: all prompts' mixtures, equally weighted."""
        weights = np.concatenate([d.weights / len(world.data) for d in world.data])
        means = np.concatenate([d.means for d in world.data])
        variances = np.concatenate([d.variances for d in world.data])
        return Mixture(weights=weights, means=means, variances=variances)

    def marginal(self, t, schedule: NoiseSchedule):
        """The mixture q(x_t): component k becomes
        N(sqrt(alpha_bar_t) mu_k, alpha_bar_t Sigma_k + sigma(t)^2 I)."""
        ab = schedule.alpha_bar[t]
        s2 = schedule.sigma[t] ** 2
        return Mixture(
            weights=self.weights,
            means=np.sqrt(ab) * self.means,
            variances=ab * self.variances + s2,
        )

    def score(self, x):
        """Gradient of log density at x, shape (B, D); log-sum-exp stable."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]          # (B, K, D)
        log_comp = (
            np.log(self.weights)[None, :]
            - 0.5 * np.log(2.0 * np.pi * self.variances).sum(axis=1)[None, :]
            - 0.5 * (diff ** 2 / self.variances[None, :, :]).sum(axis=2)
        )                                                       # (B, K)
        log_comp -= log_comp.max(axis=1, keepdims=True)
        post = np.exp(log_comp)
        post /= post.sum(axis=1, keepdims=True)
        per_comp = -diff / self.variances[None, :, :]           # (B, K, D)
        return (post[:, :, None] * per_comp).sum(axis=1)

    def log_density(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None, :, :]
        log_comp = (
            np.log(self.weights)[None, :]
            - 0.5 * np.log(2.0 * np.pi * self.variances).sum(axis=1)[None, :]
            - 0.5 * (diff ** 2 / self.variances[None, :, :]).sum(axis=2)
        )
        m = log_comp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(log_comp - m).sum(axis=1, keepdims=True)))[:, 0]


class DiffusionEngine:
    """Exact epsilon predictor + classifier-free guidance + PF-ODE sampler
    for a world's prompt-conditional mixtures.
    """

    def __init__(self, world: World, schedule: NoiseSchedule = None):
        self.world = world
        self.schedule = schedule or NoiseSchedule()
        self._cond = {d.prompt_id: Mixture.from_conditional(d) for d in world.data}
        self._uncond = Mixture.pooled(world)

    def mixture(self, prompt_id=None):
        return self._uncond if prompt_id is None else self._cond[prompt_id]

    def forward_diffuse(self, x0, t, eps):
        """x_t = sqrt(alpha_bar_t) x0 + sigma(t) eps."""
        self.schedule.check_step(t)
        return np.sqrt(self.schedule.alpha_bar[t]) * np.asarray(x0) \
            + self.schedule.sigma[t] * np.asarray(eps)

    def eps_exact(self, x_t, t, prompt_id=None):
        """Ideal noise prediction -sigma(t) * grad log p_t(x_t | cond).

        x_t may be (D,) or (B, D); the result matches the input shape.
        """
        self.schedule.check_step(t)
        if t == 0:
            raise ValueError("eps_exact undefined at t=0 (sigma=0)")
        x = np.asarray(x_t, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("eps_exact: non-finite input")
        single = x.ndim == 1
        marg = self.mixture(prompt_id).marginal(t, self.schedule)
        eps = -self.schedule.sigma[t] * marg.score(x)
        return eps[0] if single else eps

    def cfg_eps(self, x_t, t, prompt_id, guidance: GuidanceConfig):
        """(1+w) * conditional - w * unconditional prediction."""
        w = guidance.w
        cond = self.eps_exact(x_t, t, prompt_id)
        if w == 0.0:
            return cond
        uncond = self.eps_exact(x_t, t, None)
        return (1.0 + w) * cond - w * uncond

    def sample_ode(self, eps_init, prompt_id=None, guidance: GuidanceConfig = None):
        """Deterministic DDIM integration from x_T = eps_init down to x_0.

        eps_init: (D,) or (B, D) flattened latents. Fully deterministic.
        """
        guidance = guidance or GuidanceConfig(w=self.schedule.config.cfg_w)
        x = np.asarray(eps_init, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if not np.all(np.isfinite(x)):
            raise ValueError("sample_ode: non-finite initial noise")
        ab = self.schedule.alpha_bar
        sig = self.schedule.sigma
        for t in range(self.schedule.T, 0, -1):
            if prompt_id is None:
                eps_hat = self.eps_exact(x, t, None)
            else:
                eps_hat = self.cfg_eps(x, t, prompt_id, guidance)
            x0_hat = (x - sig[t] * eps_hat) / np.sqrt(ab[t])
            x = np.sqrt(ab[t - 1]) * x0_hat + sig[t - 1] * eps_hat
            if not np.all(np.isfinite(x)):
                raise ValueError(f"sample_ode: non-finite state at step {t - 1}")
        return x[0] if single else x
