"""Key-value run configuration.

One flat `key = value` file configures every stage. Values are JSON
(numbers, strings, lists, booleans); `#` starts a comment. Unknown keys
are an error so typos fail loudly instead of silently using a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .diffusion import ScheduleConfig
from .nets import BackboneConfig
from .projector import TrainingHyperparams
from .reward import RewardTrainConfig
from .testbed import WorldConfig


class ConfigError(ValueError):
    pass


# key -> (section, field). Sections: world, schedule, backbone, reward, train, run.
_KEYS = {}
for _f in ("latent_shape", "d_txt", "n_tokens", "n_prompts", "tokens_per_prompt",
           "region_radius", "components_per_prompt", "world_seed"):
    _KEYS[_f] = ("world", _f)
for _f in ("T", "beta_min", "beta_max", "cfg_w"):
    _KEYS[_f] = ("schedule", _f)
for _f in ("d_model", "n_heads", "n_experts", "expert_hidden", "unet_channels",
           "sigma_min", "sigma_max", "hard_routing"):
    _KEYS[_f] = ("backbone", _f)
for _f in ("epochs", "lr", "weight_decay", "batch_size", "grad_clip", "augment",
           "holdout_mod", "shuffle_seed"):
    _KEYS["reward_" + _f] = ("reward", _f)
for _f in ("lambda_kl", "tau", "beta_dpo", "w_max", "lr_warmup", "lr_final",
           "epochs_warmup", "epochs_final", "batch_size", "grad_clip",
           "train_seed_range", "probe_seed_range", "shuffle_seed"):
    _KEYS["train_" + _f] = ("train", _f)
for _f in ("out_dir", "data_seed_range", "eval_seed_range", "diversity_samples",
           "tau_values"):
    _KEYS[_f] = ("run", _f)


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    reward: RewardTrainConfig = field(default_factory=RewardTrainConfig)
    train: TrainingHyperparams = field(default_factory=TrainingHyperparams)
    out_dir: str = "out"
    data_seed_range: tuple = (0, 300)
    eval_seed_range: tuple = (350, 500)
    diversity_samples: int = 1000
    tau_values: tuple = (100.0, 150.0, 200.0, 250.0, 300.0)

    def __post_init__(self):
        # the backbone consumes latents and text rows shaped by the world
        self.backbone.latent_shape = self.world.latent_shape
        self.backbone.d_txt = self.world.d_txt
        self.data_seed_range = tuple(self.data_seed_range)
        self.eval_seed_range = tuple(self.eval_seed_range)
        self.tau_values = tuple(self.tau_values)

    def to_json(self):
        return {
            "world": self.world.to_json(),
            "schedule": self.schedule.to_json(),
            "backbone": self.backbone.to_json(),
            "reward": dict(self.reward.__dict__),
            "train": self.train.to_json(),
            "out_dir": self.out_dir,
            "data_seed_range": list(self.data_seed_range),
            "eval_seed_range": list(self.eval_seed_range),
            "diversity_samples": self.diversity_samples,
            "tau_values": list(self.tau_values),
        }

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_config_text(text) -> RunConfig:
    sections = {"world": {}, "schedule": {}, "backbone": {}, "reward": {},
                "train": {}, "run": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            parsed = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ConfigError(f"line {lineno}: value for {key!r} is not valid JSON: "
                              f"{value.strip()!r}")
        section, fname = _KEYS[key]
        sections[section][fname] = parsed
    try:
        world = WorldConfig.from_json({**WorldConfig().to_json(), **sections["world"]})
        schedule = ScheduleConfig.from_json(
            {**ScheduleConfig().to_json(), **sections["schedule"]})
        backbone = BackboneConfig.from_json(
            {**BackboneConfig().to_json(), **sections["backbone"]})
        reward = RewardTrainConfig(**{**RewardTrainConfig().__dict__,
                                      **sections["reward"]})
        train = TrainingHyperparams(
            **{**{k: v for k, v in TrainingHyperparams().__dict__.items()},
               **sections["train"]})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e))
    return RunConfig(world=world, schedule=schedule, backbone=backbone,
                     reward=reward, train=train, **sections["run"])


def load_config(path) -> RunConfig:
    with open(path) as f:
        return parse_config_text(f.read())


def write_default_config(path):
    cfg = RunConfig()
    lines = ["# noiseproj run configuration (key = JSON value)"]
    rev = {}  # (section, field) -> key
    for key, loc in _KEYS.items():
        rev[loc] = key
    for section, obj in (("world", cfg.world.to_json()),
                         ("schedule", cfg.schedule.to_json()),
                         ("backbone", cfg.backbone.to_json()),
                         ("reward", dict(cfg.reward.__dict__)),
                         ("train", cfg.train.to_json())):
        lines.append("")
        lines.append(f"# {section}")
        for fname, val in obj.items():
            if (section, fname) in rev:
                lines.append(f"{rev[(section, fname)]} = {json.dumps(val)}")
    lines += ["", "# run",
              f"out_dir = {json.dumps(cfg.out_dir)}",
              f"data_seed_range = {json.dumps(list(cfg.data_seed_range))}",
              f"eval_seed_range = {json.dumps(list(cfg.eval_seed_range))}",
              f"diversity_samples = {cfg.diversity_samples}",
              f"tau_values = {json.dumps(list(cfg.tau_values))}", ""]
    with open(path, "w") as f:
        f.write("\n".join(lines))
    return cfg
