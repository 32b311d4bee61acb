"""Command-line pipeline driver.

Stages write JSON reports plus CSV summaries into the output directory;
every report embeds the config hash, world hash, and build identifier so
artifacts can be traced back to the exact run that produced them. Figures
are rendered alongside the CSVs for quick visual checks.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .config import ConfigError, RunConfig, load_config, write_default_config
from .diffusion import DiffusionEngine, NoiseSchedule
from .evalharness import diversity_probe, eval_alignment
from .nets import Decoder, Projector, RewardModel
from .projector import FrozenReward, pretrain, train_final
from .reward import RewardDataset, generate_dataset, train_reward
from .testbed import InfeasibleWorldError, make_world

# fixed init keys per model so every stage is reproducible from the config alone
_REWARD_INIT_KEY = 11
_PROJECTOR_INIT_KEY = 13
_DECODER_INIT_KEY = 17


def _build_id():
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             cwd=here, capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    try:
        from importlib.metadata import version
        return "v" + version("noiseproj")
    except Exception:
        return "unknown"


def _provenance(cfg: RunConfig, world=None):
    prov = {"config_hash": cfg.hash(), "build_id": _build_id()}
    if world is not None:
        prov["world_hash"] = world.hash()
    return prov


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _save_fig(fig, path):
    # fixed metadata keeps PNG output byte-stable across reruns
    fig.savefig(path, dpi=100, metadata={"Software": "noiseproj"})
    import matplotlib.pyplot as plt
    plt.close(fig)


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _parse_seed_range(text):
    try:
        lo, _, hi = text.partition("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}")
    if hi <= lo:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return (lo, hi)


def _setup(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.out:
        cfg.out_dir = args.out
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg


def _engine(cfg, world):
    return DiffusionEngine(world, NoiseSchedule(cfg.schedule))


def _load_reward(cfg, path):
    rng = np.random.Generator(np.random.Philox(key=_REWARD_INIT_KEY))
    model = RewardModel(cfg.backbone, rng)
    load_checkpoint(path, model, expected_config_hash=cfg.hash(),
                    override=getattr(_load_reward, "_override", False))
    return model


def _new_projector(cfg):
    rng = np.random.Generator(np.random.Philox(key=_PROJECTOR_INIT_KEY))
    return Projector(cfg.backbone, rng)


# ---------------------------------------------------------------- commands


def cmd_make_world(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    out = os.path.join(cfg.out_dir, "world.json")
    payload = dict(world.to_json())
    payload["provenance"] = _provenance(cfg, world)
    _write_json(out, payload)
    print(f"wrote {out} (world hash {world.hash()})")
    return 0


def cmd_gen_data(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    engine = _engine(cfg, world)
    seed_range = args.seed_range or cfg.data_seed_range
    pids = [p.prompt_id for p in world.prompts]
    ds = generate_dataset(world, engine, pids, seed_range)
    out = os.path.join(cfg.out_dir, "reward_dataset.jsonl")
    ds.write(out)
    counts = np.bincount([t.score for t in ds.triplets], minlength=10)
    _write_csv(os.path.join(cfg.out_dir, "reward_dataset_summary.csv"),
               ["score", "count"], list(enumerate(counts.tolist())))
    plt = _plt()
    fig, ax = plt.subplots()
    ax.bar(range(10), counts)
    ax.set_xlabel("oracle token score")
    ax.set_ylabel("triplets")
    _save_fig(fig, os.path.join(cfg.out_dir, "reward_dataset_scores.png"))
    _write_json(os.path.join(cfg.out_dir, "gen_data_report.json"), {
        "n_triplets": len(ds.triplets),
        "seed_range": list(seed_range),
        "score_histogram": counts.tolist(),
        "provenance": _provenance(cfg, world),
    })
    print(f"wrote {out} ({len(ds.triplets)} triplets)")
    return 0


def cmd_train_reward(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    ds_path = os.path.join(cfg.out_dir, "reward_dataset.jsonl")
    if not os.path.exists(ds_path):
        print(f"error: {ds_path} not found; run gen-data first", file=sys.stderr)
        return 1
    ds = RewardDataset.read(ds_path)
    rng = np.random.Generator(np.random.Philox(key=_REWARD_INIT_KEY))
    model = RewardModel(cfg.backbone, rng)
    report = train_reward(ds, model, world, cfg.reward)
    save_checkpoint(os.path.join(cfg.out_dir, "reward.ckpt"), model,
                    cfg.hash(), "reward")
    report["provenance"] = _provenance(cfg, world)
    _write_json(os.path.join(cfg.out_dir, "train_reward_report.json"), report)
    rows = [[e["epoch"], e["train_ce"], e["holdout_ce"], e["holdout_top1"],
             e["holdout_within1"]] for e in report["epochs"]]
    _write_csv(os.path.join(cfg.out_dir, "train_reward_epochs.csv"),
               ["epoch", "train_ce", "holdout_ce", "holdout_top1", "holdout_within1"],
               rows)
    plt = _plt()
    fig, ax = plt.subplots()
    ep = [e["epoch"] for e in report["epochs"]]
    ax.plot(ep, [e["train_ce"] for e in report["epochs"]], label="train CE")
    ax.plot(ep, [e["holdout_ce"] for e in report["epochs"]], label="holdout CE")
    ax.set_xlabel("epoch")
    ax.legend()
    _save_fig(fig, os.path.join(cfg.out_dir, "train_reward_curves.png"))
    final = report["epochs"][-1]
    print(f"reward trained: holdout within-1 {final['holdout_within1']:.3f}, "
          f"spearman {final['holdout_spearman']:.3f}")
    return 0


def cmd_warmup(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    projector = _new_projector(cfg)
    rng = np.random.Generator(np.random.Philox(key=_DECODER_INIT_KEY))
    decoder = Decoder(cfg.backbone, rng)
    report = pretrain(projector, decoder, world, cfg.train)
    save_checkpoint(os.path.join(cfg.out_dir, "projector-warmup.ckpt"),
                    projector, cfg.hash(), "projector-warmup")
    report["provenance"] = _provenance(cfg, world)
    _write_json(os.path.join(cfg.out_dir, "warmup_report.json"), report)
    rows = [[e["epoch"], e["loss"], e["kl"], e["reconstruction"]]
            for e in report["epochs"]]
    _write_csv(os.path.join(cfg.out_dir, "warmup_epochs.csv"),
               ["epoch", "loss", "kl", "reconstruction"], rows)
    plt = _plt()
    fig, ax = plt.subplots()
    ep = [e["epoch"] for e in report["epochs"]]
    ax.plot(ep, [e["loss"] for e in report["epochs"]], label="total")
    ax.plot(ep, [e["kl"] for e in report["epochs"]], label="kl")
    ax.plot(ep, [e["reconstruction"] for e in report["epochs"]], label="reconstruction")
    ax.set_xlabel("epoch")
    ax.set_yscale("log")
    ax.legend()
    _save_fig(fig, os.path.join(cfg.out_dir, "warmup_curves.png"))
    print(f"warmup done: final loss {report['epochs'][-1]['loss']:.4f}")
    return 0


def _train_projector_once(cfg, world, tau, warmup_path, reward_path):
    hyper = cfg.train
    if tau is not None:
        # ablation entry point: same warmup, different constraint weight
        from dataclasses import replace
        hyper = replace(hyper, tau=float(tau))
    projector = _new_projector(cfg)
    load_checkpoint(warmup_path, projector, expected_config_hash=cfg.hash())
    reward = _load_reward(cfg, reward_path)
    frozen = FrozenReward(reward)
    engine = _engine(cfg, world)
    report = train_final(projector, frozen, world, engine, hyper)
    return projector, report, hyper


def cmd_train_projector(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    warmup_path = os.path.join(cfg.out_dir, "projector-warmup.ckpt")
    reward_path = os.path.join(cfg.out_dir, "reward.ckpt")
    for p, stage in ((warmup_path, "warmup"), (reward_path, "train-reward")):
        if not os.path.exists(p):
            print(f"error: {p} not found; run {stage} first", file=sys.stderr)
            return 1
    projector, report, hyper = _train_projector_once(
        cfg, world, args.tau, warmup_path, reward_path)
    save_checkpoint(os.path.join(cfg.out_dir, "projector-final.ckpt"),
                    projector, cfg.hash(), "projector-final")
    report["tau"] = hyper.tau
    report["provenance"] = _provenance(cfg, world)
    _write_json(os.path.join(cfg.out_dir, "train_projector_report.json"), report)
    rows = [[e["epoch"], e["mean_logit_loss"], e["mean_kl"], e["mean_r_refined"],
             e["mean_r_init"], e["probe_alignment"]] for e in report["epochs"]]
    _write_csv(os.path.join(cfg.out_dir, "train_projector_epochs.csv"),
               ["epoch", "logit_loss", "kl", "r_refined", "r_init", "probe_alignment"],
               rows)
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ep = [e["epoch"] for e in report["epochs"]]
    ax1.plot(ep, [e["mean_r_refined"] for e in report["epochs"]], label="refined")
    ax1.plot(ep, [e["mean_r_init"] for e in report["epochs"]], label="initial")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean distilled reward")
    ax1.legend()
    ax2.plot(ep, [e["probe_alignment"] for e in report["epochs"]])
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("probe alignment")
    _save_fig(fig, os.path.join(cfg.out_dir, "train_projector_curves.png"))
    print(f"projector trained (tau={hyper.tau}): probe alignment "
          f"{report['final']['probe_alignment']:.2f}")
    return 0


def cmd_eval(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    engine = _engine(cfg, world)
    seed_range = args.seed_range or cfg.eval_seed_range
    base = eval_alignment(engine, world, None, seed_range)
    reports = {"pretrained": base.to_json()}
    proj_path = os.path.join(cfg.out_dir, "projector-final.ckpt")
    if os.path.exists(proj_path):
        projector = _new_projector(cfg)
        load_checkpoint(proj_path, projector, expected_config_hash=cfg.hash())
        reports["projector"] = eval_alignment(engine, world, projector,
                                              seed_range).to_json()
    payload = {"reports": reports, "seed_range": list(seed_range),
               "provenance": _provenance(cfg, world)}
    _write_json(os.path.join(cfg.out_dir, "eval_report.json"), payload)
    rows = []
    for method, rep in reports.items():
        for pid, scores in rep["sentence_scores"].items():
            rows.append([method, pid, float(np.mean(scores)), float(np.std(scores))])
    _write_csv(os.path.join(cfg.out_dir, "eval_summary.csv"),
               ["method", "prompt_id", "mean_sentence_score", "std_sentence_score"],
               rows)
    plt = _plt()
    fig, ax = plt.subplots()
    for method, rep in reports.items():
        allscores = [s for v in rep["sentence_scores"].values() for s in v]
        ax.hist(allscores, bins=20, alpha=0.6, label=method)
    ax.set_xlabel("oracle sentence score")
    ax.legend()
    _save_fig(fig, os.path.join(cfg.out_dir, "eval_hist.png"))
    for method, rep in reports.items():
        print(f"{method}: mean sentence score {rep['mean']:.2f} "
              f"(std {rep['std']:.2f})")
    return 0


def cmd_diversity(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    engine = _engine(cfg, world)
    projector = None
    proj_path = os.path.join(cfg.out_dir, "projector-final.ckpt")
    if os.path.exists(proj_path):
        projector = _new_projector(cfg)
        load_checkpoint(proj_path, projector, expected_config_hash=cfg.hash())
    records = {}
    for prompt in world.prompts:
        records[str(prompt.prompt_id)] = diversity_probe(
            engine, world, projector, prompt.prompt_id,
            n_samples=cfg.diversity_samples)
    payload = {"records": records, "n_samples": cfg.diversity_samples,
               "provenance": _provenance(cfg, world)}
    _write_json(os.path.join(cfg.out_dir, "diversity_report.json"), payload)
    rows = []
    for pid, rec in records.items():
        for method, vals in rec.items():
            rows.append([pid, method, vals["split_fid"], vals["is_like"]])
    _write_csv(os.path.join(cfg.out_dir, "diversity_summary.csv"),
               ["prompt_id", "method", "split_fid", "is_like"], rows)
    plt = _plt()
    fig, ax = plt.subplots()
    pids = sorted(records)
    for method, color in (("pretrained", "C0"), ("projector", "C1")):
        ys = [records[p][method]["is_like"] for p in pids if method in records[p]]
        if ys:
            ax.plot(pids[:len(ys)], ys, "o-", color=color, label=method)
    ax.set_xlabel("prompt")
    ax.set_ylabel("mode-coverage score")
    ax.legend()
    _save_fig(fig, os.path.join(cfg.out_dir, "diversity.png"))
    print(f"diversity probe written for {len(records)} prompts")
    return 0


def cmd_ablate_tau(args):
    cfg = _setup(args)
    world = make_world(cfg.world)
    engine = _engine(cfg, world)
    warmup_path = os.path.join(cfg.out_dir, "projector-warmup.ckpt")
    reward_path = os.path.join(cfg.out_dir, "reward.ckpt")
    for p, stage in ((warmup_path, "warmup"), (reward_path, "train-reward")):
        if not os.path.exists(p):
            print(f"error: {p} not found; run {stage} first", file=sys.stderr)
            return 1
    taus = [args.tau] if args.tau is not None else list(cfg.tau_values)
    seed_range = args.seed_range or cfg.eval_seed_range
    table = []
    for tau in taus:
        row = {"tau": float(tau)}
        try:
            projector, report, _ = _train_projector_once(
                cfg, world, tau, warmup_path, reward_path)
            rep = eval_alignment(engine, world, projector, seed_range)
            row.update(status="ok", mean=rep.mean, std=rep.std,
                       train_kl=report["final"]["mean_kl"])
        except (RuntimeError, CheckpointError) as e:
            # a diverged tau still yields a table row, marked failed
            row.update(status="failed", error=str(e))
        table.append(row)
        print(f"tau={tau}: {row.get('mean', row['status'])}")
    payload = {"table": table, "seed_range": list(seed_range),
               "provenance": _provenance(cfg, world)}
    _write_json(os.path.join(cfg.out_dir, "ablate_tau_report.json"), payload)
    rows = [[r["tau"], r["status"], r.get("mean", ""), r.get("std", ""),
             r.get("train_kl", "")] for r in table]
    _write_csv(os.path.join(cfg.out_dir, "ablate_tau.csv"),
               ["tau", "status", "mean_sentence_score", "std", "train_kl"], rows)
    ok = [r for r in table if r["status"] == "ok"]
    if ok:
        plt = _plt()
        fig, ax = plt.subplots()
        ax.errorbar([r["tau"] for r in ok], [r["mean"] for r in ok],
                    yerr=[r["std"] for r in ok], fmt="o-")
        ax.set_xlabel("tau")
        ax.set_ylabel("mean sentence score (unseen seeds)")
        _save_fig(fig, os.path.join(cfg.out_dir, "ablate_tau.png"))
    return 0


def cmd_init_config(args):
    path = args.path
    write_default_config(path)
    print(f"wrote default config to {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="noiseproj",
        description="Prompt-aware initial-noise projection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_range=False, tau=False):
        p.add_argument("--config", help="key-value config file (defaults built in)")
        p.add_argument("--out", help="output directory (overrides config)")
        if seed_range:
            p.add_argument("--seed-range", type=_parse_seed_range, metavar="A..B",
                           help="half-open seed range")
        if tau:
            p.add_argument("--tau", type=float, help="constraint weight override")

    common(sub.add_parser("make-world", help="build and serialize the world"))
    common(sub.add_parser("gen-data", help="generate the scored-triplet dataset"),
           seed_range=True)
    common(sub.add_parser("train-reward", help="distill the oracle into the reward model"))
    common(sub.add_parser("warmup", help="pretrain the projector to the identity map"))
    common(sub.add_parser("train-projector", help="final preference-style training"),
           tau=True)
    common(sub.add_parser("eval", help="oracle alignment with and without refinement"),
           seed_range=True)
    common(sub.add_parser("diversity", help="split-FID / mode-coverage probe"))
    common(sub.add_parser("ablate-tau", help="sweep the constraint weight"),
           seed_range=True, tau=True)
    pc = sub.add_parser("init-config", help="write a default config file")
    pc.add_argument("path")
    return parser


_COMMANDS = {
    "make-world": cmd_make_world,
    "gen-data": cmd_gen_data,
    "train-reward": cmd_train_reward,
    "warmup": cmd_warmup,
    "train-projector": cmd_train_projector,
    "eval": cmd_eval,
    "diversity": cmd_diversity,
    "ablate-tau": cmd_ablate_tau,
    "init-config": cmd_init_config,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, InfeasibleWorldError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
