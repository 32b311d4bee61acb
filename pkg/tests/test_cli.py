"""End-to-end command-line pipeline tests on a miniature configuration."""

import json
import os

import pytest

from noiseproj.cli import main
from noiseproj.config import load_config

TINY_CONFIG = """
# miniature world: every stage runs in seconds
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
eval_seed_range = [20, 28]
diversity_samples = 120
tau_values = [0.0, 50.0]
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg_path = d / "tiny.cfg"
    cfg_path.write_text(TINY_CONFIG)
    return d, str(cfg_path)


def run(workdir, *argv):
    d, cfg = workdir
    return main([argv[0], "--config", cfg, "--out", str(d / "out"), *argv[1:]])


def read(workdir, name):
    return (workdir[0] / "out" / name).read_bytes()


def test_no_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_malformed_seed_range_exits_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--seed-range", "5..2"])
    assert e.value.code == 2


def test_init_config_round_trips(tmp_path):
    path = tmp_path / "default.cfg"
    assert main(["init-config", str(path)]) == 0
    from noiseproj.config import RunConfig
    assert load_config(str(path)).hash() == RunConfig().hash()


def test_bad_config_key_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("no_such_key = 1\n")
    assert main(["make-world", "--config", str(path)]) == 1
    assert "unknown key" in capsys.readouterr().err


def test_stage_order_enforced(workdir, capsys):
    # prerequisites missing: each later stage refuses instead of crashing
    assert run(workdir, "train-reward") == 1
    assert "gen-data" in capsys.readouterr().err
    assert run(workdir, "train-projector") == 1
    assert "warmup" in capsys.readouterr().err


def test_make_world_deterministic(workdir):
    assert run(workdir, "make-world") == 0
    first = read(workdir, "world.json")
    assert run(workdir, "make-world") == 0
    assert read(workdir, "world.json") == first


def test_gen_data_writes_dataset_and_rerun_is_byte_identical(workdir):
    assert run(workdir, "gen-data") == 0
    first = read(workdir, "reward_dataset.jsonl")
    # 10 seeds x 2 prompts x 2 tokens
    assert first.count(b"\n") == 1 + 40
    assert run(workdir, "gen-data") == 0
    assert read(workdir, "reward_dataset.jsonl") == first
    report = json.loads(read(workdir, "gen_data_report.json"))
    assert report["n_triplets"] == 40
    assert sum(report["score_histogram"]) == 40


def test_train_reward_writes_checkpoint_and_report(workdir):
    assert run(workdir, "train-reward") == 0
    report = json.loads(read(workdir, "train_reward_report.json"))
    assert len(report["epochs"]) == 2
    assert {"train_ce", "holdout_ce"} <= set(report["epochs"][-1])
    assert (workdir[0] / "out" / "reward.ckpt").exists()


def test_warmup_and_projector_stages(workdir):
    assert run(workdir, "warmup") == 0
    warm = json.loads(read(workdir, "warmup_report.json"))
    assert len(warm["epochs"]) == 2
    assert run(workdir, "train-projector") == 0
    rep = json.loads(read(workdir, "train_projector_report.json"))
    assert rep["tau"] == 200.0
    assert "probe_alignment" in rep["final"]


def test_tau_flag_overrides_constraint_weight(workdir):
    assert run(workdir, "train-projector", "--tau", "7.5") == 0
    rep = json.loads(read(workdir, "train_projector_report.json"))
    assert rep["tau"] == 7.5


def test_eval_reports_both_methods(workdir):
    assert run(workdir, "eval") == 0
    rep = json.loads(read(workdir, "eval_report.json"))
    assert set(rep["reports"]) == {"pretrained", "projector"}
    assert rep["seed_range"] == [20, 28]
    csv_text = read(workdir, "eval_summary.csv").decode()
    assert csv_text.splitlines()[0] == ("method,prompt_id,mean_sentence_score,"
                                        "std_sentence_score")


def test_eval_seed_range_flag(workdir):
    assert run(workdir, "eval", "--seed-range", "30..34") == 0
    rep = json.loads(read(workdir, "eval_report.json"))
    assert rep["seed_range"] == [30, 34]


def test_diversity_covers_every_prompt(workdir):
    assert run(workdir, "diversity") == 0
    rep = json.loads(read(workdir, "diversity_report.json"))
    assert sorted(rep["records"]) == ["0", "1"]
    for rec in rep["records"].values():
        assert {"pretrained", "projector"} <= set(rec)


def test_ablate_tau_table(workdir):
    assert run(workdir, "ablate-tau", "--tau", "0") == 0
    rep = json.loads(read(workdir, "ablate_tau_report.json"))
    assert [row["tau"] for row in rep["table"]] == [0.0]
    assert rep["table"][0]["status"] == "ok"


def test_reports_embed_provenance(workdir):
    for name in ("gen_data_report.json", "train_reward_report.json",
                 "eval_report.json", "diversity_report.json"):
        prov = json.loads(read(workdir, name))["provenance"]
        assert set(prov) == {"config_hash", "build_id", "world_hash"}


def test_figures_rendered(workdir):
    for name in ("reward_dataset_scores.png", "train_reward_curves.png",
                 "warmup_curves.png", "train_projector_curves.png",
                 "eval_hist.png", "diversity.png"):
        assert read(workdir, name)[:8] == b"\x89PNG\r\n\x1a\n"
