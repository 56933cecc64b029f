"""
Tests for run configuration and the headmask command line
"""

import csv

import pytest

from config import RESOLVED_CONFIG_NAME, load_run_config
from main import main
from service.errors import ConfigurationError

TINY_RUN = """\
# tiny reversal run
task=reversal
vocab_size=12
task_min_len=2
task_max_len=4
n_pairs=200
layers=1
heads_per_layer=2
d_model=8
d_ff=16
max_len=16
max_steps=3
batch_size=16
warmup_steps=4
eval_every=0
log_every=1
dev_eval_limit=20
num_groups=3
"""


@pytest.fixture
def run_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY_RUN)
    return path


def _train(run_file, out, *extra):
    return main(["train", "--config", str(run_file), "--out", str(out), *extra])


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# Configuration


def test_file_values_override_defaults(run_file):
    config = load_run_config(run_file)
    assert (config.layers, config.heads_per_layer, config.total_heads) == (1, 2, 6)
    assert config.mask_n == "12.5%"


def test_environment_overrides_file_and_cli_overrides_environment(run_file, monkeypatch):
    monkeypatch.setenv("HEADMASK_SEED", "7")
    assert load_run_config(run_file).seed == 7
    assert load_run_config(run_file, seed=9).seed == 9


def test_unknown_config_key_is_rejected(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("layers=1\nbogus=3\n")
    with pytest.raises(ConfigurationError):
        load_run_config(path)
    assert main(["heads", "--config", str(path)]) == 2


def test_percentage_mask_resolves_against_head_count(run_file):
    train_config = load_run_config(run_file, variant="random", mask_n="50%").to_train_config()
    assert train_config.mask_n == 3


def test_resolved_config_reloads_to_the_same_values(run_file, tmp_path):
    config = load_run_config(run_file, variant="impt", mask_n=2)
    path = config.write_resolved(tmp_path / "resolved")
    assert path.name == RESOLVED_CONFIG_NAME
    reloaded = load_run_config(path)
    assert reloaded.model_dump() == load_run_config(run_file, variant="impt", mask_n="2").model_dump()


# Commands


def test_heads_lists_every_flat_id(capsys):
    assert main(["heads", "--layers", "1", "--heads", "2"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "flat_id,attn_type,layer,head"
    assert lines[1] == "0,enc_self,0,0"
    assert lines[-1] == "5,enc_dec,0,1"
    assert len(lines) == 7


def test_gen_data_is_reproducible(run_file, tmp_path):
    assert main(["gen-data", "--config", str(run_file), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(run_file), "--out", str(tmp_path / "b")]) == 0
    for split in ("train", "dev", "test"):
        assert (tmp_path / "a" / f"{split}.tsv").read_bytes() == (tmp_path / "b" / f"{split}.tsv").read_bytes()
    assert len((tmp_path / "a" / "dev.tsv").read_text().splitlines()) == 10


def test_invalid_mask_count_fails_before_training(run_file, tmp_path):
    assert _train(run_file, tmp_path / "run", "--variant", "random", "--mask-n", "99") == 2
    assert not (tmp_path / "run" / "checkpoint").exists()


def test_negative_seed_is_a_usage_error(run_file, tmp_path):
    assert _train(run_file, tmp_path / "run", "--seed", "-1") == 2


def test_missing_checkpoint_is_a_data_error(tmp_path):
    assert main(["eval", str(tmp_path / "nothing")]) == 3


def test_training_twice_gives_identical_checkpoints(run_file, tmp_path):
    assert _train(run_file, tmp_path / "a") == 0
    assert _train(run_file, tmp_path / "b") == 0
    assert _train(run_file, tmp_path / "c", "--variant", "random", "--mask-n", "0") == 0
    params = [(tmp_path / run / "checkpoint" / "params.bin").read_bytes() for run in ("a", "b", "c")]
    assert params[0] == params[1] == params[2]
    log = _rows(tmp_path / "a" / "training_log.csv")
    assert log[0] == ["step", "variant", "loss", "lr", "dev_metric", "masked_heads"]
    assert len(log) == 4
    assert (tmp_path / "a" / RESOLVED_CONFIG_NAME).exists()


def test_full_pipeline(run_file, tmp_path):
    run = tmp_path / "impt"
    assert _train(run_file, run, "--variant", "impt", "--mask-n", "2") == 0
    checkpoint = str(run / "checkpoint")

    assert main(["importance", checkpoint, "--split", "dev"]) == 0
    importance = _rows(run / "importance.csv")
    assert importance[0] == ["flat_id", "attn_type", "layer", "head", "importance"]
    assert len(importance) == 7

    assert main(["sweep", checkpoint, str(run / "importance.csv"), "--mode", "all", "--no-bleu"]) == 0
    sweep = _rows(run / "sweep.csv")
    assert len(sweep) == 1 + 3 * 4
    assert {row[0] for row in sweep[1:]} == {"groups", "ascending", "descending"}

    assert main(["eval", checkpoint, "--out", str(tmp_path / "plain")]) == 0
    assert main(["eval", checkpoint, "--mask", "", "--out", str(tmp_path / "empty")]) == 0
    assert (tmp_path / "plain" / "eval.csv").read_text() == (tmp_path / "empty" / "eval.csv").read_text()
    assert main(["eval", checkpoint, "--mask", "0,4", "--out", str(tmp_path / "masked")]) == 0
    assert _rows(tmp_path / "masked" / "eval.csv")[1][1] == "0;4"

    assert main(["stats", str(run / "importance.csv"), str(run / "importance.csv"),
                 "--tags", "a,b", "--out", str(tmp_path / "stats")]) == 0
    stats = _rows(tmp_path / "stats" / "stats.csv")
    assert stats[1][1:] == stats[2][1:]

    assert main(["plot", str(run / "sweep.csv"), str(run / "training_log.csv"),
                 str(tmp_path / "stats" / "histogram.csv"), "--out", str(tmp_path / "plots")]) == 0
    assert sorted(p.name for p in (tmp_path / "plots").iterdir()) == [
        "histogram.svg", "sweep.svg", "training_log.svg"]


def test_robustness_writes_the_matrix_and_its_checks(run_file, tmp_path):
    out = tmp_path / "robustness"
    assert main(["robustness", "--config", str(run_file), "--seeds", "1", "--max-steps", "2",
                 "--out", str(out)]) == 0
    matrix = _rows(out / "robustness.csv")
    assert [(row[2], row[3]) for row in matrix[1:]] == [
        ("baseline", "0"), ("random", "1"), ("impt", "1"), ("random", "2"), ("impt", "2"),
        ("random", "3"), ("impt", "3")]
    orderings = _rows(out / "orderings.csv")
    assert orderings[0] == ["check", "passed", "total", "required", "holds"]
    assert len(orderings) == 5
    assert (out / RESOLVED_CONFIG_NAME).exists()
    assert main(["plot", str(out / "robustness.csv"), "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "robustness.svg").exists()


@pytest.mark.parametrize("seeds", ["x", ""])
def test_robustness_rejects_bad_seed_lists(run_file, tmp_path, seeds):
    assert main(["robustness", "--config", str(run_file), "--seeds", seeds, "--out", str(tmp_path)]) == 2


def test_eval_rejects_out_of_range_heads(run_file, tmp_path):
    assert _train(run_file, tmp_path / "run") == 0
    assert main(["eval", str(tmp_path / "run" / "checkpoint"), "--mask", "6"]) == 2
