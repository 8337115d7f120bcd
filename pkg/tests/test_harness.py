import json
import os

import numpy as np
import pytest

from reckon import cli, validate
from reckon.aev import load_aev
from reckon.config import RunConfig, load_config, parse_text
from reckon.eprop import UpdateStats
from reckon.harness import (
    HarnessIOError,
    TrialSource,
    cmd_eval,
    cmd_gen,
    cmd_train,
    decode_checkpoint,
    encode_checkpoint,
    evaluate,
    initial_weights,
    load_checkpoint,
    network_config,
)
from reckon.snn import NetworkConfig, Weights
from reckon.task import ConfigError

SMALL = dict(n_rec=16, theta="2", tau_mem_ms="100", tau_out_ms=20.0, w0=24, lr_shift=8,
             lr_out_shift=8, f_target=1.0, n_cues=3, cue_steps=20, gap_steps=5, delay_steps=30,
             recall_steps=20, group_size=2, cue_rate=0.2, noise_rate=0.02, recall_rate=0.2,
             epochs=2, trials_per_epoch=4, eval_trials=16, patience=0)


def small(**kw):
    return RunConfig({**SMALL, **kw})


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


# --- config ---


def test_config_text_sections_and_comments():
    v = parse_text("[network]\nn_rec = 32  # hidden\n\n[run]\nseed = 0x10\n")
    assert v == {"n_rec": 32, "seed": 16}


@pytest.mark.parametrize("text", ["[network]\nbogus = 1\n", "[nope]\n", "[run]\nn_rec = 3\n",
                                  "[network]\nn_rec\n", "[network]\nn_rec = many\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_precedence_file_env_flags(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("[run]\nseed = 1\nepochs = 5\n[network]\nn_rec = 8\n")
    cfg = load_config(str(p), env={"RECKON_SEED": "2", "RECKON_EPOCHS": "6", "OTHER": "x"},
                      overrides={"seed": 3})
    assert (cfg.seed, cfg.epochs, cfg.n_rec) == (3, 6, 8)
    with pytest.raises(ConfigError):
        load_config(None, env={"RECKON_NOPE": "1"})


@pytest.mark.parametrize("kw", [{"epochs": -1}, {"decision_window": 0.0}, {"task": "aev"},
                                {"ste_bounds": "1,2,3,4"}, {"threads": 0}, {"w0": 200}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small(**kw)


def test_dump_round_trips():
    cfg = small(seed=9, feedback="random-fixed")
    again = RunConfig(parse_text(cfg.dump()))
    assert again.as_dict() == cfg.as_dict()


def test_network_hash_ignores_init_scale_only():
    a = small()
    assert a.network_hash(8) == small(w0=3, seed=5, lr_shift=2).network_hash(8)
    assert a.network_hash(8) != small(theta="3").network_hash(8)
    assert a.network_hash(8) != a.network_hash(9)


# --- checkpoints ---


def test_checkpoint_round_trip():
    cfg = NetworkConfig(n_in=5, n_rec=6, n_out=3)
    w = Weights.random(cfg, 1, 127)
    back, h = decode_checkpoint(encode_checkpoint(w, "ab" * 32))
    assert h == "ab" * 32
    for k in ("w_in", "w_rec", "w_out"):
        assert np.array_equal(getattr(back, k), getattr(w, k))


def test_checkpoint_corruption_is_an_io_error(tmp_path):
    cfg = NetworkConfig(n_in=5, n_rec=6, n_out=3)
    data = encode_checkpoint(Weights.random(cfg, 1, 10), "00" * 32)
    with pytest.raises(HarnessIOError):
        decode_checkpoint(data[:-1])
    with pytest.raises(HarnessIOError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(HarnessIOError):
        load_checkpoint(tmp_path / "missing.rkw")


# --- train / eval ---


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = small(seed=4, eval_every=1)
    summary = cmd_train(cfg, str(out))
    return cfg, out, summary


def _records(out):
    with open(out / "metrics.jsonl") as fh:
        return [json.loads(line) for line in fh]


def test_train_writes_artifacts(trained):
    _, out, summary = trained
    for name in ("config.cfg", "metrics.jsonl", "checkpoint.rkw", "summary.json",
                 "accuracy_vs_epoch.csv", "skip_rate_vs_epoch.csv", "accuracy_vs_latency.csv",
                 "timing.json"):
        assert (out / name).exists(), name
    recs = _records(out)
    assert recs[0]["kind"] == "header" and len(recs) == 1 + summary["epochs_run"] == 3
    assert all("heldout_accuracy" in r for r in recs[1:])
    assert summary["memory_report"]["et"] > 0


def test_metrics_conserve_update_counts(trained):
    _, out, summary = trained
    total = UpdateStats()
    for r in _records(out)[1:]:
        u = r["updates"]
        assert u["applied"] + u["skipped_et"] + u["skipped_ste"] == u["candidates"]
        assert r["skip_rate"] == pytest.approx((u["skipped_et"] + u["skipped_ste"]) / u["candidates"])
        total.merge(UpdateStats(**u))
    assert total.as_dict() == summary["updates_total"]


def test_eval_reproduces_training_heldout(trained, tmp_path):
    cfg, out, summary = trained
    res = cmd_eval(cfg, str(out / "checkpoint.rkw"), str(tmp_path))
    assert res["heldout_accuracy"] == summary["heldout_accuracy"]
    assert res["heldout_loss"] == summary["heldout_loss"]
    assert res["memory_report"]["et"] == 0
    assert (tmp_path / "eval.json").exists()


def test_eval_threads_do_not_change_results(trained):
    cfg, out, summary = trained
    res = cmd_eval(cfg.copy(threads=3), str(out / "checkpoint.rkw"))
    assert res["heldout_accuracy"] == summary["heldout_accuracy"]
    assert res["heldout_loss"] == pytest.approx(summary["heldout_loss"], rel=1e-12)


def test_eval_refuses_other_network(trained):
    cfg, out, _ = trained
    with pytest.raises(ConfigError):
        cmd_eval(cfg.copy(theta="3"), str(out / "checkpoint.rkw"))


def test_training_is_deterministic(trained, tmp_path):
    cfg, out, _ = trained
    cmd_train(cfg, str(tmp_path))
    for name in ("metrics.jsonl", "checkpoint.rkw", "summary.json", "accuracy_vs_epoch.csv"):
        assert read(out / name) == read(tmp_path / name), name


def test_zero_epochs_keeps_the_init(tmp_path):
    cfg = small(epochs=0)
    summary = cmd_train(cfg, str(tmp_path))
    assert len(_records(tmp_path)) == 1
    w, _ = load_checkpoint(tmp_path / "checkpoint.rkw")
    src = TrialSource(cfg)
    w0 = initial_weights(cfg, network_config(cfg, src.n_channels))
    assert np.array_equal(w.w_rec, w0.w_rec) and np.array_equal(w.w_out, w0.w_out)
    assert summary["skip_rate_converged"] is None


def test_untrained_network_is_at_chance(tmp_path):
    cfg = small(epochs=0, eval_trials=1000)
    summary = cmd_train(cfg, str(tmp_path))
    assert abs(summary["heldout_accuracy"] - 0.5) <= 0.05


def test_learning_off_matches_forward_only(tmp_path):
    cfg = small(learning=False, epochs=1, trials_per_epoch=8)
    cmd_train(cfg, str(tmp_path))
    src = TrialSource(cfg)
    net_cfg = network_config(cfg, src.n_channels)
    w0 = initial_weights(cfg, net_cfg)
    w, _ = load_checkpoint(tmp_path / "checkpoint.rkw")
    for k in ("w_in", "w_rec", "w_out"):
        assert np.array_equal(getattr(w, k), getattr(w0, k))
    ev = evaluate(net_cfg, w0, src.train(0), cfg.decision_window)
    rec = _records(tmp_path)[1]
    assert rec["accuracy"] == ev.accuracy
    assert rec["loss"] == pytest.approx(ev.loss, rel=1e-12)
    assert rec["updates"]["candidates"] > 0 and rec["updates"]["nonzero_deltas"] == 0


def test_aev_task_trains_from_generated_files(tmp_path):
    cmd_gen(small(seed=1), 6, str(tmp_path / "data"))
    cfg = small(task="aev", aev_train=str(tmp_path / "data"), epochs=1, eval_trials=6)
    summary = cmd_train(cfg, str(tmp_path / "run"))
    assert summary["heldout_trials"] == 6


# --- gen ---


def test_gen_manifest_matches_files(tmp_path):
    m = cmd_gen(small(seed=2), 12, str(tmp_path))
    with open(tmp_path / "manifest.json") as fh:
        assert json.load(fh) == m
    counts = [0, 0]
    for e in m["trials"]:
        _, _, targets, mask = load_aev(tmp_path / e["file"])
        label = int(np.argmax(targets[mask].sum(axis=0)))
        assert label == e["label"]
        counts[label] += 1
    assert m["label_counts"] == {"left": counts[0], "right": counts[1]}


def test_gen_zero_trials_writes_only_manifest(tmp_path):
    cmd_gen(small(), 0, str(tmp_path))
    assert os.listdir(tmp_path) == ["manifest.json"]


def test_gen_is_deterministic(tmp_path):
    cmd_gen(small(seed=3), 5, str(tmp_path / "a"))
    cmd_gen(small(seed=3), 5, str(tmp_path / "b"))
    for name in sorted(os.listdir(tmp_path / "a")):
        assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)


# --- CLI ---


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["train", "--set", "bogus=1"]) == 2
    assert cli.main(["train", "--set", "novalue"]) == 2
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.rkw")]) == 3
    assert cli.main(["gen", "--n-trials", "-1"]) == 2
    assert cli.main(["validate", "--only", "nope"]) == 2
    bad = tmp_path / "bad.aev"
    bad.write_bytes(b"AEV1")
    assert cli.main(["train", "--set", "task=aev", "--set", f"aev_train={tmp_path}"]) == 3


def test_cli_gen_and_train(tmp_path, capsys):
    args = ["--set", "n_cues=3", "--set", "cue_steps=10", "--set", "delay_steps=10",
            "--set", "recall_steps=10", "--set", "n_rec=8", "--seed", "1"]
    assert cli.main(["gen", "--n-trials", "2", "--out", str(tmp_path / "g")] + args) == 0
    assert json.loads(capsys.readouterr().out)["n_trials"] == 2
    assert cli.main(["train", "--quiet", "--out", str(tmp_path / "t"), "--set", "epochs=1",
                     "--set", "trials_per_epoch=2", "--set", "eval_trials=4"] + args) == 0
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "t" / "checkpoint.rkw"), "--n-trials", "4",
                     "--decision-window", "0.5"] + args) == 0
    printed = capsys.readouterr().out
    res = json.loads(printed[printed.rindex("\n{\n") + 1:])
    assert res["heldout_trials"] == 4 and res["decision_window"] == 0.5


def test_cli_validate_report(tmp_path, capsys, monkeypatch):
    report = tmp_path / "r.json"
    assert cli.main(["validate", "--only", "step_order", "--report", str(report)]) == 0
    assert json.loads(report.read_text())["checks"][0]["name"] == "step_order"
    monkeypatch.setitem(validate.CHECKS, "step_order", lambda: validate.Check("step_order", False))
    assert cli.main(["validate", "--only", "step_order"]) == 1
