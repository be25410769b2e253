"""Command line behavior: config layering, every subcommand end to end,
determinism across identical invocations, and single-line failures."""

import json
import re

import numpy as np
import pytest

from sanst import cli
from sanst.ingest import load_bundle
from sanst.model import ModelConfig, ModelParams, load_params, save_params


def write_corpus(path, num_users=4, num_pois=9, visits=12):
    """Users cycling different 6-venue subsets of a small town."""
    pois = [(f"venue{i}", 52.0 + 0.002 * i, 13.0 + 0.003 * i) for i in range(num_pois)]
    lines = []
    for u in range(num_users):
        for t in range(visits):
            pid, lat, lon = pois[(u * 2 + (t % 6)) % num_pois]
            lines.append(f"user{u}\t2010-03-{t + 1:02d}T08:00:00Z\t{lat}\t{lon}\t{pid}")
    path.write_text("\n".join(lines) + "\n")


TRAIN_FLAGS = ["--epochs", "4", "--eval-every", "2", "--seed", "5",
               "--batch-size", "2", "--d-id", "8", "--d-s", "4", "--h-s", "3",
               "--max-len", "12", "--num-layers", "1", "--lr", "0.01"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_corpus(root / "checkins.tsv")
    assert cli.main(["prepare", "--input", str(root / "checkins.tsv"),
                     "--output", str(root / "data.bundle")]) == 0
    assert cli.main(["train", "--data", str(root / "data.bundle"),
                     "--out", str(root / "run")] + TRAIN_FLAGS) == 0
    return root


# --- config layering -----------------------------------------------------------------

def test_config_precedence_three_layers():
    model, train, _ = cli.build_configs({}, {})
    assert train.epochs == 200
    model, train, _ = cli.build_configs({"epochs": 3}, {})
    assert train.epochs == 3
    model, train, _ = cli.build_configs({"epochs": 3}, {"epochs": 2})
    assert train.epochs == 2


def test_config_policy_aliases_candidate_policy():
    _, train, policy = cli.build_configs({"policy": "full"}, {})
    assert policy == "full" and train.candidate_policy == "full"
    _, train, policy = cli.build_configs({"candidate_policy": "full"}, {})
    assert policy == "full"
    with pytest.raises(ValueError):
        cli.build_configs({"policy": "everything"}, {})


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\n\nepochs=7\nlr=0.25\nuse_spatial=false\npolicy=full\n")
    values = cli.load_config_file(cfg)
    assert values == {"epochs": 7, "lr": 0.25, "use_spatial": False, "policy": "full"}


def test_config_file_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus=1\n")
    with pytest.raises(ValueError, match="unknown config key"):
        cli.load_config_file(cfg)


def test_config_file_rejects_bad_bool(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("use_spatial=yes\n")
    with pytest.raises(ValueError, match="true or false"):
        cli.load_config_file(cfg)


def test_config_precedence_end_to_end(workspace, tmp_path, capsys):
    # defaults would run 200 epochs; the file asks for 4; the flag wins with 2
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs=4\neval_every=1\nbatch_size=2\nd_id=8\nd_s=4\nh_s=3\n"
                   "max_len=12\nnum_layers=1\n")
    out = tmp_path / "out"
    assert cli.main(["train", "--data", str(workspace / "data.bundle"),
                     "--out", str(out), "--config", str(cfg), "--epochs", "2"]) == 0
    capsys.readouterr()
    epochs = [int(line.split()[0].split("=")[1])
              for line in (out / "train.log").read_text().splitlines()]
    assert epochs == [1, 2]


# --- prepare ---------------------------------------------------------------------------

def test_prepare_stats_and_reproducible_bundle(tmp_path, capsys):
    write_corpus(tmp_path / "in.tsv")
    args = ["prepare", "--input", str(tmp_path / "in.tsv"),
            "--output", str(tmp_path / "a.bundle")]
    assert cli.main(args) == 0
    assert capsys.readouterr().out == "users\t4\npois\t9\ncheckins\t48\n"
    assert cli.main(["prepare", "--input", str(tmp_path / "in.tsv"),
                     "--output", str(tmp_path / "b.bundle")]) == 0
    assert (tmp_path / "a.bundle").read_bytes() == (tmp_path / "b.bundle").read_bytes()


def test_prepare_missing_input_single_error_line(tmp_path, capsys):
    assert cli.main(["prepare", "--input", str(tmp_path / "nope.tsv"),
                     "--output", str(tmp_path / "x.bundle")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert err.count("\n") == 1


def test_prepare_malformed_row_single_error_line(tmp_path, capsys):
    (tmp_path / "bad.tsv").write_text("only\tthree\tfields\n")
    assert cli.main(["prepare", "--input", str(tmp_path / "bad.tsv"),
                     "--output", str(tmp_path / "x.bundle")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and "line 1" in err
    assert err.count("\n") == 1


# --- train -----------------------------------------------------------------------------

def test_train_writes_run_artifacts(workspace):
    run = workspace / "run"
    for name in ("last.ckpt", "last.ckpt.cfg", "best.ckpt", "best.ckpt.cfg", "train.log"):
        assert (run / name).is_file(), name
    lines = (run / "train.log").read_text().splitlines()
    assert [int(l.split()[0].split("=")[1]) for l in lines] == [2, 4]
    for line in lines:
        keys = [kv.split("=")[0] for kv in line.split()]
        assert keys == ["epoch", "loss", "hit10", "ndcg10"]


def flags_with(**overrides):
    flags = TRAIN_FLAGS.copy()
    for key, value in overrides.items():
        flags[flags.index(f"--{key.replace('_', '-')}") + 1] = str(value)
    return flags


def test_train_seed_determines_everything(workspace, tmp_path):
    out_a, out_b, out_c = (tmp_path / x for x in "abc")
    base = ["train", "--data", str(workspace / "data.bundle")]
    assert cli.main(base + ["--out", str(out_a)] + TRAIN_FLAGS) == 0
    assert cli.main(base + ["--out", str(out_b)] + TRAIN_FLAGS) == 0
    assert cli.main(base + ["--out", str(out_c)] + flags_with(seed=12)) == 0
    for name in ("train.log", "last.ckpt", "best.ckpt"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name
    assert (out_a / "last.ckpt").read_bytes() != (out_c / "last.ckpt").read_bytes()


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    out = tmp_path / "resumed"
    base = ["train", "--data", str(workspace / "data.bundle"), "--out", str(out)]
    assert cli.main(base + flags_with(epochs=2)) == 0
    assert cli.main(base + TRAIN_FLAGS + ["--resume"]) == 0
    run = workspace / "run"
    assert (out / "train.log").read_bytes() == (run / "train.log").read_bytes()
    assert (out / "last.ckpt").read_bytes() == (run / "last.ckpt").read_bytes()


def test_train_resume_without_checkpoint_fails(workspace, tmp_path, capsys):
    assert cli.main(["train", "--data", str(workspace / "data.bundle"),
                     "--out", str(tmp_path / "fresh"), "--resume"] + TRAIN_FLAGS) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_train_ablation_flags_reach_checkpoint(workspace, tmp_path):
    out = tmp_path / "ablated"
    assert cli.main(["train", "--data", str(workspace / "data.bundle"),
                     "--out", str(out), "--no-spatial", "--no-temporal"]
                    + flags_with(epochs=1)) == 0
    params = load_params(str(out / "best.ckpt"))
    assert params.config.use_spatial is False
    assert params.config.use_temporal is False
    assert params.spatial is None


def test_train_missing_bundle_single_error_line(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "nope.bundle"),
                     "--out", str(tmp_path / "o")] + TRAIN_FLAGS) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


# --- eval ------------------------------------------------------------------------------

def test_eval_prints_report_and_writes_summary(workspace, tmp_path, capsys):
    summary = tmp_path / "eval.json"
    assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--k", "5",
                     "--summary", str(summary)]) == 0
    out = capsys.readouterr().out
    lines = dict(l.split("\t") for l in out.strip().splitlines())
    assert lines["users"] == "4" and lines["k"] == "5"
    payload = json.loads(summary.read_text())
    assert payload["num_users"] == 4
    assert float(lines["hit@5"]) == pytest.approx(payload["hit"], abs=5e-7)
    assert len(payload["ranks"]) == 4


def test_eval_perfect_oracle_hits_one(tmp_path, capsys):
    # histories that end on the held-out item plus a delta scorer give
    # hit@10 = 1.0 through the real command path
    pois = [(f"venue{i}", 48.0 + 0.001 * i, 2.0 + 0.001 * i) for i in range(6)]
    lines = []
    for u in range(3):
        seq = [(u + t) % 5 for t in range(5)] + [(u + 4) % 5, (u + 4) % 5]
        for t, pi in enumerate(seq):
            pid, lat, lon = pois[pi]
            lines.append(f"u{u}\t2011-06-{t + 1:02d}T12:00:00Z\t{lat}\t{lon}\t{pid}")
    (tmp_path / "in.tsv").write_text("\n".join(lines) + "\n")
    assert cli.main(["prepare", "--input", str(tmp_path / "in.tsv"),
                     "--output", str(tmp_path / "d.bundle")]) == 0
    catalog, _ = load_bundle(str(tmp_path / "d.bundle"))
    cfg = ModelConfig(d_id=catalog.num_pois + 1, d_s=4, h_s=3, max_len=8,
                      num_layers=1, num_heads=1, k=1, dropout=0.0,
                      use_abs_pos=False, use_spatial=False, use_temporal=False)
    params = ModelParams(cfg, catalog.num_pois, rng=None)
    table = np.zeros((catalog.num_pois + 1, cfg.d_id))
    for p in range(1, catalog.num_pois + 1):
        table[p, p] = 10.0
    params.poi_id_table.data = table
    save_params(str(tmp_path / "oracle.ckpt"), params)
    capsys.readouterr()
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "oracle.ckpt"),
                     "--data", str(tmp_path / "d.bundle"), "--k", "10"]) == 0
    out = capsys.readouterr().out
    assert "hit@10\t1.000000" in out
    assert "ndcg@10\t1.000000" in out


def test_eval_policy_flag_changes_report(workspace, capsys):
    base = ["eval", "--checkpoint", str(workspace / "run" / "best.ckpt"),
            "--data", str(workspace / "data.bundle"), "--k", "5"]
    assert cli.main(base + ["--policy", "full"]) == 0
    assert "policy\tfull" in capsys.readouterr().out
    assert cli.main(base) == 0
    assert "policy\texclude-train" in capsys.readouterr().out


def test_eval_missing_checkpoint_single_error_line(workspace, tmp_path, capsys):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "no.ckpt"),
                     "--data", str(workspace / "data.bundle")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


# --- recommend -------------------------------------------------------------------------

def test_recommend_prints_exactly_k_lines(workspace, capsys):
    assert cli.main(["recommend", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--user", "user1",
                     "--date", "2010-03-13", "--k", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3
    for rank, line in enumerate(out, start=1):
        assert re.fullmatch(rf"{rank} venue\d -?\d+\.\d{{6}}", line), line
    scores = [float(l.split()[2]) for l in out]
    assert scores == sorted(scores, reverse=True)


def test_recommend_excludes_visited_by_default(workspace, capsys):
    # user0 visits venues 0..5, so only 6..8 remain under exclude-train
    assert cli.main(["recommend", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--user", "user0",
                     "--date", "2010-03-13", "--k", "10"]) == 0
    out = capsys.readouterr().out.splitlines()
    names = {line.split()[1] for line in out}
    assert names == {"venue6", "venue7", "venue8"}
    assert cli.main(["recommend", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--user", "user0",
                     "--date", "2010-03-13", "--k", "10", "--policy", "full"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 9


def test_recommend_accepts_full_timestamp(workspace, capsys):
    assert cli.main(["recommend", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--user", "user1",
                     "--date", "2010-03-13T09:30:00Z", "--k", "1"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 1


def test_recommend_unknown_user_single_error_line(workspace, capsys):
    assert cli.main(["recommend", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--user", "ghost",
                     "--date", "2010-03-13"]) == 1
    err = capsys.readouterr().err
    assert err == "error: unknown user: ghost\n"


def test_recommend_bad_date_single_error_line(workspace, capsys):
    assert cli.main(["recommend", "--checkpoint", str(workspace / "run" / "best.ckpt"),
                     "--data", str(workspace / "data.bundle"), "--user", "user1",
                     "--date", "not-a-date"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


# --- geohash ---------------------------------------------------------------------------

def test_geohash_known_point(capsys):
    assert cli.main(["geohash", "57.64911", "10.40744"]) == 0
    out = capsys.readouterr().out.strip()
    assert len(out) == 12
    assert out.startswith("u4pruydqqvj")


def test_geohash_rejects_out_of_range(capsys):
    assert cli.main(["geohash", "91.0", "0.0"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and err.count("\n") == 1


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2
