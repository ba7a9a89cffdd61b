import json

import numpy as np
import pytest

from ssnll import cli, data, nn
from ssnll.adapt import extract_features
from ssnll.errors import ConfigError

TINY_CONFIG = """\
output_dir = "{out}"
seeds = [0]

[dataset]
kind = "synthetic"
num_classes = 2
samples_per_class_source = 60
samples_per_class_target = 60
class_center_radius = 4.0
within_class_stddev = 1.0
shift_translation = [1.0, 1.0]
shift_rotation_angle = 0.4
seed = 3

[model]
hidden = [8]

[source_train]
optimizer = "adam"
lr = 3e-3
epochs = 6
batch_size = 32
seed = 1

[adapt_train]
optimizer = "adam"
lr = 1e-3
epochs = 3
batch_size = 32
split_ratio = {split_ratio}
seed = 2
"""


def write_config(tmp_path, split_ratio=0.2, sweep=None, name="exp.toml"):
    out = tmp_path / "runs"
    text = TINY_CONFIG.format(out=out.as_posix(), split_ratio=split_ratio)
    if sweep is not None:
        text = f"sweep = {sweep}\n" + text  # top-level key, before any table
    path = tmp_path / name
    path.write_text(text)
    return path, out


def test_load_config_defaults_and_resolution(tmp_path):
    path, out = write_config(tmp_path)
    cfg = cli.load_config(path)
    assert isinstance(cfg.dataset, data.ShiftSpec)
    assert cfg.hidden == [8]
    assert cfg.adapt_train.split_ratio == 0.2
    assert cfg.adapt_train.blur_predictions is True  # default filled in
    resolved = cfg.resolved()
    assert resolved["adapt_train"]["ema_lambda"] == 0.99
    assert resolved["dataset"]["kind"] == "synthetic"


def test_load_config_rejects_malformed_toml(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[dataset\nkind = 'synthetic'\n")
    with pytest.raises(ConfigError) as err:
        cli.load_config(path)
    assert "line" in str(err.value)  # parser points at the offending line


def test_load_config_rejects_unknown_keys_and_bad_values(tmp_path):
    path = tmp_path / "odd.toml"
    path.write_text('[dataset]\nkind = "synthetic"\nbogus_key = 1\n')
    with pytest.raises(ConfigError, match="bogus_key"):
        cli.load_config(path)
    path.write_text('[dataset]\nkind = "csv"\n')
    with pytest.raises(ConfigError, match="kind"):
        cli.load_config(path)
    path.write_text('[dataset]\nkind = "idx"\n')
    with pytest.raises(ConfigError, match="source_images"):
        cli.load_config(path)


def test_cmd_run_writes_outputs_and_table(tmp_path, capsys):
    path, out = write_config(tmp_path)
    assert cli.main(["run", "--config", str(path)]) == 0
    stdout = capsys.readouterr().out
    for label in ("source-only", "+AdaBN", "+AdaBN+DTC", "SSNLL (final)"):
        assert label in stdout
    assert (out / "manifest.json").is_file()
    assert (out / "ablation.csv").is_file()
    seed_dir = out / "seed0"
    assert (seed_dir / "metrics.jsonl").is_file()
    assert (seed_dir / "summary.csv").is_file()
    assert (seed_dir / "checkpoint_source.npz").is_file()
    assert (seed_dir / "checkpoint_postadabn.npz").is_file()
    assert (seed_dir / "checkpoint_final.npz").is_file()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["adapt_train"]["split_ratio"] == 0.2
    assert manifest["config"]["source_train"]["epochs"] == 6


def test_cmd_run_repeated_is_byte_identical(tmp_path):
    path, out = write_config(tmp_path)
    assert cli.main(["run", "--config", str(path)]) == 0
    first_metrics = (out / "seed0" / "metrics.jsonl").read_bytes()
    first_summary = (out / "seed0" / "summary.csv").read_bytes()
    first_ablation = (out / "ablation.csv").read_bytes()
    assert cli.main(["run", "--config", str(path)]) == 0
    assert (out / "seed0" / "metrics.jsonl").read_bytes() == first_metrics
    assert (out / "seed0" / "summary.csv").read_bytes() == first_summary
    assert (out / "ablation.csv").read_bytes() == first_ablation


def test_cmd_sweep_single_point_matches_run(tmp_path):
    run_path, run_out = write_config(tmp_path, split_ratio=1.0, name="run.toml")
    assert cli.main(["run", "--config", str(run_path)]) == 0
    run_lines = (run_out / "seed0" / "metrics.jsonl").read_text().strip().splitlines()
    run_final = json.loads(run_lines[-1])["target_accuracy"]

    sweep_dir = tmp_path / "sweep_exp"
    sweep_dir.mkdir()
    sweep_path, sweep_out = write_config(sweep_dir, split_ratio=0.2, sweep=[1.0], name="sweep.toml")
    assert cli.main(["sweep", "--config", str(sweep_path)]) == 0
    rows = (sweep_out / "sweep.csv").read_text().strip().splitlines()
    assert rows[0] == "r,final_accuracy,best_accuracy"
    assert len(rows) == 2
    r, final, best = rows[1].split(",")
    assert float(r) == 1.0
    assert float(final) == pytest.approx(run_final, abs=1e-12)
    assert float(best) >= float(final) - 1e-12


def test_cmd_sweep_one_row_per_ratio(tmp_path):
    path, out = write_config(tmp_path, sweep=[0.2, 0.5, 1.0])
    assert cli.main(["sweep", "--config", str(path)]) == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 4
    assert [float(r.split(",")[0]) for r in rows[1:]] == [0.2, 0.5, 1.0]


def test_cmd_sweep_requires_ratios(tmp_path):
    path, _ = write_config(tmp_path)
    assert cli.main(["sweep", "--config", str(path)]) == 1


def test_cmd_export_embeddings(tmp_path):
    path, out = write_config(tmp_path)
    assert cli.main(["run", "--config", str(path)]) == 0
    ckpt = out / "seed0" / "checkpoint_final.npz"
    emb = tmp_path / "emb.csv"
    assert cli.main(["export-embeddings", "--checkpoint", str(ckpt), "--config", str(path), "--out", str(emb)]) == 0
    lines = emb.read_text().strip().splitlines()
    cfg = cli.load_config(path)
    _, target = cli.build_datasets(cfg, cfg.seeds[0])
    assert len(lines) == target.n + 1
    assert lines[0].startswith("index,label,feat_0")

    # matches extract_features row-for-row
    model = nn.load_checkpoint(ckpt)
    feats = extract_features(model, target)
    first = lines[1].split(",")
    assert int(first[0]) == 0
    np.testing.assert_allclose([float(v) for v in first[2:]], feats[0])

    emb2 = tmp_path / "emb2.csv"
    assert cli.main(["export-embeddings", "--checkpoint", str(ckpt), "--config", str(path), "--out", str(emb2)]) == 0
    assert emb.read_bytes() == emb2.read_bytes()


def test_cmd_run_can_start_from_a_checkpoint(tmp_path):
    path, out = write_config(tmp_path)
    assert cli.main(["run", "--config", str(path)]) == 0
    ckpt = out / "seed0" / "checkpoint_source.npz"
    first_metrics = (out / "seed0" / "metrics.jsonl").read_bytes()

    resume_dir = tmp_path / "resume"
    resume_dir.mkdir()
    resume_path, resume_out = write_config(resume_dir, name="resume.toml")
    text = resume_path.read_text().replace("[model]\nhidden = [8]", f'[model]\nhidden = [8]\ncheckpoint = "{ckpt.as_posix()}"')
    resume_path.write_text(text)
    assert cli.main(["run", "--config", str(resume_path)]) == 0
    # same pre-trained weights, same adaptation seed: identical metrics
    assert (resume_out / "seed0" / "metrics.jsonl").read_bytes() == first_metrics


def test_cmd_eval_prints_accuracy(tmp_path, capsys):
    path, out = write_config(tmp_path)
    assert cli.main(["run", "--config", str(path)]) == 0
    ckpt = out / "seed0" / "checkpoint_final.npz"
    assert cli.main(["eval", "--checkpoint", str(ckpt), "--config", str(path)]) == 0
    stdout = capsys.readouterr().out
    assert "accuracy:" in stdout
    assert "class 0:" in stdout


def test_cli_error_exits(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert cli.main(["run", "--config", str(missing)]) == 1
    assert "error[ConfigError]" in capsys.readouterr().err

    bad = tmp_path / "bad.toml"
    bad.write_text("not toml [ at all")
    assert cli.main(["run", "--config", str(bad)]) == 1
    assert "error[ConfigError]" in capsys.readouterr().err

    corrupt = tmp_path / "corrupt.npz"
    corrupt.write_bytes(b"junk")
    cfg_path, _ = write_config(tmp_path)
    assert cli.main(["eval", "--checkpoint", str(corrupt), "--config", str(cfg_path)]) == 1
    assert "error[FormatError]" in capsys.readouterr().err
