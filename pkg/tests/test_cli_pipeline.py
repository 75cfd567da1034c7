import filecmp
import json
from pathlib import Path

import jsonschema
import pytest
import torch

from pnreid.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from pnreid.cli import main
from pnreid.config import ConfigValidationError, load_config
from pnreid.networks import ArchConfig, init_params
from pnreid.report import SCHEMA_FILES, load_schema

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.toml")
STAGES = ["synth-data", "cluster-poses", "train-gan", "gen-normalized", "train-reid", "eval"]


def run_cli(*args):
    return main([str(a) for a in args])


def manifest(run):
    return json.loads((Path(run) / "manifest.json").read_text())["entries"]


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    run = tmp_path_factory.mktemp("smoke")
    assert run_cli("run-all", "--config", SMOKE, "--run-dir", run) == 0
    return run


def test_checkpoint_round_trip(tmp_path):
    arch = ArchConfig(base_channels=4, n_res_blocks=1)
    gen, _ = init_params(arch, 0)
    path = save_checkpoint(tmp_path / "g.pt", gen, "train-gan", 5, "abc", {"note": 1})
    other, _ = init_params(arch, 1)
    payload = load_checkpoint(path, other, "train-gan", "abc")
    assert payload["step"] == 5 and payload["meta"] == {"note": 1}
    for (ka, a), (kb, b) in zip(gen.state_dict().items(), other.state_dict().items()):
        assert ka == kb and torch.equal(a, b)


def test_truncated_checkpoint_leaves_module_untouched(tmp_path):
    arch = ArchConfig(base_channels=4, n_res_blocks=1)
    gen, _ = init_params(arch, 0)
    path = save_checkpoint(tmp_path / "g.pt", gen, "train-gan")
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    target, _ = init_params(arch, 1)
    before = {k: v.clone() for k, v in target.state_dict().items()}
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path, target)
    assert all(torch.equal(before[k], v) for k, v in target.state_dict().items())


def test_checkpoint_from_other_arch_names_tensor(tmp_path):
    gen, _ = init_params(ArchConfig(base_channels=4, n_res_blocks=1), 0)
    path = save_checkpoint(tmp_path / "g.pt", gen, "train-gan")
    bigger, _ = init_params(ArchConfig(base_channels=8, n_res_blocks=1), 0)
    with pytest.raises(CheckpointError, match="shape mismatch for tensor 'stem.0.weight'"):
        load_checkpoint(path, bigger)


def test_checkpoint_guards(tmp_path):
    gen, _ = init_params(ArchConfig(base_channels=4, n_res_blocks=1), 0)
    path = save_checkpoint(tmp_path / "g.pt", gen, "train-gan", config_hash="h1")
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "missing.pt")
    with pytest.raises(CheckpointError, match="stage"):
        load_checkpoint(path, gen, stage="train-reid")
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, gen, config_hash="h2")
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="format version"):
        read_checkpoint(path)


def test_config_validation(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gan": {"stepz": 3}}))
    with pytest.raises(ConfigValidationError, match="stepz"):
        load_config(bad)
    cfg = load_config(SMOKE, seed=9)
    assert cfg.seed == 9
    assert cfg.stage_hash("train-gan") != load_config(SMOKE).stage_hash("train-gan")


def test_unknown_subcommand_and_flag(capsys):
    assert run_cli("train-everything") == 1
    assert run_cli("eval", "--bogus") == 1


def test_unknown_config_key_exits_1(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[poses]\nK = 4\nmedoid = true\n")
    assert run_cli("synth-data", "--config", bad, "--run-dir", tmp_path / "run") == 1


def test_eval_with_missing_checkpoints(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert run_cli("synth-data", "--config", SMOKE, "--run-dir", tmp_path / "run") == 0
    capsys.readouterr()
    assert run_cli("eval", "--config", SMOKE, "--run-dir", tmp_path / "run", "--models-from", missing) == 1
    err = capsys.readouterr().err
    assert str(missing / "checkpoints" / "generator.pt") in err


def test_synth_data_seed_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run_cli("synth-data", "--config", SMOKE, "--seed", 7, "--run-dir", tmp_path / name) == 0
    cmp = filecmp.dircmp(tmp_path / "a" / "dataset", tmp_path / "b" / "dataset")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    images = filecmp.dircmp(tmp_path / "a" / "dataset" / "images", tmp_path / "b" / "dataset" / "images")
    _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "dataset" / "images",
                                           tmp_path / "b" / "dataset" / "images", images.common_files,
                                           shallow=False)
    assert not mismatch and not errors and images.common_files


def test_run_all_manifest_complete(smoke_run):
    entries = manifest(smoke_run)
    assert [e["stage"] for e in entries] == STAGES
    assert all(e["status"] == "completed" for e in entries)
    for rel in ("checkpoints/generator.pt", "checkpoints/backbone_a.pt", "checkpoints/backbone_b.pt",
                "metrics/eval.json", "metrics/ablation.json", "canonical_poses/projection.csv",
                "losses/gan.csv", "synth/train_normalized.npz"):
        assert (smoke_run / rel).is_file(), rel


def test_emitted_json_validates(smoke_run):
    for rel, schema in SCHEMA_FILES.items():
        jsonschema.validate(json.loads((smoke_run / rel).read_text()), load_schema(schema))


def test_eval_json_contents(smoke_run):
    report = json.loads((smoke_run / "metrics" / "eval.json").read_text())
    assert report["protocol"]["cross_camera_filter"] is True
    ranks = [r["acc"] for r in report["ranks"]]
    assert ranks == sorted(ranks) and all(0 <= a <= 1 for a in ranks)
    assert 0 <= report["map"] <= 1
    ablation = json.loads((smoke_run / "metrics" / "ablation.json").read_text())
    assert {"backbone_a", "fused_1_pose", "fused_all_poses", "backbone_b"} <= set(ablation)


def test_rerun_is_noop_unless_forced(smoke_run):
    before = manifest(smoke_run)
    ckpt = (smoke_run / "checkpoints" / "generator.pt").read_bytes()
    assert run_cli("train-gan", "--config", SMOKE, "--run-dir", smoke_run) == 0
    assert manifest(smoke_run) == before
    assert (smoke_run / "checkpoints" / "generator.pt").read_bytes() == ckpt
    assert run_cli("eval", "--config", SMOKE, "--run-dir", smoke_run) == 0
    assert manifest(smoke_run) == before
    assert run_cli("eval", "--config", SMOKE, "--run-dir", smoke_run, "--force") == 0
    after = manifest(smoke_run)
    assert after[:-1] == before and after[-1]["stage"] == "eval"


def test_changed_config_refused_without_force(smoke_run, capsys):
    assert run_cli("train-gan", "--config", SMOKE, "--seed", 5, "--run-dir", smoke_run) == 1
    assert "config" in capsys.readouterr().err


def test_report_figures(smoke_run):
    assert run_cli("report", "--run-dir", smoke_run) == 0
    report = smoke_run / "report"
    pngs = sorted(p.name for p in report.glob("*.png"))
    assert {"cmc.png", "gan_losses.png"} <= set(pngs)
    rows = (report / "summary.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["kind", "name", "value"]
    assert any(r.startswith("metric\tmAP") for r in rows)


def test_report_on_missing_run(tmp_path):
    assert run_cli("report", "--run-dir", tmp_path / "nope") == 1
