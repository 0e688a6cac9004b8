import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from igcn.cli import main
from igcn.config import DEFAULTS, ConfigError, RunConfig, desk_config
from igcn.engine import ops

TINY_INI = """\
[run]
seed = 4

[dataset]
n_train = 2
n_augment = 1
n_test = 2
image_size = 32

[backbone]
widths = 4, 6, 8
convs_per_stage = 1
exposed_stages = 1, 2
head_stage = 1

[model]
gcn_hidden = 8
dropout = 0.5

[training]
epochs = 2
lr = 1e-3

[metrics]
grid_spacing = 4.0
"""


@pytest.fixture
def tiny_ini(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_INI)
    return path


# -------------------------------------------------------------------- config

def test_defaults_match_model_defaults():
    rc = RunConfig()
    assert rc.model_config().weights.map == 10.0
    assert rc.model_config().weights.laplacian == 1.0
    assert rc.model_config().gcn_layers == 8
    assert rc.training_config().epochs == 1000
    assert rc.dataset_config().image_size == 128


def test_ini_values_are_typed(tiny_ini):
    rc = RunConfig.load(tiny_ini)
    assert rc["backbone"]["widths"] == (4, 6, 8)
    assert rc["training"]["lr"] == 1e-3
    assert rc.seed == 4
    assert rc.dataset_config().seed == 4
    assert rc.model_config("no-mapping").backbone.input_size == 32
    assert rc.model_config("no-mapping").mode == "no-mapping"


def test_overrides_win(tiny_ini):
    rc = RunConfig.load(tiny_ini, ["training.epochs=7", "model.self_loops=false"])
    assert rc["training"]["epochs"] == 7
    assert rc["model"]["self_loops"] is False


@pytest.mark.parametrize("override", ["training.epoch=3", "nosuch.key=1", "training.epochs=abc", "epochs=3",
                                      "training.epochs=0", "dataset.image_size=30"])
def test_bad_overrides_rejected(override):
    with pytest.raises(ConfigError):
        RunConfig.load(None, [override])


def test_bad_ini_syntax(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("epochs = 3\n")
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_to_ini_round_trip(tmp_path, tiny_ini):
    rc = RunConfig.load(tiny_ini)
    path = rc.echo(tmp_path / "out")
    assert path.name == "effective_config.ini"
    assert RunConfig.load(path).values == rc.values


def test_paper_scale_override():
    rc = RunConfig().with_paper_scale()
    cfg = rc.dataset_config()
    assert (cfg.n_train, cfg.n_augment, cfg.n_test, cfg.image_size) == (20, 124, 15, 640)
    assert rc["metrics"]["grid_spacing"] == 1.0
    assert RunConfig()["dataset"]["image_size"] == DEFAULTS["dataset"]["image_size"]


def test_desk_config_keywords():
    rc = desk_config(training__epochs=5, dataset__n_test=3)
    assert rc["training"]["epochs"] == 5 and rc["dataset"]["n_test"] == 3


# ----------------------------------------------------------------- commands

def _run(args, capsys=None):
    code = main([str(a) for a in args])
    if capsys is None:
        return code, "", ""
    out = capsys.readouterr()
    return code, out.out, out.err


def _pipeline(root, ini):
    data, ckpt, rep = root / "data", root / "ckpt", root / "rep"
    assert _run(["gen-data", "-c", ini, "--out", data])[0] == 0
    for variant in ("full", "no-mapping"):
        assert _run(["train", "-c", ini, "--dataset", data, "--out", ckpt, "--variant", variant])[0] == 0
    code, _, _ = _run(["predict", "-c", ini, "--dataset", data, "--out", rep,
                       "--checkpoint", ckpt / "full.ckpt", "--sample", "test_001"])
    assert code == 0
    return data, ckpt, rep


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """Two complete CLI runs with the same configuration."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    return ini, [_pipeline(root / f"run{k}", ini) for k in range(2)]


def test_pipeline_outputs(pipeline_runs):
    _, ((data, ckpt, rep), _) = pipeline_runs
    rows = list(csv.DictReader(open(data / "manifest.csv")))
    assert [r["split"] for r in rows].count("test") == 2
    for d in (data, ckpt, rep / "predictions"):
        assert (d / "effective_config.ini").exists()
    assert (ckpt / "full.ckpt").exists() and (ckpt / "no-mapping_log.csv").exists()
    log = list(csv.DictReader(open(ckpt / "full_log.csv")))
    assert [int(r["epoch"]) for r in log] == [1, 2]
    assert all(float(r["l_map"]) == 0.0 for r in csv.DictReader(open(ckpt / "no-mapping_log.csv")))
    assert any(float(r["l_map"]) > 0.0 for r in log)
    assert (rep / "predictions" / "test_001_full.obj").exists()
    timing = list(csv.DictReader(open(rep / "predictions" / "timing.csv")))
    assert float(timing[0]["forward_ms"]) > 0


def test_pipeline_byte_identical(pipeline_runs):
    _, (a, b) = pipeline_runs
    for rel in ("data/manifest.csv", "ckpt/full_log.csv", "ckpt/no-mapping_log.csv", "ckpt/full.ckpt",
                "rep/predictions/test_001_full.obj"):
        pa, pb = a[0].parent / rel, b[0].parent / rel
        assert pa.read_bytes() == pb.read_bytes(), rel


def test_predict_prints_timing(tmp_path, pipeline_runs, capsys):
    ini, ((data, ckpt, _), _) = pipeline_runs
    code, out, _ = _run(["predict", "-c", ini, "--dataset", data, "--out", tmp_path,
                         "--checkpoint", ckpt / "no-mapping.ckpt", "--sample", "test_000"], capsys)
    assert code == 0
    assert "forward_ms=" in out
    assert (tmp_path / "predictions" / "test_000_no-mapping.obj").exists()


def test_eval_report(tmp_path, pipeline_runs, capsys):
    ini, ((data, ckpt, _), _) = pipeline_runs
    code, out, _ = _run(["eval", "-c", ini, "--dataset", data, "--out", tmp_path, "--oracle",
                         "--checkpoints", ckpt / "no-mapping.ckpt", ckpt / "full.ckpt"], capsys)
    assert code == 0
    header = out.splitlines()[1].split()
    assert header == ["Initial", "no-mapping", "full", "Ground", "truth"]
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    assert len(rows) == 2 * 4
    oracle = [r for r in rows if r["variant"] == "Ground truth"]
    assert all(float(r["md_mm"]) == 0 and float(r["dsc_percent"]) == 100 for r in oracle)
    assert (tmp_path / "effective_config.ini").exists()


def test_epochs_flag_and_checkpoints(tmp_path, pipeline_runs, capsys):
    ini, ((data, _, _), _) = pipeline_runs
    code, _, _ = _run(["train", "-c", ini, "--dataset", data, "--out", tmp_path, "--epochs", 1,
                       "--set", "training.checkpoint_every=1"], capsys)
    assert code == 0
    assert len(list(csv.DictReader(open(tmp_path / "full_log.csv")))) == 1
    assert (tmp_path / "full_epoch0001.ckpt").exists()
    assert "epochs = 1" in (tmp_path / "effective_config.ini").read_text()


def test_gen_data_dry_run(tmp_path, capsys):
    code, out, _ = _run(["gen-data", "--paper-scale", "--dry-run", "--out", tmp_path / "d"], capsys)
    assert code == 0
    assert "20 (rbf) + augment 124 (translation) = 144 training, test 15" in out
    assert "640x640" in out
    assert not (tmp_path / "d").exists()


def test_validation_errors_exit_2(tmp_path, tiny_ini, capsys):
    assert _run(["gen-data", "-c", tiny_ini, "--set", "dataset.bogus=1"], capsys)[0] == 2
    assert _run(["gen-data", "-c", tmp_path / "missing.ini"], capsys)[0] == 2
    assert _run(["train", "-c", tiny_ini, "--dataset", tmp_path / "nothing"], capsys)[0] == 2
    code, _, err = _run(["predict", "-c", tiny_ini, "--dataset", tmp_path, "--checkpoint", tmp_path / "x.ckpt",
                         "--sample", "test_000"], capsys)
    assert code == 2 and "not found" in err


def test_unknown_sample_exit_2(pipeline_runs, capsys):
    ini, ((data, ckpt, _), _) = pipeline_runs
    code, _, err = _run(["predict", "-c", ini, "--dataset", data, "--checkpoint", ckpt / "full.ckpt",
                         "--sample", "test_999"], capsys)
    assert code == 2 and "test_999" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path, pipeline_runs, capsys):
    ini, ((data, _, _), _) = pipeline_runs
    code, _, err = _run(["train", "-c", ini, "--dataset", data, "--out", tmp_path, "--lr", 1e30], capsys)
    assert code == 3
    assert "diverged" in err
    assert (tmp_path / "full_last_good.ckpt").exists()


def test_gradcheck_command(capsys):
    code, out, _ = _run(["gradcheck", "--ops-only"], capsys)
    assert code == 0
    assert out.count("PASS") == 16
    code, out, _ = _run(["gradcheck", "--ops-only", "--inject-fault", "graph_convolution"], capsys)
    assert code == 3
    assert "FAIL  graph_convolution" in out
    assert not ops.FAULTS


def test_gradcheck_end_to_end(capsys):
    code, out, _ = _run(["gradcheck"], capsys)
    assert code == 0
    assert "PASS  end_to_end_loss_total" in out


def test_bench_command(tmp_path, capsys):
    code, out, _ = _run(["bench", "--image-size", 32, "--repeats", 1, "--out", tmp_path / "b.csv"], capsys)
    assert code == 0
    names = [r["kernel"] for r in csv.DictReader(open(tmp_path / "b.csv"))]
    assert names == ["drr_line_integrals", "voxel_parity", "point_mesh_distance", "bilinear_scatter",
                     "model_forward"]
    assert "model forward" in out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "igcn.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "predict", "eval", "gradcheck", "bench"):
        assert cmd in out.stdout


def test_missing_subcommand_exit_2():
    out = subprocess.run([sys.executable, "-m", "igcn.cli"], capture_output=True, text=True)
    assert out.returncode == 2
