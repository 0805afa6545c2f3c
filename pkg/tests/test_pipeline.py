import csv
import io
import json

import numpy as np
import pytest

from ufc import pipeline as pl
from ufc.clustering import load_labels

TINY = {
    "data": {"n_samples": 40, "test_samples": 8, "size": 16, "slices_per_volume": 10},
    "vae": {"epochs": 2, "latent_dim": 4, "channels": [4, 8]},
    "cluster": {"k": 4, "k_range": [1, 10]},
    "contrastive": {"epochs": 1, "batch": 8, "hidden": 16, "out_dim": 8},
    "unet": {"widths": [4, 8], "bottleneck": 8},
    "finetune": {"fractions": [0.25], "epochs": 2, "batch": 4},
    "seeds": [0, 1],
    "ablation": [{"method": "agglomerative", "k": 2}, {"method": "agglomerative", "k": "n"}],
}


def tiny_cfg(tmp_path, name="run", **extra):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / name), **extra}))
    return pl.load_config(path, env={})


def read_rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


# --- config ---------------------------------------------------------------------


def test_defaults_validate():
    cfg = pl.load_config(env={})
    assert cfg == pl.DEFAULTS
    assert cfg["contrastive"]["tau"] == 0.1 and cfg["seeds"] == [0, 1, 2]


def test_unknown_keys_rejected(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"vae": {"betta": 1.0}}))
    with pytest.raises(pl.ConfigError, match="vae.betta"):
        pl.load_config(tmp_path / "c.json", env={})
    with pytest.raises(pl.ConfigError, match="nope"):
        pl.load_config(overrides=["nope=1"], env={})
    with pytest.raises(pl.ConfigError):
        pl.load_config(overrides=["seeds"], env={})


def test_overrides_parse_json_then_string():
    cfg = pl.load_config(overrides=["vae.beta=0.25", "cluster.k=auto", "seeds=[4, 5]"], env={})
    assert cfg["vae"]["beta"] == 0.25 and cfg["cluster"]["k"] == "auto" and cfg["seeds"] == [4, 5]


def test_env_seed_overrides_everything():
    cfg = pl.load_config(overrides=["seed=3"], env={"UFC_SEED": "11"})
    assert cfg["seed"] == 11
    with pytest.raises(pl.ConfigError):
        pl.load_config(env={"UFC_SEED": "x"})


def test_invalid_values_rejected():
    for bad in ("methods=[\"simclr\"]", "finetune.fractions=[0]", "cluster.method=\"ward\"", "seeds=[]"):
        with pytest.raises(pl.ConfigError):
            pl.load_config(overrides=[bad], env={})


def test_resolve_k():
    from ufc.clustering import FeatureSet

    fs = FeatureSet(np.arange(5), np.arange(10.0).reshape(5, 2))
    assert pl.resolve_k("n", fs, (1, 4))[0] == 5
    assert pl.resolve_k(3, fs, (1, 4))[0] == 3
    with pytest.raises(pl.ConfigError):
        pl.resolve_k(6, fs, (1, 4))


# --- stages ---------------------------------------------------------------------


def test_missing_prerequisite_names_stage(tmp_path):
    cfg = tiny_cfg(tmp_path)
    with pytest.raises(pl.PipelineError, match="missing features: run train-vae"):
        pl.run_stage("cluster", cfg)
    with pytest.raises(pl.PipelineError, match="run generate"):
        pl.run_stage("train-vae", cfg)
    with pytest.raises(pl.PipelineError, match="run pretrain"):
        pl.run_stage("finetune", cfg)


def test_stages_write_artifacts_and_rerun_identically(tmp_path):
    cfg = tiny_cfg(tmp_path)
    for stage in pl.STAGES:
        pl.run_stage(stage, cfg)
    root = tmp_path / "run"
    expect = {
        "train-vae": ["vae.ckpt", "features.npy", "feature_ids.npy", "history.csv"],
        "cluster": ["labels.json", "elbow.csv", "stats.json"],
        "pretrain": ["encoder.ckpt", "history.csv"],
        "finetune": ["unet_f0.25_s0.ckpt", "history_f0.25_s1.csv"],
        "evaluate": ["dice_f0.25_s0.json", "dice_f0.25_s1.json"],
    }
    for stage, names in expect.items():
        for name in names:
            assert (root / stage / name).exists(), (stage, name)
    assert (root / "train-vae" / "history.csv").read_text().splitlines()[0] == "epoch,rec,kl,total"
    assert (root / "pretrain" / "history.csv").read_text().splitlines()[0] == "epoch,mean_loss"
    labels = load_labels(root / "cluster" / "labels.json")
    assert labels.k == 4 and len(labels.ids) == 40

    before = {p: (root / p).read_bytes() for p in ("cluster/labels.json", "pretrain/encoder.ckpt",
                                                  "evaluate/dice_f0.25_s1.json")}
    pl.run_stage("cluster", cfg)
    pl.run_stage("pretrain", cfg)
    pl.run_stage("evaluate", cfg)
    assert all((root / p).read_bytes() == b for p, b in before.items())


def test_instance_pretrain_needs_no_labels(tmp_path):
    cfg = tiny_cfg(tmp_path, contrastive={**TINY["contrastive"], "mode": "instance"})
    pl.run_stage("generate", cfg)
    pl.run_stage("pretrain", cfg)
    assert (tmp_path / "run" / "pretrain" / "encoder.ckpt").exists()


def test_unknown_stage():
    with pytest.raises(pl.ConfigError):
        pl.run_stage("deploy", pl.load_config(env={}))


# --- matrix and report -------------------------------------------------------------


@pytest.fixture(scope="module")
def matrix_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("matrix")
    cfg = tiny_cfg(tmp)
    return cfg, pl.run_matrix(cfg)


def test_matrix_files(matrix_run):
    cfg, rep = matrix_run
    root = pl.Path(cfg["output_dir"])
    rows = read_rows(root / "results.csv")
    assert (root / "results.csv").read_text().splitlines()[0] == "method,fraction,seed,mean_dice"
    assert [(r["method"], r["seed"]) for r in rows] == [(m, s) for m in ("ufc", "instance", "random_init")
                                                        for s in ("0", "1")]
    assert all(0.0 <= float(r["mean_dice"]) <= 1.0 for r in rows)
    abl = read_rows(root / "ablation.csv")
    assert [r["param"] for r in abl] == ["k=2", "k=n(40)"]
    report = json.loads((root / "run_report.json").read_text())
    assert {"config", "timings", "cluster", "vae_history", "pretrain_history", "dice", "ablation"} <= set(report)


def test_singleton_ablation_shares_instance_encoder(matrix_run):
    cfg, rep = matrix_run
    root = pl.Path(cfg["output_dir"])
    inst = [float(r["mean_dice"]) for r in read_rows(root / "results.csv") if r["method"] == "instance"]
    kn = [r for r in read_rows(root / "ablation.csv") if r["param"].startswith("k=n")][0]
    assert float(kn["mean_dice"]) == pytest.approx(np.mean(inst), abs=1e-6)
    # ufc(k=4), instance, k=2; k=n reuses the instance encoder
    assert len(rep["pretrain_history"]) == 3


def test_finetune_stage_matches_matrix_cell(matrix_run, tmp_path):
    cfg, _ = matrix_run
    cfg2 = dict(cfg, output_dir=str(tmp_path / "stages"))
    for stage in pl.STAGES:
        pl.run_stage(stage, cfg2)
    got = json.loads((tmp_path / "stages" / "evaluate" / "dice_f0.25_s1.json").read_text())["mean"]
    rows = read_rows(pl.Path(cfg["output_dir"]) / "results.csv")
    cell = [r for r in rows if r["method"] == "ufc" and r["seed"] == "1"][0]
    assert f"{got:.6f}" == cell["mean_dice"]


def test_report_lines(matrix_run):
    cfg, _ = matrix_run
    text = pl.report(cfg["output_dir"])
    rows = read_rows(pl.Path(cfg["output_dir"]) / "results.csv")
    vals = [float(r["mean_dice"]) for r in rows if r["method"] == "random_init"]
    line = [l for l in text.splitlines() if l.startswith("random_init")]
    assert len(line) == 1
    assert f"{np.mean(vals):.4f} +- {np.std(vals, ddof=1):.4f}" in line[0]


def test_report_empty_and_missing(tmp_path):
    with pytest.raises(pl.PipelineError, match="results.csv"):
        pl.report(tmp_path)
    (tmp_path / "results.csv").write_text("method,fraction,seed,mean_dice\n")
    assert pl.report(tmp_path) == "no runs found"


def test_single_cell_matrix(tmp_path):
    cfg = tiny_cfg(tmp_path, methods=["random_init"], seeds=[0], ablation=[])
    pl.run_matrix(cfg)
    rows = read_rows(tmp_path / "run" / "results.csv")
    assert len(rows) == 1 and rows[0]["method"] == "random_init"
    assert read_rows(tmp_path / "run" / "ablation.csv") == []


def test_default_config_populates_every_stage(tmp_path):
    # full desk-scale sequence; takes a few minutes on one CPU
    cfg = pl.load_config(overrides=[f"output_dir={tmp_path}"], env={})
    for stage in pl.STAGES:
        pl.run_stage(stage, cfg)
    for stage in pl.STAGES:
        assert any((tmp_path / stage).iterdir()), stage
    hist = read_rows(tmp_path / "train-vae" / "history.csv")
    assert float(hist[-1]["rec"]) < 0.5 * float(hist[0]["rec"])
    pre = read_rows(tmp_path / "pretrain" / "history.csv")
    assert float(pre[-1]["mean_loss"]) < float(pre[0]["mean_loss"])
    dice = [json.loads((tmp_path / "evaluate" / f"dice_f0.1_s{s}.json").read_text())["mean"] for s in (0, 1, 2)]
    assert all(0.0 <= d <= 1.0 for d in dice)
