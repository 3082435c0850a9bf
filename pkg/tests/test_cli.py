import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dgpvae import cli, dci, evaluation, plots, synth

TOY = {
    "seed": 0,
    "corpus": {
        "path": "corpus",
        "N": 30,
        "T": 10,
        "factors": [{"name": "fast", "cardinality": 3, "length_scale": 2.0},
                    {"name": "slow", "cardinality": 3, "length_scale": 8.0}],
        "renderer": {"kind": "mixer", "seed": 1, "output_dim": 4, "hidden": 8, "noise_std": 0.05, "mode": "block"},
        "labels": {"factor": 0, "threshold": "median"},
    },
    "train": {
        "output_dir": "run", "latent_dim": 2, "length_scales": [2.0, 8.0], "batch_size": 8,
        "subsection_length": 5, "epochs": 1, "obs_variance": 0.05,
        "encoder": {"temporal_filters": 4, "temporal_width": 3, "ff_layers": 1, "ff_width": 8},
        "decoder": {"ff_layers": 1, "ff_width": 8},
    },
    "eval": {"predictor": "lasso"},
}


def write_cfg(tmp_path, cfg=TOY, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    assert cli.main(["synth", cfg]) == 0
    assert cli.main(["train", cfg]) == 0
    assert cli.main(["eval", cfg]) == 0
    return tmp, cfg


def test_missing_config_names_path(tmp_path, capsys):
    assert cli.main(["synth", str(tmp_path / "absent.yaml")]) == 1
    assert "absent.yaml" in capsys.readouterr().err


def test_bad_arguments_are_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate", "x.yaml"])
    assert exc.value.code == 1


def test_synth_revalidates_and_writes_concept_map(trained):
    tmp, _ = trained
    corpus = synth.Corpus.load(tmp / "corpus")
    assert corpus.observations.shape == (30, 10, 4)
    assert 0.4 <= corpus.labels.mean() <= 0.6
    cmap = dci.ConceptMap.read_csv(tmp / "corpus" / "concept_map.csv")
    assert cmap.group_names == ["fast", "slow"]
    assert (tmp / "corpus" / "figures" / "series0.svg").exists()


def test_seed_override_changes_tensors_not_schema(tmp_path):
    cfg = write_cfg(tmp_path)
    assert cli.main(["synth", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", cfg, "--seed", "5", "--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "metadata.json").read_text())
    mb = json.loads((tmp_path / "b" / "metadata.json").read_text())
    assert sorted(ma) == sorted(mb) and mb["seed"] == 5
    assert (tmp_path / "a" / "observations.bin").read_bytes() != (tmp_path / "b" / "observations.bin").read_bytes()


def test_eval_emits_all_fields(trained):
    tmp, _ = trained
    m = json.loads((tmp / "run" / "metrics.json").read_text())
    for key in ("disentanglement", "completeness", "informativeness"):
        assert key in m["dci"]
    assert 0 <= m["downstream"]["auroc"] <= 1
    assert "auroc_shuffled_labels" in m["downstream"]
    assert "disentanglement" in m["grouped_dci"]
    with open(tmp / "run" / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "value"]
    assert any(r[0] == "downstream.auroc" for r in rows)


def test_heatmap_labels(trained):
    tmp, _ = trained
    svg = (tmp / "run" / "figures" / "concept_importance.svg").read_text()
    for label in ("z0", "z1", "fast", "slow"):
        assert f">{label}<" in svg
    assert (tmp / "run" / "figures" / "latents_test0.svg").exists()


def test_rerun_reproduces_metrics_exactly(trained, tmp_path):
    tmp, cfg = trained
    out = tmp_path / "again"
    assert cli.main(["train", cfg, "--out", str(out)]) == 0
    assert cli.main(["eval", cfg, "--run", str(out)]) == 0
    assert (out / "log.csv").read_bytes() == (tmp / "run" / "log.csv").read_bytes()
    assert (out / "metrics.csv").read_bytes() == (tmp / "run" / "metrics.csv").read_bytes()


def test_eval_without_run_is_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert cli.main(["eval-dci", cfg, "--run", str(tmp_path / "nothing")]) == 1
    assert "nothing" in capsys.readouterr().err


def test_locked_run_is_runtime_error(trained, capsys):
    tmp, cfg = trained
    lock = tmp / "run" / ".lock"
    lock.write_text("123")
    try:
        assert cli.main(["eval-downstream", cfg]) == 2
        assert "locked" in capsys.readouterr().err
    finally:
        lock.unlink()


def test_report_single_and_many(trained, tmp_path):
    tmp, cfg = trained
    assert cli.main(["report", str(tmp / "run"), "--out", str(tmp_path / "r1")]) == 0
    with open(tmp_path / "r1" / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert len([r for r in rows[1:] if r[0] not in ("mean", "std")]) == 1

    runs = []
    for s in (1, 2):
        out = tmp_path / f"s{s}"
        assert cli.main(["train", cfg, "--seed", str(s), "--out", str(out)]) == 0
        assert cli.main(["eval-dci", cfg, "--run", str(out)]) == 0
        runs.append(str(out))
    assert cli.main(["report", str(tmp / "run"), *runs, "--out", str(tmp_path / "r3")]) == 0
    summary = json.loads((tmp_path / "r3" / "report.json").read_text())["summary"]
    assert summary["disentanglement"]["n"] == 3
    assert summary["disentanglement"]["std"] is not None
    assert (tmp_path / "r3" / "figures" / "scores.svg").exists()


def test_report_refuses_mismatched_configs(trained, tmp_path, capsys):
    tmp, _ = trained
    other = json.loads(json.dumps(TOY))
    other["train"]["beta"] = 2.0
    cfg = write_cfg(tmp, other, "other.yaml")
    out = tmp_path / "b2"
    assert cli.main(["train", cfg, "--out", str(out)]) == 0
    assert cli.main(["eval-dci", cfg, "--run", str(out)]) == 0
    assert cli.main(["report", str(tmp / "run"), str(out), "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "beta: 1.0 != 2.0" in err


def test_ground_truth_as_latents_is_perfect():
    corpus = synth.build_corpus([synth.FactorSpec("a", 4, 2.0), synth.FactorSpec("b", 4, 10.0)],
                                synth.MixerRenderer(synth.MixerSpec(output_dim=2, bypass=True, noise_std=0.0)),
                                N=60, T=50, seed=0)
    imp = evaluation.factor_importance(corpus.continuous, corpus.indices, "gbt", seed=0)
    s = dci.dci_scores(imp)
    assert abs(s.disentanglement - 1.0) < 1e-6 and abs(s.completeness - 1.0) < 1e-6


def test_svg_bytes_stable(tmp_path):
    R = np.array([[0.9, 0.1], [0.2, 0.8]])
    plots.importance_heatmap(R, ["a", "b"], tmp_path / "1.svg")
    plots.importance_heatmap(R, ["a", "b"], tmp_path / "2.svg")
    assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()
    assert b"<dc:date>" not in (tmp_path / "1.svg").read_bytes()


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dgpvae.cli", "synth", str(tmp_path / "none.yaml")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert "none.yaml" in proc.stderr


@pytest.mark.parametrize("name,ablation", [("desk.yaml", False), ("desk_ablation.yaml", True)])
def test_desk_configs_match_acceptance_setup(name, ablation):
    from pathlib import Path

    from dgpvae.config import load_experiment, run_config_from_experiment

    from . import desk

    cfg = load_experiment(Path(__file__).parents[1] / "configs" / name)
    got = run_config_from_experiment(cfg).to_dict()
    want = desk.run_config(0, ablation).to_dict()
    for key in ("corpus", "output_dir"):
        got.pop(key), want.pop(key)
    assert got == want
    c = cfg["corpus"]
    assert (c["N"], c["T"]) == (desk.N, desk.T)
    assert [synth.FactorSpec.from_dict(f) for f in c["factors"]] == desk.FACTORS
    assert cli._renderer(c["renderer"]).describe() == synth.MixerRenderer(desk.MIXER).describe()
