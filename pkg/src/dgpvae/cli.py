"""Command-line entry point: ``dgpvae {synth,train,eval-dci,eval-downstream,eval,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, dci, evaluation, synth, training
from .config import ConfigError, RunConfig, load_experiment, run_config_from_experiment

log = logging.getLogger("dgpvae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
REPORT_METRICS = ("disentanglement", "completeness", "informativeness_mean", "auroc", "grouped_disentanglement")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# corpus construction from the config file

def _renderer(spec: dict, base: Path | None = None):
    spec = dict(spec or {"kind": "mixer"})
    kind = spec.pop("kind", "mixer")
    if kind == "mixer":
        return synth.MixerRenderer(synth.MixerSpec(**spec))
    if kind == "lookup":
        if "dataset" not in spec:
            raise ConfigError("lookup renderer needs a dataset path")
        path = Path(spec["dataset"])
        if base is not None and not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"lookup dataset not found: {path}")
        return synth.LookupRenderer(synth.IngestedDataset.load(path), str(path))
    raise ConfigError(f"unknown renderer kind {kind!r}")


def _labeler(spec: dict | None, continuous: np.ndarray):
    spec = spec or {}
    factor = int(spec.get("factor", 0))
    threshold = spec.get("threshold", "median")
    if threshold == "median":
        return synth.median_threshold_labeler(continuous, factor)
    return synth.mean_threshold_labeler(factor, float(threshold))


def _seed(cfg: dict, override: int | None) -> int:
    return int(override if override is not None else cfg.get("seed", 0))


def cmd_synth(cfg: dict, seed: int | None, out: str | None, base: Path) -> Path:
    c = cfg.get("corpus")
    if not isinstance(c, dict):
        raise ConfigError("config has no corpus section")
    try:
        specs = [synth.FactorSpec.from_dict(f) for f in c["factors"]]
        N, T = int(c["N"]), int(c["T"])
    except KeyError as exc:
        raise ConfigError(f"corpus section is missing {exc}") from None
    path = Path(out or c.get("path") or "corpus")
    s = _seed(cfg, seed)
    corpus = synth.build_corpus(specs, _renderer(c.get("renderer"), base), N, T, seed=s, out_dir=path)
    synth.attach_outcome_labels(corpus, _labeler(c.get("labels"), corpus.continuous))
    groups = corpus.metadata.get("feature_groups")
    if groups:
        names = [sp.name for sp in specs]
        dci.ConceptMap.from_pairs([(f"x{i}", names[g]) for i, g in enumerate(groups)]).write_csv(path / "concept_map.csv")
    back = synth.Corpus.load(path)
    if back.observations.tobytes() != corpus.observations.tobytes() or back.labels.tolist() != corpus.labels.tolist():
        raise synth.CorpusError(f"corpus at {path} failed re-read validation")
    from . import plots

    plots.factor_traces(corpus.continuous[0], corpus.indices[0], corpus.observations[0],
                        corpus.metadata["factor_names"], path / "figures" / "series0.svg", "series 0")
    print(f"corpus: {path} (N={N}, T={T}, seed={s})")
    return path


def _run_config(cfg: dict, seed: int | None, out: str | None) -> RunConfig:
    if out is not None:
        cfg = {**cfg, "train": {**(cfg.get("train") or {}), "output_dir": out}}
    return run_config_from_experiment(cfg, seed)


def cmd_train(cfg: dict, seed: int | None, out: str | None) -> Path:
    rc = _run_config(cfg, seed, out)
    corpus = synth.Corpus.load(rc.corpus)
    with training.run_lock(rc.output_dir):
        res = training.train(rc, corpus)
    last = res.log.rows[-1]
    print(f"run: {res.output_dir} ({len(res.log.rows)} steps, final elbo {last['elbo']:.4f})")
    return res.output_dir


def _load_metrics(run_dir: Path) -> dict:
    f = run_dir / "metrics.json"
    return json.loads(f.read_text()) if f.exists() else {}


def _write_metrics(run_dir: Path, metrics: dict) -> None:
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    rows = []
    for section in sorted(metrics):
        val = metrics[section]
        if not isinstance(val, dict):
            rows.append((section, val))
            continue
        for key in sorted(val):
            v = val[key]
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                rows.append((f"{section}.{key}", v))
            elif isinstance(v, list) and key in ("informativeness", "informativeness_baseline"):
                rows.extend((f"{section}.{key}[{j}]", x) for j, x in enumerate(v))
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in rows:
            w.writerow([k, "" if v is None else repr(v) if isinstance(v, float) else v])


def _eval_context(cfg: dict, seed: int | None, run: str | None):
    rc = _run_config(cfg, None, run)
    run_dir = Path(rc.output_dir)
    if not (run_dir / "run.json").exists():
        raise UsageError(f"no trained run at {run_dir}")
    run_cfg, _ = training.load_run(run_dir)
    corpus = synth.Corpus.load(run_cfg.corpus)
    s = _seed(cfg, seed)
    return run_dir, run_cfg, corpus, s


def _dci_metrics(cfg, run_dir, run_cfg, corpus, s, figures: bool) -> dict:
    ev = cfg.get("eval") or {}
    predictor = ev.get("predictor", "lasso")
    test = corpus.split("test")
    latents = training.embed_corpus(run_dir, corpus, "test")
    imp = evaluation.factor_importance(latents, corpus.indices[test], predictor, seed=s,
                                       factor_names=corpus.metadata["factor_names"])
    scores = dci.dci_scores(imp)
    dci.write_importance(imp, scores, run_dir / "importance.json", run_dir / "importance.csv")
    out = {"dci": {**scores.to_dict(), "predictor": predictor, "importance": imp.R.tolist(),
                   "factor_names": corpus.metadata["factor_names"], "split": "test", "seed": s}}
    cmap_path = ev.get("concept_map") or (corpus.path / "concept_map.csv" if corpus.path else None)
    if cmap_path and Path(cmap_path).exists():
        cmap = dci.ConceptMap.read_csv(cmap_path)
        feats = [f"x{i}" for i in range(int(np.prod(corpus.obs_shape)))]
        G, gs = evaluation.grouped_dci(latents, corpus.observations[test], cmap, feats, predictor, seed=s)
        out["grouped_dci"] = {"disentanglement": gs.disentanglement, "completeness": gs.completeness,
                              "importance": G.R.tolist(), "concepts": cmap.group_names,
                              "concept_map": os.path.relpath(cmap_path, run_dir)}
    if figures:
        from . import plots

        fig = run_dir / "figures"
        plots.importance_heatmap(imp.R, corpus.metadata["factor_names"], fig / "importance.svg",
                                 f"D={scores.disentanglement:.3f} C={scores.completeness:.3f}")
        if "grouped_dci" in out:
            g = out["grouped_dci"]
            plots.importance_heatmap(np.array(g["importance"]), g["concepts"], fig / "concept_importance.svg",
                                     f"grouped D={g['disentanglement']:.3f}")
        plots.latent_traces(latents[0], run_cfg.channel_length_scales, fig / "latents_test0.svg",
                            "posterior means, first test series")
    return out


def _downstream_metrics(cfg, run_dir, run_cfg, corpus, s) -> dict:
    if corpus.labels is None:
        synth.attach_outcome_labels(corpus, _labeler((cfg.get("corpus") or {}).get("labels"), corpus.continuous),
                                    save=False)
    latents = training.embed_corpus(run_dir, corpus)
    tr, te = corpus.split("train"), corpus.split("test")
    summaries = evaluation.summarize_series(latents)
    rep = evaluation.fit_linear_classifier(summaries, corpus.labels, split=(tr, te), seed=s)
    shuffled = np.random.default_rng(s).permutation(corpus.labels)
    ctrl = evaluation.fit_linear_classifier(summaries, shuffled, split=(tr, te), seed=s)
    return {"downstream": {**rep.to_dict(), "auroc_shuffled_labels": ctrl.auroc,
                           "label_rate": float(np.mean(corpus.labels))}}


def cmd_eval(cfg: dict, seed: int | None, run: str | None, which: str) -> Path:
    run_dir, run_cfg, corpus, s = _eval_context(cfg, seed, run)
    with training.run_lock(run_dir):
        metrics = _load_metrics(run_dir)
        if which in ("dci", "all"):
            metrics.update(_dci_metrics(cfg, run_dir, run_cfg, corpus, s, figures=which == "all"))
        if which in ("downstream", "all"):
            metrics.update(_downstream_metrics(cfg, run_dir, run_cfg, corpus, s))
        info = json.loads((run_dir / "run.json").read_text())
        metrics["run"] = {"seed": info["seed"], "config_hash": info["config_hash"], "code_version": __version__}
        _write_metrics(run_dir, metrics)
    for key in ("dci", "grouped_dci"):
        if key in metrics:
            print(f"{key}: D={metrics[key]['disentanglement']:.4f} C={metrics[key]['completeness']:.4f}")
    if "downstream" in metrics:
        print(f"auroc: {metrics['downstream']['auroc']:.4f}")
    return run_dir


# aggregation over seeds

def _summary_row(metrics: dict) -> dict:
    d = metrics.get("dci", {})
    info = [v for v in d.get("informativeness", []) if v is not None]
    return {
        "disentanglement": d.get("disentanglement"),
        "completeness": d.get("completeness"),
        "informativeness_mean": float(np.mean(info)) if info else None,
        "auroc": metrics.get("downstream", {}).get("auroc"),
        "grouped_disentanglement": metrics.get("grouped_dci", {}).get("disentanglement"),
    }


def config_diff(a: dict, b: dict, ignore=("seed", "output_dir")) -> list[str]:
    keys = sorted((set(a) | set(b)) - set(ignore))
    return [f"{k}: {a.get(k)!r} != {b.get(k)!r}" for k in keys if a.get(k) != b.get(k)]


def cmd_report(runs: list[str], out: str) -> Path:
    if not runs:
        raise UsageError("report needs at least one run directory")
    configs, rows = [], []
    for r in runs:
        r = Path(r)
        if not (r / "config.yaml").exists():
            raise UsageError(f"not a run directory: {r}")
        configs.append(yaml.safe_load((r / "config.yaml").read_text()))
        m = _load_metrics(r)
        if not m:
            raise UsageError(f"run {r} has no metrics.json; evaluate it first")
        rows.append({"run": str(r), "seed": configs[-1].get("seed"), **_summary_row(m)})
    problems = []
    for r, c in zip(runs[1:], configs[1:]):
        diff = config_diff(configs[0], c)
        if diff:
            problems.append(f"{runs[0]} vs {r}: " + "; ".join(diff))
    if problems:
        raise UsageError("runs have mismatched configs:\n  " + "\n  ".join(problems))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = {}
    for key in REPORT_METRICS:
        vals = [row[key] for row in rows if row[key] is not None]
        stats[key] = (float(np.mean(vals)), float(np.std(vals)), len(vals)) if vals else (None, None, 0)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "seed", *REPORT_METRICS])
        for row in rows:
            w.writerow([row["run"], row["seed"], *("" if row[k] is None else repr(row[k]) for k in REPORT_METRICS)])
        for label, idx in (("mean", 0), ("std", 1)):
            w.writerow([label, "", *("" if stats[k][0] is None else repr(stats[k][idx]) for k in REPORT_METRICS)])
    payload = {"runs": rows, "summary": {k: {"mean": v[0], "std": v[1], "n": v[2]} for k, v in stats.items()}}
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    from . import plots

    plots.score_distribution({k: [row[k] for row in rows] for k in REPORT_METRICS if stats[k][2]},
                             out_dir / "figures" / "scores.svg", f"{len(rows)} runs")
    width = max(len(k) for k in REPORT_METRICS)
    for k in REPORT_METRICS:
        mean, std, n = stats[k]
        if n:
            print(f"{k:<{width}}  {mean:.4f} ± {std:.4f}  (n={n})")
    return out_dir


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgpvae", description="Synthesize corpora, train GP-prior VAEs and score their latents.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="experiment YAML file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        return sp

    with_config("synth", "generate a synthetic corpus").add_argument("--out", help="corpus directory")
    with_config("train", "train a model").add_argument("--out", help="run directory")
    for name, help_ in (("eval-dci", "DCI scores of a trained run"),
                        ("eval-downstream", "downstream AUROC of a trained run"),
                        ("eval", "DCI, AUROC and figures")):
        with_config(name, help_).add_argument("--run", help="run directory (default: train.output_dir)")
    rp = sub.add_parser("report", help="aggregate evaluated runs")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--out", default="report")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.runs, args.out)
            return EXIT_OK
        cfg = load_experiment(args.config)
        base = Path(args.config).resolve().parent
        if args.command == "synth":
            cmd_synth(cfg, args.seed, args.out, base)
        elif args.command == "train":
            cmd_train(cfg, args.seed, args.out)
        else:
            which = {"eval-dci": "dci", "eval-downstream": "downstream", "eval": "all"}[args.command]
            cmd_eval(cfg, args.seed, args.run, which)
    except (ConfigError, UsageError) as exc:
        print(f"dgpvae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (training.TrainingError, training.RunLocked, synth.CorpusError, dci.DciError,
            FloatingPointError, OSError, ValueError) as exc:
        print(f"dgpvae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
