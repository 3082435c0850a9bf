"""Deterministic training loop, subsection batching and posterior-mean embedding."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import __version__, kernels
from .autodiff import Adam, NonFiniteGradient, Tape
from .autodiff import checkpoint as ckpt
from .config import RunConfig, dump_yaml
from .networks import DGPVAE, Decoder, DecoderConfig, Encoder, EncoderConfig, NonFiniteTerm
from .posterior import PriorFactors
from .synth import Corpus

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "elbo", "recon", "kl")
CONVENTIONS = {
    "kl_reduction": "sum over channels, mean over batch",
    "recon_reduction": "sum over time and features, mean over batch",
    "kl_normalized_by_subsection": False,
    "length_scale_assignment": "round-robin",
}


class TrainingError(RuntimeError):
    pass


class RunLocked(RuntimeError):
    pass


@contextmanager
def run_lock(directory):
    """Exclusive ownership of a run directory via an O_EXCL lock file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{directory} is locked by another command ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


@dataclass
class Batch:
    x: np.ndarray
    series: np.ndarray
    offsets: np.ndarray


def subsection_starts(T: int, L: int) -> list[int]:
    if L > T:
        raise ValueError(f"subsection length {L} exceeds series length {T}")
    return list(range(0, T - L + 1, L))


def make_batches(observations: np.ndarray, subsection_length: int, batch_size: int,
                 mode: str, rng: np.random.Generator, series: np.ndarray | None = None) -> Iterator[Batch]:
    """One epoch of shuffled contiguous subsections.

    ``sequential`` tiles each series without overlap (a trailing remainder is
    dropped); ``random`` draws the same number of crops at uniform offsets.
    """
    N, T = observations.shape[:2]
    L = subsection_length
    if L > T:
        raise ValueError(f"subsection length {L} exceeds series length {T}")
    series = np.arange(N) if series is None else np.asarray(series)
    per = T // L
    if mode == "sequential":
        offs = np.tile(np.arange(per) * L, len(series))
    elif mode == "random":
        offs = rng.integers(0, T - L + 1, size=per * len(series))
    else:
        raise ValueError(f"unknown subsection mode {mode!r}")
    sids = np.repeat(series, per)
    order = rng.permutation(len(sids))
    sids, offs = sids[order], offs[order]
    window = np.arange(L)
    for lo in range(0, len(sids), batch_size):
        s, o = sids[lo:lo + batch_size], offs[lo:lo + batch_size]
        x = observations[s[:, None], o[:, None] + window[None, :]]
        yield Batch(x, s, o)


def prior_factors(length_scales, L: int, jitter: float = 1e-3) -> PriorFactors:
    """Cauchy-kernel priors on the within-subsection grid 0..L-1.

    ``jitter`` is the starting diagonal jitter; long length scales leave the
    Gram nearly singular, and the KL scales with the inverse of its smallest
    eigenvalue.
    """
    return PriorFactors.from_grams([kernels.cached_gram(kernels.cauchy(l), L, jitter) for l in length_scales])


def build_model(config: RunConfig, obs_shape: tuple[int, ...], rng: np.random.Generator) -> DGPVAE:
    enc_kwargs = dict(config.encoder)
    if len(obs_shape) == 1:
        d = obs_shape[0]
        enc = EncoderConfig(input_dim=d, latent_dim=config.latent_dim,
                            mean_field=config.posterior == "mean_field", **enc_kwargs)
    elif len(obs_shape) == 2:
        d = obs_shape[0] * obs_shape[1]
        enc = EncoderConfig(input_dim=d, latent_dim=config.latent_dim, image_shape=tuple(obs_shape),
                            mean_field=config.posterior == "mean_field", **enc_kwargs)
    else:
        raise ValueError(f"unsupported observation shape {obs_shape}")
    dec = DecoderConfig(latent_dim=config.latent_dim, output_dim=d, obs_variance=config.obs_variance,
                        **config.decoder)
    encoder = Encoder(enc, rng)
    decoder = Decoder(dec, rng)
    return DGPVAE(encoder, decoder, prior_factors(config.channel_length_scales, config.subsection_length,
                                                  config.prior_jitter))


@dataclass
class RunLog:
    rows: list[dict] = field(default_factory=list)
    wallclock: list[float] = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def append(self, step: int, values: dict, elapsed: float) -> None:
        if self.rows and step <= self.rows[-1]["step"]:
            raise ValueError("step counter must increase")
        self.rows.append({"step": step, **values})
        self.wallclock.append(elapsed)

    def write(self, directory) -> None:
        directory = Path(directory)
        with open(directory / "log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r["step"], *(repr(float(r[k])) for k in LOG_FIELDS[1:])])
        with open(directory / "timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "wallclock"))
            for r, t in zip(self.rows, self.wallclock):
                w.writerow([r["step"], f"{t:.6f}"])


@dataclass
class TrainResult:
    model: DGPVAE
    log: RunLog
    output_dir: Path | None


def _streams(seed: int):
    init_seq, batch_seq, noise_seq = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_seq), np.random.default_rng(batch_seq),
            np.random.default_rng(noise_seq))


def train(config: RunConfig, corpus: Corpus | None = None, write: bool = True) -> TrainResult:
    """Train with Adam over every subsection batch for ``config.epochs`` epochs."""
    corpus = corpus if corpus is not None else Corpus.load(config.corpus)
    series = corpus.split("train") if "train" in corpus.metadata.get("splits", {}) else np.arange(corpus.N)
    if len(series) == 0 or corpus.T < 1:
        raise TrainingError("corpus has no training series")
    if config.subsection_length > corpus.T:
        raise TrainingError(f"subsection length {config.subsection_length} exceeds series length {corpus.T}")
    init_rng, batch_rng, noise_rng = _streams(config.seed)
    model = build_model(config, corpus.obs_shape, init_rng)
    opt = Adam(model.params, lr=config.learning_rate)
    run_log = RunLog(seed=config.seed, config_hash=config.hash())
    start = time.perf_counter()
    step = 0
    for _ in range(config.epochs):
        for b_idx, batch in enumerate(make_batches(corpus.observations, config.subsection_length,
                                                   config.batch_size, config.subsection_mode,
                                                   batch_rng, series)):
            try:
                with Tape() as tape:
                    br = model.elbo(batch.x, beta=config.beta, rng=noise_rng, mc_samples=config.mc_samples)
                    loss = -br.total
                grads = tape.backward(loss)
                opt.step(grads)
            except (NonFiniteTerm, NonFiniteGradient) as exc:
                log.error("non-finite loss at step %d (batch %d): %s", step + 1, b_idx, exc)
                raise TrainingError(f"aborted at step {step + 1}, batch index {b_idx}: {exc}") from exc
            step += 1
            run_log.append(step, br.values(), time.perf_counter() - start)
    if step == 0:
        raise TrainingError("no training steps were run")
    out = None
    if write:
        out = Path(config.output_dir)
        write_run(out, config, model, run_log, corpus)
    return TrainResult(model, run_log, out)


def write_run(out: Path, config: RunConfig, model: DGPVAE, run_log: RunLog, corpus: Corpus) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(model.params, out / "checkpoint", extra={"config_hash": run_log.config_hash})
    run_log.write(out)
    dump_yaml(config.to_dict(), out / "config.yaml")
    info = {
        "seed": config.seed,
        "config_hash": run_log.config_hash,
        "code_version": __version__,
        "steps": len(run_log.rows),
        "obs_shape": list(corpus.obs_shape),
        "corpus_seed": corpus.metadata.get("seed"),
        "channel_length_scales": config.channel_length_scales,
        "conventions": CONVENTIONS,
    }
    (out / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def load_run(run_dir) -> tuple[RunConfig, DGPVAE]:
    import yaml

    run_dir = Path(run_dir)
    config = RunConfig.from_dict(yaml.safe_load((run_dir / "config.yaml").read_text()))
    info = json.loads((run_dir / "run.json").read_text())
    model = build_model(config, tuple(info["obs_shape"]), np.random.default_rng(0))
    ckpt.load_into(model.params, run_dir / "checkpoint")
    return config, model


def embed(model: DGPVAE, observations: np.ndarray, subsection_length: int,
          batch_size: int = 256) -> np.ndarray:
    """Posterior means (n, m, T), stitched from non-overlapping subsections.

    When ``T`` is not a multiple of the subsection length the last window is
    aligned to the end of the series and fills only the uncovered steps.
    """
    n, T = observations.shape[:2]
    L = subsection_length
    starts = subsection_starts(T, L)
    tail = T - (starts[-1] + L)
    if tail:
        starts.append(T - L)
    m = model.encoder.config.latent_dim
    out = np.empty((n, m, T))
    for s_i, s in enumerate(starts):
        keep_from = 0 if not (tail and s_i == len(starts) - 1) else L - tail
        for lo in range(0, n, batch_size):
            x = observations[lo:lo + batch_size, s:s + L]
            mean = model.encoder.encode(x).mean.data
            out[lo:lo + batch_size, :, s + keep_from:s + L] = mean[:, :, keep_from:]
    return out


def embed_corpus(run_dir, corpus: Corpus, split: str | None = None) -> np.ndarray:
    config, model = load_run(run_dir)
    if tuple(corpus.obs_shape) != tuple(json.loads((Path(run_dir) / "run.json").read_text())["obs_shape"]):
        raise ValueError(f"corpus observation shape {corpus.obs_shape} does not match the run")
    idx = corpus.split(split) if split else np.arange(corpus.N)
    return embed(model, corpus.observations[idx], config.subsection_length)
