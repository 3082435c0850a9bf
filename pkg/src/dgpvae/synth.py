"""Synthetic sequence corpora with known ground-truth factor traces.

Each factor follows an independent GP with an RBF + constant kernel. Traces
are quantized onto the factor's value grid and rendered into observations
either by a seeded random nonlinear mixer or by looking up frames in an
ingested dataset.

On-disk layout of a corpus directory::

    metadata.json          factor specs, shapes, dtypes, splits, seed, renderer
    observations.bin       <f8, (N, T, *obs_shape)
    traces_continuous.bin  <f8, (N, k, T)
    traces_index.bin       <i8, (N, k, T); -1 rows for continuous factors
    labels.bin             <i8, (N,)   (optional)
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from . import kernels
from .kernels import KernelSpec

FORMAT = "dgpvae-corpus/1"
F64 = "<f8"
I64 = "<i8"


class CorpusError(RuntimeError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    name: str
    cardinality: int | None  # None: continuous
    length_scale: float
    constant_weight: float = 0.1

    def __post_init__(self):
        if self.cardinality is not None and self.cardinality < 1:
            raise ValueError(f"factor {self.name!r}: cardinality must be >= 1")
        self.kernel  # validates

    @property
    def kernel(self) -> KernelSpec:
        return kernels.rbf_plus_constant(self.length_scale, self.constant_weight)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FactorSpec":
        card = d.get("cardinality")
        return cls(d["name"], None if card in (None, "continuous") else int(card),
                   float(d["length_scale"]), float(d.get("constant_weight", 0.1)))


@dataclass
class FactorTrace:
    continuous: np.ndarray  # (k, T)
    indices: np.ndarray  # (k, T) int, -1 for continuous factors


def quantize(values: np.ndarray, cardinality: int | None, std: float = 1.0) -> np.ndarray:
    """Equal-probability bins of the N(0, std^2) marginal mapped to 0..card-1."""
    if cardinality is None:
        return np.full(np.shape(values), -1, dtype=np.int64)
    idx = np.floor(ndtr(np.asarray(values) / std) * cardinality).astype(np.int64)
    return np.clip(idx, 0, cardinality - 1)


def sample_factor_arrays(specs: Sequence[FactorSpec], T: int, N: int, rng: np.random.Generator):
    """Vectorized sampler: returns (continuous (N, k, T), indices (N, k, T))."""
    k = len(specs)
    cont = np.empty((N, k, T))
    idx = np.empty((N, k, T), dtype=np.int64)
    for j, spec in enumerate(specs):
        g = kernels.cached_gram(spec.kernel, T)
        cont[:, j, :] = kernels.sample_gp(g, rng, size=N)
        idx[:, j, :] = quantize(cont[:, j, :], spec.cardinality, np.sqrt(spec.kernel.amplitude))
    return cont, idx


def sample_factor_traces(specs: Sequence[FactorSpec], T: int, N: int, rng: np.random.Generator) -> list[FactorTrace]:
    cont, idx = sample_factor_arrays(specs, T, N, rng)
    return [FactorTrace(cont[i], idx[i]) for i in range(N)]


# renderers

@dataclass(frozen=True)
class MixerSpec:
    """Seeded point-wise map ``x_t = W2 tanh(W1 c_t + b1) + noise``.

    ``mode="block"`` ties each output feature to a single factor (feature i is
    driven by factor i mod k), which gives a natural feature-to-concept map.
    ``bypass=True`` makes the map the identity (requires output_dim == k).
    """

    seed: int = 0
    output_dim: int = 12
    hidden: int = 32
    noise_std: float = 0.1
    mode: str = "dense"
    bypass: bool = False

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.mode not in ("dense", "block"):
            raise ValueError(f"unknown mixer mode {self.mode!r}")


class Mixer:
    def __init__(self, spec: MixerSpec, k: int):
        if spec.output_dim < k:
            raise ValueError(f"mixer output_dim {spec.output_dim} must be >= number of factors {k}")
        if spec.bypass and spec.output_dim != k:
            raise ValueError("bypass mixer needs output_dim == number of factors")
        self.spec, self.k = spec, k
        rng = np.random.default_rng(spec.seed)
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(k), size=(k, spec.hidden))
        self.b1 = rng.normal(0.0, 0.5, size=spec.hidden)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(spec.hidden), size=(spec.hidden, spec.output_dim))
        if spec.mode == "block":
            self.w1 = rng.normal(0.0, 1.0, size=(k, spec.output_dim))
            self.b1 = rng.normal(0.0, 0.5, size=spec.output_dim)
            self.w2 = None

    def feature_groups(self) -> list[int] | None:
        if self.spec.mode != "block" or self.spec.bypass:
            return list(range(self.k)) if self.spec.bypass else None
        return [i % self.k for i in range(self.spec.output_dim)]

    def __call__(self, c: np.ndarray) -> np.ndarray:
        """Noise-free map of factor values ``(..., k)`` to ``(..., d)``."""
        if self.spec.bypass:
            return np.array(c, dtype=np.float64)
        if self.spec.mode == "block":
            groups = np.array(self.feature_groups())
            pre = c[..., groups] * self.w1[groups, np.arange(self.spec.output_dim)] + self.b1
            return np.tanh(pre) + 0.5 * pre
        return np.tanh(c @ self.w1 + self.b1) @ self.w2


def render_mixer(mixer: Mixer, trace: FactorTrace, rng: np.random.Generator | None = None) -> np.ndarray:
    x = mixer(trace.continuous.T)
    if mixer.spec.noise_std > 0:
        if rng is None:
            raise ValueError("noisy mixer needs an rng")
        x = x + mixer.spec.noise_std * rng.standard_normal(x.shape)
    return x


@dataclass
class IngestedDataset:
    """Frames indexed by a factor tuple.

    ``frames`` has shape ``(*cardinalities, *frame_shape)``; ``present`` marks
    which tuples exist (all by default)."""

    factor_names: list[str]
    cardinalities: list[int]
    frames: np.ndarray
    present: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.cardinalities)
        if tuple(self.frames.shape[:k]) != tuple(self.cardinalities):
            raise ValueError(f"frames shape {self.frames.shape} does not start with {self.cardinalities}")
        if self.present is None:
            self.present = np.ones(self.cardinalities, dtype=bool)

    @property
    def frame_shape(self) -> tuple[int, ...]:
        return tuple(self.frames.shape[len(self.cardinalities):])

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = {"format": "dgpvae-ingest/1", "factor_names": self.factor_names,
                "cardinalities": self.cardinalities, "frame_shape": list(self.frame_shape), "dtype": F64}
        (path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        (path / "frames.bin").write_bytes(np.ascontiguousarray(self.frames, dtype=F64).tobytes())
        (path / "present.bin").write_bytes(self.present.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "IngestedDataset":
        path = Path(path)
        meta = json.loads((path / "metadata.json").read_text())
        card = [int(c) for c in meta["cardinalities"]]
        frames = np.frombuffer((path / "frames.bin").read_bytes(), dtype=meta["dtype"])
        frames = frames.astype(np.float64).reshape(card + list(meta["frame_shape"]))
        present = None
        if (path / "present.bin").exists():
            present = np.frombuffer((path / "present.bin").read_bytes(), dtype=np.uint8).astype(bool).reshape(card)
        return cls(list(meta["factor_names"]), card, frames, present)


def render_lookup(dataset: IngestedDataset, trace: FactorTrace) -> np.ndarray:
    idx = trace.indices
    if idx.shape[0] != len(dataset.cardinalities):
        raise CorpusError(f"trace has {idx.shape[0]} factors, dataset has {len(dataset.cardinalities)}")
    if np.any(idx < 0) or np.any(idx >= np.array(dataset.cardinalities)[:, None]):
        raise CorpusError("trace indices fall outside the dataset's factor grid")
    tuples = tuple(idx)
    ok = dataset.present[tuples]
    if not np.all(ok):
        t = int(np.flatnonzero(~ok)[0])
        raise CorpusError(f"factor tuple {tuple(int(i) for i in idx[:, t])} absent from dataset")
    return dataset.frames[tuples].copy()


class MixerRenderer:
    kind = "mixer"

    def __init__(self, spec: MixerSpec):
        self.spec = spec

    def describe(self) -> dict:
        return {"kind": self.kind, **asdict(self.spec)}

    def render_all(self, specs, cont, idx, rng) -> np.ndarray:
        mixer = Mixer(self.spec, len(specs))
        x = mixer(np.swapaxes(cont, 1, 2))  # N, T, d
        if self.spec.noise_std > 0:
            x = x + self.spec.noise_std * rng.standard_normal(x.shape)
        return x

    def feature_groups(self, k: int) -> list[int] | None:
        return Mixer(self.spec, k).feature_groups()


class LookupRenderer:
    kind = "lookup"

    def __init__(self, dataset: IngestedDataset, source: str | None = None):
        self.dataset, self.source = dataset, source

    def describe(self) -> dict:
        return {"kind": self.kind, "source": self.source, "frame_shape": list(self.dataset.frame_shape)}

    def render_all(self, specs, cont, idx, rng) -> np.ndarray:
        card = [s.cardinality for s in specs]
        if card != list(self.dataset.cardinalities):
            raise CorpusError(f"factor cardinalities {card} do not match dataset {self.dataset.cardinalities}")
        return np.stack([render_lookup(self.dataset, FactorTrace(c, i)) for c, i in zip(cont, idx)])

    def feature_groups(self, k: int) -> None:
        return None


# corpus

@dataclass
class Corpus:
    path: Path | None
    metadata: dict
    observations: np.ndarray
    continuous: np.ndarray
    indices: np.ndarray
    labels: np.ndarray | None = None

    @property
    def N(self) -> int:
        return self.observations.shape[0]

    @property
    def T(self) -> int:
        return self.observations.shape[1]

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return tuple(self.observations.shape[2:])

    @property
    def factor_specs(self) -> list[FactorSpec]:
        return [FactorSpec.from_dict(f) for f in self.metadata["factors"]]

    def split(self, name: str) -> np.ndarray:
        lo, hi = self.metadata["splits"][name]
        return np.arange(lo, hi)

    @classmethod
    def load(cls, path) -> "Corpus":
        path = Path(path)
        meta_path = path / "metadata.json"
        if not meta_path.exists():
            raise CorpusError(f"no corpus at {path}: missing metadata.json")
        meta = json.loads(meta_path.read_text())
        shapes = meta["shapes"]

        def read(name, dtype):
            f = path / f"{name}.bin"
            arr = np.frombuffer(f.read_bytes(), dtype=dtype)
            expect = int(np.prod(shapes[name]))
            if arr.size != expect:
                raise CorpusError(f"{f}: expected {expect} values, found {arr.size}")
            return arr.reshape(shapes[name]).astype(np.float64 if dtype == F64 else np.int64)

        labels = read("labels", I64) if "labels" in shapes else None
        return cls(path, meta, read("observations", F64), read("traces_continuous", F64),
                   read("traces_index", I64), labels)

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.mkdir(parents=True, exist_ok=True)
            arrays = {
                "observations": (self.observations, F64),
                "traces_continuous": (self.continuous, F64),
                "traces_index": (self.indices, I64),
            }
            if self.labels is not None:
                arrays["labels"] = (self.labels, I64)
            meta = dict(self.metadata)
            meta["format"] = FORMAT
            meta["shapes"] = {k: list(a.shape) for k, (a, _) in arrays.items()}
            meta["dtypes"] = {k: dt for k, (_, dt) in arrays.items()}
            for name, (arr, dt) in arrays.items():
                (path / f"{name}.bin").write_bytes(np.ascontiguousarray(arr, dtype=dt).tobytes())
            (path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        except OSError as exc:
            raise CorpusError(f"failed writing corpus at {path}: {exc}") from exc
        self.path, self.metadata = path, meta
        return path


def default_splits(N: int, test_fraction: float = 0.2) -> dict[str, list[int]]:
    n_test = int(round(N * test_fraction)) if N > 1 else 0
    return {"train": [0, N - n_test], "test": [N - n_test, N]}


def build_corpus(specs: Sequence[FactorSpec], renderer, N: int, T: int, seed: int,
                 out_dir=None, splits: dict | None = None) -> Corpus:
    """Sample traces, render observations and (optionally) write to ``out_dir``.

    Trace sampling and observation noise use independent child streams of
    ``seed`` so labels and traces do not depend on the renderer.
    """
    if N < 1 or T < 1:
        raise ValueError("N and T must be >= 1")
    trace_seq, noise_seq = np.random.SeedSequence(seed).spawn(2)
    cont, idx = sample_factor_arrays(specs, T, N, np.random.default_rng(trace_seq))
    obs = renderer.render_all(specs, cont, idx, np.random.default_rng(noise_seq))
    meta = {
        "seed": int(seed),
        "N": N,
        "T": T,
        "factors": [s.to_dict() for s in specs],
        "factor_names": [s.name for s in specs],
        "cardinalities": [s.cardinality for s in specs],
        "renderer": renderer.describe(),
        "feature_groups": renderer.feature_groups(len(specs)),
        "splits": splits or default_splits(N),
    }
    corpus = Corpus(None, meta, obs, cont, idx)
    if out_dir is not None:
        corpus.save(out_dir)
    return corpus


# outcome labels

Labeler = Callable[[np.ndarray], int]


def mean_threshold_labeler(factor: int = 0, threshold: float = 0.0) -> Labeler:
    """Label 1 when the mean of ``factor``'s continuous trace exceeds ``threshold``."""
    return lambda cont: int(cont[factor].mean() > threshold)


def median_threshold_labeler(continuous: np.ndarray, factor: int = 0) -> Labeler:
    med = float(np.median(continuous[:, factor, :].mean(axis=-1)))
    return mean_threshold_labeler(factor, med)


def attach_outcome_labels(corpus: Corpus, labeler: Labeler | None = None, save: bool = True) -> Corpus:
    if corpus.continuous is None or corpus.continuous.size == 0:
        raise CorpusError("corpus has no factor traces to label from")
    labeler = labeler or mean_threshold_labeler()
    corpus.labels = np.array([labeler(c) for c in corpus.continuous], dtype=np.int64)
    if save and corpus.path is not None:
        corpus.save(corpus.path)
    return corpus
