import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from dgpvae import synth
from dgpvae.synth import CorpusError, FactorSpec, FactorTrace, IngestedDataset, Mixer, MixerSpec

DESK = [FactorSpec("fast", 10, 2.0), FactorSpec("mid", 10, 10.0), FactorSpec("slow", 10, 50.0)]


@pytest.fixture(scope="module")
def thousand():
    return synth.sample_factor_arrays(DESK, 100, 1000, np.random.default_rng(2024))


def test_factor_independence(thousand):
    cont, _ = thousand
    pooled = np.swapaxes(cont, 1, 2).reshape(-1, 3)
    cc = np.corrcoef(pooled.T)
    assert np.max(np.abs(cc[np.triu_indices(3, 1)])) < 0.05


def test_change_rate_decreases_with_length_scale(thousand):
    _, idx = thousand
    changes = (np.diff(idx, axis=-1) != 0).sum(-1).mean(axis=0)
    assert changes[0] > changes[1] > changes[2]


def test_dense_changes_occur(thousand):
    _, idx = thousand
    simultaneous = (np.diff(idx, axis=-1) != 0).sum(axis=1) >= 2
    assert simultaneous.mean() > 0


def test_indices_in_range(thousand):
    _, idx = thousand
    assert idx.min() >= 0 and idx.max() <= 9


def test_quantization_is_equal_probability(thousand):
    _, idx = thousand
    freq = np.bincount(idx[:, 0].ravel(), minlength=10) / idx[:, 0].size
    np.testing.assert_allclose(freq, 0.1, atol=0.01)


def test_quantize_bin_edges():
    edges = norm.ppf([0.25, 0.5, 0.75])
    assert synth.quantize(np.array([-5.0]), 4)[0] == 0
    assert synth.quantize(edges - 1e-9, 4).tolist() == [0, 1, 2]
    assert synth.quantize(edges + 1e-9, 4).tolist() == [1, 2, 3]
    assert synth.quantize(np.array([40.0]), 4)[0] == 3


@settings(max_examples=50, deadline=None)
@given(values=st.lists(st.floats(-6, 6), min_size=2, max_size=30), card=st.integers(1, 12))
def test_quantize_monotone(values, card):
    v = np.sort(np.array(values))
    q = synth.quantize(v, card)
    assert np.all(np.diff(q) >= 0)
    assert q.min() >= 0 and q.max() < card


def test_cardinality_one_all_zero():
    _, idx = synth.sample_factor_arrays([FactorSpec("a", 1, 3.0)], 20, 5, np.random.default_rng(0))
    assert np.all(idx == 0)


def test_constant_only_kernel_trace_is_flat():
    spec = FactorSpec("c", 8, 1.0, constant_weight=1.0)
    _, idx = synth.sample_factor_arrays([spec], 50, 20, np.random.default_rng(1))
    assert np.all(idx == idx[..., :1])


def test_continuous_factor_has_no_indices():
    cont, idx = synth.sample_factor_arrays([FactorSpec("c", None, 3.0)], 10, 2, np.random.default_rng(0))
    assert np.all(idx == -1)
    assert np.all(np.isfinite(cont))


def test_invalid_cardinality():
    with pytest.raises(ValueError):
        FactorSpec("bad", 0, 2.0)


def test_factor_spec_roundtrip():
    for spec in DESK + [FactorSpec("c", None, 4.0, 0.2)]:
        assert FactorSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_mixer_same_seed_identical():
    a, b = Mixer(MixerSpec(seed=5), 3), Mixer(MixerSpec(seed=5), 3)
    assert a.w1.tobytes() == b.w1.tobytes() and a.w2.tobytes() == b.w2.tobytes()
    c = np.random.default_rng(0).normal(size=(7, 3))
    assert a(c).tobytes() == b(c).tobytes()


def test_mixer_pointwise():
    mixer = Mixer(MixerSpec(seed=2, noise_std=0.0), 3)
    c = np.random.default_rng(1).normal(size=(1, 3))
    trace = FactorTrace(np.repeat(c.T, 4, axis=1), np.zeros((3, 4), dtype=int))
    x = synth.render_mixer(mixer, trace)
    assert np.all(x == x[:1])


def test_mixer_bypass_is_identity():
    mixer = Mixer(MixerSpec(output_dim=3, bypass=True, noise_std=0.0), 3)
    cont = np.random.default_rng(3).normal(size=(3, 9))
    x = synth.render_mixer(mixer, FactorTrace(cont, np.zeros((3, 9), dtype=int)))
    np.testing.assert_array_equal(x, cont.T)


def test_mixer_rejects_small_output():
    with pytest.raises(ValueError):
        Mixer(MixerSpec(output_dim=2), 3)
    with pytest.raises(ValueError):
        MixerSpec(noise_std=-0.1)


def test_block_mixer_feature_depends_on_one_factor():
    mixer = Mixer(MixerSpec(seed=4, output_dim=6, mode="block", noise_std=0.0), 3)
    groups = mixer.feature_groups()
    assert groups == [0, 1, 2, 0, 1, 2]
    c = np.random.default_rng(0).normal(size=(5, 3))
    base = mixer(c)
    bumped = c.copy()
    bumped[:, 1] += 0.7
    changed = np.any(mixer(bumped) != base, axis=0)
    assert changed.tolist() == [g == 1 for g in groups]


# lookup renderer

@pytest.fixture
def micro():
    rng = np.random.default_rng(0)
    return IngestedDataset(["a", "b"], [3, 3], rng.normal(size=(3, 3, 4)))


def test_lookup_micro_roundtrip(micro, tmp_path):
    micro.save(tmp_path / "ds")
    ds = IngestedDataset.load(tmp_path / "ds")
    grid = np.array([(i, j) for i in range(3) for j in range(3)]).T
    frames = synth.render_lookup(ds, FactorTrace(grid.astype(float), grid))
    for t, (i, j) in enumerate(grid.T):
        np.testing.assert_array_equal(frames[t], micro.frames[i, j])


def test_lookup_constant_trace(micro):
    idx = np.tile([[1], [2]], (1, 5))
    frames = synth.render_lookup(micro, FactorTrace(idx.astype(float), idx))
    assert np.all(frames == micro.frames[1, 2])


def test_lookup_single_factor_change(micro):
    idx = np.array([[0, 2], [1, 1]])
    frames = synth.render_lookup(micro, FactorTrace(idx.astype(float), idx))
    np.testing.assert_array_equal(frames[1] - frames[0], micro.frames[2, 1] - micro.frames[0, 1])


def test_lookup_absent_tuple_named(micro):
    micro.present[1, 2] = False
    idx = np.array([[0, 1], [0, 2]])
    with pytest.raises(CorpusError, match=r"\(1, 2\)"):
        synth.render_lookup(micro, FactorTrace(idx.astype(float), idx))


def test_lookup_corpus(micro, tmp_path):
    specs = [FactorSpec("a", 3, 2.0), FactorSpec("b", 3, 5.0)]
    corpus = synth.build_corpus(specs, synth.LookupRenderer(micro), N=4, T=6, seed=1, out_dir=tmp_path / "c")
    assert corpus.observations.shape == (4, 6, 4)
    i, j = corpus.indices[2, :, 3]
    np.testing.assert_array_equal(corpus.observations[2, 3], micro.frames[i, j])


def test_lookup_cardinality_mismatch(micro):
    with pytest.raises(CorpusError):
        synth.build_corpus([FactorSpec("a", 4, 2.0), FactorSpec("b", 3, 2.0)], synth.LookupRenderer(micro), 2, 3, 0)


# corpus on disk

def test_minimal_corpus_roundtrip(tmp_path):
    corpus = synth.build_corpus([FactorSpec("a", 5, 2.0)], synth.MixerRenderer(MixerSpec(output_dim=2)),
                                N=1, T=1, seed=0, out_dir=tmp_path / "c")
    back = synth.Corpus.load(tmp_path / "c")
    assert back.observations.tobytes() == corpus.observations.tobytes()
    assert back.indices.tobytes() == corpus.indices.tobytes()
    assert back.metadata == corpus.metadata


def test_corpus_regeneration_byte_identical(tmp_path):
    r = synth.MixerRenderer(MixerSpec(seed=3))
    synth.build_corpus(DESK, r, N=20, T=30, seed=9, out_dir=tmp_path / "a")
    synth.build_corpus(DESK, r, N=20, T=30, seed=9, out_dir=tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_corpus_files_little_endian(tmp_path):
    corpus = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec()), N=3, T=4, seed=0, out_dir=tmp_path / "c")
    raw = np.frombuffer((tmp_path / "c" / "observations.bin").read_bytes(), dtype="<f8")
    np.testing.assert_array_equal(raw, corpus.observations.ravel())


def test_corpus_splits_disjoint():
    corpus = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec()), N=50, T=5, seed=0)
    tr, te = corpus.split("train"), corpus.split("test")
    assert len(tr) == 40 and len(te) == 10
    assert not set(tr) & set(te)


def test_missing_corpus_errors(tmp_path):
    with pytest.raises(CorpusError, match="metadata.json"):
        synth.Corpus.load(tmp_path / "nowhere")


def test_truncated_corpus_errors(tmp_path):
    synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec()), N=3, T=4, seed=0, out_dir=tmp_path / "c")
    f = tmp_path / "c" / "observations.bin"
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(CorpusError, match="observations.bin"):
        synth.Corpus.load(tmp_path / "c")


def test_traces_independent_of_renderer():
    a = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec(seed=1, noise_std=0.5)), 5, 10, seed=4)
    b = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec(seed=2, noise_std=0.0)), 5, 10, seed=4)
    assert a.continuous.tobytes() == b.continuous.tobytes()


# labels

def test_constant_labeler():
    corpus = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec()), 10, 5, seed=0)
    synth.attach_outcome_labels(corpus, lambda c: 0, save=False)
    assert np.all(corpus.labels == 0)


def test_median_labels_balanced(thousand):
    cont, idx = thousand
    corpus = synth.Corpus(None, {}, np.zeros((1000, 1, 1)), cont, idx)
    synth.attach_outcome_labels(corpus, synth.median_threshold_labeler(cont), save=False)
    assert 0.45 <= corpus.labels.mean() <= 0.55


def test_labels_ignore_observation_noise():
    a = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec(noise_std=0.1)), 30, 20, seed=5)
    b = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec(noise_std=2.0)), 30, 20, seed=5)
    la = synth.attach_outcome_labels(a, save=False).labels
    lb = synth.attach_outcome_labels(b, save=False).labels
    assert la.tolist() == lb.tolist()


def test_labels_persist(tmp_path):
    corpus = synth.build_corpus(DESK, synth.MixerRenderer(MixerSpec()), 8, 5, seed=0, out_dir=tmp_path / "c")
    synth.attach_outcome_labels(corpus)
    assert synth.Corpus.load(tmp_path / "c").labels.tolist() == corpus.labels.tolist()


def test_labels_need_traces():
    corpus = synth.Corpus(None, {}, np.zeros((2, 3, 1)), np.zeros((2, 0, 3)), np.zeros((2, 0, 3), dtype=int))
    with pytest.raises(CorpusError):
        synth.attach_outcome_labels(corpus, save=False)
