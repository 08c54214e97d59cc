import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from cadis.errors import FittingError, InputError, ValidationError
from cadis.evaluation import plcc
from cadis.networks import CadisNet, RegressionHead
from cadis.score import (
    EmbeddingParams,
    ManifoldProbe,
    QualityEstimate,
    ScoreTable,
    default_anchors,
    embed_1d,
    extract_feature,
    logistic_map,
    orient,
    predict_supervised,
    zero_shot,
)

from conftest import tiny_net_config
from test_networks import _randomize, fd_rel_error


def test_embedding_params_validation():
    EmbeddingParams()
    with pytest.raises(ValidationError):
        EmbeddingParams(n_neighbors=1)
    with pytest.raises(ValidationError):
        EmbeddingParams(min_dist=1.0)


def test_probe_validation_and_shapes():
    with pytest.raises(ValidationError):
        ManifoldProbe(np.array([[0.0, 1.0], [0.0, 1.0], [2.0, 2.0]]))
    probe = ManifoldProbe.curved(p=8, segments=3, n_samples=50, seed=1)
    x, q = probe.sample()
    assert x.shape == (50, 8) and q.shape == (50,)
    assert probe.eta == pytest.approx(0.01 * probe.segment_lengths().min())
    np.testing.assert_allclose(probe.curve(np.array([0.0, 1.0])), probe.control_points[[0, -1]])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_probe_linear_noiseless(seed):
    x, q = ManifoldProbe.linear(p=16, n_samples=200, seed=seed).sample()
    y = embed_1d(x, EmbeddingParams(seed=seed))
    assert abs(spearmanr(y, q)[0]) >= 0.99


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_probe_curved_at_noise_bound(seed):
    # the ranking-recovery invariant holds up to eta = 2% of the shortest segment
    x, q = ManifoldProbe.curved(p=16, segments=3, n_samples=300, eta_frac=0.02, seed=seed).sample()
    y = embed_1d(x, EmbeddingParams(seed=seed))
    assert abs(spearmanr(y, q)[0]) >= 0.95


def test_embed_deterministic_and_needs_samples():
    x, _ = ManifoldProbe.linear(p=4, n_samples=40, seed=3).sample()
    a = embed_1d(x, EmbeddingParams(seed=5))
    b = embed_1d(x, EmbeddingParams(seed=5))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(InputError):
        embed_1d(x[:15], EmbeddingParams(n_neighbors=15))
    embed_1d(x[:16], EmbeddingParams(n_neighbors=15))
    with pytest.raises(ValidationError):
        embed_1d(np.full((20, 3), np.nan))


def test_orient_cases():
    y = np.array([3.0, 2.0, 1.0, 0.0, -1.0])
    out, o = orient(y, [0, 1])
    assert o == "as_is" and np.array_equal(out, y)
    out, o = orient(y, [3, 4])
    assert o == "flipped" and np.array_equal(out, -y)
    again, o2 = orient(out, [3, 4])
    assert np.array_equal(again, out) and o2 == "as_is"
    with pytest.raises(InputError):
        orient(y, [])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
def test_orient_property(seed, k):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=12)
    idx = rng.choice(12, size=k, replace=False)
    out, _ = orient(y, idx)
    assert out[idx].mean() >= out.mean()
    assert np.array_equal(orient(out, idx)[0], out)


def test_default_anchors():
    levels = np.array([2, 3, 1, 2, 4])
    kinds = np.array(["a", "a", "b", "b", "b"])
    assert default_anchors(levels).tolist() == [2]
    assert default_anchors(levels, kinds).tolist() == [0, 2]


def test_zero_shot_grouping():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(40, 4))
    levels = np.repeat([1, 2, 3, 4], 10)
    kinds = np.tile(["a", "b"], 20)
    y, o = zero_shot(feats, levels, kinds, EmbeddingParams(n_neighbors=5), group_by_kind=True)
    assert set(o) == {"a", "b"} and y.shape == (40,)
    with pytest.raises(InputError):
        zero_shot(feats, levels, None, EmbeddingParams(n_neighbors=5), group_by_kind=True)


def test_logistic_map_contracts():
    rng = np.random.default_rng(7)
    mos = rng.uniform(0, 100, 40)
    y = 0.02 * mos - 3.0
    assert plcc(logistic_map(y, mos), mos) >= plcc(y, mos) - 1e-9
    y2 = rng.normal(size=60)
    mos2 = 60 / (1 + np.exp(-1.5 * y2)) + rng.normal(scale=2.0, size=60)
    mapped = logistic_map(y2, mos2)
    order = np.argsort(y2)
    steps = np.diff(mapped[order])
    assert np.all(steps >= -1e-12) or np.all(steps <= 1e-12)
    assert plcc(mapped, mos2) >= plcc(y2, mos2)
    with pytest.raises(FittingError):
        logistic_map(y2, np.full(60, 3.0))
    with pytest.raises(FittingError):
        logistic_map(np.zeros(10), rng.normal(size=10))
    with pytest.raises(InputError):
        logistic_map([1, 2, 3, 4], [1, 2, 3, 4])


def test_logistic_map_decreasing_relation():
    y = np.linspace(-3, 3, 30)
    mos = 10 - 8 / (1 + np.exp(-2 * y))
    mapped = logistic_map(y, mos)
    assert np.all(np.diff(mapped) <= 1e-12)
    assert plcc(mapped, mos) > 0.999


def test_quality_estimate_validation():
    QualityEstimate(0.3)
    with pytest.raises(ValidationError):
        QualityEstimate(float("nan"))
    with pytest.raises(ValidationError):
        QualityEstimate(0.1, orientation="sideways")


def test_predict_supervised():
    head = RegressionHead(5, 4).double()
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    assert np.all(predict_supervised(head, np.ones((3, 5))) == 0)
    _randomize(head, 1)
    f = np.random.default_rng(1).normal(size=(4, 5))
    a = predict_supervised(head, f)
    assert np.array_equal(a, predict_supervised(head, f))
    assert predict_supervised(head, f[0]) == pytest.approx(a[0])
    assert fd_rel_error(lambda x: (head(x) ** 2).sum(), torch.tensor(f)) < 1e-3


def test_extract_feature_contracts(rng):
    net = CadisNet(tiny_net_config(16)).eval()
    refs = [rng.uniform(size=(16, 16, 3)) for _ in range(3)]
    dists = [np.clip(r + rng.normal(scale=0.2, size=r.shape), 0, 1) for r in refs]
    a = extract_feature(net, refs, dists)
    assert a.shape == (3, net.cfg.feature_channels)
    assert np.array_equal(a, extract_feature(net, refs, dists))
    clean = extract_feature(net, refs[:1], refs[:1])
    assert np.linalg.norm(clean - a[:1]) > 0
    raw = extract_feature(net, refs, dists, raw=True)
    assert raw.shape == a.shape
    with pytest.raises(ValidationError):
        extract_feature(net, [np.zeros((32, 32, 3))], [np.zeros((32, 32, 3))])


def test_score_table_roundtrip(tmp_path):
    rows = [
        {"ref_path": "ref/a.png", "dist_path": "dist/a1.png", "kind": "jpeg", "level": 1, "y": 0.25, "m_hat": None, "mos": None},
        {"ref_path": "ref/a.png", "dist_path": "dist/a2.png", "kind": "jpeg", "level": 2, "y": -0.5, "m_hat": 3.0, "mos": 41.5},
    ]
    ScoreTable(rows, {"mode": "zeroshot"}).write(tmp_path / "scores.csv")
    back = ScoreTable.read(tmp_path / "scores.csv")
    assert back.rows == rows and back.meta == {"mode": "zeroshot"}
    (tmp_path / "bad.csv").write_text("ref_path,dist_path,kind,level,y,m_hat\n")
    with pytest.raises(InputError, match="mos"):
        ScoreTable.read(tmp_path / "bad.csv")
