import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_outfit, random_outfits, small_model
from outfitxai import grader as G
from outfitxai.errors import InvariantError
from outfitxai.grader import GraderConfig, init_model
from outfitxai.ifiv import (CSV_COLUMNS, IFIVReport, _rank, compute_ifiv, detect_flaw, ifiv_batch, predict_batch,
                            reports_to_csv)
from outfitxai.imagefeat import FeatureConfig
from outfitxai.outfit import FEATURES, PARTS, ItemFeatures, Outfit


def linear_model(weights: dict, a=1.0, b=-0.5):
    """Identity encoders, one outfit unit with hand-set input weights, no biases.

    ``weights`` maps (part, feature) to the weight vector on that block; the
    edge descriptor has 2 values, colors 9.
    """
    cfg = GraderConfig(k_widths=(), g_widths=(), h_width=1, edge_dim=4)
    m = init_model(cfg, 0, FeatureConfig(grid=2))
    W = np.zeros((1, 8 * 13))
    for (part, feat), w in weights.items():
        i = PARTS.index(part)
        lo = i * 13 + (0 if feat == "edge_image" else 4)
        W[0, lo:lo + len(w)] = w
    m.params["H.W"] = W
    m.params["H.b"] = np.zeros(1)
    m.params["S.W"] = np.array([[a], [b]])
    m.params["S.b"] = np.zeros(2)
    return m


def item(edge, colors):
    return ItemFeatures(np.asarray(edge, float), np.asarray(colors, float))


def test_hand_computed_two_item_model():
    m = linear_model({("upper", "edge_image"): [1, 2, 0, 0], ("upper", "colors"): [1] * 9,
                      ("lower", "edge_image"): [0, 0, 3, 0], ("lower", "colors"): [0.5] * 9}, a=2.0)
    o = Outfit({"upper": item([0.5, 0.25, 9, 9], [1.5] * 9), "lower": item([1, 1, 0.2, 1], [1.0] * 9)})
    T = 4.0
    rep = compute_ifiv(m, o, "pos", T)
    # s_pos = 2 * (w . x) when the unit is active; d(s_pos/T)/dx = 2 w / T
    assert rep.pairs[("upper", "edge_image")] == pytest.approx(2 * (0.5 + 0.5) / T, abs=1e-15)
    assert rep.pairs[("upper", "colors")] == pytest.approx(2 * 13.5 / T, abs=1e-15)
    assert rep.pairs[("lower", "edge_image")] == pytest.approx(2 * 0.6 / T, abs=1e-15)
    assert rep.pairs[("lower", "colors")] == pytest.approx(2 * 4.5 / T, abs=1e-15)
    neg = compute_ifiv(m, o, "neg", T)
    assert neg.pairs[("lower", "colors")] == pytest.approx(-0.5 * 4.5 / T, abs=1e-15)
    assert rep.prediction == ("lower", "edge_image")


def test_single_item_outfit_has_two_entries():
    m = small_model(seed=1)
    rng = np.random.default_rng(0)
    o = random_outfit(rng, n=1)
    rep = compute_ifiv(m, o)
    assert len(rep.ranking) == 2
    assert {p for p, _, _ in rep.ranking} == set(o.items)
    assert detect_flaw(rep, "item") == o.present_parts[0]
    assert detect_flaw(rep, "item", "sum") == o.present_parts[0]


@pytest.mark.parametrize("target", ["pos", "neg"])
def test_euler_identity_bias_free(target):
    rng = np.random.default_rng(2)
    for seed in range(5):
        m = small_model(seed=seed, zero_bias=True, k=(6, 4), g=(5,), h=9)
        outfits = random_outfits(rng, 20)
        T = float(rng.uniform(0.3, 7))
        b = ifiv_batch(m, outfits, target, T)
        c = 0 if target == "pos" else 1
        np.testing.assert_allclose(b.pairs.sum(axis=(1, 2)), b.logits[:, c] / T, rtol=0, atol=1e-9)


def test_exact_additivity_and_presence():
    rng = np.random.default_rng(3)
    m = small_model(seed=4)
    for o in random_outfits(rng, 10):
        rep = compute_ifiv(m, o)
        assert set(rep.items) == set(o.items)
        assert {p for p, _ in rep.pairs} == set(o.items)
        for p in o.items:
            assert rep.items[p] == rep.pairs[(p, "edge_image")] + rep.pairs[(p, "colors")]


def test_batched_equals_single():
    rng = np.random.default_rng(4)
    m = small_model(seed=5)
    outfits = random_outfits(rng, 7)
    b = ifiv_batch(m, outfits, chunk=3)
    for k, o in enumerate(outfits):
        rep = compute_ifiv(m, o)
        for (p, f), v in rep.pairs.items():
            assert b.pairs[k, PARTS.index(p), FEATURES.index(f)] == pytest.approx(v, rel=1e-12, abs=1e-15)


def test_scaling_target_path_scales_ifivs():
    rng = np.random.default_rng(5)
    m = small_model(seed=6)
    outfits = random_outfits(rng, 10)
    base = ifiv_batch(m, outfits, "pos", 1.0)
    m.params["S.W"] = m.params["S.W"] * 3.0
    scaled = ifiv_batch(m, outfits, "pos", 1.0)
    np.testing.assert_allclose(scaled.pairs, 3.0 * base.pairs, rtol=1e-12, atol=1e-15)
    assert [x.tolist() for x in predict_batch(base)] == [x.tolist() for x in predict_batch(scaled)]
    halved = ifiv_batch(m, outfits, "pos", 2.0)
    np.testing.assert_allclose(halved.pairs, scaled.pairs / 2.0, rtol=1e-12, atol=1e-15)


def test_detect_flaw_sign_bookkeeping():
    pairs = {("upper", "edge_image"): -3.0, ("upper", "colors"): 0.5,
             ("lower", "edge_image"): 2.0, ("lower", "colors"): 1.0}
    rep = IFIVReport("pos", 1.0, (0.0, 0.0), pairs, {"upper": -2.5, "lower": 3.0}, _rank(pairs))
    assert detect_flaw(rep) == ("upper", "edge_image")
    assert detect_flaw(rep, "item") == "upper"


def test_item_rules_can_disagree():
    pairs = {("upper", "edge_image"): -3.0, ("upper", "colors"): 5.0,
             ("lower", "edge_image"): -2.0, ("lower", "colors"): -2.0}
    items = {"upper": 2.0, "lower": -4.0}
    rep = IFIVReport("pos", 1.0, (0.0, 0.0), pairs, items, _rank(pairs))
    assert detect_flaw(rep, "item", "pair") == "upper"
    assert detect_flaw(rep, "item", "sum") == "lower"


def test_ties_broken_by_part_then_feature():
    pairs = {(p, f): -1.0 for p in ("feet", "upper") for f in FEATURES}
    rep = IFIVReport("pos", 1.0, (0.0, 0.0), pairs, {"feet": -2.0, "upper": -2.0}, _rank(pairs))
    assert rep.prediction == ("upper", "edge_image")
    assert [(p, f) for p, f, _ in rep.ranking] == [("upper", "edge_image"), ("upper", "colors"),
                                                   ("feet", "edge_image"), ("feet", "colors")]
    assert detect_flaw(rep, "item", "sum") == "upper"


def test_three_item_model_single_negative_contributor():
    """Brute force: with one unit and positive inputs, the only item with negative weights is the flaw."""
    rng = np.random.default_rng(6)
    parts = ["outer", "lower", "feet"]
    for bad in parts:
        w = {(p, f): np.full(4 if f == "edge_image" else 9, -0.1 if p == bad else 1.0) for p in parts for f in FEATURES}
        m = linear_model(w)
        o = Outfit({p: item(rng.uniform(0.1, 1, 4), rng.uniform(1, 2, 9)) for p in parts})
        rep = compute_ifiv(m, o, "pos", 1.0)
        contributions = {p: sum(float(np.dot(w[(p, f)], o.items[p].feature(f))) for f in FEATURES) for p in parts}
        assert min(contributions, key=contributions.get) == bad
        assert detect_flaw(rep, "item", "pair") == bad
        assert detect_flaw(rep, "item", "sum") == bad


def test_predict_batch_matches_detect_flaw():
    rng = np.random.default_rng(7)
    m = small_model(seed=8)
    outfits = random_outfits(rng, 25)
    b = ifiv_batch(m, outfits)
    for rule in ("pair", "sum"):
        pi, fi = predict_batch(b, rule)
        for k, o in enumerate(outfits):
            rep = compute_ifiv(m, o)
            assert PARTS[pi[k]] == detect_flaw(rep, "item", rule)
            if rule == "pair":
                assert (PARTS[pi[k]], FEATURES[fi[k]]) == detect_flaw(rep)


def test_errors():
    m = small_model()
    o = random_outfit(np.random.default_rng(0), n=2)
    with pytest.raises(InvariantError):
        compute_ifiv(m, o, "maybe")
    with pytest.raises(InvariantError):
        compute_ifiv(m, o, "pos", 0.0)
    rep = IFIVReport("pos", 1.0, (0.0, 0.0), {}, {}, [])
    with pytest.raises(InvariantError):
        detect_flaw(rep)
    with pytest.raises(InvariantError):
        detect_flaw(compute_ifiv(m, o), "cell")


def test_report_export_formats():
    m = small_model(seed=2)
    o = random_outfit(np.random.default_rng(1), n=3, oid="fit-1")
    rep = compute_ifiv(m, o)
    d = rep.to_dict()
    assert d["prediction"] == {"part": rep.prediction[0], "feature": rep.prediction[1]}
    assert len(d["ranking"]) == 6 and d["target_class"] == "pos"
    assert d["score"] == pytest.approx(G.score(m, o))
    text = reports_to_csv([("fit-1", rep)])
    header, row = text.strip().split("\n")
    assert header.split(",") == CSV_COLUMNS
    assert row.split(",")[0] == "fit-1" and row.count(",") == len(CSV_COLUMNS) - 1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_ifiv_gradient_factor_matches_finite_differences(seed):
    """IFIV_{i,f} = x . g; compare g against central differences through the encoders' consumers."""
    rng = np.random.default_rng(seed)
    m = small_model(seed=seed)
    o = random_outfit(rng, n=int(rng.integers(1, 5)))
    T = float(rng.uniform(0.5, 4))
    rep = compute_ifiv(m, o, "pos", T)
    tr = G.forward(m, o)
    # directional derivative along x itself equals IFIV_{i,f}
    for (part, feat), v in rep.pairs.items():
        x = tr.encodings[(part, feat)].data
        h = 1e-6
        vals = []
        for eps in (h, -h):
            enc = {k: t.data.copy() for k, t in tr.encodings.items()}
            enc[(part, feat)] = x * (1 + eps)
            vals.append(_logits_from(m, enc, tr.mask)[0, 0] / T)
        numeric = (vals[0] - vals[1]) / (2 * h)
        assert abs(numeric - v) <= 1e-5 * max(abs(v), abs(numeric), 1e-6)


def _logits_from(m, enc, mask):
    codes = []
    for i, part in enumerate(PARTS):
        v = np.concatenate([enc[(part, "edge_image")], enc[(part, "colors")]], axis=1)
        for l in range(len(m.config.g_widths)):
            v = np.maximum(v @ m.params[f"G.{part}.{l}.W"].T + m.params[f"G.{part}.{l}.b"], 0)
        codes.append(v * mask[:, i:i + 1])
    z = np.maximum(np.concatenate(codes, axis=1) @ m.params["H.W"].T + m.params["H.b"], 0)
    return z @ m.params["S.W"].T + m.params["S.b"]
