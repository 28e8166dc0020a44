import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_outfit, random_outfits, small_model
from outfitxai import grader as G
from outfitxai.dataset import load_dataset
from outfitxai.errors import InvariantError
from outfitxai.flawbench import (LEDGER_COLUMNS, TYPES, SynthSpec, build_mod_samples, chance_from_counts,
                                 chance_rates, evaluate_detection, generate_synthetic, hue_rule, make_mods,
                                 parse_types, select_base, texture_rule, write_detection_tables, write_ledger)
from outfitxai.flawbench.synth import circular_distance
from outfitxai.ifiv import compute_ifiv, detect_flaw
from outfitxai.imagefeat import FeatureConfig
from outfitxai.outfit import PARTS

# mod-sample cardinalities of the published benchmark: {items per outfit: samples}
PUBLISHED_COUNTS = {3: 420, 4: 3920, 5: 19800, 6: 22980, 7: 7490, 8: 160}


# --------------------------------------------------------------------------- planted rules

def brute_hue_rule(hues, tol):
    """A shared base exists iff one lies at some hue +- tol (an extreme of the feasible arc)."""
    cands = [h + s * tol for h in hues for s in (-1, 1)] + list(hues)
    return any(all(circular_distance(h, b) <= tol + 1e-9 for h in hues) for b in cands)


def test_hue_rule_examples():
    assert hue_rule([350, 10], 10)
    assert not hue_rule([350, 11], 10)
    assert hue_rule([0, 120, 240], 180)
    assert not hue_rule([0, 120, 240], 100)
    assert hue_rule([42], 0)


@settings(max_examples=200)
@given(st.lists(st.floats(0, 359.99), min_size=1, max_size=8), st.floats(0, 179))
def test_hue_rule_matches_brute_force(hues, tol):
    assert hue_rule(hues, tol) == brute_hue_rule(hues, tol)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 359.99), min_size=1, max_size=8), st.floats(0, 170), st.floats(-720, 720))
def test_hue_rule_is_rotation_invariant(hues, tol, shift):
    rotated = [(h + shift) % 360 for h in hues]
    if brute_hue_rule(hues, tol) == brute_hue_rule(rotated, tol):
        assert hue_rule(hues, tol) == hue_rule(rotated, tol)


def test_texture_rule():
    assert texture_rule(["plain", "plain"]) and texture_rule([])
    assert not texture_rule(["plain", "dense"])


SMALL_SPEC = dict(items_per_part=12, n_hues=6, textures=("plain", "dense"), n_positive=30, n_negative=30,
                  min_items=3, max_items=6, image_size=32)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(SynthSpec(seed=3, **SMALL_SPEC), root)
    return root


def test_synthetic_labels_follow_planted_rules(synth_dir):
    m = json.loads((synth_dir / "manifest.json").read_text())
    tol = m["synth_spec"]["hue_tolerance"]
    labels = {"pos": 0, "neg": 0}
    for o in m["outfits"]:
        items = [m["items"][i] for i in o["parts"].values()]
        ok = brute_hue_rule([it["hue"] for it in items], tol) and len({it["texture"] for it in items}) == 1
        assert ok == (o["label"] == "pos")
        assert 3 <= len(items) <= 6
        assert all(m["items"][i]["part"] == p for p, i in o["parts"].items())
        labels[o["label"]] += 1
    assert labels == {"pos": 30, "neg": 30}
    assert {o["split"] for o in m["outfits"]} == {"train", "val", "test"}


def test_synthetic_generation_is_deterministic(synth_dir, tmp_path):
    generate_synthetic(SynthSpec(seed=3, **SMALL_SPEC), tmp_path)
    assert (tmp_path / "manifest.json").read_bytes() == (synth_dir / "manifest.json").read_bytes()
    for name in ("items/upper-000.png", "items/accessory2-011.png"):
        assert (tmp_path / name).read_bytes() == (synth_dir / name).read_bytes()


def test_synth_spec_validation():
    with pytest.raises(InvariantError):
        SynthSpec(split=(0.5, 0.5, 0.5)).validate()
    with pytest.raises(InvariantError):
        SynthSpec(textures=("zigzag",)).validate()
    with pytest.raises(InvariantError):
        SynthSpec(min_items=5, max_items=3).validate()
    spec = SynthSpec(seed=9)
    assert SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# --------------------------------------------------------------------------- chance rates

def test_chance_rates_reproduce_published_random_baseline():
    ch = chance_from_counts(PUBLISHED_COUNTS)
    assert ch.item == pytest.approx(18.26, abs=0.005)
    assert ch.feature == pytest.approx(9.13, abs=0.005)
    assert ch.n_samples == 54770
    expanded = chance_rates([n for n, c in PUBLISHED_COUNTS.items() for _ in range(c)])
    assert expanded.item == pytest.approx(ch.item, rel=1e-12)


@pytest.mark.parametrize("n,published", [(3, 16.67), (4, 12.50), (5, 10.00), (6, 8.34), (7, 7.15), (8, 6.25)])
def test_chance_per_item_count(n, published):
    assert chance_rates([n] * 5).feature == pytest.approx(published, abs=0.01)
    assert chance_rates([n]).feature == pytest.approx(50.0 / n, rel=1e-15)


@settings(max_examples=100)
@given(st.lists(st.integers(1, 8), min_size=1, max_size=60))
def test_chance_rate_properties(ns):
    ch = chance_rates(ns)
    assert ch.feature == pytest.approx(ch.item / 2, rel=1e-12)
    assert 100.0 / max(ns) - 1e-9 <= ch.item <= 100.0 / min(ns) + 1e-9
    counts = {n: ns.count(n) for n in set(ns)}
    assert chance_from_counts(counts).item == pytest.approx(ch.item, rel=1e-12)


def test_chance_rates_empty_and_invalid():
    assert chance_rates([]).n_samples == 0
    with pytest.raises(InvariantError):
        chance_rates([0, 3])


# --------------------------------------------------------------------------- protocol

def test_parse_types():
    assert parse_types("item,edge,colors") == TYPES
    assert parse_types(["color"]) == ("colors",)
    with pytest.raises(InvariantError):
        parse_types("shape")


def test_select_base_orders_by_score_then_id():
    rng = np.random.default_rng(0)
    m = small_model(seed=2)
    outfits = random_outfits(rng, 30)
    dup = random_outfit(np.random.default_rng(99), oid="a-dup")
    outfits += [dup, type(dup)(dict(dup.items), "0-dup")]
    sel = select_base(m, outfits, 32)
    assert np.all(np.diff(sel.scores) <= 0)
    ids = [o.outfit_id for o in sel.outfits]
    assert ids.index("0-dup") == ids.index("a-dup") - 1
    assert sum(sel.size_counts.values()) == 32
    assert sum(sel.part_counts.values()) == sum(o.n_items for o in outfits)
    top = select_base(m, outfits, 5)
    assert [o.outfit_id for o in top.outfits] == ids[:5]
    with pytest.raises(InvariantError):
        select_base(m, outfits, 33)


@pytest.mark.parametrize("mtype", TYPES)
def test_make_mods_keeps_lowest_scoring_candidates(mtype):
    rng = np.random.default_rng(1)
    m = small_model(seed=3)
    m.temperature = 1.7
    base = random_outfit(rng, n=4, oid="base")
    part = base.present_parts[1]
    pool = [random_outfit(rng, n=8, oid=f"p{k}").items[part] for k in range(15)]
    mods = make_mods(m, base, part, mtype, pool, np.random.default_rng(5), n_candidates=60, keep=7)
    assert len(mods) == 7 and [x.rank for x in mods] == list(range(7))
    assert all(a.score <= b.score for a, b in zip(mods, mods[1:]))

    # replay the candidate stream and score every candidate the slow way
    r = np.random.default_rng(5)
    own = base.items[part]
    if mtype == "colors":
        cands = [base.replaced(part, colors=c) for c in r.uniform(1, 2, size=(60, 9))]
    else:
        picks = r.integers(len(pool), size=60)
        cands = [base.replaced(part, edge=pool[k].edge, colors=pool[k].colors if mtype == "item" else None)
                 for k in picks]
    full = np.asarray(G.score(m, cands))
    expect = np.argsort(full, kind="stable")[:7]
    assert [x.candidate_index for x in mods] == expect.tolist()
    np.testing.assert_allclose([x.score for x in mods], full[expect], rtol=1e-10, atol=1e-12)
    for x in mods:
        if mtype == "colors":
            assert np.array_equal(x.edge, own.edge) and np.all((x.colors >= 1) & (x.colors <= 2))
            assert x.source_item is None
        elif mtype == "edge_image":
            assert np.array_equal(x.colors, own.colors)
            assert x.source_item in {p.item_id for p in pool}
        assert x.n_items == 4 and x.base_id == "base"


def test_make_mods_rejects_bad_requests():
    rng = np.random.default_rng(2)
    m = small_model()
    base = random_outfit(rng, n=2)
    absent = next(p for p in PARTS if p not in base.items)
    with pytest.raises(InvariantError):
        make_mods(m, base, absent, "item", [], rng)
    with pytest.raises(InvariantError):
        make_mods(m, base, base.present_parts[0], "shape", [], rng)
    with pytest.raises(InvariantError):
        make_mods(m, base, base.present_parts[0], "item", [], rng)


@pytest.fixture(scope="module")
def small_run(synth_dir):
    data = load_dataset(synth_dir, FeatureConfig(grid=4))
    m = small_model(seed=7)
    run = build_mod_samples(m, data, n_bases=4, seed=11, n_candidates=40, keep=3)
    return data, m, run


def test_build_mod_samples_layout(small_run):
    data, m, run = small_run
    bases = run.bases.outfits
    assert len(bases) == 4
    assert len(run.mods) == sum(o.n_items for o in bases) * len(TYPES) * 3
    pools = {p: set(data.pool(p, "test")) for p in PARTS}
    lookup = run.base_lookup()
    for x in run.mods:
        base = lookup[x.base_id]
        if x.source_item is not None:
            assert x.source_item in pools[x.part]
            assert x.source_item != base.items[x.part].item_id
        assert x.score == pytest.approx(G.score(m, x.outfit(base)), rel=1e-9, abs=1e-12)


def test_build_mod_samples_deterministic(small_run, tmp_path):
    data, m, run = small_run
    again = build_mod_samples(m, data, n_bases=4, seed=11, n_candidates=40, keep=3)
    write_ledger(run.mods, tmp_path / "a.csv")
    write_ledger(again.mods, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].split(",") == LEDGER_COLUMNS and len(lines) == len(run.mods) + 1
    other = build_mod_samples(m, data, n_bases=4, seed=12, n_candidates=40, keep=3)
    assert [x.candidate_index for x in other.mods] != [x.candidate_index for x in run.mods]


def test_evaluate_detection_matches_per_sample_oracle(small_run, tmp_path):
    data, m, run = small_run
    table = evaluate_detection(m, run)
    lookup = run.base_lookup()
    expect = {t: [0, 0] for t in TYPES}
    for x in run.mods:
        rep = compute_ifiv(m, x.outfit(lookup[x.base_id]))
        hit = detect_flaw(rep, "item") == x.part if x.mtype == "item" else detect_flaw(rep) == (x.part, x.mtype)
        expect[x.mtype][0] += hit
        expect[x.mtype][1] += 1
    for t in TYPES:
        assert (table.overall[t].correct, table.overall[t].count) == tuple(expect[t])
        assert sum(row[t].count for row in table.by_n.values()) == expect[t][1]
        assert sum(row[t].count for row in table.by_part.values()) == expect[t][1]
    assert table.chance.item == pytest.approx(chance_rates([x.n_items for x in run.mods]).item)
    assert table.chance_for("colors") == table.chance.feature

    loose = evaluate_detection(m, run, feature_granularity="item")
    for t in ("edge_image", "colors"):
        assert loose.overall[t].correct >= table.overall[t].correct

    paths = write_detection_tables(table, tmp_path)
    overall = paths["overall"].read_text().splitlines()
    assert overall[0] == "method,sample_type,accuracy,correct,count" and len(overall) == 3 + len(TYPES)
    assert json.loads(paths["json"].read_text())["overall"]["item"]["count"] == expect["item"][1]
    by_n = paths["by_n_items"].read_text().splitlines()
    assert by_n[0].startswith("n_items,chance_feature")
    with pytest.raises(InvariantError):
        evaluate_detection(m, run, feature_granularity="cell")


def test_vacuous_hue_tolerance_leaves_texture_rule_alone(tmp_path):
    spec = SynthSpec(seed=1, **{**SMALL_SPEC, "n_positive": 10, "n_negative": 10}, hue_tolerance=360.0)
    m = generate_synthetic(spec, tmp_path)
    for o in m["outfits"]:
        textures = {m["items"][i]["texture"] for i in o["parts"].values()}
        assert (len(textures) == 1) == (o["label"] == "pos")


def test_select_base_whole_pool_and_single():
    rng = np.random.default_rng(4)
    m = small_model(seed=5)
    outfits = random_outfits(rng, 12)
    full = np.asarray(G.score(m, outfits))
    everything = select_base(m, outfits, 12)
    assert [o.outfit_id for o in everything.outfits] == [outfits[k].outfit_id for k in np.argsort(-full, kind="stable")]
    assert select_base(m, outfits, 1).outfits[0].outfit_id == outfits[int(np.argmax(full))].outfit_id


def test_single_alternative_pool_gives_identical_copies():
    rng = np.random.default_rng(8)
    m = small_model(seed=1)
    base = random_outfit(rng, n=3, oid="b")
    part = base.present_parts[0]
    alt = random_outfit(rng, n=8, oid="alt").items[part]
    mods = make_mods(m, base, part, "item", [alt], np.random.default_rng(0))
    assert len(mods) == 10 and [x.candidate_index for x in mods] == list(range(10))
    assert all(np.array_equal(x.edge, alt.edge) and np.array_equal(x.colors, alt.colors) for x in mods)
    assert len({x.score for x in mods}) == 1


def test_zeroed_item_on_bias_free_linear_model_is_always_found():
    """Identity encoders and one all-positive outfit unit: a zeroed item is the only one contributing nothing."""
    from outfitxai.flawbench import BaseSelection, ModSample, ProtocolRun
    from outfitxai.grader import GraderConfig, init_model

    cfg = GraderConfig(k_widths=(), g_widths=(), h_width=1, edge_dim=4)
    m = init_model(cfg, 0, FeatureConfig(grid=2))
    m.params["H.W"] = np.ones((1, 8 * 13))
    m.params["S.W"] = np.array([[1.0], [-1.0]])
    rng = np.random.default_rng(9)
    bases = random_outfits(rng, 6, edge_dim=4, n=5)
    mods = [ModSample(b.outfit_id, part, mtype, np.zeros(4), np.zeros(9), None, 0.0, 0, 0, b.n_items)
            for b in bases for part in b.present_parts for mtype in TYPES]
    run = ProtocolRun(BaseSelection(bases, np.zeros(6), {}, {}), mods, TYPES)
    table = evaluate_detection(m, run, feature_granularity="item")
    for t in TYPES:
        assert table.accuracy(t) == 100.0 and table.overall[t].count == 30
    assert sum(table.by_n[5][t].count for t in TYPES) == 90
    assert table.by_n[3]["item"].count == 0 and table.by_n[3]["item"].accuracy is None
