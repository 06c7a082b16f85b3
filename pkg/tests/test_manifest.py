from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsdkit import corpora
from dsdkit import manifest as mf
from dsdkit.errors import FormatError, IntegrityError, ParseError
from dsdkit.manifest import DatasetManifest, GeneratorClass, Label, UtteranceRecord

HEADER = ",".join(mf.COLUMNS)


def write(tmp_path, rows, header=HEADER, name="m.csv"):
    p = tmp_path / name
    p.write_text(header + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    p = write(tmp_path, [
        "u1,a.wav,bonafide,none,,vctk,p225,asv19",
        "u2,b.wav,bonafide,none,,vctk,p226,asv19",
        "u3,c.wav,fake,tts,A01,vctk,p225,asv19",
    ])
    m = mf.load_manifest(p)
    assert len(m) == 3
    assert [r.utt_id for r in m] == ["u1", "u2", "u3"]
    assert m["u3"].generator_class is GeneratorClass.TTS
    assert m["u3"].generator_id == "A01"


def test_duplicate_id_names_it(tmp_path):
    p = write(tmp_path, ["u1,,bonafide,none,,r,,d", "u1,,fake,vc,g,r,,d"])
    with pytest.raises(IntegrityError, match="'u1'"):
        mf.load_manifest(p)


def test_bad_label_reports_row(tmp_path):
    p = write(tmp_path, ["u1,,bonafide,none,,r,,d", "u2,,real,none,,r,,d"])
    with pytest.raises(ParseError) as exc:
        mf.load_manifest(p)
    assert exc.value.row == 3
    assert "real" in str(exc.value)


def test_missing_column_named(tmp_path):
    header = HEADER.replace(",speaker_id", "")
    p = write(tmp_path, [], header=header)
    with pytest.raises(FormatError, match="speaker_id"):
        mf.load_manifest(p)


def test_renamed_column(tmp_path):
    p = write(tmp_path, [], header=HEADER.replace("label", "class"))
    with pytest.raises(FormatError, match="label"):
        mf.load_manifest(p)


@pytest.mark.parametrize("label,gclass", [("bonafide", "tts"), ("fake", "none")])
def test_label_generator_consistency(tmp_path, label, gclass):
    p = write(tmp_path, [f"u1,,{label},{gclass},,r,,d"])
    with pytest.raises(ParseError):
        mf.load_manifest(p)


def test_empty_manifest_stats_zero():
    s = mf.stats(DatasetManifest("empty"))
    assert (s.n_bonafide, s.n_fake, s.n_tts, s.n_vc, s.n_unknown_gen) == (0, 0, 0, 0, 0)
    assert s.per_resource == {} and s.per_generator == {} and s.per_dataset == {}


# --- random manifests and brute-force tallies --------------------------------

record_st = st.builds(
    lambda lab, gc, res, gen, ds: (lab, gc, res, gen, ds),
    st.sampled_from(["bonafide", "fake"]),
    st.sampled_from(["tts", "vc", "unknown"]),
    st.sampled_from(["", "r0", "r1", "r2"]),
    st.sampled_from(["", "g0", "g1"]),
    st.sampled_from(["", "d0", "d1"]),
)


def build(rows, prefix="u", name="m"):
    recs = []
    for i, (lab, gc, res, gen, ds) in enumerate(rows):
        label = Label(lab)
        gclass = GeneratorClass.NONE if label is Label.BONAFIDE else GeneratorClass(gc)
        recs.append(UtteranceRecord(f"{prefix}{i}", label, gclass, res, ds,
                                    gen if label is Label.FAKE else ""))
    return DatasetManifest(name, recs)


def brute_stats(records):
    recs = list(records)
    per_ds = {}
    for r in recs:
        b, f = per_ds.get(r.dataset_id, (0, 0))
        per_ds[r.dataset_id] = (b + (r.label == "bonafide"), f + (r.label == "fake"))
    return {
        "n_bonafide": sum(r.label == "bonafide" for r in recs),
        "n_fake": sum(r.label == "fake" for r in recs),
        "n_tts": sum(r.generator_class == "tts" for r in recs),
        "n_vc": sum(r.generator_class == "vc" for r in recs),
        "n_unknown_gen": sum(r.generator_class == "unknown" for r in recs),
        "per_resource": dict(Counter(r.resource_id for r in recs if r.resource_id)),
        "per_generator": dict(Counter(r.generator_id for r in recs if r.generator_id)),
        "per_dataset": per_ds,
    }


def as_plain(s):
    return {
        "n_bonafide": s.n_bonafide, "n_fake": s.n_fake, "n_tts": s.n_tts, "n_vc": s.n_vc,
        "n_unknown_gen": s.n_unknown_gen, "per_resource": s.per_resource,
        "per_generator": s.per_generator, "per_dataset": s.per_dataset,
    }


def test_ten_random_records_match_tally():
    rng = np.random.default_rng(5)
    rows = [(
        rng.choice(["bonafide", "fake"]), rng.choice(["tts", "vc", "unknown"]),
        rng.choice(["r0", "r1"]), rng.choice(["g0", "g1", "g2"]), rng.choice(["d0", "d1"]),
    ) for _ in range(10)]
    m = build(rows)
    assert as_plain(mf.stats(m)) == brute_stats(m)


@settings(max_examples=60, deadline=None)
@given(st.lists(record_st, max_size=40))
def test_stats_equal_brute_force(rows):
    m = build(rows)
    s = mf.stats(m)
    assert as_plain(s) == brute_stats(m)
    assert s.n_fake == s.n_tts + s.n_vc + s.n_unknown_gen
    assert s.total == len(m)


@settings(max_examples=60, deadline=None)
@given(st.lists(record_st, max_size=30), st.lists(record_st, max_size=30))
def test_stats_additive_under_compose(rows_a, rows_b):
    a = build(rows_a, "a", "A")
    b = build(rows_b, "b", "B")
    assert as_plain(mf.stats(mf.compose([a, b], "AB"))) == as_plain(mf.stats(a) + mf.stats(b))


@settings(max_examples=40, deadline=None)
@given(st.lists(record_st, max_size=30))
def test_save_load_roundtrip(tmp_path_factory, rows):
    m = build(rows, name="rt")
    p = tmp_path_factory.mktemp("rt") / "rt.csv"
    mf.save_manifest(m, p)
    assert mf.load_manifest(p) == m
    assert p.read_bytes() == _resave(p)


def _resave(p):
    m = mf.load_manifest(p)
    q = p.with_name("again.csv")
    mf.save_manifest(m, q)
    return q.read_bytes()


def test_roundtrip_unicode_and_commas(tmp_path):
    m = DatasetManifest("x", [
        UtteranceRecord("ü,1", Label.FAKE, GeneratorClass.VC, "rés", "d", "gen \"q\"", "spk", "dir/a b.wav"),
    ])
    p = tmp_path / "x.csv"
    mf.save_manifest(m, p)
    assert mf.load_manifest(p) == m


# --- compose -------------------------------------------------------------------

def test_compose_single_part_identity():
    m = build([("bonafide", "none", "r0", "", "d0"), ("fake", "tts", "r0", "g0", "d0")], name="solo")
    out = mf.compose([m], "solo")
    assert out == m


def test_compose_prefixes_collisions():
    a = DatasetManifest("a", [UtteranceRecord("u1", Label.BONAFIDE, GeneratorClass.NONE, "r", "dsA")])
    b = DatasetManifest("b", [
        UtteranceRecord("u1", Label.FAKE, GeneratorClass.TTS, "r", "dsB", "g"),
        UtteranceRecord("u2", Label.FAKE, GeneratorClass.VC, "r", "dsB", "g"),
    ])
    out = mf.compose([a, b], "ab")
    assert [r.utt_id for r in out] == ["dsA/u1", "dsB/u1", "u2"]


def test_compose_no_prefix_collision_fails():
    a = DatasetManifest("a", [UtteranceRecord("u1", Label.BONAFIDE, GeneratorClass.NONE, "r", "dsA")])
    with pytest.raises(IntegrityError):
        mf.compose([a, a], "aa", prefix=False)


def test_compose_collision_after_prefix_fails():
    a = DatasetManifest("a", [UtteranceRecord("u1", Label.BONAFIDE, GeneratorClass.NONE, "r", "same")])
    with pytest.raises(IntegrityError, match="after prefixing"):
        mf.compose([a, a], "aa")


# --- published counts ------------------------------------------------------------

def test_ag_fixture_counts():
    s = mf.stats(corpora.fixture("ag"))
    assert (s.n_bonafide, s.n_fake) == (53_552, 861_304)
    assert s.n_bonafide == 12_483 + 18_452 + 22_617
    assert s.n_fake == 108_978 + 163_114 + 589_212


def test_compose_ag_br():
    brag = mf.compose([corpora.fixture("ag"), corpora.fixture("br")], "br_ag")
    s = mf.stats(brag)
    assert s.n_bonafide == 53_552 + 50_131 == 103_683
    assert s.n_fake == 861_304 + 273_176 == 1_134_480
    assert (s.n_tts, s.n_vc) == (462_354, 672_126)
    check = corpora.reference_check("br_ag", s)
    assert check["match"]
    assert check["discrepancy"]["printed_fake_total"] == 1_134_408


def test_tts_allocation_sums():
    alloc = corpora.tts_allocation()
    assert sum(alloc.values()) == 462_354


# --- balance audit ---------------------------------------------------------------

def test_audit_flags_ag_skewed():
    ag = mf.stats(corpora.fixture("ag"))
    br = mf.stats(corpora.fixture("br"))
    rep = mf.audit_balance(ag, br, names=("ag", "br"))
    assert rep.a.n_resources == 1
    assert rep.a.n_generators >= 100
    assert rep.a.flags == ["AG-skewed"]
    # resource_id is a corpus family, so the BR fixture also counts one resource
    expected_b = ["AG-skewed"] if rep.b.n_generators >= 10 and rep.b.n_resources <= 2 else []
    assert rep.b.flags == expected_b


def test_audit_br_skewed_and_balanced():
    def st_of(n_res, n_gen):
        return mf.ManifestStats(
            per_resource={f"r{i}": 1 for i in range(n_res)},
            per_generator={f"g{i}": 1 for i in range(n_gen)},
        )
    rep = mf.audit_balance(st_of(12, 2), st_of(5, 5))
    assert rep.a.flags == ["BR-skewed"]
    assert rep.b.flags == []


def test_audit_tts_vc_ratio():
    s = mf.ManifestStats(n_fake=1_134_480, n_tts=462_354, n_vc=672_126, n_bonafide=103_683)
    rep = mf.audit_balance(s, s)
    assert rep.a.tts_vc_ratio == pytest.approx(0.688, abs=5e-4)
    assert rep.a.tts_vc_ratio == 462_354 / 672_126
