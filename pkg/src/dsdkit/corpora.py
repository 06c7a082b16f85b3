"""Count-only manifests for the public corpora behind the AG / BR / BR-AG datasets.

The utterance counts are the published ones. Per-corpus TTS/VC splits are not
published, only the BR-AG totals, so the fixture spreads the TTS total over the
corpora in proportion to their fake counts (largest-remainder rounding); the
totals are therefore exact and the per-corpus split is synthetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .manifest import DatasetManifest, GeneratorClass, Label, UtteranceRecord, compose


@dataclass(frozen=True)
class CorpusCounts:
    dataset_id: str
    n_bonafide: int
    n_fake: int
    resource_id: str
    n_tts_generators: int
    n_vc_generators: int


AG_PARTS = (
    CorpusCounts("asvspoof2019_la", 12_483, 108_978, "vctk_volunteers", 11, 8),
    CorpusCounts("asvspoof2021_la", 18_452, 163_114, "vctk_volunteers", 7, 6),
    CorpusCounts("asvspoof2021_df", 22_617, 589_212, "vctk_volunteers", 50, 50),
)
BR_PARTS = (
    CorpusCounts("asvspoof2024_train_dev", 50_131, 273_176, "librispeech", 8, 8),
)

BRAG_TTS_TOTAL = 462_354
BRAG_VC_TOTAL = 672_126

# Published totals for the three composed datasets.
PUBLISHED = {
    "ag": {"n_bonafide": 53_552, "n_fake": 861_304},
    "br": {"n_bonafide": 50_131, "n_fake": 273_176},
    "br_ag": {"n_bonafide": 103_683, "n_fake": 1_134_480, "n_tts": BRAG_TTS_TOTAL, "n_vc": BRAG_VC_TOTAL},
}
# The summary table prints a different BR-AG fake total than its own parts sum to.
PRINTED_BRAG_FAKE = 1_134_408


def tts_allocation(parts=AG_PARTS + BR_PARTS, tts_total: int = BRAG_TTS_TOTAL) -> dict[str, int]:
    fakes = [p.n_fake for p in parts]
    total = sum(fakes)
    exact = [tts_total * f / total for f in fakes]
    alloc = [int(x) for x in exact]
    short = tts_total - sum(alloc)
    order = sorted(range(len(parts)), key=lambda i: (-(exact[i] - alloc[i]), i))
    for i in order[:short]:
        alloc[i] += 1
    return {p.dataset_id: a for p, a in zip(parts, alloc)}


def corpus_manifest(counts: CorpusCounts, n_tts: int) -> DatasetManifest:
    """Build a path-less manifest with exactly the given counts."""
    ds = counts.dataset_id
    res = counts.resource_id
    bona = Label.BONAFIDE
    fake = Label.FAKE
    none_, tts, vc = GeneratorClass.NONE, GeneratorClass.TTS, GeneratorClass.VC
    tts_ids = [f"{ds}_tts{g:03d}" for g in range(counts.n_tts_generators)]
    vc_ids = [f"{ds}_vc{g:03d}" for g in range(counts.n_vc_generators)]

    records = [
        UtteranceRecord(f"{ds}_b{i:07d}", bona, none_, res, ds)
        for i in range(counts.n_bonafide)
    ]
    records += [
        UtteranceRecord(f"{ds}_t{i:07d}", fake, tts, res, ds, tts_ids[i % len(tts_ids)])
        for i in range(n_tts)
    ]
    records += [
        UtteranceRecord(f"{ds}_v{i:07d}", fake, vc, res, ds, vc_ids[i % len(vc_ids)])
        for i in range(counts.n_fake - n_tts)
    ]
    return DatasetManifest(ds, records)


@lru_cache(maxsize=None)
def fixture(name: str) -> DatasetManifest:
    """Return the ``ag``, ``br`` or ``br_ag`` count fixture."""
    alloc = tts_allocation()
    if name == "ag":
        return compose([corpus_manifest(p, alloc[p.dataset_id]) for p in AG_PARTS], "ag")
    if name == "br":
        return compose([corpus_manifest(p, alloc[p.dataset_id]) for p in BR_PARTS], "br")
    if name == "br_ag":
        return compose([fixture("ag"), fixture("br")], "br_ag")
    raise KeyError(f"unknown fixture {name!r}; expected ag, br or br_ag")


def reference_check(name: str, st) -> dict:
    """Compare composed stats against the published totals for ``name``."""
    expected = PUBLISHED[name]
    got = {k: getattr(st, k) for k in expected}
    out = {
        "dataset": name,
        "expected": expected,
        "observed": got,
        "match": got == expected,
    }
    if name == "br_ag":
        out["discrepancy"] = {
            "printed_fake_total": PRINTED_BRAG_FAKE,
            "sum_of_parts": PUBLISHED["ag"]["n_fake"] + PUBLISHED["br"]["n_fake"],
            "tts_plus_vc": BRAG_TTS_TOTAL + BRAG_VC_TOTAL,
            "note": "published summary table prints 1,134,408; parts and TTS+VC both sum to 1,134,480, which is used",
        }
    return out
