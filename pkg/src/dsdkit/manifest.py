"""Labelled utterance inventories: load/save, exact counts, composition and balance audit.

A manifest records, per utterance, the two provenance factors that decide how
balanced a training corpus is: where its genuine speech comes from
(``resource_id``) and which synthesis system produced a fake (``generator_class``
and ``generator_id``).
"""

from __future__ import annotations

import csv
import os
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import FormatError, IntegrityError, ParseError

COLUMNS = (
    "utt_id",
    "path",
    "label",
    "generator_class",
    "generator_id",
    "resource_id",
    "speaker_id",
    "dataset_id",
)

# balance flag thresholds
MANY_GENERATORS = 10
FEW_RESOURCES = 2
MANY_RESOURCES = 10
FEW_GENERATORS = 2


class Label(str, Enum):
    BONAFIDE = "bonafide"
    FAKE = "fake"


class GeneratorClass(str, Enum):
    TTS = "tts"
    VC = "vc"
    NONE = "none"
    UNKNOWN = "unknown"


@dataclass(frozen=True, slots=True)
class UtteranceRecord:
    utt_id: str
    label: Label
    generator_class: GeneratorClass
    resource_id: str = ""
    dataset_id: str = ""
    generator_id: str = ""
    speaker_id: str = ""
    path: str = ""

    def __post_init__(self):
        if not self.utt_id:
            raise ParseError("utt_id must be non-empty")
        if self.label is Label.BONAFIDE and self.generator_class is not GeneratorClass.NONE:
            raise ParseError(f"bonafide utterance {self.utt_id!r} must have generator_class 'none'")
        if self.label is Label.FAKE and self.generator_class is GeneratorClass.NONE:
            raise ParseError(f"fake utterance {self.utt_id!r} cannot have generator_class 'none'")

    @property
    def is_bonafide(self) -> bool:
        return self.label is Label.BONAFIDE

    def as_row(self) -> list[str]:
        return [
            self.utt_id,
            self.path,
            self.label.value,
            self.generator_class.value,
            self.generator_id,
            self.resource_id,
            self.speaker_id,
            self.dataset_id,
        ]


class DatasetManifest:
    """Immutable, insertion-ordered collection of records with unique ``utt_id``."""

    __slots__ = ("name", "_records", "_index")

    def __init__(self, name: str, records: Iterable[UtteranceRecord] = ()):
        self.name = name
        self._records: tuple[UtteranceRecord, ...] = tuple(records)
        index: dict[str, int] = {}
        for i, rec in enumerate(self._records):
            if rec.utt_id in index:
                raise IntegrityError(f"duplicate utt_id {rec.utt_id!r} in manifest {name!r}")
            index[rec.utt_id] = i
        self._index = index

    @property
    def records(self) -> tuple[UtteranceRecord, ...]:
        return self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[UtteranceRecord]:
        return iter(self._records)

    def __contains__(self, utt_id: object) -> bool:
        return utt_id in self._index

    def __getitem__(self, utt_id: str) -> UtteranceRecord:
        return self._records[self._index[utt_id]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetManifest):
            return NotImplemented
        return self.name == other.name and self._records == other._records

    def __repr__(self) -> str:
        return f"DatasetManifest(name={self.name!r}, n={len(self)})"


def _parse_enum(enum_cls, value: str, column: str, row: int):
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise ParseError(f"invalid {column} {value!r} (expected one of: {allowed})", row=row) from None


def load_manifest(path: str | os.PathLike, name: str | None = None) -> DatasetManifest:
    """Read a manifest CSV. Row numbers in errors count the header as row 1."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected header row") from None
        if tuple(header) != COLUMNS:
            missing = [c for c in COLUMNS if c not in header]
            if missing:
                raise FormatError(f"{path}: missing column {missing[0]!r}")
            raise FormatError(f"{path}: header must be exactly {','.join(COLUMNS)}")

        records = []
        seen: set[str] = set()
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(COLUMNS):
                raise ParseError(f"expected {len(COLUMNS)} fields, got {len(row)}", row=rownum)
            utt_id, wav, label, gclass, gen_id, res_id, spk, ds = row
            if utt_id in seen:
                raise IntegrityError(f"{path}: duplicate utt_id {utt_id!r} (row {rownum})")
            seen.add(utt_id)
            label_v = _parse_enum(Label, label, "label", rownum)
            gclass_v = _parse_enum(GeneratorClass, gclass, "generator_class", rownum)
            try:
                rec = UtteranceRecord(
                    utt_id=utt_id,
                    label=label_v,
                    generator_class=gclass_v,
                    resource_id=res_id,
                    dataset_id=ds,
                    generator_id=gen_id,
                    speaker_id=spk,
                    path=wav,
                )
            except ParseError as exc:
                raise ParseError(str(exc), row=rownum) from None
            records.append(rec)
    return DatasetManifest(name if name is not None else path.stem, records)


def save_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in manifest:
            writer.writerow(rec.as_row())
    os.replace(tmp, path)


@dataclass
class ManifestStats:
    n_bonafide: int = 0
    n_fake: int = 0
    n_tts: int = 0
    n_vc: int = 0
    n_unknown_gen: int = 0
    per_resource: dict[str, int] = field(default_factory=dict)
    per_generator: dict[str, int] = field(default_factory=dict)
    # dataset_id -> (bonafide, fake)
    per_dataset: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.n_bonafide + self.n_fake

    def __add__(self, other: "ManifestStats") -> "ManifestStats":
        per_dataset = dict(self.per_dataset)
        for ds, (b, f) in other.per_dataset.items():
            b0, f0 = per_dataset.get(ds, (0, 0))
            per_dataset[ds] = (b0 + b, f0 + f)
        return ManifestStats(
            n_bonafide=self.n_bonafide + other.n_bonafide,
            n_fake=self.n_fake + other.n_fake,
            n_tts=self.n_tts + other.n_tts,
            n_vc=self.n_vc + other.n_vc,
            n_unknown_gen=self.n_unknown_gen + other.n_unknown_gen,
            per_resource=dict(Counter(self.per_resource) + Counter(other.per_resource)),
            per_generator=dict(Counter(self.per_generator) + Counter(other.per_generator)),
            per_dataset=per_dataset,
        )

    def to_dict(self) -> dict:
        return {
            "n_bonafide": self.n_bonafide,
            "n_fake": self.n_fake,
            "n_tts": self.n_tts,
            "n_vc": self.n_vc,
            "n_unknown_gen": self.n_unknown_gen,
            "per_resource": dict(sorted(self.per_resource.items())),
            "per_generator": dict(sorted(self.per_generator.items())),
            "per_dataset": {k: {"bonafide": b, "fake": f} for k, (b, f) in sorted(self.per_dataset.items())},
        }


def stats(manifest: Iterable[UtteranceRecord]) -> ManifestStats:
    labels: Counter = Counter()
    gclass: Counter = Counter()
    per_resource: Counter = Counter()
    per_generator: Counter = Counter()
    per_ds_bona: Counter = Counter()
    per_ds_fake: Counter = Counter()
    for rec in manifest:
        labels[rec.label] += 1
        gclass[rec.generator_class] += 1
        if rec.resource_id:
            per_resource[rec.resource_id] += 1
        if rec.generator_id:
            per_generator[rec.generator_id] += 1
        if rec.label is Label.BONAFIDE:
            per_ds_bona[rec.dataset_id] += 1
        else:
            per_ds_fake[rec.dataset_id] += 1
    datasets = list(dict.fromkeys([*per_ds_bona, *per_ds_fake]))
    return ManifestStats(
        n_bonafide=labels[Label.BONAFIDE],
        n_fake=labels[Label.FAKE],
        n_tts=gclass[GeneratorClass.TTS],
        n_vc=gclass[GeneratorClass.VC],
        n_unknown_gen=gclass[GeneratorClass.UNKNOWN],
        per_resource=dict(per_resource),
        per_generator=dict(per_generator),
        per_dataset={ds: (per_ds_bona[ds], per_ds_fake[ds]) for ds in datasets},
    )


def compose(parts: Sequence[DatasetManifest], name: str, prefix: bool = True) -> DatasetManifest:
    """Concatenate manifests in order.

    Ids that occur in more than one part are rewritten to ``<dataset_id>/<utt_id>``
    in every part that uses them; ids unique across parts are left alone, so
    composing a single manifest returns its records unchanged. With
    ``prefix=False`` any cross-part collision is an error.
    """
    owners: Counter = Counter()
    for part in parts:
        owners.update({rec.utt_id for rec in part})
    colliding = {uid for uid, n in owners.items() if n > 1}
    if colliding and not prefix:
        first = min(colliding)
        raise IntegrityError(f"utt_id {first!r} appears in more than one part ({len(colliding)} collisions)")

    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    for part in parts:
        for rec in part:
            if rec.utt_id in colliding:
                if not rec.dataset_id:
                    raise IntegrityError(f"utt_id {rec.utt_id!r} collides and has no dataset_id to prefix")
                rec = _replace_id(rec, f"{rec.dataset_id}/{rec.utt_id}")
            if rec.utt_id in seen:
                raise IntegrityError(f"utt_id {rec.utt_id!r} still collides after prefixing")
            seen.add(rec.utt_id)
            records.append(rec)
    return DatasetManifest(name, records)


def _replace_id(rec: UtteranceRecord, utt_id: str) -> UtteranceRecord:
    return UtteranceRecord(
        utt_id=utt_id,
        label=rec.label,
        generator_class=rec.generator_class,
        resource_id=rec.resource_id,
        dataset_id=rec.dataset_id,
        generator_id=rec.generator_id,
        speaker_id=rec.speaker_id,
        path=rec.path,
    )


@dataclass
class BalanceSummary:
    name: str
    n_resources: int
    n_generators: int
    tts_vc_ratio: float | None
    bonafide_fake_ratio: float | None
    flags: list[str]

    @classmethod
    def from_stats(cls, name: str, st: ManifestStats) -> "BalanceSummary":
        n_res = len(st.per_resource)
        n_gen = len(st.per_generator)
        flags = []
        if n_gen >= MANY_GENERATORS and n_res <= FEW_RESOURCES:
            flags.append("AG-skewed")
        if n_res >= MANY_RESOURCES and n_gen <= FEW_GENERATORS:
            flags.append("BR-skewed")
        return cls(
            name=name,
            n_resources=n_res,
            n_generators=n_gen,
            tts_vc_ratio=st.n_tts / st.n_vc if st.n_vc else None,
            bonafide_fake_ratio=st.n_bonafide / st.n_fake if st.n_fake else None,
            flags=flags,
        )


@dataclass
class BalanceReport:
    a: BalanceSummary
    b: BalanceSummary

    def to_dict(self) -> dict:
        return {"a": self.a.__dict__, "b": self.b.__dict__}


def audit_balance(stats_a: ManifestStats, stats_b: ManifestStats, names=("a", "b")) -> BalanceReport:
    return BalanceReport(
        BalanceSummary.from_stats(names[0], stats_a),
        BalanceSummary.from_stats(names[1], stats_b),
    )
