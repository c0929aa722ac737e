"""Open-set visual concept dictionary: build, dedup, persist, index.

The dictionary is the vocabulary universe for everything downstream.
Concepts carry provenance (which source vocabularies mentioned them),
an optional hypernym chain, and a base/novel/external split tag.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from lami.errors import ConceptError

DICT_FORMAT_VERSION = "1"

_WS = re.compile(r"\s+")


def canonicalize(name: str) -> str:
    """Normalize a category name: underscores to spaces, collapse whitespace, lowercase."""
    return _WS.sub(" ", name.replace("_", " ")).strip().lower()


@dataclass(frozen=True)
class Concept:
    id: int
    name: str
    synonyms: tuple[str, ...] = ()
    source_vocabularies: tuple[str, ...] = ()
    hypernym_chain: tuple[str, ...] = ()  # most specific first
    split_tag: str = "external"  # base | novel | external

    def __post_init__(self):
        if self.split_tag not in ("base", "novel", "external"):
            raise ConceptError(f"invalid split_tag {self.split_tag!r}")
        if self.hypernym_chain and self.hypernym_chain[0] == self.name:
            raise ConceptError(f"hypernym chain of {self.name!r} starts with itself")


@dataclass(frozen=True)
class ConceptDictionary:
    concepts: tuple[Concept, ...]
    version: str = DICT_FORMAT_VERSION
    name_index: Mapping[str, int] = field(init=False, compare=False)

    def __post_init__(self):
        index: dict[str, int] = {}
        for i, c in enumerate(self.concepts):
            if c.id != i:
                raise ConceptError(f"concept ids must be dense 0..n-1, got {c.id} at {i}")
            if c.name in index:
                raise ConceptError(f"duplicate concept name {c.name!r}")
            index[c.name] = c.id
        object.__setattr__(self, "name_index", index)

    def __len__(self) -> int:
        return len(self.concepts)

    def __getitem__(self, concept_id: int) -> Concept:
        return self.concepts[concept_id]

    def id_of(self, name: str) -> int:
        key = canonicalize(name)
        if key not in self.name_index:
            raise ConceptError(f"unknown concept name {name!r}")
        return self.name_index[key]

    def names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def ids_with_split(self, split_tag: str) -> list[int]:
        return [c.id for c in self.concepts if c.split_tag == split_tag]


def _entry_parts(entry) -> tuple[str, tuple[str, ...]]:
    if isinstance(entry, str):
        return entry, ()
    name, synonyms = entry
    return name, tuple(synonyms)


def build_dictionary(
    vocabularies: Sequence[tuple[str, Sequence]],
    splits: Mapping[str, str] | None = None,
) -> ConceptDictionary:
    """Union named category lists into a dictionary with sorted-name id order.

    ``vocabularies`` is a sequence of ``(vocab_name, entries)`` where each entry
    is a category name or ``(name, synonyms)``. ``splits`` optionally maps
    canonical names to a split tag; everything else defaults to ``external``.
    """
    if not vocabularies:
        raise ConceptError("no vocabularies")
    seen_vocab = set()
    for vocab_name, _ in vocabularies:
        if vocab_name in seen_vocab:
            raise ConceptError(f"duplicate vocabulary name {vocab_name!r}")
        seen_vocab.add(vocab_name)

    merged: dict[str, dict] = {}
    for vocab_name, entries in vocabularies:
        for entry in entries:
            raw_name, raw_syns = _entry_parts(entry)
            name = canonicalize(raw_name)
            if not name:
                raise ConceptError(f"empty category name in vocabulary {vocab_name!r}")
            rec = merged.setdefault(name, {"synonyms": set(), "sources": set()})
            rec["sources"].add(vocab_name)
            rec["synonyms"].update(canonicalize(s) for s in raw_syns)

    splits = {canonicalize(k): v for k, v in (splits or {}).items()}
    concepts = []
    for i, name in enumerate(sorted(merged)):
        rec = merged[name]
        rec["synonyms"].discard(name)
        concepts.append(
            Concept(
                id=i,
                name=name,
                synonyms=tuple(sorted(rec["synonyms"])),
                source_vocabularies=tuple(sorted(rec["sources"])),
                split_tag=splits.get(name, "external"),
            )
        )
    return ConceptDictionary(concepts=tuple(concepts))


def with_splits(
    dictionary: ConceptDictionary,
    base_names: Iterable[str],
    novel_names: Iterable[str],
) -> ConceptDictionary:
    """Return a copy with split tags assigned; unlisted concepts become external."""
    base = {canonicalize(n) for n in base_names}
    novel = {canonicalize(n) for n in novel_names}
    overlap = base & novel
    if overlap:
        raise ConceptError(f"names tagged both base and novel: {sorted(overlap)}")
    concepts = []
    for c in dictionary.concepts:
        tag = "base" if c.name in base else "novel" if c.name in novel else "external"
        concepts.append(replace(c, split_tag=tag))
    return ConceptDictionary(concepts=tuple(concepts), version=dictionary.version)


@dataclass(frozen=True)
class MergeEvent:
    surviving_name: str
    merged_names: tuple[str, ...]
    node: str


@dataclass(frozen=True)
class MergeWarning:
    name: str
    reason: str


class FileHypernymProvider:
    """Hypernym chains from a static JSON map {name: [node, ...]} (most specific first)."""

    def __init__(self, mapping: Mapping[str, Sequence[str]]):
        self._mapping = {canonicalize(k): tuple(v) for k, v in mapping.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "FileHypernymProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def chain(self, name: str) -> tuple[str, ...]:
        key = canonicalize(name)
        if key not in self._mapping:
            raise KeyError(name)
        return self._mapping[key]


def dedup_by_hypernym(
    dictionary: ConceptDictionary,
    provider,
) -> tuple[ConceptDictionary, list[MergeEvent | MergeWarning]]:
    """Merge concepts whose names resolve to the same most-specific lexical node.

    The lexicographically smallest name survives; the others become synonyms.
    A provider failure keeps the concept unmerged and records a warning in the
    returned log instead of raising.
    """
    log: list[MergeEvent | MergeWarning] = []
    by_node: dict[str, list[Concept]] = {}
    loners: list[tuple[Concept, tuple[str, ...]]] = []
    chains: dict[int, tuple[str, ...]] = {}
    for concept in dictionary.concepts:
        try:
            chain = tuple(provider.chain(concept.name))
        except Exception as exc:  # noqa: BLE001 - provider failures are never fatal
            log.append(MergeWarning(name=concept.name, reason=f"{type(exc).__name__}: {exc}"))
            loners.append((concept, concept.hypernym_chain))
            continue
        chains[concept.id] = chain
        if chain:
            by_node.setdefault(chain[0], []).append(concept)
        else:
            loners.append((concept, ()))

    survivors: list[tuple[Concept, tuple[str, ...]]] = list(loners)
    for node, group in by_node.items():
        group = sorted(group, key=lambda c: c.name)
        head = group[0]
        if len(group) > 1:
            log.append(
                MergeEvent(
                    surviving_name=head.name,
                    merged_names=tuple(c.name for c in group[1:]),
                    node=node,
                )
            )
        synonyms = set(head.synonyms)
        sources = set(head.source_vocabularies)
        tags = {c.split_tag for c in group}
        for other in group[1:]:
            synonyms.add(other.name)
            synonyms.update(other.synonyms)
            sources.update(other.source_vocabularies)
        synonyms.discard(head.name)
        # a merge touching a tagged concept keeps the strongest claim: novel > base > external
        tag = "novel" if "novel" in tags else "base" if "base" in tags else "external"
        chain = tuple(n for n in chains[head.id] if n != head.name)
        survivors.append(
            (
                replace(
                    head,
                    synonyms=tuple(sorted(synonyms)),
                    source_vocabularies=tuple(sorted(sources)),
                    split_tag=tag,
                ),
                chain,
            )
        )

    survivors.sort(key=lambda pair: pair[0].name)
    concepts = tuple(
        replace(c, id=i, hypernym_chain=chain) for i, (c, chain) in enumerate(survivors)
    )
    return ConceptDictionary(concepts=concepts, version=dictionary.version), log


def save_dictionary(dictionary: ConceptDictionary, path: str | Path) -> None:
    """Write JSON Lines: a header line, then one concept per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"version": dictionary.version}) + "\n")
        for c in dictionary.concepts:
            fh.write(
                json.dumps(
                    {
                        "id": c.id,
                        "name": c.name,
                        "synonyms": list(c.synonyms),
                        "sources": list(c.source_vocabularies),
                        "hypernyms": list(c.hypernym_chain),
                        "split": c.split_tag,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_dictionary(path: str | Path) -> ConceptDictionary:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConceptError(f"{path}: line 1: empty dictionary file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ConceptError(f"{path}: line 1: malformed header: {exc}") from exc
    version = header.get("version")
    if version != DICT_FORMAT_VERSION:
        raise ConceptError(
            f"{path}: unsupported dictionary version {version!r}, expected {DICT_FORMAT_VERSION!r}"
        )
    concepts = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            concepts.append(
                Concept(
                    id=rec["id"],
                    name=rec["name"],
                    synonyms=tuple(rec["synonyms"]),
                    source_vocabularies=tuple(rec["sources"]),
                    hypernym_chain=tuple(rec["hypernyms"]),
                    split_tag=rec["split"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConceptError(f"{path}: line {lineno}: malformed concept record: {exc}") from exc
    try:
        return ConceptDictionary(concepts=tuple(concepts), version=version)
    except ConceptError as exc:
        raise ConceptError(f"{path}: {exc}") from exc


def read_vocabulary_file(path: str | Path) -> list[tuple[str, tuple[str, ...]]]:
    """Read a plain-text category list: one ``name | synonym | ...`` per line."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split("|")]
            entries.append((parts[0], tuple(p for p in parts[1:] if p)))
    return entries
