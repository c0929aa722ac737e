"""Per-concept visual descriptions from a language-model client, with offline caching.

A client is anything with ``complete(prompt) -> str``. The fixture client
replays a recorded transcript so the whole pipeline runs offline; the live
client is a thin HTTP adapter. Responses are cached on disk keyed by a
SHA-256 of (template name, template body, concept name, confusing name), so
editing a prompt invalidates stale answers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from lami.concepts import ConceptDictionary
from lami.embeddings import EmbeddingMatrix
from lami.errors import DescriptionError, EmbeddingError

logger = logging.getLogger(__name__)

BASE_TEMPLATE_NAME = "visual-base-v1"
CONTRASTIVE_TEMPLATE_NAME = "visual-contrastive-v1"


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def render(self, category: str, confusing_category: str = "") -> str:
        return self.body.format(category=category, confusing_category=confusing_category)


def default_base_template() -> PromptTemplate:
    return PromptTemplate(
        name=BASE_TEMPLATE_NAME,
        body=(
            "Describe the visual appearance of a {category} for object recognition. "
            "Cover its shape, color, size, and distinctive parts in one short paragraph."
        ),
    )


def default_contrastive_template() -> PromptTemplate:
    return PromptTemplate(
        name=CONTRASTIVE_TEMPLATE_NAME,
        body=(
            "Describe the visual appearance of a {category}, emphasizing the features "
            "that distinguish it from a {confusing_category}. Cover shape, color, size, "
            "and distinctive parts in one short paragraph."
        ),
    )


@dataclass(frozen=True)
class VisualDescription:
    concept_id: int
    kind: str  # base | contrastive
    text: str
    provenance: str  # llm | cache | fixture
    against_id: int | None = None

    def __post_init__(self):
        if self.kind not in ("base", "contrastive"):
            raise DescriptionError(f"invalid kind {self.kind!r}")
        if self.provenance not in ("llm", "cache", "fixture"):
            raise DescriptionError(f"invalid provenance {self.provenance!r}")
        if not self.text:
            raise DescriptionError(f"empty description for concept {self.concept_id}")
        if self.kind == "contrastive":
            if self.against_id is None or self.against_id == self.concept_id:
                raise DescriptionError(
                    f"contrastive description for concept {self.concept_id} needs a distinct against_id"
                )
        elif self.against_id is not None:
            raise DescriptionError("base descriptions must not set against_id")


class LLMClient(Protocol):
    provenance: str

    def complete(self, prompt: str) -> str: ...


class FixtureClient:
    """Replays a recorded transcript; unknown prompts are a client failure."""

    provenance = "fixture"

    def __init__(self, transcript: Mapping[str, str]):
        self._transcript = dict(transcript)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureClient":
        transcript = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    transcript[rec["prompt"]] = rec["response"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DescriptionError(f"{path}: line {lineno}: bad transcript record: {exc}")
        return cls(transcript)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for prompt, response in self._transcript.items():
                fh.write(json.dumps({"prompt": prompt, "response": response}, ensure_ascii=False) + "\n")

    def complete(self, prompt: str) -> str:
        self.calls += 1
        if prompt not in self._transcript:
            raise DescriptionError(f"transcript has no response for prompt {prompt!r}")
        return self._transcript[prompt]


class LiveHttpClient:
    """POSTs ``{"prompt": ...}`` to an endpoint and returns the response body."""

    provenance = "llm"

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        payload = json.dumps({"prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(
            self.endpoint, data=payload, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")


class DescriptionCache:
    """One UTF-8 text file per key under a cache root; filename is the hex digest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(template: PromptTemplate, concept_name: str, confusing_name: str = "") -> str:
        parts = "\x1f".join([template.name, template.body, concept_name, confusing_name])
        return hashlib.sha256(parts.encode("utf-8")).hexdigest()

    def get(self, key: str) -> str | None:
        path = self.root / key
        if not path.exists():
            return None
        return path.read_text(encoding="utf-8")

    def put(self, key: str, text: str) -> None:
        # atomic replace so concurrent writers of the same key never interleave
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, self.root / key)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


@dataclass
class _Request:
    concept_id: int
    concept_name: str
    kind: str
    against_id: int | None
    against_name: str


def _call_with_retries(
    client,
    prompt: str,
    retries: int,
    sleep: Callable[[float], None],
    backoff: float,
) -> str:
    last_exc: Exception | None = None
    for attempt in range(retries):
        try:
            return client.complete(prompt)
        except Exception as exc:  # noqa: BLE001 - any client failure is retryable
            last_exc = exc
            if attempt + 1 < retries:
                sleep(backoff * (2**attempt))
    raise DescriptionError(f"client failed after {retries} attempts: {last_exc}")


def _generate(
    requests: Sequence[_Request],
    client,
    template: PromptTemplate,
    cache: DescriptionCache,
    retries: int,
    parallelism: int,
    sleep: Callable[[float], None],
    backoff: float,
) -> list[VisualDescription]:
    client_provenance = getattr(client, "provenance", "llm")

    def run(req: _Request) -> VisualDescription:
        key = cache.key(template, req.concept_name, req.against_name)
        cached = cache.get(key)
        if cached is not None:
            return VisualDescription(
                concept_id=req.concept_id,
                kind=req.kind,
                text=cached,
                provenance="cache",
                against_id=req.against_id,
            )
        prompt = template.render(category=req.concept_name, confusing_category=req.against_name)
        text = _call_with_retries(client, prompt, retries, sleep, backoff)
        cache.put(key, text)
        return VisualDescription(
            concept_id=req.concept_id,
            kind=req.kind,
            text=text,
            provenance=client_provenance,
            against_id=req.against_id,
        )

    results: dict[int, VisualDescription] = {}
    failures: list[int] = []
    if parallelism <= 1:
        outcomes = [(req, _safe(run, req)) for req in requests]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [(req, pool.submit(run, req)) for req in requests]
            outcomes = [(req, _safe(f.result)) for req, f in futures]
    for req, (desc, err) in outcomes:
        if err is not None:
            failures.append(req.concept_id)
        else:
            results[req.concept_id] = desc
    if failures:
        raise DescriptionError(
            f"description generation failed for concept ids {sorted(failures)}",
            failed_ids=sorted(failures),
        )
    return [results[cid] for cid in sorted(results)]


def _safe(fn, *args):
    try:
        return fn(*args), None
    except Exception as exc:  # noqa: BLE001
        return None, exc


def generate_descriptions(
    dictionary: ConceptDictionary,
    client,
    template: PromptTemplate | None = None,
    cache: DescriptionCache | None = None,
    *,
    retries: int = 3,
    parallelism: int = 1,
    sleep: Callable[[float], None] = time.sleep,
    backoff: float = 0.5,
) -> list[VisualDescription]:
    """One base description per concept; cache hits skip the client entirely."""
    if cache is None:
        raise DescriptionError("a DescriptionCache is required")
    template = template or default_base_template()
    requests = [
        _Request(concept_id=c.id, concept_name=c.name, kind="base", against_id=None, against_name="")
        for c in dictionary.concepts
    ]
    return _generate(requests, client, template, cache, retries, parallelism, sleep, backoff)


def generate_contrastive_descriptions(
    dictionary: ConceptDictionary,
    pairs: Sequence[tuple[int, int]],
    client,
    template: PromptTemplate | None = None,
    cache: DescriptionCache | None = None,
    *,
    retries: int = 3,
    parallelism: int = 1,
    sleep: Callable[[float], None] = time.sleep,
    backoff: float = 0.5,
) -> list[VisualDescription]:
    """One contrastive description per (concept, confusing concept) pair."""
    if cache is None:
        raise DescriptionError("a DescriptionCache is required")
    template = template or default_contrastive_template()
    requests = []
    for concept_id, against_id in pairs:
        if against_id == concept_id:
            raise DescriptionError(f"concept {concept_id} paired against itself")
        requests.append(
            _Request(
                concept_id=concept_id,
                concept_name=dictionary[concept_id].name,
                kind="contrastive",
                against_id=against_id,
                against_name=dictionary[against_id].name,
            )
        )
    return _generate(requests, client, template, cache, retries, parallelism, sleep, backoff)


def find_confusing_category(concept_id: int, classifier_embs: EmbeddingMatrix) -> int:
    """Most similar other category in the classifier space; ties go to the smaller id."""
    if classifier_embs.space != "classifier":
        raise EmbeddingError("find_confusing_category needs classifier-space embeddings")
    if len(classifier_embs) < 2:
        raise DescriptionError("no candidate: need at least two concepts")
    own = classifier_embs.row_for(concept_id).astype(np.float64)
    sims = classifier_embs.rows.astype(np.float64) @ own
    order = np.asarray(classifier_embs.ids)
    sims[classifier_embs.index_of(concept_id)] = -np.inf
    best = int(np.argmax(sims))  # argmax takes the first maximum, ids ascending -> smaller id
    return int(order[best])


def confusing_pairs(classifier_embs: EmbeddingMatrix) -> list[tuple[int, int]]:
    """(concept, most confusing concept) for every concept in the matrix."""
    return [(cid, find_confusing_category(cid, classifier_embs)) for cid in classifier_embs.ids]


def save_descriptions(descriptions: Sequence[VisualDescription], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in descriptions:
            fh.write(
                json.dumps(
                    {
                        "concept_id": d.concept_id,
                        "kind": d.kind,
                        "against_id": d.against_id,
                        "text": d.text,
                        "provenance": d.provenance,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_descriptions(path: str | Path) -> list[VisualDescription]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    VisualDescription(
                        concept_id=rec["concept_id"],
                        kind=rec["kind"],
                        against_id=rec["against_id"],
                        text=rec["text"],
                        provenance=rec["provenance"],
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DescriptionError(f"{path}: line {lineno}: bad description record: {exc}")
    return out
