"""Class captions: an offline template grammar and a chat-completion client.

Captions are produced in batches of ``B`` and unioned over ``ceil(N / B)``
batches.  Token length is counted with :func:`tokenize`, the same
tokenizer the text encoder uses.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx
import numpy as np

from .errors import ConfigError, ParseError, ProviderError
from .morphology import StageClass
from .rng import derive_seed, make_rng

log = logging.getLogger(__name__)

CLASS_SLOT = "{cls}"
CHAR_SLOT = "{characteristics}"

# (phrase, salience) pairs; salience feeds the Boltzmann weights
DEFAULT_POOLS: dict[StageClass, list[tuple[str, float]]] = {
    StageClass.SPORE: [
        ("small round single cells", 1.0),
        ("smooth bright yellow walls", 0.9),
        ("scattered isolated dots", 0.8),
        ("no branching filaments", 0.9),
        ("a dormant early growth stage", 0.7),
        ("compact spherical bodies", 0.8),
        ("yellow to orange colouring", 0.6),
        ("even spacing across the medium", 0.4),
        ("tiny circular outlines", 0.5),
        ("cells waiting to germinate", 0.6),
    ],
    StageClass.HYPHAE: [
        ("thin filaments growing from a central cell", 1.0),
        ("orange thread-like strands", 0.9),
        ("simple two-way branching", 0.9),
        ("a developing mid growth stage", 0.7),
        ("short tapering tubular branches", 0.8),
        ("a few leftover spores nearby", 0.5),
        ("deep orange colouring", 0.6),
        ("elongated cells extending outward", 0.7),
        ("sparse open branch patterns", 0.6),
        ("tips that narrow with each fork", 0.4),
    ],
    StageClass.MYCELIUM: [
        ("a dense interwoven network of filaments", 1.0),
        ("red-orange to deep red colouring", 0.9),
        ("deep repeated three-way branching", 0.9),
        ("a mature fully developed growth stage", 0.8),
        ("thick mats covering the medium", 0.7),
        ("many fine tapering branch tips", 0.6),
        ("some remaining hyphal strands", 0.5),
        ("a complex web-like structure", 0.8),
        ("overlapping fused branches", 0.6),
        ("dark crimson tones", 0.4),
    ],
}

DEFAULT_PROMPT = "Describe the fungal growth stage {cls}, focusing on its key biological characteristics."
DEFAULT_SYSTEM = (
    "Answer with one sentence of the form '{cls} characterized by <characteristics>', "
    "between {min_len} and {max_len} words."
)

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split words with surrounding punctuation removed."""
    out = []
    for word in text.lower().split():
        word = word.strip(_PUNCT)
        if word:
            out.append(word)
    return out


@dataclass
class PromptTemplate:
    pools: dict[StageClass, list[tuple[str, float]]] = field(default_factory=lambda: dict(DEFAULT_POOLS))
    frame: str = CLASS_SLOT + " characterized by " + CHAR_SLOT
    min_characteristics: int = 2
    max_characteristics: int = 4

    def __post_init__(self):
        if self.frame.count(CLASS_SLOT) != 1 or CHAR_SLOT not in self.frame:
            raise ConfigError("frame needs exactly one class slot and at least one characteristics slot")
        if not 1 <= self.min_characteristics <= self.max_characteristics:
            raise ConfigError("invalid characteristic count range")

    def vocabulary(self, stage: StageClass) -> set[str]:
        words = set(tokenize(self.frame.replace(CLASS_SLOT, stage.label).replace(CHAR_SLOT, " ")))
        words.add("and")
        for phrase, _ in self.pools[stage]:
            words.update(tokenize(phrase))
        return words


@dataclass(frozen=True)
class CaptionConstraints:
    min_len: int = 8
    max_len: int = 40
    batch_size: int = 10
    total: int = 50
    sampling_temperature: float = 0.9

    def __post_init__(self):
        if not 0 < self.min_len <= self.max_len:
            raise ConfigError(f"need 0 < min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.batch_size < 1 or self.total < 0:
            raise ConfigError("batch_size must be positive and total non-negative")
        if self.total and self.batch_size > self.total:
            raise ConfigError(f"batch_size {self.batch_size} exceeds total {self.total}")
        if self.sampling_temperature <= 0:
            raise ConfigError("sampling_temperature must be positive")

    @property
    def n_batches(self) -> int:
        return math.ceil(self.total / self.batch_size)

    def fits(self, caption: str) -> bool:
        return self.min_len <= len(tokenize(caption)) <= self.max_len


@dataclass
class CaptionSet:
    stage: StageClass
    captions: list[str]
    batch_index: list[int]
    provider: str = "template"
    deduplicated: bool = True

    def __len__(self):
        return len(self.captions)

    def write(self, path) -> None:
        Path(path).write_text("".join(c + "\n" for c in self.captions), encoding="utf-8")

    @classmethod
    def read(cls, path, stage: StageClass, provider: str = "file") -> "CaptionSet":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        return cls(stage, lines, [0] * len(lines), provider, len(set(lines)) == len(lines))


@dataclass(frozen=True)
class CaptionStats:
    count: int
    mean_length: float
    vocabulary_size: int


def caption_stats(captions: CaptionSet | Sequence[str]) -> CaptionStats:
    texts = captions.captions if isinstance(captions, CaptionSet) else list(captions)
    if not texts:
        return CaptionStats(0, 0.0, 0)
    toks = [tokenize(t) for t in texts]
    vocab = set().union(*toks)
    return CaptionStats(len(texts), sum(map(len, toks)) / len(toks), len(vocab))


def _join(parts: list[str]) -> str:
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _sample_caption(
    stage: StageClass,
    template: PromptTemplate,
    constraints: CaptionConstraints,
    rng: np.random.Generator,
    max_tries: int = 100,
) -> str:
    pool = template.pools[stage]
    phrases = [p for p, _ in pool]
    scores = np.array([s for _, s in pool], float)
    weights = np.exp((scores - scores.max()) / constraints.sampling_temperature)
    probs = weights / weights.sum()
    for _ in range(max_tries):
        k = int(rng.integers(template.min_characteristics, template.max_characteristics + 1))
        picks = rng.choice(len(phrases), size=k, replace=False, p=probs)
        text = template.frame.replace(CLASS_SLOT, stage.label).replace(CHAR_SLOT, _join([phrases[i] for i in picks]))
        text = text[0].upper() + text[1:]
        if constraints.fits(text):
            return text
    raise ConfigError(
        f"template cannot produce {stage.label} captions within [{constraints.min_len}, {constraints.max_len}] tokens"
    )


def generate_batch(
    stage: StageClass,
    template: PromptTemplate,
    constraints: CaptionConstraints,
    batch_index: int,
    seed: int,
) -> list[str]:
    """Exactly ``batch_size`` template captions for batch ``batch_index``."""
    stage = StageClass.parse(stage)
    pool = template.pools.get(stage, [])
    if len(pool) < template.max_characteristics:
        raise ConfigError(
            f"{stage.label} pool has {len(pool)} phrases, need at least {template.max_characteristics}"
        )
    rng = make_rng(derive_seed(seed, stage, batch_index))
    return [_sample_caption(stage, template, constraints, rng) for _ in range(constraints.batch_size)]


def generate_set(
    stage: StageClass,
    template: PromptTemplate,
    constraints: CaptionConstraints,
    seed: int,
    retry_budget: int = 20,
) -> CaptionSet:
    """Union of ``ceil(N / B)`` batches, trimmed to ``N``; duplicates are resampled."""
    stage = StageClass.parse(stage)
    captions: list[str] = []
    batches: list[int] = []
    seen: set[str] = set()
    clean = True
    for k in range(constraints.n_batches):
        retry_rng = make_rng(derive_seed(seed, stage, k, 1))
        for text in generate_batch(stage, template, constraints, k, seed):
            tries = 0
            while text in seen and tries < retry_budget:
                text = _sample_caption(stage, template, constraints, retry_rng)
                tries += 1
            if text in seen:
                clean = False
            seen.add(text)
            captions.append(text)
            batches.append(k)
    return CaptionSet(stage, captions[: constraints.total], batches[: constraints.total], "template", clean)


# --- remote provider --------------------------------------------------------


@dataclass
class EndpointConfig:
    url: str
    model: str
    api_key_env: str = "MYCOCLIP_API_KEY"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 0.5
    max_inflight: int = 4
    prompt: str = DEFAULT_PROMPT
    system: str = DEFAULT_SYSTEM
    record_dir: str | None = None

    def api_key(self) -> str | None:
        return os.environ.get(self.api_key_env)


class ReplayTransport(httpx.BaseTransport):
    """Serve recorded chat-completion bodies from a directory.

    Bodies are matched on the ``X-Caption-Class`` and ``X-Caption-Batch``
    request headers (``{class}_{batch:03}.json``), falling back to the
    sorted file order when no such file exists.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self._files = sorted(self.directory.glob("*.json"))
        self._next = 0

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        cls = request.headers.get("x-caption-class", "")
        batch = request.headers.get("x-caption-batch", "")
        path = self.directory / f"{cls}_{int(batch or 0):03}.json"
        if not path.exists():
            if self._next >= len(self._files):
                return httpx.Response(404, text="no recorded response left")
            path = self._files[self._next]
            self._next += 1
        return httpx.Response(200, content=path.read_bytes(), headers={"content-type": "application/json"})


def _truncate_at_sentence(text: str, max_len: int) -> str:
    sentences = re.split(r"(?<=[.!?])\s+", text)
    kept: list[str] = []
    for s in sentences:
        if len(tokenize(" ".join(kept + [s]))) > max_len:
            break
        kept.append(s)
    return " ".join(kept)


def clean_completion(text: str, constraints: CaptionConstraints) -> str | None:
    """Normalize whitespace and enforce length bounds; ``None`` if unusable."""
    text = " ".join(text.split())
    if len(tokenize(text)) > constraints.max_len:
        text = _truncate_at_sentence(text, constraints.max_len)
    return text if text and constraints.fits(text) else None


def parse_completion_body(raw: bytes | str) -> tuple[str, list[str]]:
    """Return ``(model, contents)`` from a chat-completion response body."""
    text = raw.decode("utf-8", "replace") if isinstance(raw, bytes) else raw
    try:
        body = json.loads(text)
        contents = [c["message"]["content"] for c in body["choices"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed chat-completion response: {exc}", raw_body=text) from None
    if not all(isinstance(c, str) for c in contents):
        raise ParseError("completion content is not text", raw_body=text)
    return str(body.get("model", "")), contents


class ChatCompletionClient:
    def __init__(
        self,
        endpoint: EndpointConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = endpoint
        self.sleep = sleep
        headers = {"content-type": "application/json"}
        key = endpoint.api_key()
        if key:
            headers["authorization"] = f"Bearer {key}"
        self._http = httpx.Client(transport=transport, timeout=endpoint.timeout, headers=headers)

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request_batch(self, stage: StageClass, n: int, batch_index: int, constraints: CaptionConstraints) -> tuple[str, list[str]]:
        ep = self.endpoint
        fill = dict(cls=stage.label, min_len=constraints.min_len, max_len=constraints.max_len)
        payload = {
            "model": ep.model,
            "messages": [
                {"role": "system", "content": ep.system.format(**fill)},
                {"role": "user", "content": ep.prompt.format(**fill)},
            ],
            "temperature": constraints.sampling_temperature,
            "n": n,
        }
        headers = {"x-caption-class": stage.label, "x-caption-batch": str(batch_index)}
        last = ""
        for attempt in range(ep.max_attempts):
            if attempt:
                self.sleep(ep.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._http.post(ep.url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
                log.warning("caption request %s/%d failed: %s", stage.label, batch_index, last)
                continue
            if resp.status_code >= 400:
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                log.warning("caption request %s/%d failed: %s", stage.label, batch_index, last)
                continue
            if ep.record_dir:
                Path(ep.record_dir).mkdir(parents=True, exist_ok=True)
                (Path(ep.record_dir) / f"{stage.label}_{batch_index:03}.json").write_bytes(resp.content)
            return parse_completion_body(resp.content)
        raise ProviderError(f"{ep.url} failed after {ep.max_attempts} attempts ({last})")


def fetch_remote_captions(
    stage: StageClass,
    endpoint: EndpointConfig,
    constraints: CaptionConstraints,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] = time.sleep,
    resample_rounds: int = 3,
) -> CaptionSet:
    """Collect ``N`` captions from a chat-completion endpoint.

    Completions that violate the length bounds after sentence truncation are
    dropped and requested again for up to ``resample_rounds`` extra rounds.
    """
    stage = StageClass.parse(stage)
    if not endpoint.url or not endpoint.model:
        raise ConfigError("remote captions need an endpoint url and model")
    captions: list[str] = []
    batches: list[int] = []
    provider = ""
    with ChatCompletionClient(endpoint, transport, sleep) as client:
        next_batch = 0
        for _ in range(resample_rounds + 1):
            missing = constraints.total - len(captions)
            if missing <= 0:
                break
            sizes = [min(constraints.batch_size, missing - i) for i in range(0, missing, constraints.batch_size)]
            indices = list(range(next_batch, next_batch + len(sizes)))
            next_batch += len(sizes)
            with ThreadPoolExecutor(max_workers=max(1, endpoint.max_inflight)) as pool:
                results = list(pool.map(lambda a: client.request_batch(stage, a[0], a[1], constraints), zip(sizes, indices)))
            for k, (model, contents) in zip(indices, results):
                provider = provider or model
                for text in contents:
                    text = clean_completion(text, constraints)
                    if text is not None and len(captions) < constraints.total:
                        captions.append(text)
                        batches.append(k)
    if len(captions) < constraints.total:
        raise ProviderError(
            f"only {len(captions)} of {constraints.total} {stage.label} captions met the length bounds"
        )
    provider_id = f"remote:{provider or endpoint.model}"
    return CaptionSet(stage, captions, batches, provider_id, len(set(captions)) == len(captions))
