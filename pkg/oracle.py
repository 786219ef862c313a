import io
import os
import re
import json
import time
import hashlib
import logging
import threading
from enum import Enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import httpx
import openai

ENDPOINT_ENV = "ALLOCSCOPE_ENDPOINT"
API_KEY_ENV = "ALLOCSCOPE_API_KEY"
TEMPERATURES = (0.4, 0.6, 0.8)

PROMPT_DICT = {
    "side_effect": (
        "The C function below returns newly allocated heap memory and may be a custom "
        "allocation function. Static analysis flagged the side-effecting statements listed "
        "after its source. Determine whether all such statements reside within error-handling "
        "paths (for example cleanup or logging after an allocation failure), so that no caller "
        "can observe them when the function returns a heap object.\n\n"
        "FUNCTION: {function_name}\n\n"
        "SOURCE:\n{source}\n\n"
        "SIDE-EFFECT STATEMENTS:\n{statements}\n\n"
        "Reason briefly, then finish with a final line that is exactly `ANSWER: YES` if every "
        "listed statement is confined to error-handling paths, or `ANSWER: NO` otherwise."
    ),
}

_ANSWER = re.compile(r"ANSWER:\s*\**\s*(YES|NO)\b", re.IGNORECASE)


class OracleTransportError(RuntimeError):
    pass


class Ignorability(Enum):
    IGNORABLE = "Ignorable"
    NOT_IGNORABLE = "NotIgnorable"


class OracleKind(Enum):
    CONSERVATIVE = "conservative"
    ANNOTATIONS = "annotations"
    REMOTE = "remote"


@dataclass(frozen=True)
class SideEffectQuery:
    function_name: str
    flagged_sites: Tuple[Tuple[str, str], ...]
    source_text: Optional[str] = None
    # printed IR body, used when there is no source text
    ir_text: str = ""

    def __post_init__(self):
        if not self.flagged_sites:
            raise ValueError("a side-effect query needs at least one flagged site")


@dataclass(frozen=True)
class Verdict:
    value: Ignorability
    votes: Tuple[str, ...]
    input_tokens: int = 0
    output_tokens: int = 0
    latency: float = 0.0
    # number of remote completions issued
    queries: int = 0
    flags: Tuple[str, ...] = ()

    @property
    def ignorable(self):
        return self.value == Ignorability.IGNORABLE

    def to_json(self):
        return {"value": self.value.value, "votes": list(self.votes), "flags": list(self.flags),
                "input_tokens": self.input_tokens, "output_tokens": self.output_tokens}


@dataclass
class OracleConfig:
    kind: OracleKind = field(default=OracleKind.CONSERVATIVE, metadata={"help": "Which backend answers queries."})
    annotations_path: Optional[str] = field(default=None, metadata={"help": "JSON map function -> ignorable|not_ignorable."})
    endpoint: Optional[str] = field(default=None, metadata={"help": f"Chat-completions base URL; falls back to ${ENDPOINT_ENV}."})
    api_key: Optional[str] = field(default=None, metadata={"help": f"Bearer key; falls back to ${API_KEY_ENV}."})
    model: str = field(default="default", metadata={"help": "Model name sent with every request."})
    temperature: float = field(default=0.6, metadata={"help": "Sampling temperature, one of 0.4, 0.6, 0.8."})
    query_count: int = field(default=5, metadata={"help": "Completions per query; the majority wins, so it must be odd."})
    timeout: float = field(default=120.0, metadata={"help": "Per-request timeout in seconds."})
    retries: int = field(default=2, metadata={"help": "Transport retries before giving up."})
    max_in_flight: int = field(default=4, metadata={"help": "Bound on concurrent remote requests."})
    cassette: Optional[str] = field(default=None, metadata={"help": "Record/replay file for remote exchanges."})
    cassette_mode: str = field(default="off", metadata={"help": "off, record or replay."})

    def __post_init__(self):
        if self.temperature not in TEMPERATURES:
            raise ValueError(f"temperature must be one of {TEMPERATURES}, got {self.temperature}")
        if self.query_count < 1 or self.query_count % 2 == 0:
            raise ValueError(f"query_count must be a positive odd number, got {self.query_count}")
        if self.cassette_mode not in ("off", "record", "replay"):
            raise ValueError(f"unknown cassette mode '{self.cassette_mode}'")
        if self.cassette_mode != "off" and not self.cassette:
            raise ValueError("cassette mode needs a cassette path")
        if self.kind == OracleKind.ANNOTATIONS and not self.annotations_path:
            raise ValueError("the annotations oracle needs a file")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")

    @classmethod
    def from_flag(cls, text, **overrides) -> Optional["OracleConfig"]:
        """Parse `conservative`, `annotations=PATH`, `remote` or `none` (no oracle)."""
        if text == "none":
            return None
        if text.startswith("annotations="):
            return cls(kind=OracleKind.ANNOTATIONS, annotations_path=text.split("=", 1)[1], **overrides)
        try:
            kind = OracleKind(text)
        except ValueError:
            raise ValueError(f"unknown oracle '{text}'")
        if kind == OracleKind.ANNOTATIONS:
            raise ValueError("use annotations=PATH")
        return cls(kind=kind, **overrides)

    def resolved_endpoint(self):
        return self.endpoint or os.environ.get(ENDPOINT_ENV) or "http://localhost:8000/v1"

    def resolved_api_key(self):
        return self.api_key or os.environ.get(API_KEY_ENV) or "EMPTY"


def _make_r_io_base(f, mode: str):
    if not isinstance(f, io.IOBase):
        f = open(f, mode=mode)
    return f


def jload(f, mode="r"):
    """Load a .json file into a dictionary."""
    f = _make_r_io_base(f, mode)
    jdict = json.load(f)
    f.close()
    return jdict


def render_prompt(query: SideEffectQuery) -> str:
    source = query.source_text if query.source_text is not None else query.ir_text
    statements = "\n".join(f"- [{site}] {text}" for site, text in query.flagged_sites)
    return PROMPT_DICT["side_effect"].format_map({
        "function_name": query.function_name,
        "source": source.rstrip("\n"),
        "statements": statements,
    })


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def parse_answer(text: Optional[str]) -> str:
    """The last `ANSWER:` marker wins; anything else is UNPARSABLE."""
    matches = _ANSWER.findall(text or "")
    return matches[-1].upper() if matches else "UNPARSABLE"


def majority(votes: Sequence[str]) -> Ignorability:
    yes = sum(1 for v in votes if v == "YES")
    return Ignorability.IGNORABLE if yes * 2 > len(votes) else Ignorability.NOT_IGNORABLE


class IgnorabilityOracle:
    kind: OracleKind

    def classify(self, query: SideEffectQuery) -> Verdict:
        raise NotImplementedError

    def close(self):
        pass


class ConservativeOracle(IgnorabilityOracle):
    kind = OracleKind.CONSERVATIVE

    def classify(self, query):
        return Verdict(Ignorability.NOT_IGNORABLE, ("NO",))


class AnnotationOracle(IgnorabilityOracle):
    kind = OracleKind.ANNOTATIONS

    def __init__(self, annotations):
        if not isinstance(annotations, dict):
            annotations = jload(annotations)
        # ground-truth files written by `gen` nest the labels
        if isinstance(annotations.get("annotations"), dict):
            annotations = annotations["annotations"]
        for name, label in annotations.items():
            if label not in ("ignorable", "not_ignorable"):
                raise ValueError(f"annotation for '{name}' must be ignorable or not_ignorable, got '{label}'")
        self.annotations = dict(annotations)

    def classify(self, query):
        label = self.annotations.get(query.function_name)
        if label is None:
            return Verdict(Ignorability.NOT_IGNORABLE, ("NO",), flags=("missing-annotation",))
        if label == "ignorable":
            return Verdict(Ignorability.IGNORABLE, ("YES",))
        return Verdict(Ignorability.NOT_IGNORABLE, ("NO",))


class Cassette:
    """Prompt-hash keyed store of recorded completions."""

    def __init__(self, path, mode):
        self.path = path
        self.mode = mode
        self.lock = threading.Lock()
        self.entries: Dict[str, dict] = {}
        self.cursor: Dict[str, int] = {}
        if mode == "replay" or (mode == "record" and os.path.isfile(path)):
            for entry in jload(path):
                self.entries[entry["prompt_hash"]] = entry

    def replay(self, key) -> Tuple[str, int, int]:
        with self.lock:
            entry = self.entries.get(key)
            index = self.cursor.get(key, 0)
            if entry is None or index >= len(entry["responses"]):
                raise OracleTransportError(f"cassette has no response #{index + 1} for prompt {key[:12]}")
            self.cursor[key] = index + 1
        usage = entry.get("usage") or []
        tokens = usage[index] if index < len(usage) else (0, 0)
        return entry["responses"][index], tokens[0], tokens[1]

    def record(self, key, text, input_tokens, output_tokens):
        with self.lock:
            entry = self.entries.setdefault(key, {"prompt_hash": key, "responses": [], "usage": []})
            entry["responses"].append(text)
            entry.setdefault("usage", []).append([input_tokens, output_tokens])

    def save(self):
        if self.mode != "record":
            return
        with open(self.path, "w") as f:
            json.dump([self.entries[k] for k in sorted(self.entries)], f, indent=2)


def build_generator(client: openai.OpenAI, model, temperature=0.6, semaphore=None):
    def response(prompt):
        if semaphore is not None:
            semaphore.acquire()
        try:
            completion = client.chat.completions.create(
                model=model,
                temperature=temperature,
                messages=[{"role": "user", "content": prompt}],
            )
        except (openai.APIConnectionError, openai.APIStatusError) as exc:
            raise OracleTransportError(f"remote oracle request failed: {exc}") from exc
        finally:
            if semaphore is not None:
                semaphore.release()
        text = completion.choices[0].message.content if completion.choices else None
        usage = completion.usage
        in_tokens = usage.prompt_tokens if usage is not None else 0
        out_tokens = usage.completion_tokens if usage is not None else 0
        return text or "", in_tokens, out_tokens

    return response


class RemoteOracle(IgnorabilityOracle):
    """Majority vote over `query_count` identical chat-completion requests."""
    kind = OracleKind.REMOTE

    def __init__(self, config: OracleConfig, http_client: Optional[httpx.Client] = None):
        self.config = config
        self.cassette = Cassette(config.cassette, config.cassette_mode) if config.cassette_mode != "off" else None
        self.respond = None
        if self.cassette is None or self.cassette.mode == "record":
            client = openai.OpenAI(
                base_url=config.resolved_endpoint(),
                api_key=config.resolved_api_key(),
                timeout=config.timeout,
                max_retries=config.retries,
                http_client=http_client,
            )
            self.respond = build_generator(client, config.model, config.temperature,
                                           threading.BoundedSemaphore(config.max_in_flight))

    def classify(self, query):
        prompt = render_prompt(query)
        key = prompt_hash(prompt)
        votes: List[str] = []
        in_total = out_total = 0
        flags = []
        start = time.perf_counter()
        for _ in range(self.config.query_count):
            if self.cassette is not None and self.cassette.mode == "replay":
                text, in_tokens, out_tokens = self.cassette.replay(key)
            else:
                text, in_tokens, out_tokens = self.respond(prompt)
                if self.cassette is not None:
                    self.cassette.record(key, text, in_tokens, out_tokens)
            vote = parse_answer(text)
            if vote == "UNPARSABLE" and "unparsable-reply" not in flags:
                flags.append("unparsable-reply")
            votes.append(vote)
            in_total += in_tokens
            out_total += out_tokens
        latency = time.perf_counter() - start
        verdict = Verdict(majority(votes), tuple(votes), in_total, out_total, latency,
                          self.config.query_count, tuple(flags))
        logging.info("oracle %s: %s (%s)", query.function_name, verdict.value.value, " ".join(votes))
        return verdict

    def close(self):
        if self.cassette is not None:
            self.cassette.save()


def build_oracle(config: Optional[OracleConfig], http_client=None) -> Optional[IgnorabilityOracle]:
    if config is None:
        return None
    if config.kind == OracleKind.CONSERVATIVE:
        return ConservativeOracle()
    if config.kind == OracleKind.ANNOTATIONS:
        return AnnotationOracle(config.annotations_path)
    return RemoteOracle(config, http_client=http_client)


def classify(query: SideEffectQuery, config: OracleConfig, http_client=None) -> Verdict:
    oracle = build_oracle(config, http_client)
    try:
        return oracle.classify(query)
    finally:
        oracle.close()
