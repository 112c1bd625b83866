"""Text-generation backends: chat-completions over HTTP, a deterministic mock,
and a record/replay store that makes networked runs reproducible offline."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import requests

from .formats import ANSWER_CLOSE, OutputFormat, render, split_prompt

log = logging.getLogger(__name__)


class BackendError(Exception):
    pass


class RetryableError(BackendError):
    pass


class Timeout(RetryableError):
    pass


class ServerError(RetryableError):
    """HTTP 5xx or 429."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class FatalError(BackendError):
    pass


class BadRequest(FatalError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:1200]}")
        self.status = status
        self.body = body


class ProtocolError(FatalError):
    pass


class MissingRecording(FatalError):
    pass


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    max_tokens: int = 256
    temperature: float = 0.0
    n: int = 1
    seed: int | None = None

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def params(self) -> dict:
        return {"max_tokens": self.max_tokens, "temperature": self.temperature,
                "n": self.n, "seed": self.seed}


@dataclass
class GenerationResult:
    texts: list[str]
    completion_tokens: list[int]
    wall_time_s: float
    time_to_first_answer_s: float | None = None


def request_hash(req: GenerationRequest) -> str:
    blob = json.dumps({"prompt": req.prompt, **req.params()}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Backend:
    """Anything with generate(req) -> GenerationResult. Must be thread-safe."""

    parallelism = 1

    def generate(self, req: GenerationRequest) -> GenerationResult:
        raise NotImplementedError

    def close(self) -> None:
        pass


def generate(backend: Backend, req: GenerationRequest) -> GenerationResult:
    return backend.generate(req)


def generate_many(backend: Backend, reqs, parallelism: int | None = None, return_exceptions=False):
    """Run requests with bounded fan-out; results come back in request order."""
    reqs = list(reqs)
    workers = max(1, parallelism or getattr(backend, "parallelism", 1))

    def one(req):
        try:
            return backend.generate(req)
        except BackendError as exc:
            if return_exceptions:
                return exc
            raise

    if workers == 1 or len(reqs) <= 1:
        return [one(r) for r in reqs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, reqs))


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def _first_answer_piece(text: str) -> int | None:
    """1-based index of the whitespace piece in which the first </answer> closes."""
    idx = text.find(ANSWER_CLOSE)
    if idx == -1:
        return None
    return whitespace_tokens(text[: idx + len(ANSWER_CLOSE)])


# --- HTTP ---------------------------------------------------------------------

@dataclass
class RetryPolicy:
    base_s: float = 0.5
    factor: float = 2.0
    max_attempts: int = 5
    jitter: float = 0.25  # +/- fraction of the nominal delay

    def delay(self, attempt: int, rng: random.Random) -> float:
        nominal = self.base_s * self.factor ** attempt
        return nominal * (1 + rng.uniform(-self.jitter, self.jitter))


class HttpBackend(Backend):
    """Client for an OpenAI-style POST {base_url}/chat/completions endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        api_key_env: str = "OPENAI_API_KEY",
        timeout_s: float = 60.0,
        parallelism: int = 4,
        stream: bool = False,
        retry: RetryPolicy | None = None,
        sleep=time.sleep,
        seed: int = 0,
    ):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key_env = api_key_env
        self.timeout_s = timeout_s
        self.parallelism = parallelism
        self.stream = stream
        self.retry = retry or RetryPolicy()
        self._sleep = sleep
        self._rng = random.Random(seed)
        self._local = threading.local()

    def _session(self) -> requests.Session:
        sess = getattr(self._local, "session", None)
        if sess is None:
            sess = self._local.session = requests.Session()
        return sess

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def payload(self, req: GenerationRequest) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "n": req.n,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        if self.stream:
            body["stream"] = True
        return body

    def generate(self, req: GenerationRequest) -> GenerationResult:
        last = None
        for attempt in range(self.retry.max_attempts):
            try:
                return self._once(req)
            except RetryableError as exc:
                last = exc
                if attempt + 1 < self.retry.max_attempts:
                    wait = self.retry.delay(attempt, self._rng)
                    log.warning("retrying after %s (attempt %d, sleeping %.2fs)", exc, attempt + 1, wait)
                    self._sleep(wait)
        raise last

    def _once(self, req: GenerationRequest) -> GenerationResult:
        t0 = time.perf_counter()
        try:
            resp = self._session().post(
                self.url, json=self.payload(req), headers=self._headers(),
                timeout=self.timeout_s, stream=self.stream,
            )
        except requests.Timeout as exc:
            raise Timeout(str(exc)) from exc
        except requests.ConnectionError as exc:
            raise Timeout(f"connection failed: {exc}") from exc
        except requests.RequestException as exc:
            raise ProtocolError(f"request failed: {exc}") from exc
        status = resp.status_code
        if status == 429 or status >= 500:
            raise ServerError(status, resp.text)
        if status >= 400:
            raise BadRequest(status, resp.text)
        if self.stream:
            return self._read_stream(resp, req, t0)
        try:
            data = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {resp.text[:200]!r}") from exc
        wall = time.perf_counter() - t0
        texts = self._texts(data, req.n)
        return GenerationResult(texts, self._token_counts(data, texts), wall)

    @staticmethod
    def _texts(data, n: int) -> list[str]:
        try:
            choices = sorted(data["choices"], key=lambda c: c.get("index", 0))
            texts = [c["message"]["content"] or "" for c in choices]
        except (KeyError, TypeError, AttributeError) as exc:
            raise ProtocolError(f"malformed chat completion: {exc!r}") from exc
        if len(texts) != n:
            raise ProtocolError(f"asked for {n} choices, got {len(texts)}")
        return texts

    @staticmethod
    def _token_counts(data, texts) -> list[int]:
        usage = data.get("usage") or {}
        total = usage.get("completion_tokens")
        if len(texts) == 1 and isinstance(total, int):
            return [total]
        # providers report one total for n > 1; fall back to a piece count
        return [whitespace_tokens(t) for t in texts]

    def _read_stream(self, resp, req, t0) -> GenerationResult:
        parts: dict[int, list[str]] = {}
        ttfa = None
        usage = None
        try:
            for raw in resp.iter_lines(decode_unicode=True):
                if not raw or not raw.startswith("data:"):
                    continue
                chunk = raw[5:].strip()
                if chunk == "[DONE]":
                    break
                event = json.loads(chunk)
                usage = event.get("usage") or usage
                for choice in event.get("choices", []):
                    idx = choice.get("index", 0)
                    delta = (choice.get("delta") or {}).get("content") or ""
                    parts.setdefault(idx, []).append(delta)
                    if ttfa is None and idx == 0 and ANSWER_CLOSE in "".join(parts[0]):
                        ttfa = time.perf_counter() - t0
        except requests.RequestException as exc:
            raise Timeout(f"stream interrupted: {exc}") from exc
        except (ValueError, AttributeError, TypeError) as exc:
            raise ProtocolError(f"malformed stream event: {exc!r}") from exc
        wall = time.perf_counter() - t0
        texts = ["".join(parts.get(i, [])) for i in range(req.n)]
        if len(parts) != req.n:
            raise ProtocolError(f"asked for {req.n} choices, stream carried {len(parts)}")
        counts = self._token_counts({"usage": usage}, texts)
        return GenerationResult(texts, counts, wall, ttfa)


# --- mock -----------------------------------------------------------------------

_PIECE_RE = re.compile(r"\S+")


def truncate_tokens(text: str, max_tokens: int) -> str:
    """Keep the first ``max_tokens`` whitespace-delimited pieces (and what sits between them)."""
    end = None
    for k, m in enumerate(_PIECE_RE.finditer(text), 1):
        if k > max_tokens:
            break
        end = m.end()
    else:
        return text
    return text[:end] if end is not None else ""


@dataclass
class MockLatency:
    base_s: float = 0.0
    per_token_s: float = 0.0


class MockBackend(Backend):
    """Deterministic backend for tests and dry runs.

    ``responder(prompt, sample_index, seed)`` returns the full completion;
    the mock truncates it to the request budget, so a smaller budget always
    yields a byte prefix of a larger one. Latency is simulated from token
    counts, not slept.
    """

    def __init__(self, responder, latency: MockLatency | None = None, parallelism: int = 1):
        self.responder = responder
        self.latency = latency or MockLatency()
        self.parallelism = parallelism
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, req: GenerationRequest) -> GenerationResult:
        with self._lock:
            self.calls += 1
        texts, counts = [], []
        for i in range(req.n):
            full = self.responder(req.prompt, i, req.seed)
            text = truncate_tokens(full, req.max_tokens)
            texts.append(text)
            counts.append(whitespace_tokens(text))
        lat = self.latency
        wall = lat.base_s + lat.per_token_s * max(counts)
        piece = _first_answer_piece(texts[0])
        ttfa = None if piece is None else lat.base_s + lat.per_token_s * piece
        return GenerationResult(texts, counts, wall, ttfa)

    @classmethod
    def scripted(cls, responses: dict, default=None, **kw) -> "MockBackend":
        """Canned completions keyed by the query inside the prompt (or the whole prompt).

        Sample i of a request gets entry i (cycling) of the matching list.
        """
        responses = {k: [v] if isinstance(v, str) else list(v) for k, v in responses.items()}
        default = [default] if isinstance(default, str) else default

        def responder(prompt, i, seed):
            options = responses.get(prompt)
            if options is None:
                split = split_prompt(prompt)
                if split is not None:
                    options = responses.get(split[1])
            if options is None:
                options = default
            if not options:
                raise MissingRecording(f"mock has no script for prompt {prompt[-80:]!r}")
            return options[i % len(options)]

        return cls(responder, **kw)

    @classmethod
    def from_pairs(cls, pairs, *, p_correct: float = 0.7, p_consistent: float = 1.0,
                   reasoning_words: int = 30, seed: int = 0, **kw) -> "MockBackend":
        """A noisy 'model' that knows the gold answers.

        Each sample answers correctly with probability ``p_correct`` (else it
        echoes the noisy query) and writes ``reasoning_words`` words of
        reasoning, in whatever layout the prompt asks for. Draws depend only
        on (seed, prompt, sample index, request seed), never on the budget.
        """
        gold = {p.q_noise: p.q_clean for p in pairs}

        def responder(prompt, i, req_seed):
            split = split_prompt(prompt)
            if split is None:
                raise ProtocolError("mock cannot recognise the prompt template")
            fmt, query = split
            h = hashlib.sha256(f"{seed}|{req_seed}|{i}|{prompt}".encode("utf-8")).digest()
            rng = random.Random(h)
            answer = gold.get(query, query) if rng.random() < p_correct else query
            words = " ".join(f"w{k}" for k in range(reasoning_words))
            reasoning = f" checking '{query}' {words} "
            if fmt is OutputFormat.SANDWICH:
                final = answer if rng.random() < p_consistent else gold.get(query, query)
                return render(fmt, answer, reasoning, final)
            return render(fmt, answer, reasoning)

        return cls(responder, **kw)


# --- record / replay ------------------------------------------------------------

def session_entry(req: GenerationRequest, res: GenerationResult) -> dict:
    return {
        "request_hash": request_hash(req),
        "prompt": req.prompt,
        "params": req.params(),
        "texts": res.texts,
        "usage": {"completion_tokens": res.completion_tokens},
        "latency": {"wall_time_s": res.wall_time_s,
                    "time_to_first_answer_s": res.time_to_first_answer_s},
    }


class RecordingBackend(Backend):
    """Wraps a backend and appends every request/response pair to a session file."""

    def __init__(self, inner: Backend, path):
        self.inner = inner
        self.path = Path(path)
        self.parallelism = getattr(inner, "parallelism", 1)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def generate(self, req: GenerationRequest) -> GenerationResult:
        res = self.inner.generate(req)
        line = json.dumps(session_entry(req, res), ensure_ascii=False, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()
        return res

    def close(self) -> None:
        self._fh.close()
        self.inner.close()


class ReplayBackend(Backend):
    """Serves recorded responses by request hash; unknown requests are an error."""

    def __init__(self, path, parallelism: int = 1):
        self.path = Path(path)
        self.parallelism = parallelism
        self.entries: dict[str, dict] = {}
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    key = entry["request_hash"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ProtocolError(f"{self.path}:{lineno}: bad session line") from exc
                self.entries.setdefault(key, entry)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        entry = self.entries.get(request_hash(req))
        if entry is None:
            raise MissingRecording(f"no recording for prompt {req.prompt[-60:]!r} {req.params()}")
        lat = entry.get("latency") or {}
        return GenerationResult(
            list(entry["texts"]),
            list((entry.get("usage") or {}).get("completion_tokens") or
                 [whitespace_tokens(t) for t in entry["texts"]]),
            float(lat.get("wall_time_s", 0.0)),
            lat.get("time_to_first_answer_s"),
        )


def record_session(backend: Backend, reqs, path, parallelism: int | None = None) -> Path:
    """Run requests through ``backend`` and persist them as a replayable session."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    reqs = list(reqs)
    results = generate_many(backend, reqs, parallelism)
    with open(path, "w", encoding="utf-8") as fh:
        for req, res in zip(reqs, results):
            fh.write(json.dumps(session_entry(req, res), ensure_ascii=False, sort_keys=True) + "\n")
    return path


def session_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- config -----------------------------------------------------------------

@dataclass
class BackendConfig:
    type: str = "mock"
    base_url: str = "http://localhost:8000/v1"
    model: str = "default"
    api_key_env: str = "OPENAI_API_KEY"
    parallelism: int = 4
    timeout_s: float = 60.0
    stream: bool = False
    path: str | None = None  # replay session
    record_to: str | None = None
    responses: dict = field(default_factory=dict)  # scripted mock
    default: list | None = None
    dataset: str | None = None  # oracle mock
    p_correct: float = 0.7
    p_consistent: float = 1.0
    reasoning_words: int = 30
    seed: int = 0
    latency: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "BackendConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.type not in ("http", "mock", "replay"):
            raise ValueError(f"backend type must be http, mock or replay, not {cfg.type!r}")
        if base_dir is not None:
            for name in ("path", "record_to", "dataset"):
                value = getattr(cfg, name)
                if value and not Path(value).is_absolute():
                    setattr(cfg, name, str(Path(base_dir) / value))
        if cfg.type == "replay" and not cfg.path:
            raise ValueError("replay backend needs a session 'path'")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def build_backend(cfg: BackendConfig) -> Backend:
    if cfg.type == "http":
        backend = HttpBackend(cfg.base_url, cfg.model, api_key_env=cfg.api_key_env,
                              timeout_s=cfg.timeout_s, parallelism=cfg.parallelism,
                              stream=cfg.stream, seed=cfg.seed)
    elif cfg.type == "replay":
        backend = ReplayBackend(cfg.path, parallelism=cfg.parallelism)
    else:
        latency = MockLatency(**cfg.latency)
        if cfg.dataset:
            from .corpus import read_pairs

            backend = MockBackend.from_pairs(
                read_pairs(cfg.dataset), p_correct=cfg.p_correct, p_consistent=cfg.p_consistent,
                reasoning_words=cfg.reasoning_words, seed=cfg.seed, latency=latency,
                parallelism=cfg.parallelism,
            )
        else:
            backend = MockBackend.scripted(cfg.responses, cfg.default, latency=latency,
                                           parallelism=cfg.parallelism)
    if cfg.record_to:
        backend = RecordingBackend(backend, cfg.record_to)
    return backend


def load_backend(path) -> Backend:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return build_backend(BackendConfig.from_dict(data, base_dir=path.parent))
