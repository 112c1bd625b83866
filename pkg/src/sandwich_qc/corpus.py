"""Noisy/clean query pair construction by single-error injection."""
from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import regex

from .textedit import has_ascii_space, segment

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


class ErrorType(str, enum.Enum):
    WRONG_WORDS = "WrongWords"
    MISSING_WORDS = "MissingWords"
    DISORDER_WORDS = "DisorderWords"

    @classmethod
    def parse(cls, value) -> "ErrorType":
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace("-", "").replace(" ", "").lower()
        for member in cls:
            if member.value.lower() == key or member.value.lower().removesuffix("words") == key:
                return member
        raise ValueError(f"unknown error type {value!r}")


class CorpusError(Exception):
    pass


class InjectionError(CorpusError):
    pass


class SkipTooShort(InjectionError):
    pass


class NoConfusableUnit(InjectionError):
    pass


class NoValidPosition(InjectionError):
    """e.g. a disorder request on a query whose adjacent units are all identical."""


@dataclass
class QueryPair:
    id: str
    q_noise: str
    q_clean: str
    error_type: ErrorType
    error_pos: int
    split: str = "train"
    history: list | None = None  # [(kind, pos), ...] when more than one error was composed

    def __post_init__(self):
        self.error_type = ErrorType.parse(self.error_type)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "q_noise": self.q_noise,
            "q_clean": self.q_clean,
            "error_type": self.error_type.value,
            "error_pos": self.error_pos,
            "split": self.split,
        }
        if self.history:
            d["history"] = [[k.value if isinstance(k, ErrorType) else k, p] for k, p in self.history]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QueryPair":
        return cls(
            id=str(d["id"]),
            q_noise=d["q_noise"],
            q_clean=d["q_clean"],
            error_type=d["error_type"],
            error_pos=int(d["error_pos"]),
            split=d.get("split", "train"),
            history=d.get("history"),
        )


def to_jsonl_line(pair: QueryPair) -> str:
    return json.dumps(pair.to_dict(), ensure_ascii=False, separators=(",", ":"))


def read_pairs(path) -> list[QueryPair]:
    with open(path, encoding="utf-8") as fh:
        return [QueryPair.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(to_jsonl_line(p) + "\n")


# --- units -----------------------------------------------------------------

_TOKEN_RE = regex.compile(r"\S+")


def split_units(text: str) -> tuple[list[str], list[str]]:
    """Editable units plus the separators around them.

    Returns (units, seps) with len(seps) == len(units) + 1 such that
    seps[0] + units[0] + seps[1] + ... + units[-1] + seps[-1] == text.
    """
    if not has_ascii_space(text):
        units = segment(text)
        return units, [""] * (len(units) + 1)
    units, seps, cursor = [], [], 0
    for m in _TOKEN_RE.finditer(text):
        seps.append(text[cursor:m.start()])
        units.append(m.group())
        cursor = m.end()
    seps.append(text[cursor:])
    return units, seps


def join_units(units: list[str], seps: list[str]) -> str:
    out = [seps[0]]
    for u, s in zip(units, seps[1:]):
        out.append(u)
        out.append(s)
    return "".join(out)


def query_units(text: str) -> list[str]:
    return split_units(text)[0]


# --- confusion tables -------------------------------------------------------

class ConfusionTable(dict):
    """unit -> list of confusable units (never just the unit itself)."""

    def __init__(self, mapping=None):
        super().__init__()
        for unit, options in (mapping or {}).items():
            opts = [o for o in dict.fromkeys(options) if o and o != unit]
            if not opts:
                raise ValueError(f"confusion entry for {unit!r} has no usable alternative")
            self[unit] = opts

    @classmethod
    def load(cls, path) -> "ConfusionTable":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("confusion table must be a JSON object")
        return cls(data)


# --- ingestion --------------------------------------------------------------

@dataclass
class IngestResult:
    entries: list[tuple[str, str]]
    diagnostics: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


def ingest_clean(path, format: str | None = None) -> IngestResult:
    """Read (id, query) rows from TSV or JSONL, dropping blanks and duplicate queries."""
    path = Path(path)
    if format is None:
        format = "jsonl" if path.suffix.lower() in (".jsonl", ".json") else "tsv"
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise CorpusError(f"{path}: empty corpus file")

    rows, diagnostics = [], []
    if format == "tsv":
        reader = csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE)
        for lineno, row in enumerate(reader, 1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                diagnostics.append(f"line {lineno}: expected 2 tab-separated fields, got {len(row)}")
                continue
            rows.append((lineno, row[0], row[1]))
    elif format == "jsonl":
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append((lineno, obj["id"], obj["query"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                diagnostics.append(f"line {lineno}: {exc.__class__.__name__}: {exc}")
    else:
        raise ValueError(f"unsupported corpus format {format!r}")

    seen, entries = set(), []
    for lineno, qid, query in rows:
        if not isinstance(query, str):
            diagnostics.append(f"line {lineno}: query is not a string")
            continue
        query = query.strip()
        qid = str(qid).strip()
        if not query or not qid:
            diagnostics.append(f"line {lineno}: empty id or query")
            continue
        if query in seen:
            continue
        seen.add(query)
        entries.append((qid, query))
    if not entries:
        raise CorpusError(f"{path}: no valid rows ({len(diagnostics)} rejected)")
    return IngestResult(entries, diagnostics)


# --- injection --------------------------------------------------------------

def derive_seed(global_seed: int, *parts) -> int:
    h = hashlib.sha256(repr((int(global_seed),) + tuple(str(p) for p in parts)).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "big")


def _min_units(kind: ErrorType) -> int:
    return 1 if kind is ErrorType.WRONG_WORDS else 2


def _resegments(units, seps) -> bool:
    """True when the joined text splits back into exactly ``units``.

    A multi-character replacement in an unspaced query, or a deletion that
    removes the last space, would otherwise change the unit boundaries.
    """
    return split_units(join_units(units, seps))[0] == units


def _draw(rng, options, accept):
    """Uniform draw from ``options`` that passes ``accept``; rejected picks are removed."""
    options = list(options)
    while options:
        k = rng.randrange(len(options))
        if accept(options[k]):
            return options[k]
        options.pop(k)
    return None


def _apply_one(units, seps, kind, rng, confusions, alphabet, fallback):
    """Inject one error into (units, seps) in place; returns the position used."""
    n = len(units)
    if n < _min_units(kind):
        raise SkipTooShort(f"{kind.value} needs at least {_min_units(kind)} units, got {n}")

    if kind is ErrorType.WRONG_WORDS:
        if fallback and alphabet:
            candidates = list(range(n))
        else:
            candidates = [i for i in range(n) if units[i] in confusions]
        if not candidates:
            raise NoConfusableUnit("no unit has a confusion entry and fallback is disabled")
        pos = candidates[rng.randrange(len(candidates))]

        def fits(option):
            trial = list(units)
            trial[pos] = option
            return _resegments(trial, seps)

        options = [o for o in confusions.get(units[pos], ()) if o and o != units[pos]]
        choice = _draw(rng, options, fits)
        if choice is None:
            if not fallback:
                raise NoConfusableUnit(f"{units[pos]!r} has no usable confusion entry")
            choice = _draw(rng, [u for u in alphabet if u != units[pos]], fits)
            if choice is None:
                raise NoConfusableUnit("corpus alphabet has no alternative unit")
        units[pos] = choice
        return pos

    if kind is ErrorType.MISSING_WORDS:
        def fits(pos):
            u, s = list(units), list(seps)
            del u[pos]
            # drop the separator before the unit (or after it, for the first unit)
            del s[pos if pos > 0 else 1]
            return _resegments(u, s)

        pos = _draw(rng, range(n), fits)
        if pos is None:
            raise NoValidPosition("every deletion would change the unit boundaries")
        del units[pos]
        del seps[pos if pos > 0 else 1]
        return pos

    def fits(pos):
        u = list(units)
        u[pos], u[pos + 1] = u[pos + 1], u[pos]
        return _resegments(u, seps)

    candidates = [i for i in range(n - 1) if units[i] != units[i + 1]]
    if not candidates:
        raise NoValidPosition("every adjacent unit pair is identical; a swap would be a no-op")
    pos = _draw(rng, candidates, fits)
    if pos is None:
        raise NoValidPosition("every swap would change the unit boundaries")
    units[pos], units[pos + 1] = units[pos + 1], units[pos]
    return pos


def inject_error(
    q_clean: str,
    kind,
    rng_seed: int,
    confusions=None,
    *,
    alphabet=None,
    fallback: bool = True,
    pair_id: str = "",
    split: str = "train",
    repeat: int = 1,
    max_tries: int = 32,
) -> QueryPair:
    """Build one (q_noise, q_clean) pair with exactly ``repeat`` errors of ``kind``.

    Positions are uniform over valid unit indices. With ``fallback`` on, a unit
    missing from the confusion table is replaced by a random distinct unit of
    ``alphabet`` (the corpus alphabet; defaults to the query's own units).
    """
    kind = ErrorType.parse(kind)
    confusions = confusions if confusions is not None else {}
    units0, seps0 = split_units(q_clean)
    if alphabet is None:
        alphabet = sorted(set(units0))
    rng = random.Random(rng_seed)

    if repeat == 1:
        units, seps = list(units0), list(seps0)
        pos = _apply_one(units, seps, kind, rng, confusions, alphabet, fallback)
        return QueryPair(pair_id, join_units(units, seps), q_clean, kind, pos, split)

    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    # Composed errors: retry until each injection moves the query one step
    # further away (a later swap must not undo an earlier one).
    for _ in range(max_tries):
        units, seps, history = list(units0), list(seps0), []
        for step in range(repeat):
            pos = _apply_one(units, seps, kind, rng, confusions, alphabet, fallback)
            history.append((kind, pos))
            if osa_distance(units, units0) != step + 1:
                break
        else:
            return QueryPair(pair_id, join_units(units, seps), q_clean, kind, history[0][1],
                             split, history)
    raise NoValidPosition(f"could not compose {repeat} independent errors in {max_tries} tries")


def osa_distance(a, b) -> int:
    """Unit edit distance with adjacent transposition (optimal string alignment)."""
    n, m = len(a), len(b)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = a[i - 1] != b[j - 1]
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
            if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                d[i][j] = min(d[i][j], d[i - 2][j - 2] + 1)
    return d[n][m]


def invert_error(pair: QueryPair) -> str:
    """Undo a single injected error using error_pos (and the clean unit it replaced)."""
    units, seps = split_units(pair.q_noise)
    clean_units, clean_seps = split_units(pair.q_clean)
    pos = pair.error_pos
    if pair.error_type is ErrorType.WRONG_WORDS:
        units[pos] = clean_units[pos]
    elif pair.error_type is ErrorType.MISSING_WORDS:
        units.insert(pos, clean_units[pos])
        if pos == 0:
            seps.insert(1, clean_seps[1])
        else:
            seps.insert(pos, clean_seps[pos])
    else:
        units[pos], units[pos + 1] = units[pos + 1], units[pos]
    return join_units(units, seps)


# --- datasets ---------------------------------------------------------------

def parse_mix(spec) -> dict[ErrorType, float]:
    """Accept a dict or a "a,b,c" string (fractions like 1/3 allowed) in enum order."""
    if isinstance(spec, dict):
        mix = {ErrorType.parse(k): float(v) for k, v in spec.items()}
    else:
        parts = [p for p in str(spec).split(",") if p.strip()]
        if len(parts) != 3:
            raise ValueError("mix needs three comma-separated proportions (wrong, missing, disorder)")
        mix = {k: float(Fraction(p.strip())) for k, p in zip(ErrorType, parts)}
    if any(v < 0 for v in mix.values()):
        raise ValueError("mix proportions must be non-negative")
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError(f"mix proportions sum to {sum(mix.values())}, not 1")
    return {k: mix.get(k, 0.0) for k in ErrorType}


def _allocate(n: int, mix: dict[ErrorType, float]) -> list[ErrorType]:
    """Largest-remainder rounding of n * mix, ties broken in enum order."""
    raw = {k: n * v for k, v in mix.items()}
    counts = {k: int(r) for k, r in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(ErrorType, key=lambda k: -(raw[k] - counts[k]))[:left]:
        counts[k] += 1
    return [k for k in ErrorType for _ in range(counts[k])]


@dataclass
class BuildStats:
    requested: int = 0
    emitted: int = 0
    skipped: dict = field(default_factory=dict)

    def skip(self, reason: str):
        self.skipped[reason] = self.skipped.get(reason, 0) + 1


def build_dataset(
    clean,
    mix=None,
    seed: int = 0,
    *,
    confusions=None,
    fallback: bool = True,
    repeat: int = 1,
    split_sizes: dict | None = None,
    stats: BuildStats | None = None,
) -> list[QueryPair]:
    """Inject one error per clean query, with per-type counts following ``mix``.

    ``clean`` is a list of (id, query). ``split_sizes`` maps dev/test to
    counts; everything else is train. Queries with fewer than two units are
    skipped and counted in ``stats``.
    """
    clean = list(clean)
    if not clean:
        raise CorpusError("empty clean corpus")
    mix = parse_mix(mix if mix is not None else {k: 1 / 3 for k in ErrorType})
    stats = stats if stats is not None else BuildStats()

    usable = []
    for qid, q in clean:
        if len(query_units(q)) < 2:
            stats.skip("too_short")
        else:
            usable.append((qid, q))
    stats.requested = len(clean)

    rng = random.Random(derive_seed(seed, "kinds"))
    kinds = _allocate(len(usable), mix)
    rng.shuffle(kinds)

    alphabet = sorted({u for _, q in usable for u in query_units(q)})
    pairs = []
    for (qid, q), kind in zip(usable, kinds):
        try:
            pair = inject_error(
                q, kind, derive_seed(seed, qid), confusions,
                alphabet=alphabet, fallback=fallback, pair_id=qid, repeat=repeat,
            )
        except InjectionError as exc:
            stats.skip(exc.__class__.__name__)
            continue
        pairs.append(pair)

    sizes = dict(split_sizes or {})
    n_test, n_dev = int(sizes.get("test", 0)), int(sizes.get("dev", 0))
    if n_test + n_dev > len(pairs):
        raise CorpusError(f"split sizes dev={n_dev} test={n_test} exceed {len(pairs)} pairs")
    order = list(range(len(pairs)))
    random.Random(derive_seed(seed, "splits")).shuffle(order)
    for rank, idx in enumerate(order):
        pairs[idx].split = "test" if rank < n_test else "dev" if rank < n_test + n_dev else "train"
    stats.emitted = len(pairs)
    log.info("built %d pairs from %d queries (skipped %s)", len(pairs), len(clean), stats.skipped)
    return pairs


def check_pair(pair: QueryPair) -> list[str]:
    """Structural invariants of a single-error pair; returns violation messages."""
    problems = []
    noise, clean = query_units(pair.q_noise), query_units(pair.q_clean)
    if pair.q_noise == pair.q_clean:
        problems.append("q_noise equals q_clean")
    kind = pair.error_type
    if kind is ErrorType.WRONG_WORDS and len(noise) != len(clean):
        problems.append("unit count changed by a substitution")
    if kind is ErrorType.MISSING_WORDS and len(noise) != len(clean) - 1:
        problems.append("deletion did not remove exactly one unit")
    if kind is ErrorType.DISORDER_WORDS and sorted(noise) != sorted(clean):
        problems.append("swap changed the unit multiset")
    if pair.history is None:
        if osa_distance(noise, clean) != 1:
            problems.append("unit edit distance is not 1")
        elif split_units(invert_error(pair))[0] != clean:
            problems.append("inverse edit at error_pos does not restore q_clean")
    return problems
