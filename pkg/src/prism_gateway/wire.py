"""Wire-level data model: boxed-scalar JSON codec, call envelopes, routes.

Every scalar travelling over the wire is "boxed" — encoded as a one-element
JSON array — so that ``{"error_code":[0]}`` means the number 0 under key
``error_code``. Multi-element arrays are lists, and arrays of equal-length
numeric arrays are rectangular matrices. HTTP *response* documents are
additionally wrapped in a one-element top-level array; request bodies and
worker frames are bare boxed objects.

Canonical values (the image of :func:`decode_boxed`) exclude three shapes
that the codec cannot distinguish from their collapsed forms:

* a one-element list whose element is a scalar (decodes as the scalar),
* a list of equal-length all-numeric lists (decodes as a :class:`Matrix`),
* at document root only, a one-element list holding a map (decodes as the
  map, because that is the response-envelope wrapping).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Union

from .errors import PrismError


class MalformedJson(PrismError):
    """Input is not valid JSON or violates the wire value model."""


class NonCanonicalBoxing(PrismError):
    """A field required to be a boxed scalar decoded to something else."""


class EnvelopeError(PrismError):
    """A request envelope is missing or misusing a standard field."""


class UnknownRoute(PrismError):
    """The path matches none of the three call route shapes."""


class InvalidModelName(PrismError):
    """The model segment of a route violates the name grammar."""


MODEL_NAME_RE = re.compile(r"[a-z0-9_-]{1,64}\Z")

FUNC_GET_DEFAULT_INPUT = "prism_get_default_input"
FUNC_MODEL_RUN = "prism_model_run"
FUNC_GET_ASYNC_RESULTS = "prism_get_async_results"
STANDARD_FUNCS = (FUNC_GET_DEFAULT_INPUT, FUNC_MODEL_RUN, FUNC_GET_ASYNC_RESULTS)

MAX_SEED = 2**53


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


@dataclass(frozen=True)
class Matrix:
    """Rectangular 2-D numeric array, row-major. At least one row, every
    row the same non-zero length, entries finite."""

    rows: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        rows = tuple(tuple(r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        if not rows:
            raise ValueError("matrix needs at least one row")
        width = len(rows[0])
        if width == 0:
            raise ValueError("matrix rows must be non-empty")
        for row in rows:
            if len(row) != width:
                raise ValueError("matrix rows must all have the same length")
            for x in row:
                if not _is_number(x) or not math.isfinite(x):
                    raise ValueError("matrix entries must be finite numbers")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.rows), len(self.rows[0])


# A wire value: scalars, matrices, lists, and string-keyed maps thereof.
ModelValue = Union[None, bool, int, float, str, Matrix, list, dict]


def validate_value(v: ModelValue, path: str = "$") -> None:
    """Raise MalformedJson if `v` is not a valid wire value."""
    if v is None or isinstance(v, (bool, str)):
        return
    if _is_number(v):
        if not math.isfinite(v):
            raise MalformedJson(f"{path}: numbers must be finite")
        return
    if isinstance(v, Matrix):
        return
    if isinstance(v, (list, tuple)):
        for i, item in enumerate(v):
            validate_value(item, f"{path}[{i}]")
        return
    if isinstance(v, Mapping):
        for k, item in v.items():
            if not isinstance(k, str) or not k:
                raise MalformedJson(f"{path}: map keys must be non-empty strings")
            validate_value(item, f"{path}.{k}")
        return
    raise MalformedJson(f"{path}: unsupported value type {type(v).__name__}")


def _box_value(v: ModelValue) -> Any:
    """Encode a value standing on its own (map member or document)."""
    if v is None or isinstance(v, (bool, str)):
        return [v]
    if _is_number(v):
        return [v]
    if isinstance(v, Matrix):
        return [list(row) for row in v.rows]
    if isinstance(v, (list, tuple)):
        return [_box_element(e) for e in v]
    if isinstance(v, Mapping):
        return {_checked_key(k): _box_value(x) for k, x in v.items()}
    raise MalformedJson(f"unsupported value type {type(v).__name__}")


def _box_element(v: ModelValue) -> Any:
    """Encode a list element; the enclosing array is already the box."""
    if v is None or isinstance(v, (bool, str)) or _is_number(v):
        return v
    if isinstance(v, Matrix):
        return [list(row) for row in v.rows]
    if isinstance(v, (list, tuple)):
        return [_box_element(e) for e in v]
    if isinstance(v, Mapping):
        return {_checked_key(k): _box_value(x) for k, x in v.items()}
    raise MalformedJson(f"unsupported value type {type(v).__name__}")


def _checked_key(k: Any) -> str:
    if not isinstance(k, str) or not k:
        raise MalformedJson("map keys must be non-empty strings")
    return k


def _dumps(doc: Any) -> str:
    try:
        return json.dumps(doc, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    except ValueError as exc:
        raise MalformedJson(str(exc)) from exc


def encode_boxed(value: ModelValue) -> str:
    """Encode a value as a response document: boxed scalars, deterministic
    key order (insertion order), and a one-element array wrapped around a
    top-level map."""
    doc = _box_value(value)
    if isinstance(value, Mapping):
        doc = [doc]
    return _dumps(doc)


def encode_boxed_object(value: Mapping[str, ModelValue]) -> str:
    """Encode a map as a bare boxed JSON object (request bodies and worker
    frames carry no top-level array wrap)."""
    if not isinstance(value, Mapping):
        raise MalformedJson("request documents must be maps")
    return _dumps(_box_value(value))


def _reject_constant(name: str) -> Any:
    raise MalformedJson(f"non-finite number literal {name!r} is not allowed")


def decode_boxed(text: str | bytes) -> ModelValue:
    """Decode a boxed JSON document back to its canonical value.

    One-element arrays of scalars collapse to the scalar; arrays of
    equal-length numeric arrays become a Matrix; a one-element array holding
    an object at document root is unwrapped (response envelope).
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedJson(f"invalid UTF-8: {exc}") from exc
    try:
        raw = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc}") from exc
    if isinstance(raw, list) and len(raw) == 1 and isinstance(raw[0], dict):
        return decode_value(raw[0])
    return decode_value(raw)


def decode_first_document(text: str) -> tuple[ModelValue, str]:
    """Decode the first complete JSON document in `text`; return the value
    and whatever trails it. Used to enforce one-shot worker framing."""
    decoder = json.JSONDecoder(parse_constant=_reject_constant)
    stripped = text.lstrip()
    if not stripped:
        raise MalformedJson("empty document")
    try:
        raw, end = decoder.raw_decode(stripped)
    except json.JSONDecodeError as exc:
        raise MalformedJson(f"invalid JSON: {exc}") from exc
    if isinstance(raw, list) and len(raw) == 1 and isinstance(raw[0], dict):
        value: ModelValue = decode_value(raw[0])
    else:
        value = decode_value(raw)
    return value, stripped[end:]


def decode_value(raw: Any) -> ModelValue:
    """Decode one parsed-JSON node (no top-level envelope unwrapping)."""
    if raw is None or isinstance(raw, (bool, str)):
        return raw
    if _is_number(raw):
        return raw
    if isinstance(raw, dict):
        out: dict[str, ModelValue] = {}
        for k, v in raw.items():
            if not k:
                raise MalformedJson("map keys must be non-empty strings")
            out[k] = decode_value(v)
        return out
    if isinstance(raw, list):
        if len(raw) == 1 and (raw[0] is None or isinstance(raw[0], (bool, int, float, str))):
            return raw[0]
        if raw and all(_is_numeric_row(e) for e in raw):
            width = len(raw[0])
            if width >= 1 and all(len(e) == width for e in raw):
                return Matrix(tuple(tuple(e) for e in raw))
        return [decode_value(e) for e in raw]
    raise MalformedJson(f"unsupported JSON node {type(raw).__name__}")


def _is_numeric_row(e: Any) -> bool:
    return isinstance(e, list) and len(e) >= 1 and all(_is_number(x) for x in e)


def to_plain(value: ModelValue) -> Any:
    """Convert a wire value to plain JSON-able data (matrices become nested
    lists, scalars stay bare). Used for human-editable files and pretty
    output."""
    if isinstance(value, Matrix):
        return [list(row) for row in value.rows]
    if isinstance(value, (list, tuple)):
        return [to_plain(e) for e in value]
    if isinstance(value, Mapping):
        return {k: to_plain(v) for k, v in value.items()}
    return value


def from_plain(obj: Any) -> ModelValue:
    """Inverse of :func:`to_plain` for user-authored plain JSON: lists of
    equal-length numeric lists are read back as matrices."""
    if isinstance(obj, dict):
        return {_checked_key(k): from_plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        if obj and all(_is_numeric_row(e) for e in obj):
            width = len(obj[0])
            if width >= 1 and all(len(e) == width for e in obj):
                return Matrix(tuple(tuple(e) for e in obj))
        return [from_plain(e) for e in obj]
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if _is_number(obj):
        if not math.isfinite(obj):
            raise MalformedJson("numbers must be finite")
        return obj
    raise MalformedJson(f"unsupported value type {type(obj).__name__}")


class RouteMode(Enum):
    SYNC = "SYNC"
    ASYNC_SUBMIT = "ASYNC_SUBMIT"
    ASYNC_STATUS = "ASYNC_STATUS"


@dataclass(frozen=True)
class RouteTarget:
    model: str
    mode: RouteMode


def parse_route(path: str) -> RouteTarget:
    """Map a URL path to a route target.

    ``/route/{m}/run`` → SYNC, ``/route/{m}/async/run`` → ASYNC_SUBMIT,
    ``/route/{m}/async/status`` → ASYNC_STATUS.
    """
    segments = path.split("/")
    if len(segments) < 4 or segments[0] != "" or segments[1] != "route":
        raise UnknownRoute(path)
    tail = segments[2:]
    if len(tail) == 2 and tail[1] == "run":
        model, mode = tail[0], RouteMode.SYNC
    elif len(tail) == 3 and tail[1] == "async" and tail[2] == "run":
        model, mode = tail[0], RouteMode.ASYNC_SUBMIT
    elif len(tail) == 3 and tail[1] == "async" and tail[2] == "status":
        model, mode = tail[0], RouteMode.ASYNC_STATUS
    else:
        raise UnknownRoute(path)
    if not MODEL_NAME_RE.fullmatch(model):
        raise InvalidModelName(model or "<empty>")
    return RouteTarget(model=model, mode=mode)


@dataclass(frozen=True)
class RunEnvelope:
    """A parsed call body: which standard function to run and with what."""

    func: str
    model_input: dict | None = None
    email_address: str | None = None
    seed: int | None = None
    token: str | None = None


def parse_run_envelope(body: str | bytes) -> RunEnvelope:
    """Parse and validate a request body into a RunEnvelope.

    Unknown fields are ignored. `token` must be present exactly when `func`
    is the async-results function.
    """
    value = decode_boxed(body)
    if not isinstance(value, dict):
        raise EnvelopeError("request body must be a JSON object")

    func = value.get("func")
    if func is None:
        raise EnvelopeError("missing required field 'func'")
    if not isinstance(func, str):
        raise NonCanonicalBoxing("'func' must be a single boxed string")
    if func not in STANDARD_FUNCS:
        raise EnvelopeError(
            f"unsupported func {func!r}; expected one of {', '.join(STANDARD_FUNCS)}"
        )

    model_input = value.get("model_input")
    if model_input is not None and not isinstance(model_input, dict):
        raise EnvelopeError("'model_input' must be a JSON object of parameters")

    email = value.get("email_address")
    if email is not None and not isinstance(email, str):
        raise NonCanonicalBoxing("'email_address' must be a single boxed string")

    seed = value.get("seed")
    if seed is not None:
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise NonCanonicalBoxing("'seed' must be a single boxed integer")
        if seed < 0 or seed > MAX_SEED:
            raise EnvelopeError(f"'seed' must be an integer in [0, {MAX_SEED}]")

    token = value.get("token")
    if token is not None and not isinstance(token, str):
        raise NonCanonicalBoxing("'token' must be a single boxed string")
    if func == FUNC_GET_ASYNC_RESULTS and token is None:
        raise EnvelopeError("'token' is required with func prism_get_async_results")
    if func != FUNC_GET_ASYNC_RESULTS and token is not None:
        raise EnvelopeError("'token' is only valid with func prism_get_async_results")

    return RunEnvelope(
        func=func,
        model_input=model_input,
        email_address=email,
        seed=seed,
        token=token,
    )
