"""Structured object profiles and their schema normalization.

Profiles arrive from model backends in two historical variants: one keyed by
"name" with text colors folded into the "position" string, one keyed by
"filename" with a separate per-text "color" field. Both normalize to a single
canonical form so the rest of the pipeline never branches on variant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

IDENTIFIER_KEYS = ("identifier", "name", "filename")
KNOWN_KEYS = frozenset(IDENTIFIER_KEYS) | {"shape", "colors", "texts", "function", "summary"}


class ProfileError(ValueError):
    """Profile payload cannot be parsed or violates the schema."""


class MalformedProfileError(ProfileError):
    """Raw payload is not valid JSON at all."""


class ProfileSchemaError(ProfileError):
    """Payload parsed but a required field is missing or mistyped."""

    def __init__(self, message: str, fld: str):
        self.field = fld
        super().__init__(f"{message} (field: {fld})")


@dataclass
class ObjectProfile:
    """Normalized text description of one reference instance."""

    identifier: str
    shape: str
    colors: list[dict]
    texts: list[dict]
    function: str
    summary: str
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.identifier:
            raise ProfileSchemaError("identifier must be non-empty", "identifier")
        if not self.summary:
            raise ProfileSchemaError("summary must be non-empty", "summary")


def parse_profile(raw: str | dict) -> ObjectProfile:
    """Normalize a raw profile payload (JSON text or decoded object)."""
    if isinstance(raw, str):
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedProfileError(f"profile is not valid JSON: {exc}") from exc
    else:
        obj = raw
    if not isinstance(obj, dict):
        raise ProfileSchemaError("profile must be a JSON object", "<root>")

    identifier = ""
    for key in IDENTIFIER_KEYS:
        value = obj.get(key)
        if isinstance(value, str) and value:
            identifier = value
            break
    if not identifier:
        raise ProfileSchemaError("no identifier/name/filename key present", "identifier")

    shape = obj.get("shape", "")
    if not isinstance(shape, str):
        raise ProfileSchemaError("shape must be a string", "shape")

    colors = _normalize_entries(obj.get("colors", []), "colors", required_key="color")
    raw_texts = obj.get("texts", [])
    # The generation prompt instructs the model to output the literal string
    # "None" when no text is visible on the item.
    if isinstance(raw_texts, str) and raw_texts.strip().lower() == "none":
        raw_texts = []
    texts = _normalize_entries(raw_texts, "texts", required_key="text")

    function = obj.get("function", "")
    summary = obj.get("summary", "")
    if not isinstance(function, str):
        raise ProfileSchemaError("function must be a string", "function")
    if not isinstance(summary, str):
        raise ProfileSchemaError("summary must be a string", "summary")

    extra = {k: v for k, v in obj.items() if k not in KNOWN_KEYS}
    return ObjectProfile(
        identifier=identifier,
        shape=shape,
        colors=colors,
        texts=texts,
        function=function,
        summary=summary,
        extra=extra,
    )


def _normalize_entries(value, fld: str, required_key: str) -> list[dict]:
    if not isinstance(value, list):
        raise ProfileSchemaError(f"{fld} must be a list", fld)
    entries = []
    for i, entry in enumerate(value):
        if not isinstance(entry, dict) or required_key not in entry:
            raise ProfileSchemaError(f"{fld}[{i}] must be an object with a '{required_key}' key", fld)
        entries.append(dict(entry))
    return entries


_COLOR_KEY_ORDER = ("description", "color")
_TEXT_KEY_ORDER = ("text", "position", "color")


def _ordered_entry(entry: dict, key_order: tuple[str, ...]) -> dict:
    ordered = {k: entry[k] for k in key_order if k in entry}
    ordered.update({k: v for k, v in entry.items() if k not in key_order})
    return ordered


def profile_to_dict(profile: ObjectProfile, identifier_key: str = "identifier") -> dict:
    """Canonical dict form; `identifier_key` picks the serialized key name."""
    d: dict = {
        "shape": profile.shape,
        "colors": [_ordered_entry(e, _COLOR_KEY_ORDER) for e in profile.colors],
        "texts": [_ordered_entry(e, _TEXT_KEY_ORDER) for e in profile.texts],
        identifier_key: profile.identifier,
        "function": profile.function,
        "summary": profile.summary,
    }
    for k in sorted(profile.extra):
        d[k] = profile.extra[k]
    return d


def profile_prompt_json(profile: ObjectProfile) -> str:
    """Single-line JSON used verbatim inside matching prompts."""
    return json.dumps(profile_to_dict(profile, identifier_key="name"), ensure_ascii=False)
