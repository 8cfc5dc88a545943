"""Expression-to-candidate matching: prompt construction, response parsing,
joint and independent strategies, plus a deterministic heuristic used both as
the failure fallback and as an offline mock backend.
"""

from __future__ import annotations

import json
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .backends import BackendError
from .detector import Detection
from .profiles import ObjectProfile, profile_prompt_json
from .refdb import BoundingBox, RasterMask

JOINT_SYSTEM_PROMPT = """You are an expert in information matching. Your task is to match items from a given list of descriptions to corresponding inquiries based on relevance. Each inquiry only matches one item description and appears once in the final output.
Each item description includes positional information, where the first value represents the x-axis (horizontal position) and the second value represents the y-axis (vertical position). A higher x-axis value indicates the item is positioned further to the right. A higher y-axis value indicates the item is positioned lower.
Once you determine the matches, convert them into the specified output format."""

INDEPENDENT_SYSTEM_PROMPT = """You are an expert in information matching. Your task is to match items from a given list of descriptions to the given inquiry based on relevance. Each inquiry only matches one item description and appears once in the final output.
Each item description includes positional information, where the first value represents the x-axis (horizontal position) and the second value represents the y-axis (vertical position). A higher x-axis value indicates the item is positioned further to the right. A higher y-axis value indicates the item is positioned lower.
Once you determine the matches, convert them into the specified output format."""

DEFAULT_MODEL = "gpt-4o"
MAX_ATTEMPTS = 3
# Spatial keywords outrank any plausible token-overlap score.
_SPATIAL_BONUS = 100.0


class MatchError(ValueError):
    pass


class MatchResponseError(MatchError):
    """Base for anything wrong with a backend's match response."""


class MalformedResponseError(MatchResponseError):
    pass


class UnknownIdError(MatchResponseError):
    pass


class DuplicateInquiryError(MatchResponseError):
    pass


@dataclass
class Candidate:
    item_id: int
    instance_id: int
    profile: ObjectProfile
    position: tuple[float, float]
    box: BoundingBox
    mask: RasterMask | None = None


@dataclass
class MatchResult:
    expression_id: int
    item_id: int
    box: BoundingBox
    source: str  # "llm" | "fallback"


def build_candidates(detections: list[Detection],
                     profiles: dict[int, ObjectProfile]) -> list[Candidate]:
    """One candidate per detection, numbered from 1 in (x, y) box order.

    The candidate position is the box top-left corner; masks are carried along
    but never serialized into prompts.
    """
    missing = sorted({d.instance_id for d in detections} - set(profiles))
    if missing:
        raise MatchError(f"no profile for detected instance ids {missing}")
    ordered = sorted(detections, key=lambda d: (d.proposal.box.x, d.proposal.box.y))
    return [
        Candidate(
            item_id=i,
            instance_id=det.instance_id,
            profile=profiles[det.instance_id],
            position=(det.proposal.box.x, det.proposal.box.y),
            box=det.proposal.box,
            mask=det.proposal.mask,
        )
        for i, det in enumerate(ordered, start=1)
    ]


def _format_coord(value: float) -> str:
    return f"{value:g}"


def _render_items(candidates: list[Candidate]) -> str:
    blocks = []
    for cand in candidates:
        x, y = cand.position
        blocks.append(
            f"Item ID: {cand.item_id}:\n"
            f"- Description: {profile_prompt_json(cand.profile)}\n"
            f"- Position: ({_format_coord(x)}, {_format_coord(y)})"
        )
    return "\n\n".join(blocks)


def render_joint_prompt(candidates: list[Candidate],
                        expressions: list[tuple[int, str]]) -> dict:
    if not candidates:
        raise MatchError("no candidates to match against")
    if not expressions:
        raise MatchError("no expressions to match")
    inquiries = "\n".join(
        f"Inquiry ID: {eid}, Inquiry Content: {text}." for eid, text in expressions
    )
    user = (
        "Items' Description:\n"
        f"{_render_items(candidates)}\n\n"
        "Inquiries:\n"
        f"{inquiries}\n\n"
        "You are given a few inquiries. Please find matched item for each inquiry "
        "and list all answers in the given format."
    )
    return {"system": JOINT_SYSTEM_PROMPT, "user": user}


def render_independent_prompt(candidates: list[Candidate], expression: str) -> dict:
    if not candidates:
        raise MatchError("no candidates to match against")
    if not expression:
        raise MatchError("no expressions to match")
    user = (
        "Items' Description:\n"
        f"{_render_items(candidates)}\n\n"
        "Inquiry:\n"
        f"{expression}.\n\n"
        "You are given an inquiry. Please find the best matched item and output "
        "the answer in the given format."
    )
    return {"system": INDEPENDENT_SYSTEM_PROMPT, "user": user}


def _strip_fences(raw: str) -> str:
    raw = raw.strip()
    if raw.startswith("```"):
        raw = re.sub(r"^```[a-zA-Z0-9_-]*\s*", "", raw)
        raw = re.sub(r"\s*```$", "", raw)
    return raw.strip()


def parse_match_response(raw: str, strategy: str, known_item_ids,
                         known_expression_ids) -> list[tuple[int, int]]:
    """Validate a backend response and return (expression_id, item_id) pairs."""
    known_items = set(known_item_ids)
    known_expressions = set(known_expression_ids)
    try:
        payload = json.loads(_strip_fences(raw))
    except json.JSONDecodeError as exc:
        raise MalformedResponseError(f"match response is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MalformedResponseError("match response must be a JSON object")

    if strategy == "independent":
        if len(known_expressions) != 1:
            raise MatchError("independent parsing expects exactly one expression id")
        item_id = payload.get("item_id")
        if not isinstance(item_id, int):
            raise MalformedResponseError("missing integer 'item_id'")
        if item_id not in known_items:
            raise UnknownIdError(f"unknown item_id {item_id}")
        return [(next(iter(known_expressions)), item_id)]

    if strategy != "joint":
        raise MatchError(f"unknown strategy {strategy!r}")
    matches = payload.get("matches")
    if not isinstance(matches, list):
        raise MalformedResponseError("missing 'matches' list")
    pairs: list[tuple[int, int]] = []
    seen: set[int] = set()
    for entry in matches:
        if not isinstance(entry, dict):
            raise MalformedResponseError("each match must be an object")
        inquiry_id = entry.get("inquiry_id")
        item_id = entry.get("item_id")
        if not isinstance(inquiry_id, int) or not isinstance(item_id, int):
            raise MalformedResponseError("matches need integer 'inquiry_id' and 'item_id'")
        if inquiry_id not in known_expressions:
            raise UnknownIdError(f"unknown inquiry_id {inquiry_id}")
        if item_id not in known_items:
            raise UnknownIdError(f"unknown item_id {item_id}")
        if inquiry_id in seen:
            raise DuplicateInquiryError(f"inquiry {inquiry_id} matched more than once")
        seen.add(inquiry_id)
        pairs.append((inquiry_id, item_id))
    return pairs


_TOKEN = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    return set(_TOKEN.findall(text.lower()))


def _profile_tokens(profile: ObjectProfile) -> set[str]:
    parts = [profile.shape, profile.summary]
    for entry in profile.colors:
        parts.extend(str(v) for v in entry.values())
    for entry in profile.texts:
        parts.extend(str(v) for v in entry.values())
    return _tokens(" ".join(parts))


def heuristic_match(candidates: list[Candidate], expression: str) -> int:
    """Deterministic scoring: expression-token overlap with the profile's
    shape/colors/texts/summary, plus decisive spatial-keyword bonuses.
    Ties break toward the lowest item id."""
    if not candidates:
        raise MatchError("no candidates to match against")
    expr_tokens = _tokens(expression)

    scores = {c.item_id: float(len(expr_tokens & _profile_tokens(c.profile))) for c in candidates}

    xs = {c.item_id: c.position[0] for c in candidates}
    ys = {c.item_id: c.position[1] for c in candidates}
    if "leftmost" in expr_tokens:
        _bonus_extreme(scores, xs, min)
    if "rightmost" in expr_tokens:
        _bonus_extreme(scores, xs, max)
    if "top" in expr_tokens:
        _bonus_extreme(scores, ys, min)
    if "bottom" in expr_tokens:
        _bonus_extreme(scores, ys, max)
    if "middle" in expr_tokens:
        target = statistics.median(xs.values())
        closest = min(abs(x - target) for x in xs.values())
        for item_id, x in xs.items():
            if abs(x - target) == closest:
                scores[item_id] += _SPATIAL_BONUS

    return min(scores, key=lambda item_id: (-scores[item_id], item_id))


def _bonus_extreme(scores: dict[int, float], coords: dict[int, float], pick) -> None:
    target = pick(coords.values())
    for item_id, value in coords.items():
        if value == target:
            scores[item_id] += _SPATIAL_BONUS


class HeuristicBackend:
    """Mock chat backend that answers with heuristic_match results in the
    same JSON shapes a live model would produce."""

    def complete(self, request: dict, *, key: str | None = None, context=None) -> str:
        if not context:
            raise BackendError("heuristic backend needs matcher context")
        candidates = context["candidates"]
        if context["strategy"] == "joint":
            matches = [
                {"inquiry_id": eid, "item_id": heuristic_match(candidates, text)}
                for eid, text in context["expressions"]
            ]
            return json.dumps({"matches": matches})
        (eid, text), = context["expressions"]
        return json.dumps({"item_id": heuristic_match(candidates, text)})


def _chat_request(prompt: dict, model: str) -> dict:
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": prompt["system"]},
            {"role": "user", "content": prompt["user"]},
        ],
        "response_format": {"type": "json_object"},
    }


def _fallback_result(candidates, eid: int, text: str) -> MatchResult:
    item_id = heuristic_match(candidates, text)
    box = next(c.box for c in candidates if c.item_id == item_id)
    return MatchResult(expression_id=eid, item_id=item_id, box=box, source="fallback")


def match_joint(candidates: list[Candidate], expressions: list[tuple[int, str]],
                backend, model: str = DEFAULT_MODEL,
                key: str | None = None) -> list[MatchResult]:
    """Resolve all expressions in one backend call; expressions the call leaves
    unresolved (or a fully failed call) fall back to the heuristic."""
    if not candidates:
        return []
    prompt = render_joint_prompt(candidates, expressions)
    request = _chat_request(prompt, model)
    context = {"strategy": "joint", "candidates": candidates, "expressions": expressions}
    by_item = {c.item_id: c for c in candidates}
    known_expressions = [eid for eid, _ in expressions]

    assigned: dict[int, int] = {}
    for _ in range(MAX_ATTEMPTS):
        try:
            raw = backend.complete(request, key=key, context=context)
            assigned = dict(parse_match_response(raw, "joint", by_item, known_expressions))
            break
        except (MatchResponseError, BackendError):
            continue

    results = []
    for eid, text in expressions:
        if eid in assigned:
            item_id = assigned[eid]
            results.append(
                MatchResult(expression_id=eid, item_id=item_id,
                            box=by_item[item_id].box, source="llm")
            )
        else:
            results.append(_fallback_result(candidates, eid, text))
    return results


def _match_one(candidates, eid: int, text: str, backend, model: str,
               key: str | None) -> MatchResult:
    prompt = render_independent_prompt(candidates, text)
    request = _chat_request(prompt, model)
    context = {"strategy": "independent", "candidates": candidates,
               "expressions": [(eid, text)]}
    by_item = {c.item_id: c for c in candidates}
    for _ in range(MAX_ATTEMPTS):
        try:
            raw = backend.complete(request, key=key, context=context)
            (_, item_id), = parse_match_response(raw, "independent", by_item, [eid])
            return MatchResult(expression_id=eid, item_id=item_id,
                               box=by_item[item_id].box, source="llm")
        except (MatchResponseError, BackendError):
            continue
    return _fallback_result(candidates, eid, text)


def match_independent(candidates: list[Candidate], expressions: list[tuple[int, str]],
                      backend, model: str = DEFAULT_MODEL,
                      key_prefix: str | None = None,
                      max_inflight: int = 1) -> list[MatchResult]:
    """Resolve each expression with its own backend call; failures only affect
    their own expression."""
    if not candidates:
        return []

    def key_for(eid: int) -> str | None:
        return f"{key_prefix}.{eid}" if key_prefix else None

    if max_inflight > 1:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            futures = [
                pool.submit(_match_one, candidates, eid, text, backend, model, key_for(eid))
                for eid, text in expressions
            ]
            return [f.result() for f in futures]
    return [
        _match_one(candidates, eid, text, backend, model, key_for(eid))
        for eid, text in expressions
    ]
