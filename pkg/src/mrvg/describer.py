"""One-shot structured description of each reference instance's detail image."""

from __future__ import annotations

import base64
from concurrent.futures import ThreadPoolExecutor

from .backends import BackendError
from .profiles import ObjectProfile, ProfileError, parse_profile
from .refdb import ReferenceInstance

DESCRIBE_SYSTEM_PROMPT = (
    "You are an expert at structured data extraction. You will be given a picture. "
    "Please extract information and convert it into the given structure."
)

DESCRIBE_USER_PROMPT = """You are given an image of an item on a flat surface (on a table, ground, etc.). Please first carefully read and understand the image in detail. If there are multiple items, only carefully look through one of them. Then, describe the item in detail by following the steps and format below.

1. Shape: Please describe the shape or type of the item, such as a bottle, bag, round item, square item, etc.

2. Colors: Please describe all the colors on or in the item, such as label colors, text colors, cover colors, etc. The item may be covered by multiple colors. Please describe all of them one by one. For example, bottle: transparent, liquid in the bottle: black, the main color of the bag: green, the text on the item: black, etc.

3. Texts: Please extract all texts on the item with the position and color of the text. For example, "ingredients: on the surface, black". If there is no recognized text, please only output "None".

4. Function: Please describe the usage of the item in the given picture.

5. Summary of the item: Please summarize the above descriptions in sentences one-by-one."""

DEFAULT_MODEL = "gpt-4o-mini"
MAX_ATTEMPTS = 3


class DescribeError(Exception):
    pass


def _image_data_url(path) -> str:
    payload = base64.b64encode(path.read_bytes()).decode("ascii")
    return f"data:image/png;base64,{payload}"


def build_description_prompt(instance: ReferenceInstance) -> dict:
    """Message pair for one instance; only the image part varies per instance."""
    if not instance.detail_image_path.exists():
        raise DescribeError(f"instance {instance.name!r} has no detail image")
    return {
        "system": DESCRIBE_SYSTEM_PROMPT,
        "user": [
            {"type": "image_url", "image_url": {"url": _image_data_url(instance.detail_image_path)}},
            {"type": "text", "text": DESCRIBE_USER_PROMPT},
        ],
    }


def generate_profile(instance: ReferenceInstance, backend,
                     model: str = DEFAULT_MODEL) -> ObjectProfile:
    """Request and parse one profile, retrying malformed responses."""
    prompt = build_description_prompt(instance)
    request = {
        "model": model,
        "messages": [
            {"role": "system", "content": prompt["system"]},
            {"role": "user", "content": prompt["user"]},
        ],
        "response_format": {"type": "json_object"},
    }
    last_error: Exception | None = None
    for _ in range(MAX_ATTEMPTS):
        try:
            raw = backend.complete(request, key=instance.name)
            return parse_profile(raw)
        except (ProfileError, BackendError) as exc:
            last_error = exc
    raise DescribeError(
        f"profile generation for {instance.name!r} failed after {MAX_ATTEMPTS} attempts: {last_error}"
    ) from last_error


def describe_all(instances: list[ReferenceInstance], backend,
                 model: str = DEFAULT_MODEL, max_inflight: int = 4) -> dict[int, ObjectProfile]:
    """Generate profiles for many instances with bounded request concurrency."""
    results: dict[int, ObjectProfile] = {}
    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as pool:
        futures = {
            pool.submit(generate_profile, inst, backend, model): inst.instance_id
            for inst in instances
        }
        for future, instance_id in futures.items():
            results[instance_id] = future.result()
    return results
