"""POST with exponential backoff, shared by the remote embedder and chat provider."""

from __future__ import annotations

import logging
import random
import time
from typing import Callable

import httpx

from .errors import RemoteError

log = logging.getLogger(__name__)

RETRY_STATUSES = frozenset({429}) | frozenset(range(500, 600))


def backoff_delay(attempt: int, base: float, rng: random.Random) -> float:
    """Delay before retry number ``attempt`` (0-based): base * 2**attempt plus up to 25% jitter."""
    delay = base * (2**attempt)
    return delay + rng.uniform(0, 0.25 * delay)


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    *,
    headers: dict[str, str] | None = None,
    max_attempts: int = 5,
    base_delay: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> httpx.Response:
    rng = rng or random.Random()
    attempts = max(1, max_attempts)
    last: RemoteError | None = None
    for attempt in range(attempts):
        try:
            resp = client.post(url, json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            last = RemoteError(None, f"timeout: {exc}")
        except httpx.HTTPError as exc:
            raise RemoteError(None, f"{type(exc).__name__}: {exc}") from exc
        else:
            if resp.status_code < 400:
                return resp
            last = RemoteError(resp.status_code, resp.text)
            if resp.status_code not in RETRY_STATUSES:
                raise last
        if attempt + 1 < attempts:
            delay = backoff_delay(attempt, base_delay, rng)
            retry_after = _retry_after(resp) if last.status == 429 else None
            if retry_after is not None:
                delay = max(delay, retry_after)
            log.warning("request to %s failed (%s); retrying in %.2fs", url, last, delay)
            sleep(delay)
    assert last is not None
    raise last


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    try:
        return float(value) if value is not None else None
    except ValueError:
        return None
