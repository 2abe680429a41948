"""UTC timestamps (integer seconds) and calendar arithmetic for TTLs."""

from __future__ import annotations

import calendar
import time
from datetime import date, datetime, timezone

from .pdtype import Duration


def utcnow() -> int:
    return int(time.time())


def parse_instant(text: str) -> int:
    """Parse ``YYYY-MM-DD`` or an ISO-8601 datetime (naive means UTC)."""
    text = text.strip()
    try:
        if len(text) == 10:
            d = date.fromisoformat(text)
            dt = datetime(d.year, d.month, d.day, tzinfo=timezone.utc)
        else:
            dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
    except ValueError:
        raise ValueError(f"not a date or datetime: {text!r}") from None
    return int(dt.timestamp())


def to_datetime(ts: int) -> datetime:
    return datetime.fromtimestamp(ts, tz=timezone.utc)


def format_instant(ts: int) -> str:
    return to_datetime(ts).strftime("%Y-%m-%dT%H:%M:%SZ")


def year_of(ts: int) -> int:
    return to_datetime(ts).year


def add_duration(ts: int, ttl: Duration) -> int:
    """Add a calendar duration; month/year steps clamp to the month's last day."""
    dt = to_datetime(ts)
    if ttl.unit == "D":
        return ts + ttl.magnitude * 86400
    months = ttl.magnitude * (12 if ttl.unit == "Y" else 1)
    total = dt.month - 1 + months
    year, month = dt.year + total // 12, total % 12 + 1
    day = min(dt.day, calendar.monthrange(year, month)[1])
    return int(dt.replace(year=year, month=month, day=day).timestamp())
