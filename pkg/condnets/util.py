import hashlib
import json
from typing import Any, List, Mapping

from condnets.errors import ArgumentError


def parse_int_list(text: str) -> List[int]:
    """
    Parse a list of integers written as ``"1..4"``, ``"1,2,8"`` or a mix such as ``"1..3,8"``.

    Parameters:
        text (str): the list expression.

    Returns:
        list of int, in the written order.
    """
    values: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = (int(p) for p in part.split("..", 1))
                if hi < lo:
                    raise ArgumentError(f"empty range {part!r}")
                values.extend(range(lo, hi + 1))
            else:
                values.append(int(part))
        except ValueError as e:
            raise ArgumentError(f"cannot read integers from {part!r}") from e
    if not values:
        raise ArgumentError(f"no integers in {text!r}")
    return values


def parse_float_list(text: str) -> List[float]:
    """Comma-separated floats, or ``"start:stop:count"`` for an evenly spaced grid including both ends."""
    text = text.strip()
    try:
        if text.count(":") == 2:
            start, stop, count = text.split(":")
            n = int(count)
            if n < 1:
                raise ArgumentError(f"grid {text!r} has no points")
            if n == 1:
                return [float(start)]
            step = (float(stop) - float(start)) / (n - 1)
            return [float(start) + i * step for i in range(n - 1)] + [float(stop)]
        values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise ArgumentError(f"cannot read numbers from {text!r}") from e
    if not values:
        raise ArgumentError(f"no numbers in {text!r}")
    return values


def config_hash(config: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON form of ``config``."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

