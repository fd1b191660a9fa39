"""
Cluster description and the communication/overlap time primitives.

Bandwidths are effective bytes/second as a profiler would measure them; the
ring all-reduce volume factor 2(g-1)/g is applied at time computation.
"""

import math
from dataclasses import dataclass, field

from .helpers.logging import get_logger

logger = get_logger("profile")

DEFAULT_P2P_KEY = "default"


class ProfileSchemaException(ValueError):
    pass


class ProfileInputException(ValueError):
    pass


@dataclass(frozen=True)
class ClusterProfile:
    n: int
    mem_bytes_per_device: tuple
    allreduce_bw: dict
    p2p_bw: dict = field(default_factory=dict)
    latency_s: float = 0.0
    ccoc: float = 0.0

    def p2p_bandwidth(self, boundary=None):
        """Bandwidth of the link between stage `boundary` and `boundary + 1`."""
        if boundary is not None and str(boundary) in self.p2p_bw:
            return self.p2p_bw[str(boundary)]
        return self.p2p_bw[DEFAULT_P2P_KEY]


def divisors(x):
    return [d for d in range(1, x + 1) if x % d == 0]


def load_profile(document):
    """Parse and validate a profile JSON document."""
    if not isinstance(document, dict):
        raise ProfileSchemaException("profile document must be a JSON object")

    try:
        n = int(document["n"])
    except (KeyError, TypeError, ValueError):
        raise ProfileSchemaException("n: missing or not an integer")
    if n < 1:
        raise ProfileSchemaException(f"n: must be >= 1, got {n}")

    mem = document.get("mem_bytes_per_device")
    if not isinstance(mem, list) or len(mem) != n:
        raise ProfileSchemaException(
            f"mem_bytes_per_device: expected a list of {n} limits"
        )
    mem = tuple(_positive(f"mem_bytes_per_device[{i}]", v) for i, v in enumerate(mem))

    raw_allreduce = document.get("allreduce_bw", {})
    if not isinstance(raw_allreduce, dict):
        raise ProfileSchemaException("allreduce_bw: expected an object keyed by group size")
    allreduce_bw = {}
    for key, value in raw_allreduce.items():
        try:
            group = int(key)
        except ValueError:
            raise ProfileSchemaException(f"allreduce_bw: group size {key!r} is not an integer")
        allreduce_bw[group] = _positive(f"allreduce_bw[{key}]", value)
    for group in divisors(n):
        if group > 1 and group not in allreduce_bw:
            raise ProfileSchemaException(
                f"allreduce_bw: missing entry for group size {group}"
            )

    raw_p2p = document.get("p2p_bw", {})
    if not isinstance(raw_p2p, dict) or DEFAULT_P2P_KEY not in raw_p2p:
        raise ProfileSchemaException("p2p_bw: missing 'default' bandwidth")
    p2p_bw = {str(k): _positive(f"p2p_bw[{k}]", v) for k, v in raw_p2p.items()}

    latency_s = document.get("latency_s", 0.0)
    if not _finite(latency_s) or latency_s < 0:
        raise ProfileSchemaException(f"latency_s: must be finite and >= 0, got {latency_s}")

    ccoc = document.get("ccoc", 0.0)
    if not _finite(ccoc) or not 0.0 <= ccoc <= 1.0:
        raise ProfileSchemaException(f"ccoc out of range [0, 1]: {ccoc}")

    return ClusterProfile(
        n=n,
        mem_bytes_per_device=mem,
        allreduce_bw=allreduce_bw,
        p2p_bw=p2p_bw,
        latency_s=float(latency_s),
        ccoc=float(ccoc),
    )


def dump_profile(profile):
    return {
        "n": profile.n,
        "mem_bytes_per_device": list(profile.mem_bytes_per_device),
        "allreduce_bw": {str(g): bw for g, bw in sorted(profile.allreduce_bw.items())},
        "p2p_bw": dict(profile.p2p_bw),
        "latency_s": profile.latency_s,
        "ccoc": profile.ccoc,
    }


def synth_profile(n, link_bw, latency_s=0.0, mem_bytes=16e9, ccoc=0.0):
    """Uniform alpha-beta cluster: one bandwidth for every group and link."""
    if n < 1:
        raise ProfileInputException(f"n must be >= 1, got {n}")
    if not link_bw > 0:
        raise ProfileInputException(f"link_bw must be > 0, got {link_bw}")
    return ClusterProfile(
        n=int(n),
        mem_bytes_per_device=tuple(float(mem_bytes) for _ in range(n)),
        allreduce_bw={g: float(link_bw) for g in divisors(n)},
        p2p_bw={DEFAULT_P2P_KEY: float(link_bw)},
        latency_s=float(latency_s),
        ccoc=float(ccoc),
    )


def stage_memory_limits(profile, deg):
    """Per-stage limit: the smallest device memory in each stage's device group."""
    if deg < 1 or profile.n % deg:
        raise ProfileInputException(f"deg={deg} does not divide n={profile.n}")
    g = profile.n // deg
    mem = profile.mem_bytes_per_device
    return [min(mem[i * g:(i + 1) * g]) for i in range(deg)]


def allreduce_time(volume_bytes, group, profile):
    """Ring all-reduce: 2(g-1)/g * V / bw + 2(g-1) * latency."""
    if group < 1:
        raise ProfileInputException(f"group size must be >= 1, got {group}")
    if group == 1:
        return 0.0
    if group not in profile.allreduce_bw:
        raise ProfileInputException(f"no all-reduce bandwidth profiled for group size {group}")
    bw = profile.allreduce_bw[group]
    steps = 2 * (group - 1)
    return steps / group * volume_bytes / bw + steps * profile.latency_s


def p2p_time(volume_bytes, profile, boundary=None):
    return volume_bytes / profile.p2p_bandwidth(boundary) + profile.latency_s


def overlap(compute_s, comm_s, ccoc):
    """Hide `ccoc` of the overlapping interval min(compute, comm)."""
    return compute_s + comm_s - ccoc * min(compute_s, comm_s)


def _positive(name, value):
    if not _finite(value) or value <= 0:
        raise ProfileSchemaException(f"{name}: must be a positive number, got {value}")
    return float(value)


def _finite(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
