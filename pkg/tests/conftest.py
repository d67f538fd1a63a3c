from __future__ import annotations

import pytest

from sitsim.config import SimConfig
from sitsim.workloads import TraceOp, default_payload

SMALL = 1 << 20       # 256 counter blocks, three tree levels above them


@pytest.fixture
def small_cfg():
    return SimConfig(mem_size=SMALL, cache_kib=4)


def writes(addrs, seed=0):
    """Trace ops writing a distinct payload to each address in order."""
    return [TraceOp("W", a, default_payload(a, i, seed)) for i, a in enumerate(addrs)]
