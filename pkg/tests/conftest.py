import dataclasses

import pytest
from hypothesis import settings

from sdiiot.harness import BackgroundConfig, Scenario
from sdiiot.traffic import FlowKind

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def small_scenario(**kw) -> Scenario:
    """A short single-replication run, cheap enough for unit tests."""
    base = Scenario(sites=2, duration_s=0.4, warmup_s=0.1, replications=1, seed=3)
    bg = kw.pop("background", None)
    if bg is not None:
        base = dataclasses.replace(base, background=bg)
    return dataclasses.replace(base, **kw)


@pytest.fixture
def udp_bg():
    return lambda n: BackgroundConfig(FlowKind.UDP_LIKE, n)
