import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sparsemt.config import BackboneSpec, GcpSpec, HeadSpec, Stage2Spec, desk_config

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def small_config(**overrides):
    """Desk grid with narrow layers, so a full forward pass takes well under a second."""
    cfg = desk_config(
        backbone=BackboneSpec(encoder_widths=(4, 8, 8, 8), encoder_depths=(1, 1, 1, 1),
                              decoder_widths=(8, 8, 4, 4), vfe_widths=(4, 4)),
        gcp=GcpSpec(depths=(1, 1), widths=(8, 8)),
        heads=HeadSpec(bev_seg_hidden=8, det_hidden=8),
        stage2=Stage2Spec(point_width=8, box_width=8),
    )
    from dataclasses import replace

    return replace(cfg, **overrides) if overrides else cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return small_config()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
