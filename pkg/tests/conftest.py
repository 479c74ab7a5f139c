import numpy as np
import pytest

from streamnerf.wire import StreamEntity, nv12_size


def make_entity(rng, width=4, height=2, timestamp=None):
    return StreamEntity(
        int(rng.integers(0, 2**63)) if timestamp is None else timestamp,
        rng.integers(0, 256, nv12_size(width, height), dtype=np.uint8).tobytes(),
        rng.normal(size=4).astype(np.float32),
        rng.normal(size=(4, 4)).astype(np.float32),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_recording(n, width=4, height=2, invalid=(), fps=30, seed=0):
    """Small recording with valid poses except at ``invalid`` (NaN / zero alternating)."""
    from streamnerf.server import Recording
    from streamnerf.wire import IntrinsicsResponse

    rng = np.random.default_rng(seed)
    intr = IntrinsicsResponse(4.0, 4.0, (width - 1) / 2, (height - 1) / 2, width, height)
    entities = []
    for k in range(n):
        pose = np.eye(4, dtype=np.float32)
        pose[:3, 3] = [0.01 * k, 0.0, -1.0]
        if k in invalid:
            pose = np.full((4, 4), np.nan, np.float32) if k % 2 else np.zeros((4, 4), np.float32)
        entities.append(StreamEntity(
            int(k * 1e7 / fps),
            rng.integers(0, 256, nv12_size(width, height), dtype=np.uint8).tobytes(),
            np.array([4.0, 4.0, (width - 1) / 2, (height - 1) / 2], np.float32),
            pose,
        ))
    return Recording(intr, entities)


# criterion number -> status line, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
