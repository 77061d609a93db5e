import numpy as np
import pytest

from afxmodel.data import AudioPair, SyntheticDistortion, add_sync_impulses, synth_dry


def shifted_pair(shift: int, seed: int = 0, seconds: float = 3.0) -> AudioPair:
    """Dry/wet pair through the reference device with the wet delayed by ``shift`` samples."""
    dry = add_sync_impulses(synth_dry(seconds, seed))
    wet = np.clip(SyntheticDistortion()(dry), -0.95, 0.95)
    wet[12000] = 0.99
    wet[-12000] = 0.99
    if shift > 0:
        wet = np.concatenate([np.zeros(shift), wet])
    elif shift < 0:
        wet = wet[-shift:]
    return AudioPair(dry, wet, name=f"shift{shift}")


@pytest.fixture
def make_pair():
    return shifted_pair


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
