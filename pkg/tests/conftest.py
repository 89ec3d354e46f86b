import numpy as np
import pytest

from capvid.embstore import SynthSpec, load_dataset, synthesize


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance" in report.nodeid:
        status = "PASS" if report.passed else (
            "SKIP" if report.skipped else "FAIL")
        name = report.nodeid.split("::", 1)[-1]
        print(f"\nACCEPTANCE {status}: {name}")

CAPTIONERS = ("synthcap-a", "synthcap-b")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A compact synthetic dataset shared by read-only tests."""
    out = tmp_path_factory.mktemp("smallds")
    spec = SynthSpec(videos=30, dim=16, frames_per_video=4,
                     captions_per_captioner=6, p_junk=0.4,
                     queries_per_video=2, eval_fraction=0.3)
    synthesize(123, spec, out)
    return load_dataset(out / "manifest.json")


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)
