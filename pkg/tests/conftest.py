import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scenario import build_scenario  # noqa: E402

import autoct.pipeline as pipeline  # noqa: E402


@pytest.fixture(scope="session")
def scenario_env(tmp_path_factory):
    """Synthetic dataset + corpora + a recorded LLM cache, built once."""
    env = build_scenario(tmp_path_factory.mktemp("scenario"))
    config = env.make_config(env.root / "run_record")
    report = pipeline.run(config, backend=env.backend())
    env.record_report = report
    env.record_dir = Path(config.output_dir)
    return env


@pytest.fixture(scope="session")
def no_network(scenario_env):
    """After the cache is recorded, any network attempt is a test failure."""

    def boom(*args, **kwargs):
        raise AssertionError("network call attempted during a replay run")

    import requests

    original_post, original_request = requests.post, requests.Session.request
    requests.post = boom
    requests.Session.request = boom
    yield
    requests.post = original_post
    requests.Session.request = original_request
