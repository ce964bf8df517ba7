import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_phantom():
    from descatter3d.phantom import PhantomSpec, generate_phantom

    return generate_phantom(PhantomSpec(dims=(96, 96, 16), n_dendrites=2, n_spines=10, seed=3, depth_offset=20.0))


@pytest.fixture(scope="session")
def measured_phantom(small_phantom):
    from descatter3d.scatter import NoiseParams, ScatterParams, apply_forward_model

    truth, _ = small_phantom
    return apply_forward_model(truth, ScatterParams(), NoiseParams(50.0, seed=3))


@pytest.fixture(scope="session")
def trained_desk_net(small_phantom, measured_phantom):
    """Desk network briefly trained on cubes of the shared phantom (a few hundred steps)."""
    from descatter3d.dataset import build_dataset
    from descatter3d.neural3d import NetworkConfig, build_network
    from descatter3d.trainer import TrainConfig, train

    truth, _ = small_phantom
    m = build_dataset([("p", measured_phantom, truth)], 40, (32, 32, 16), seed=0)
    net, _ = train(m, build_network(NetworkConfig(), 0), TrainConfig(max_epochs=2, steps_per_epoch=60, lr=1e-3))
    return net


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
