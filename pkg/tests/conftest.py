import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cascadenet import autodiff as ad
from cascadenet.network import CascadeNet, NetworkSpec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_net(rng, *, num_blocks=2, width=4, num_classes=3, input_shape=(5,), block_type="mlp",
               dtype="float64", head_mode="single", t_max=0, stats="random"):
    """A freshly initialised network with perturbed affine parameters.

    ``stats="random"`` fills the running statistics with one random row that
    is repeated for every timestep, so eval-mode results do not depend on t.
    """
    spec = NetworkSpec(input_shape=input_shape, num_classes=num_classes, num_blocks=num_blocks, width=width,
                       block_type=block_type, head_mode=head_mode, t_max=t_max, dtype=dtype)
    net = CascadeNet.init(spec, rng)
    for name, p in net.parameters():
        if name.endswith(".scale"):
            p.value[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(".offset") or name.endswith(".b"):
            p.value[...] = rng.normal(0, 0.3, p.shape)
    if stats == "random":
        for s in net.norms.values():
            s.mean[:] = rng.normal(0, 0.5, s.mean.shape[1])
            s.var[:] = rng.uniform(0.5, 2.0, s.var.shape[1])
    return net


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to each array (mutated in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            up = f()
            arr[i] = orig - h
            down = f()
            arr[i] = orig
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fp64():
    with ad.precision(np.float64):
        yield


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
