import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from resus import nn, pipeline  # noqa: E402
from resus.config import load_config  # noqa: E402
from resus.nn import LayerSpec, NetworkSpec, bn, conv, relu  # noqa: E402


def toy_stack(seed=0, widths=(2, 4, 6, 5), size=8, classes=3, bias=True, dtype=np.float32):
    """Plain conv/BN/ReLU stack; every conv after the first is repairable."""
    layers = []
    for a, b in zip(widths[:-1], widths[1:]):
        layers += [conv(a, b, has_bias=bias), bn(b), relu()]
    layers += [LayerSpec("global_avgpool"), LayerSpec("linear", d_in=widths[-1], d_out=classes)]
    net = NetworkSpec(tuple(layers), (widths[0], size, size), classes, arch="toy")
    params = nn.init_parameters(net, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    # non-trivial BN state so the eval path is exercised
    for i, l in enumerate(net.layers):
        if l.kind == "batchnorm":
            p = params[i]
            p["running_mean"] = rng.normal(0, 0.3, l.c).astype(dtype)
            p["running_var"] = rng.uniform(0.5, 2.0, l.c).astype(dtype)
            p["scale"] = rng.uniform(0.5, 1.5, l.c).astype(dtype)
            p["shift"] = rng.normal(0, 0.2, l.c).astype(dtype)
        if l.kind == "conv2d" and l.has_bias:
            params[i]["bias"] = rng.normal(0, 0.1, l.c_out).astype(dtype)
    return net, params


def toy_images(n=64, c=2, size=8, seed=1, dtype=np.float32):
    return np.random.default_rng(seed).normal(size=(n, c, size, size)).astype(dtype)


@pytest.fixture
def toy():
    return toy_stack()


@pytest.fixture(scope="session")
def fixture_run(tmp_path_factory):
    """The pinned tiny-res fixture: default config, trained once per session."""
    out = tmp_path_factory.mktemp("fixture")
    cfg = load_config(overrides={"output_dir": str(out)})
    train, test = pipeline.make_data(cfg)
    net, dense = pipeline.train_dense(cfg, train)
    return cfg, net, dense, train, test


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
