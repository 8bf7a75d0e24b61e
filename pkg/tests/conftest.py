import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def conv_loop(x, k, stride=1, pad=0):
    """Direct quadruple-loop cross-correlation (test oracle)."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


@pytest.fixture(scope="session")
def toy_cfg():
    from gmic.config import toy_config
    return toy_config()


@pytest.fixture(scope="session")
def toy_ds(tmp_path_factory, toy_cfg):
    from gmic.synthdata import generate_dataset
    out = tmp_path_factory.mktemp("toyds")
    return generate_dataset(toy_cfg.data, out)


@pytest.fixture(scope="session")
def toy_model(toy_cfg):
    from gmic.training import build_model
    model = build_model(toy_cfg)
    return model, model.init_params(0)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number: int, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
