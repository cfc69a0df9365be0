import numpy as np
import pytest
import torch


VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def gate_weights(cell):
    """Slice a cell's stacked convolutions into the gate-level names the step oracle expects."""
    hid = cell.hidden_channels
    wx = cell.conv_x.weight.detach().numpy()
    bx = cell.conv_x.bias.detach().numpy()
    wh = cell.conv_h.weight.detach().numpy()
    wm = cell.conv_m.weight.detach().numpy()
    wo = cell.conv_o.weight.detach().numpy()

    def chunk(a, k):
        return a[k * hid:(k + 1) * hid]

    weights = {"W_co": wo[:, :hid], "W_mo": wo[:, hid:], "W_1x1": cell.fuse.weight.detach().numpy()}
    for k, gate in enumerate(["i", "g", "f", "i'", "g'", "f'", "o"]):
        weights[f"W_x{gate}"] = chunk(wx, k)
        weights[f"b_{gate}"] = chunk(bx, k)
    for k, gate in enumerate("igfo"):
        weights[f"W_h{gate}"] = chunk(wh, k)
    for k, gate in enumerate("igf"):
        weights[f"W_m{gate}"] = chunk(wm, k)
    return weights
