import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def flood_fill_count(binary, connectivity=8):
    """Reference component count by explicit BFS; independent of scipy."""
    binary = np.asarray(binary).astype(bool)
    H, W = binary.shape
    seen = np.zeros_like(binary)
    if connectivity == 8:
        nbrs = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    else:
        nbrs = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    labels = np.zeros((H, W), dtype=int)
    count = 0
    for r in range(H):
        for c in range(W):
            if binary[r, c] and not seen[r, c]:
                count += 1
                stack = [(r, c)]
                seen[r, c] = True
                while stack:
                    a, b = stack.pop()
                    labels[a, b] = count
                    for dr, dc in nbrs:
                        x, y = a + dr, b + dc
                        if 0 <= x < H and 0 <= y < W and binary[x, y] and not seen[x, y]:
                            seen[x, y] = True
                            stack.append((x, y))
    return count, labels


def threshold_net(level=115, mean=0.485, std=0.229):
    """1x1-conv network predicting foreground where the 8-bit intensity
    exceeds ``level``; exact on noise-free synthetic slices."""
    from ptseg.model import NetConfig, build_network

    net = build_network(NetConfig(arch="pointwise", channels=()), seed=0)
    conv = net.body[0]
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        conv.weight[1, 0, 0, 0] = 1.0
        conv.bias[1] = -((level / 255.0 - mean) / std)
    return net


def constant_net(cls=0):
    from ptseg.model import NetConfig, build_network

    net = build_network(NetConfig(arch="pointwise", channels=()), seed=0)
    with torch.no_grad():
        net.body[0].weight.zero_()
        net.body[0].bias.zero_()
        net.body[0].bias[cls] = 5.0
    return net


def synth_slices(n, seed=0, size=32, noise=0.1, regions=(1, 3), radius=(2, 5)):
    from ptseg import data as D
    from ptseg.annotations import SynthConfig

    cfg = SynthConfig(H=size, W=size, noise_level=noise, n_regions_range=regions, radius_range=radius)
    stats = (D.IMAGENET_MEAN, D.IMAGENET_STD)
    return [
        D.make_slice(u8, m, size, stats, seed=seed, slice_index=i)
        for i, (u8, m) in enumerate(D.synth_raw(n, seed, cfg))
    ]


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line (also repeated
    in the terminal summary) and fails the test when ``ok`` is false."""

    def report(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
        request.config.stash.setdefault(ACCEPTANCE_KEY, []).append((n, line))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
