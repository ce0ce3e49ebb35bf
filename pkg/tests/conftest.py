import numpy as np
import pytest

from randlab import nn
from randlab.data import SyntheticSpec, make_synthetic


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_err(analytic, numeric) -> float:
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


TINY_CONV = nn.Architecture(
    (2, 7, 7),
    (nn.Conv2D(3), nn.ReLU(), nn.MaxPool(2), nn.Flatten(), nn.Dense(6), nn.ReLU(), nn.OutputLogits(4)),
)
STRIDED_CONV = nn.Architecture((1, 9, 9), (nn.Conv2D(2, kernel=3, stride=2), nn.Flatten(), nn.OutputLogits(3)))


def random_model(arch, seed=0, dtype=np.float64, bias_scale=0.1):
    rng = np.random.default_rng(seed)
    m = nn.init_model(arch, rng, dtype=dtype)
    params = tuple(
        (w, rng.normal(0, bias_scale, b.shape).astype(dtype)) if layer else ()
        for layer in m.params
        for (w, b) in [layer if layer else (None, None)]
    )
    return m.with_params(params)


ARCHS_FOR_GRADCHECK = {
    "dense": nn.mlp_arch(3, (5, 4), 3),
    "conv_pool": TINY_CONV,
    "strided_conv": STRIDED_CONV,
}


@pytest.fixture(scope="session")
def blobs():
    return make_synthetic(SyntheticSpec("blobs", n_per_class=100, noise_std=0.08, seed=0))


@pytest.fixture(scope="session")
def blob_model(blobs):
    return nn.train(nn.mlp_arch(2, (16,), 2), blobs, nn.SgdConfig(0.1, 0.9, 16, 20, seed=0))


def logistic_model(w, b) -> nn.Model:
    """Two-logit model whose logit gap is ``w . x + b``."""
    arch = nn.Architecture((2,), (nn.OutputLogits(2),))
    weights = np.array([[0.0, 0.0], list(w)], dtype=np.float32)
    bias = np.array([0.0, b], dtype=np.float32)
    return nn.Model(arch, ((weights, bias),))


# acceptance criteria record one line each; printed in the terminal summary
CRITERIA: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    CRITERIA[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
