import numpy as np
import pytest

from triplee.datakit import generate_synthetic


def direct_dft2(plane):
    """O(N^2) reference transform, unnormalized."""
    h, w = plane.shape
    u = np.arange(h)[:, None]
    v = np.arange(w)[:, None]
    wh = np.exp(-2j * np.pi * u * np.arange(h)[None, :] / h)
    ww = np.exp(-2j * np.pi * v * np.arange(w)[None, :] / w)
    out = np.zeros((h, w), dtype=complex)
    for a in range(h):
        for b in range(w):
            out[a, b] = np.sum(plane * wh[a][:, None] * ww[b][None, :])
    return out


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(classes=3, per_domain_count=60, image_size=16, seed=3)


ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = {
    1: "gradient exactness",
    2: "contrastive loss oracle equivalence",
    3: "Fourier-mix identities",
    4: "batch replay structure",
    5: "partition laws",
    6: "singular-policy distribution",
    7: "directional domain-generalization result",
    8: "dataset replay vs. traditional ensemble",
    9: "end-to-end determinism",
    10: "no target-domain leakage",
}


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for a numbered acceptance criterion."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> bool:
        lines[number] = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {CRITERIA[number]}: {detail}"
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        terminalreporter.write_line(lines.get(number, f"criterion {number:2d} [FAIL] {CRITERIA[number]}: not run"))
