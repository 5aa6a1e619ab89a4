import contextlib

import numpy as np
import pytest

from selfseg import numcore as nc


@contextlib.contextmanager
def relu_signs(record: list):
    """Record the sign pattern of every ReLU input evaluated inside the block."""
    original = nc.relu

    def spy(x):
        record.append(x.data > 0)
        return original(x)

    nc.relu = spy
    try:
        yield record
    finally:
        nc.relu = original


def _same_signs(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


class KinkError(AssertionError):
    """Every probe of some input straddles a ReLU kink."""


def finite_difference_check(build, arrays, h=1e-3, probes=None, rng=None, skip_kinks=False, floor=1e-6):
    """Worst relative error between backward() and central differences.

    ``build(*tensors)`` returns a scalar Tensor.  ``probes`` limits how many
    entries per input are perturbed (all when None).  With ``skip_kinks`` a
    probe whose +-h evaluations flip any ReLU input sign is replaced by another
    entry, since central differences are meaningless across a kink.  At least
    one probe per input must survive, otherwise KinkError is raised.  ``floor``
    bounds the relative-error denominator from below.
    """
    rng = rng or np.random.default_rng(0)
    tensors = [nc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with relu_signs([]) as base_signs:
        loss = build(*tensors)
    nc.backward(loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        flat = a.ravel()
        want = flat.size if probes is None else min(probes, flat.size)
        order = np.arange(flat.size) if probes is None else rng.permutation(flat.size)
        used = 0
        for i in order:
            if used == want:
                break
            values = []
            smooth = True
            for step in (h, -h):
                moved = flat.copy()
                moved[i] += step
                args = [nc.Tensor(moved.reshape(a.shape)) if u is t else nc.Tensor(u.data) for u in tensors]
                with relu_signs([]) as signs:
                    values.append(build(*args).item())
                smooth = smooth and _same_signs(signs, base_signs)
            if skip_kinks and not smooth:
                continue
            used += 1
            num = (values[0] - values[1]) / (2 * h)
            ana = t.grad.ravel()[i]
            worst = max(worst, abs(num - ana) / max(floor, abs(num), abs(ana)))
        if used == 0 and want > 0:
            raise KinkError("no kink-free probe")
        assert used == want or skip_kinks
    return worst


@pytest.fixture
def fd_check():
    return finite_difference_check


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_lines():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
