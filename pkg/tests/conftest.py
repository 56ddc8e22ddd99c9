import numpy as np
import pytest

from raymvs import diffcore as dc


def gradcheck(fn, arrays, tol=1e-4, eps=1e-5, seed=0, indices=None, joint=False):
    """Compare backward against central differences for ``sum(fn(*xs) * R)``.

    Returns the max relative error over all inputs, or over their concatenation
    when ``joint`` (needed when some input has an identically zero gradient).
    """
    rng = np.random.default_rng(seed)
    with dc.no_grad():
        probe = fn(*[dc.Tensor(np.asarray(a, dtype=np.float64)) for a in arrays])
    weights = rng.normal(size=probe.shape)

    def scalar(*ts):
        out = fn(*ts)
        return dc.tsum(dc.mul(out, dc.Tensor(weights))) if out.shape else out

    leaves = [dc.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    analytic = dc.grad(scalar(*leaves), leaves)
    numeric = dc.finite_difference_grad(scalar, arrays, epsilon=eps, indices=indices)
    if joint:
        worst = dc.relative_error(np.concatenate([a.ravel() for a in analytic]),
                                  np.concatenate([n.ravel() for n in numeric]))
    else:
        worst = max(dc.relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, worst
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed as one PASS/FAIL line per criterion after the run
_VERDICTS: dict[int, str] = {}


def record_verdict(num: int, ok: bool, detail: str) -> None:
    _VERDICTS[num] = f"{'PASS' if ok else 'FAIL'} criterion {num:2d}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[num])
