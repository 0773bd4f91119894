import numpy as np
import pytest

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, arrays, name, step=FD_STEP):
    """Central differences of scalar ``f()`` w.r.t. ``arrays[name]`` (perturbed in place)."""
    x = arrays[name]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = f()
        x[i] = orig - step
        lo = f()
        x[i] = orig
        grad[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def assert_grads_match(analytic, f, arrays, rtol=FD_RTOL):
    for name in arrays:
        num = numeric_grad(f, arrays, name)
        err = rel_error(analytic[name], num)
        assert err <= rtol, f"{name}: relative error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(build, arrays, rtol=FD_RTOL, joint=False):
    """Compare ``backward`` against central differences for ``build(tensors) -> scalar``.

    To keep the numeric side independent of the tape, it evaluates ``build``
    on constant tensors under ``no_grad``.  ``joint`` measures one relative
    error over all arrays together, for models where some groups have an
    identically zero gradient (a bias feeding a normalization).
    """
    from fdglab import tensor as T

    leaves = {n: T.Tensor(a.copy(), requires_grad=True) for n, a in arrays.items()}
    analytic = T.backward(build(leaves), leaves)

    def f():
        with T.no_grad():
            return build({n: T.Tensor(a) for n, a in arrays.items()}).item()

    if joint:
        num = np.concatenate([numeric_grad(f, arrays, n).ravel() for n in arrays])
        ana = np.concatenate([analytic[n].ravel() for n in arrays])
        err = rel_error(ana, num)
        assert err <= rtol, f"joint relative error {err:.2e}"
    else:
        assert_grads_match(analytic, f, arrays, rtol)
    return analytic


# acceptance summary ---------------------------------------------------------

ACCEPTANCE = {}


def record(number, title, ok, detail=""):
    """Store one criterion outcome for the end-of-run summary."""
    ACCEPTANCE[number] = f"{'PASS' if ok else 'FAIL'}  [{number:2d}] {title}" + (f": {detail}" if detail else "")
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
