import numpy as np
import pytest
from scipy.optimize import minimize

from countiptw.optim import constr_optim, nelder_mead


def rosen(x):
    return 100 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2


def test_nelder_mead_quadratic():
    res = nelder_mead(lambda x: (x[0] - 1) ** 2 + 2 * (x[1] + 0.5) ** 2, [0.0, 0.0], maxit=2000, reltol=1e-14)
    np.testing.assert_allclose(res.x, [1.0, -0.5], atol=1e-5)


def test_nelder_mead_agrees_with_scipy_on_rosenbrock():
    ours = nelder_mead(rosen, [-1.2, 1.0], maxit=5000, reltol=1e-12)
    ref = minimize(rosen, [-1.2, 1.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxfev": 10000})
    np.testing.assert_allclose(ours.x, ref.x, atol=1e-3)


def test_nelder_mead_rejects_bad_start():
    with pytest.raises(ValueError):
        nelder_mead(lambda x: float("nan"), [0.0])


def test_constr_optim_active_bound():
    # minimise (x - 2)^2 + (y - 2)^2 subject to x + y <= 1 -> (0.5, 0.5)
    ui = np.array([[-1.0, -1.0]])
    ci = np.array([-1.0])
    res = constr_optim(lambda x: (x[0] - 2) ** 2 + (x[1] - 2) ** 2, [0.1, 0.1], ui, ci, maxit=1000)
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-3)
    assert ui @ res.x - ci >= 0


def test_constr_optim_interior_start_required():
    with pytest.raises(ValueError):
        constr_optim(rosen, [1.0, 1.0], [[1.0, 0.0]], [2.0])
