import numpy as np
import pytest

from transfit import emfit, linkfam, simlab, spline


def synth_dataset(n=30, seed=3, alpha=0.0, config="C1"):
    sc = simlab.SimConfig(config=config, alpha=alpha, n=n, seed=seed)
    return simlab.simulate_dataset(sc)


def random_feasible_state(ws, rng, beta_scale=0.4):
    beta = beta_scale * rng.standard_normal(ws.d)
    gamma = np.sort(np.cumsum(rng.uniform(0.05, 0.8, ws.q_n))) - 3.0
    return emfit.ParamState(beta=beta, gamma=gamma)


@pytest.fixture
def small_fit_pieces():
    ds = synth_dataset(n=30, seed=3)
    link = linkfam.PH
    basis = spline.make_knots(ds.finite_endpoints(), ds.n)
    ws = emfit.FitWorkspace(ds, basis, link)
    return ds, basis, link, ws
