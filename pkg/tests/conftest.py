"""Shared fixtures: synthetic surfaces and randomized projection instances."""

import numpy as np
import pytest

from volrepair.market_data import (
    NormalizedSurface,
    StressScenario,
    apply_stress,
    bs_call_price,
)
from volrepair.repair import RepairConfig, prepare_projection


def make_surface(maturities, strikes_list, vol_fns, forward=100.0, discount=0.99):
    """Arbitrage-free synthetic surface priced from smooth smiles."""
    ks_t, cs_t = [], []
    for t, ks, vf in zip(maturities, strikes_list, vol_fns):
        ks = np.asarray(ks, dtype=float)
        cs = np.array([bs_call_price(float(k), vf(float(k)), t) for k in ks])
        ks_t.append(ks)
        cs_t.append(cs)
    n = len(maturities)
    return NormalizedSurface(
        tuple(maturities),
        tuple(ks_t),
        tuple(cs_t),
        (forward,) * n,
        (discount,) * n,
    )


DESK_STRIKES = [0.85, 0.90, 0.95, 0.975, 1.0, 1.025, 1.05, 1.10]


@pytest.fixture
def desk_surface():
    """m=1 desk fixture: 8 strikes, l = 10 after adding 0 and k_max."""
    return make_surface([0.16], [DESK_STRIKES], [lambda k: 0.2 + 0.35 * (k - 1) ** 2])


@pytest.fixture
def desk_stressed(desk_surface):
    """ATM band +20%: the paper-style butterfly stress (creates arbitrage)."""
    scen = StressScenario(bands={0: (((0.975, 1.025), 1.2),)})
    return apply_stress(desk_surface, scen)


TWO_MAT_STRIKES = [0.90, 0.95, 1.0, 1.05, 1.10]


@pytest.fixture
def two_maturity_surface():
    return make_surface(
        [0.16, 0.24],
        [TWO_MAT_STRIKES, TWO_MAT_STRIKES],
        [lambda k: 0.20 + 0.40 * (k - 1) ** 2, lambda k: 0.22 + 0.32 * (k - 1) ** 2],
    )


@pytest.fixture
def calendar_only_surface():
    """Far smile flattened low: each smile clean alone, calendar broken."""
    return make_surface(
        [0.16, 0.24],
        [TWO_MAT_STRIKES, TWO_MAT_STRIKES],
        [lambda k: 0.20 + 0.40 * (k - 1) ** 2, lambda k: 0.15],
    )


def random_instance(rng, m=1, max_interior=4, stress=True):
    """Random surface, stressed until it genuinely carries arbitrage.

    Strike count keeps l <= 6 so dense reference algorithms stay fast.
    """
    from volrepair.constraints import _smile_violations

    n_strikes = int(rng.integers(2, max_interior + 1))
    ks = np.sort(rng.uniform(0.8, 1.2, size=n_strikes))
    while np.min(np.diff(ks, prepend=0.0)) < 0.03:
        ks = np.sort(rng.uniform(0.8, 1.2, size=n_strikes))
    maturities = [0.16, 0.24][:m]
    base_vol = rng.uniform(0.15, 0.3)
    curv = rng.uniform(0.1, 0.5)
    vol_fns = [
        (lambda shift: (lambda k: base_vol + shift + curv * (k - 1) ** 2))(0.02 * i)
        for i in range(m)
    ]
    surface = make_surface(maturities, [ks] * m, vol_fns)
    if stress:
        node = float(ks[int(rng.integers(0, n_strikes))])
        mult = float(rng.uniform(1.3, 1.6))
        while True:
            scen = StressScenario(
                bands={i: (((node - 1e-9, node + 1e-9), mult),) for i in range(m)}
            )
            stressed = apply_stress(surface, scen)
            if _smile_violations(stressed, 1e-8):
                return stressed
            mult *= 1.25
            if mult > 20.0:
                raise AssertionError("could not provoke arbitrage on instance")
    return surface


def prepared(surface, **config_kwargs):
    return prepare_projection(surface, RepairConfig(**config_kwargs))
