"""Smoke test for the market_thermo_py extension.

Build and run from the repository root:

    cargo build --release -p market-thermo-py --features extension-module
    cp target/release/libmarket_thermo_py.so python/market_thermo_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import market_thermo_py as mt  # noqa: E402


def close(a, b, rel):
    return abs(a - b) <= rel * abs(b)


def main():
    # closed forms
    assert close(math.exp(mt.ideal_ln_z(2.0, 3.0, 4)), 72.0, 1e-12)
    assert close(mt.ideal_pressure(1.0, 100.0, 100), 0.99, 1e-12)
    assert mt.ideal_mean_energy(1.0, 100) == 100.0
    assert mt.ideal_npt_volume(1.0, 2.0, 10) == (5.0, 2.5)
    n_mean, n_var = mt.ideal_grand_agents(1.0, 9.0, 0.0)
    assert close(n_mean, 10.0, 1e-12) and close(n_var, 9.0, 1e-12)

    # kinetic market relaxes to an exponential money law
    m = mt.Market(2000, 2000.0, 2000.0)
    m.kinetic(400_000, seed=1)
    assert abs(m.total_money() - 2000.0) < 1e-9
    assert m.ks_exponential() < 0.05, m.ks_exponential()

    # canonical chain
    m = mt.Market(50, 50.0, 50.0, seed=3)
    r = mt.canonical_chain(m, 1.0, steps=300_000, burn_in=50_000, seed=2, replicas=2)
    assert abs(r["mean_energy"] - 50.0) <= 4.0 * r["stderr_energy"], r

    # coupled markets
    verdict, rows = mt.heat_flow(500, 2.0, 500, 1.0, steps=200_000, interval=20_000, seed=5)
    assert verdict["direction_ok"] == 1.0, verdict
    assert rows[-1][3] < 0.0

    # acceptance subset and a config run
    ok, checks = mt.verify(criteria=[10])
    assert ok and checks and all(c[5] for c in checks)
    with tempfile.TemporaryDirectory() as d:
        passed, files = mt.run_config("kind = oracle\nagents = 10, 100\n", d)
        assert passed and any(f.endswith("oracle.csv") for f in map(str, files))

    try:
        mt.Market(0, 1.0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("zero agents accepted")
    print("python smoke test OK")


if __name__ == "__main__":
    main()
