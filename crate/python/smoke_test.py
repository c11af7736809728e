"""Smoke test for the subgeo_py extension module."""

import json
import math
import tempfile

import subgeo_py as sg


def main():
    names = sg.zoo_names()
    assert len(names) == 6 and "three-state-default" in names

    rate = sg.Rate.polynomial(0.6)
    assert rate.alpha == 0.6
    for u in (0.0, 1.0, 10.0, 1e3):
        closed = (1.0 + 0.4 * u) ** 1.5
        assert math.isclose(rate.rate(u), closed, rel_tol=1e-8), (u, rate.rate(u), closed)
    assert math.isclose(rate.big_phi_inverse(rate.big_phi(50.0)), 50.0, rel_tol=1e-9)

    assert sg.in_g(rate, sg.Psi.power(0.3))
    assert not sg.in_g(rate, sg.Psi.power(0.7))
    assert sg.clt_admissible(sg.Rate.polynomial(0.6), sg.Psi.power(0.1))
    assert not sg.clt_admissible(sg.Rate.polynomial(0.6), sg.Psi.power(0.2))
    assert math.isclose(sg.mdp_rate(4.0, 2.0), 0.5)

    two = sg.Chain.zoo("two-state(0.3,0.4)")
    pi = two.stationary()
    assert math.isclose(pi[0], 0.4 / 0.7, abs_tol=1e-12) and math.isclose(pi[1], 0.3 / 0.7, abs_tol=1e-12)

    ch = sg.Chain.zoo("three-state-default")
    assert ch.n == 3 and ch.small_set == [0]
    holds, margin = ch.verify_drift()
    assert holds and margin >= 0.0
    lhs, rhs = ch.key_relation([1 / 3] * 3, [1.0, 2.0, 5.0], 4)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))

    again = sg.Chain.from_json(ch.to_json())
    assert again.v == ch.v and again.epsilon == ch.epsilon

    cert = ch.certificate(sg.Psi.power(0.3), 0.5)
    assert all(math.isfinite(v) for v in cert.constants.values())
    exact = ch.split_moment([1.0, 1.0, 1.0], 1, linear=True)
    mean, se = ch.estimate_rate_moment(1, 20000, 7)
    assert mean <= cert.r_moment_bound(ch.v[1], False)
    assert exact <= cert.r_moment_bound(ch.v[1], False)

    p = ch.estimate_tail([1.0, 2.0, 3.0], [1.0, 5.0, 20.0], 0, 5000, 3)
    assert p[0] >= p[1] >= p[2]

    with tempfile.TemporaryDirectory() as d:
        code, out = sg.run(json.dumps({"chain": "three-state-default", "study": "tail", "seed": 1, "reps": 2000, "out": d}))
        assert code == 0 and out == d

    try:
        sg.Chain.zoo("reflected-walk")
    except ValueError:
        pass
    else:
        raise AssertionError("real-valued model accepted as a finite chain")

    print("subgeo_py smoke test: ok")


if __name__ == "__main__":
    main()
