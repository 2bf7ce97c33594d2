"""Why symmetric noise hides orientation flips.

Take a zoo SCM with parent-dependent flips and build its mirror: every
mechanism reads its noise with the sign flipped exactly where the true
orientation is negative. Under gaussian noise the two models have the same
likelihood on every data point but different counterfactuals. With skewed
noise the mirror is no longer a valid explanation of the data.

Run: python3 demos/03_symmetric_noise_blind_spot.py
"""
import numpy as np

from nmscm.scm import Mechanism, TriangularScm
from nmscm.zoo import SweepConfig, make_scm, sample_dataset


def mirror(scm, truth):
    mechs = [scm.mechanisms[0]]
    for i in range(1, scm.d):
        f = scm.mechanisms[i]
        s = (lambda i: lambda c: truth.sign(i, c))(i)
        mechs.append(Mechanism(i, (lambda f, s: lambda c, u: f.forward(c, s(c) * u))(f, s),
                               (lambda f, s: lambda c, v: s(c) * f.invert(c, v))(f, s)))
    return TriangularScm(tuple(mechs), scm.noise, scm.order)


for noise in ("gaussian", "skewed"):
    config = SweepConfig("threshold_flip", noise, 3, 2000, 1)
    scm, truth = make_scm(config)
    twin = mirror(scm, truth)
    bundle = sample_dataset(scm, truth, config)
    v = bundle.v_test
    ll_true, ll_twin = scm.log_likelihood(v), twin.log_likelihood(v)
    finite = np.isfinite(ll_twin)
    gap = np.mean(ll_true[finite] - ll_twin[finite])
    errs = [np.mean((twin.counterfactual(q) - q.truth_cf) ** 2) for q in bundle.cf_queries]
    print(f"{noise:9} mirror gives zero density to {np.mean(~finite):.1%} of test rows; "
          f"mean log-likelihood gap elsewhere {gap:+.4f}; mirror CF-MSE against truth {np.mean(errs):.3f}")

print("\nWith gaussian noise the gap is zero: no estimator that sees only observational data can prefer")
print("the true orientation, so direction accuracy on symmetric-noise families is at chance level.")
