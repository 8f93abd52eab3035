"""Five estimators on one logged dataset.

Builds a synthetic environment with 1000 actions and three 10-way embedding
dimensions, logs 10,000 interactions under a uniform behavior policy and
estimates the value of a near-greedy evaluation policy.

Run with ``python demos/estimator_walkthrough.py``.
"""

import numpy as np

from ope_lab import (
    EnvConfig,
    compute_marginal_weights,
    estimate_dm,
    estimate_dr,
    estimate_ips,
    estimate_mdr,
    estimate_mips,
    fit_qhat,
    init_env,
    marginalize_qhat,
    sample_logged_data,
    true_value,
    vanilla_weights,
)
from ope_lab.oracle import VisitationExpectation

env = init_env(EnvConfig(n_actions=1000), seed=0)
data = sample_logged_data(env, 10_000, seed=1)
print(f"logged {data.n} rounds over {data.n_actions} actions, embeddings {data.cardinalities}")

# %% Ground truth by Monte Carlo over contexts (exact per context)
truth = true_value(env, mode=VisitationExpectation("monte-carlo", n_samples=100_000, seed=2))
print(f"true value {truth.value:.4f} (+- {truth.standard_error:.4f})")

# %% Policies evaluated on the logged contexts
pi_e = env.pi_e(data.context)
pi_b = env.pi_b(data.context)

# %% Vanilla weights are spiky; marginal weights over embeddings are much tamer
w_a = vanilla_weights(data, pi_e).values
w_e = compute_marginal_weights(env, pi_e, pi_b, data)
print(f"max w(x,a) = {w_a.max():.1f}, max w(x,e) = {w_e.values.max():.2f}")

# %% Reward model on context and embedding features, then marginalized over p(e|a)
model = fit_qhat(data)
qhat_xa = marginalize_qhat(env, model)

estimates = {
    "DM": estimate_dm(data, pi_e, qhat_xa),
    "IPS": estimate_ips(data, pi_e),
    "DR": estimate_dr(data, pi_e, qhat_xa),
    "MIPS": estimate_mips(data, w_e),
    "MDR": estimate_mdr(data, pi_e, qhat_xa, model.predict_xae, w_e),
}
for name, est in estimates.items():
    print(f"{name:>5}: {est.value:8.4f}   error {est.value - truth.value:+.4f}")

# %% The doubly robust forms reduce to their weighting-only cousins when q_hat is zero
assert np.isclose(estimate_dr(data, pi_e, 0.0).value, estimates["IPS"].value)
assert np.isclose(estimate_mdr(data, pi_e, 0.0, 0.0, w_e).value, estimates["MIPS"].value)
