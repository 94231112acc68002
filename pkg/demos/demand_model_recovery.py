# %% [markdown]
# Recovering planted gravity-model coefficients
#
# Flows are drawn from a multiplicative model with known coefficients,
# four of which are zero. The fitted log-linear OLS should land close to
# the planted values and leave the zeros insignificant.

# %%
import numpy as np

from evacflow import model, synth
from evacflow.od import DesignRow

names = sorted(synth.PLANTED_COEFFICIENTS)
s = synth.flow_scenario(seed=0)
rows = synth.emit_flows_from_model(s, sigma=0.1, n=5000)
rows = [DesignRow(r.origin_tract, r.dest_tract, r.response,
                  {k: r.predictors[k] for k in names}) for r in rows]

# %%
fit = model.fit_demand_model(rows)
print("VIF removals:", fit.screen.removed)
print(model.format_report(fit.model))

# %%
err = {k: fit.model.coefficients[k] - v for k, v in synth.PLANTED_COEFFICIENTS.items()}
print("largest absolute error: %.4f" % max(map(abs, err.values())))

# %%
# Ten-fold CV; out-of-sample numbers sit near in-sample ones for a well-specified model.
cv = model.cross_validate(fit.design, 10, seed=0)
print("in fold    ", cv.mean_in_sample)
print("out of fold", cv.mean_out_of_sample)

# %%
# Noiseless, unrounded flows are fit exactly.
exact = synth.emit_flows_from_model(s, sigma=0.0, n=800, rounded=False)
exact = [DesignRow(r.origin_tract, r.dest_tract, r.response,
                   {k: r.predictors[k] for k in names}) for r in exact]
fit0 = model.fit_demand_model(exact)
print(np.max(np.abs([fit0.model.coefficients[k] - v
                     for k, v in synth.PLANTED_COEFFICIENTS.items()])))
