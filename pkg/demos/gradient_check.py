"""
Checking gradients through the whole pipeline
=============================================

Every stage is built from tape-recorded operations, so the registration
loss can be differentiated with respect to the predictor weights.  Here the
analytic gradient is compared with central finite differences along a few
random directions.
"""

import numpy as np

from dpreg import autodiff as ad
from dpreg import RegistrationConfig, SyntheticSpec, synth_generate
from dpreg.pipeline import forward, init_params, registration_loss
from dpreg.predictor import PredictorConfig

pair = synth_generate(SyntheticSpec(dims=(16, 16, 16), radius_range=(3, 5), smoothness=4, magnitude=2), 1)[0]
cfg = RegistrationConfig(selector="predicted", predictor=PredictorConfig(widths=(4, 4, 4)))
params = init_params(cfg, 0)
# the head starts at zero (rest grid); perturb it so gradients reach the encoder
rng = np.random.default_rng(0)
params["pred.head.w"] = rng.uniform(-0.2, 0.2, params["pred.head.w"].shape)
params["pred.head.b"] = np.array([0.3, -0.2, 0.1])


def loss(p):
    out = forward(pair.fixed, pair.moving, cfg, p)
    return registration_loss(pair.fixed, pair.moving, out["dense"], cfg)


tape = ad.Tape()
tracked = params.track(tape)
grads = tape.backward(loss(tracked))

h = 1e-6
for name in ("pred.head.b", "pred.head.w", "pred.enc0.w"):
    d = rng.standard_normal(params[name].shape)
    d /= np.linalg.norm(d)
    up, down = params.copy(), params.copy()
    up[name] = params[name] + h * d
    down[name] = params[name] - h * d
    numeric = (float(loss(up).data) - float(loss(down).data)) / (2 * h)
    analytic = float((grads[tracked[name]] * d).sum())
    print(f"{name:12s} analytic {analytic:+.6e}  numeric {numeric:+.6e}")
