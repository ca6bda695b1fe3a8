# Train one masked autoencoder on the planted synthetic data, then
# compare a single pass, the implicit ensemble and two task baselines.
import numpy as np

from mrmae.baselines import TaskMLPConfig, TaskSpec, fit_linear, fit_task_mlp
from mrmae.dataset import compute_feature_means, normalize_layers
from mrmae.ensemble import EnsembleConfig
from mrmae.evaluate import EnsemblePredictor, MAEPredictor, SweepConfig, TaskPredictor, masking_sweep
from mrmae.masking import MaskPolicy
from mrmae.synth import planted_spec, synth_dataset
from mrmae.training import TrainConfig, train

seed = 0
ds = normalize_layers(synth_dataset(planted_spec(seed, k=600), test_months=100))
means = compute_feature_means(ds)
task = TaskSpec(("A", "B"), ("C",))  # predict layer C from A and B
ii, oi = task.input_index(ds), task.output_index(ds)

cfg = TrainConfig(epochs=200, learning_rate=3e-3, batch_size=64, policy=MaskPolicy.fixed_fraction(0.7), seed=seed)
mae, log = train(ds, cfg)
print("final epoch loss", log.records[-1]["mean_loss"])

mlp = fit_task_mlp(ds, task, mae.param_count, TaskMLPConfig(seed=seed))  # same parameter budget
lin = fit_linear(ds, task)

preds = {
    "mae": MAEPredictor(mae, means, oi),
    "mae+ens": EnsemblePredictor(mae, means, oi, EnsembleConfig(32, MaskPolicy.fixed_fraction(0.6), seed=seed, strict=False)),
    "mlp": TaskPredictor(mlp, means, ii, oi),
    "linear": TaskPredictor(lin, means, ii, oi),
}
fracs = (0.0, 0.2, 0.4, 0.6, 0.8)
res = masking_sweep(SweepConfig(fractions=fracs, trials=3, seed=seed), ds.test, ii, oi, preds)

print("input masking " + " ".join(f"{f:6.0%}" for f in fracs))
for name in preds:
    print(f"{name:13s} " + " ".join(f"{a:6.1f}" for a in res.curve(name)[1]))
