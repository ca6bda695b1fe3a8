# Variability maps, locally most variable patches and the accuracy trend
# of a model on a test period whose output layer drifts.
import sys

import numpy as np

from mrmae.baselines import TaskSpec
from mrmae.dataset import compute_feature_means, normalize_layers
from mrmae.evaluate import MAEPredictor
from mrmae.masking import MaskPolicy
from mrmae.shift import accuracy_trend, select_patches, variability_map
from mrmae.synth import planted_spec, synth_dataset
from mrmae.training import TrainConfig, train

spec = planted_spec(0, ar=0.0, drift=(("C", 0.006),), seasonal=0.5)
ds = normalize_layers(synth_dataset(spec, 120))

for name in ds.layer_names:
    V = variability_map(ds, name)
    print(name, "variability (top eigenvalue of yearly vectors)")
    print(np.round(V, 3))
    print("selected:", sorted(select_patches(V)))

oi = TaskSpec(("A", "B"), ("C",)).output_index(ds)
model, _ = train(ds, TrainConfig(epochs=150, learning_rate=3e-3, batch_size=64, policy=MaskPolicy.fixed_fraction(0.7)))
tr = accuracy_trend(MAEPredictor(model, compute_feature_means(ds), oi), ds.test, oi)
print(f"slope {tr.slope:.4f} per month, p = {tr.p_value(5000):.4f}")

if "--plot" in sys.argv:
    import matplotlib.pyplot as plt  # optional extra

    plt.plot(tr.accuracies, ".", alpha=0.6)
    t = np.arange(len(tr.accuracies))
    plt.plot(t, tr.accuracies.mean() + tr.slope * (t - t.mean()))
    plt.xlabel("test month")
    plt.ylabel("accuracy")
    plt.savefig("drift_trend.png", dpi=120)
    print("wrote drift_trend.png")
