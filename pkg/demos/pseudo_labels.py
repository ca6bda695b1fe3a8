# Few labels, many unlabeled rows, a test period shifted away from the
# training one. Teacher pseudo-labels feed a linear student.
import numpy as np

from mrmae.baselines import TaskSpec, fit_linear
from mrmae.dataset import LayeredDataset, compute_feature_means, normalize_layers
from mrmae.ensemble import EnsembleConfig
from mrmae.evaluate import accuracy
from mrmae.masking import MaskPolicy
from mrmae.semisup import build_pseudo_dataset, train_student
from mrmae.synth import planted_spec, synth_dataset
from mrmae.training import TrainConfig, train_on_matrix

seed = 0
raw = synth_dataset(planted_spec(seed, k=600, drift=(("A", 0.001), ("B", 0.001))), 0)
is_train = np.zeros(600, bool)
is_train[:150] = True
ds = normalize_layers(LayeredDataset(raw.data, raw.layers, raw.timestamps, is_train))
task = TaskSpec(("A", "B"), ("C",))
ii, oi = task.input_index(ds), task.output_index(ds)
means = compute_feature_means(ds)

Xu = ds.data[150:400].copy()
Xu[:, oi] = np.nan  # C never observed here
Xt = ds.data[400:]

cfg = TrainConfig(epochs=200, learning_rate=3e-3, batch_size=64, policy=MaskPolicy.fixed_fraction(0.7), seed=seed)
teacher, _ = train_on_matrix(np.vstack([ds.train, Xu]), means, ds.layer_partition, cfg)
pl = build_pseudo_dataset(ds, teacher, Xu, np.isnan(Xu), EnsembleConfig(32, MaskPolicy.fixed_fraction(0.6), seed=seed))
print(pl.audit())

student = train_student(pl, "linear", task)
supervised = fit_linear(ds, task)
print("supervised linear", round(accuracy(Xt[:, oi], supervised.predict(Xt[:, ii])), 2))
print("pseudo-label student", round(accuracy(Xt[:, oi], student.predict(Xt[:, ii])), 2))
