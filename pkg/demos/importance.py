# Loss Matrix on a dataset where B(2,2) is a noisy copy of A(0,1):
# the copy's column should point straight at its source.
import numpy as np

from mrmae.dataset import normalize_layers
from mrmae.importance import accumulate_loss_matrix, importance_to_map, summarize
from mrmae.masking import MaskPolicy
from mrmae.synth import copy_plant_spec, synth_dataset
from mrmae.training import TrainConfig, train

ds = normalize_layers(synth_dataset(copy_plant_spec(0), 0))
pol = MaskPolicy.fixed_fraction(0.5)
model, _ = train(ds, TrainConfig(epochs=100, learning_rate=3e-3, batch_size=64, policy=pol))

L = accumulate_loss_matrix(model, ds, pol, iterations=20, seed=0)
b = ds.feature_index("B", 2, 2)
rep = summarize(L, "feature", b)

coords = ds.feature_coords
order = np.argsort(-np.nan_to_num(rep.importance, nan=-1.0))
print("most informative features for B(2,2):")
for j in order[:5]:
    print(" ", coords[j], round(float(rep.importance[j]), 3))

# per-layer importance grids, NaN where a feature was never scored
for name, grid in importance_to_map(rep, ds).items():
    print(name)
    print(np.round(grid, 2))
