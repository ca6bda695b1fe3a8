"""``mrmae`` command-line front end.

Every command reads pre-exported grids through a ``manifest.json``, writes
only into ``--out`` and leaves a ``run.json`` there that echoes the resolved
configuration. ``mrmae --out DIR rerun OLD/run.json`` replays a run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mrmae import __version__
from mrmae.baselines import TaskMLP, TaskMLPConfig, TaskSpec, fit_linear, fit_task_mlp, LinearModel, select_lasso_penalty
from mrmae.dataset import (
    LayeredDataset,
    build_dataset,
    compute_feature_means,
    load_grids,
    normalize_layers,
    split_by_suffix,
    write_grid,
)
from mrmae.ensemble import EnsembleConfig, ensemble_predict, ensemble_predict_batch
from mrmae.errors import ConfigError, DataError, MRMAEError
from mrmae.evaluate import (
    EnsemblePredictor,
    MAEPredictor,
    SweepConfig,
    TaskPredictor,
    accuracy,
    mean_baseline_accuracy,
    masking_sweep,
)
from mrmae.importance import LossMatrix, accumulate_loss_matrix, importance_to_map, summarize, write_importance_maps
from mrmae.masking import RNG_IDENTITY, MaskPolicy, make_rng, mask_from_layers
from mrmae.nnet import MlpModel, forward, load_checkpoint, param_count, save_checkpoint
from mrmae.semisup import STUDENT_KINDS, StudentConfig, build_pseudo_dataset, train_student
from mrmae.shift import (
    accuracy_trend,
    combined_variability,
    select_patches,
    variability_map,
    write_projection,
    write_selected,
    yearly_points_for,
)
from mrmae.synth import SyntheticSpec, copy_plant_spec, planted_spec, write_synthetic
from mrmae.training import TrainConfig, train

log = logging.getLogger("mrmae")

PRESETS = {
    "planted": planted_spec,
    "copy-plant": copy_plant_spec,
}

# args that name input files; stored absolute so run.json does not depend on the cwd
PATH_ARGS = ("data", "grids_dir", "model", "teacher", "unlabeled", "matrix")


# ---------------------------------------------------------------- helpers


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc) -> None:
    _atomic_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _names(text) -> tuple[str, ...]:
    if not text:
        return ()
    return tuple(s.strip() for s in str(text).split(",") if s.strip())


def _stamp(ts) -> str:
    return f"{ts[0]:04d}-{ts[1]:02d}"


def _fmt(v) -> str:
    return "" if np.isnan(v) else repr(float(v))


def _load_raw(args, test_months: int) -> LayeredDataset:
    if not args.data:
        raise ConfigError("--data (path to manifest.json) is required")
    if not Path(args.data).exists():
        raise ConfigError(f"manifest not found: {args.data}")
    stack = load_grids(args.data, args.grids_dir)
    return build_dataset(stack, test_months)


def _load_model(path):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    for key in ("norm_stats", "means", "test_months"):
        if key not in meta:
            raise ConfigError(f"{path}: sidecar lacks {key!r}; was it written by `mrmae train`?")
    return model, meta


def _dataset_for(args, meta) -> LayeredDataset:
    """Raw grids put on the scale the model was trained with."""
    raw = _load_raw(args, int(meta["test_months"]))
    stats = {k: tuple(v) for k, v in meta["norm_stats"].items()}
    if set(stats) != set(raw.layer_names):
        raise DataError(f"model was trained on layers {sorted(stats)}, data has {raw.layer_names}")
    return normalize_layers(raw, stats)


def _rows(ds: LayeredDataset, split: str) -> np.ndarray:
    if split == "train":
        return np.flatnonzero(ds.is_train)
    if split == "test":
        idx = np.flatnonzero(~ds.is_train)
        if idx.size == 0:
            raise DataError("test split is empty (train with --test-months > 0)")
        return idx
    return np.arange(ds.k)


def _ensemble_cfg(args) -> EnsembleConfig:
    seed = args.ensemble_seed if args.ensemble_seed is not None else _seeded(0, args.seed)
    return EnsembleConfig(
        args.ensemble_iters, MaskPolicy.fixed_fraction(args.ensemble_mask_frac), "mean", seed, strict=False
    )


def _task_predictor(model, meta, ds, means, ens_cfg=None):
    """``(X, unknown) -> Y_out`` for any checkpoint kind, plus the task it answers."""
    kind = meta["kind"]
    if kind == "mae":
        return None
    task = TaskSpec(tuple(meta["input_layers"]), tuple(meta["output_layers"]))
    fn = (lambda X: forward(model, X)) if kind == "mlp" else LinearModel(model.weights[0], model.biases[0])
    return TaskPredictor(fn, means, task.input_index(ds), task.output_index(ds)), task


def _seeded(value, seed):
    return value if seed is None else seed


# ---------------------------------------------------------------- commands


def cmd_synth(args, out: Path) -> dict:
    if args.spec_doc is not None:
        doc = dict(args.spec_doc)
        if args.seed is not None:
            doc["seed"] = args.seed
        spec = SyntheticSpec.from_dict(doc)
    else:
        spec = PRESETS[args.preset](seed=_seeded(0, args.seed), **({"k": args.k} if args.k else {}))
    write_synthetic(spec, out)
    return {"spec": spec.to_dict()}


def cmd_train(args, out: Path) -> dict:
    raw = _load_raw(args, args.test_months)
    ds = normalize_layers(raw)
    means = compute_feature_means(ds)
    doc = dict(args.config_doc or {})
    meta = {
        "norm_stats": {k: list(v) for k, v in ds.norm_stats.items()},
        "means": [float(v) for v in means.means],
        "test_months": args.test_months,
        "layers": ds.layer_names,
    }
    if args.kind == "mae":
        if args.seed is not None:
            doc["seed"] = args.seed
            doc["policy"] = dict(doc.get("policy", TrainConfig().policy.to_dict()), seed=args.seed)
        cfg = TrainConfig.from_dict(doc)
        model, tlog = train(ds, cfg)
        tlog.to_csv(out / "train_log.csv")
        meta["train_config"] = cfg.to_dict()
        save_checkpoint(out / "model.ckpt", model, "mae", meta)
        return {"kind": "mae", "train_config": cfg.to_dict()}

    outputs = _names(args.outputs)
    if not outputs:
        raise ConfigError(f"--outputs is required for --kind {args.kind}")
    inputs = _names(args.inputs)
    task = TaskSpec(inputs, outputs) if inputs else TaskSpec.outputs_vs_rest(ds, outputs)
    meta["input_layers"], meta["output_layers"] = list(task.input_layers), list(task.output_layers)
    if args.kind == "mlp":
        if args.seed is not None:
            doc["seed"] = args.seed
        try:
            cfg = TaskMLPConfig(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad mlp config: {exc}") from exc
        n = ds.n
        budget = args.param_budget or param_count([n, 4 * n, 4 * n, n])
        fitted = fit_task_mlp(ds, task, budget, cfg)
        meta["mlp_config"], meta["param_budget"] = dict(vars(cfg)), budget
        save_checkpoint(out / "model.ckpt", fitted.model, "mlp", meta)
        _write_rows(out / "train_log.csv", ["epoch", "mean_loss"], [[i, repr(v)] for i, v in enumerate(fitted.history)])
        return {"kind": "mlp", "mlp_config": dict(vars(cfg)), "param_budget": budget}

    if args.kind == "linear":
        penalty = 0.0
    elif "l1_penalty" in doc:
        penalty = float(doc["l1_penalty"])
    else:
        # no penalty given: grid search on a validation slice of the training rows
        X, Y = ds.train[:, task.input_index(ds)], ds.train[:, task.output_index(ds)]
        ok = ~(np.isnan(X).any(axis=1) | np.isnan(Y).any(axis=1))
        penalty, _ = select_lasso_penalty(X[ok], Y[ok], seed=_seeded(0, args.seed))
    lin = fit_linear(ds, task, penalty)
    meta["l1_penalty"], meta["sweeps"] = penalty, lin.sweeps
    save_checkpoint(out / "model.ckpt", lin.as_mlp(), args.kind, meta)
    return {"kind": args.kind, "l1_penalty": penalty}


def _predict_common(args, out: Path, ens_cfg: EnsembleConfig | None) -> dict:
    model, meta = _load_model(args.model)
    ds = _dataset_for(args, meta)
    means = np.asarray(meta["means"])
    rows = _rows(ds, args.split)
    X = ds.data[rows]
    B, n = X.shape
    mask_layers = _names(args.mask_layers)
    task_pred = _task_predictor(model, meta, ds, means)
    if task_pred is not None:
        pred_fn, task = task_pred
        if mask_layers and set(mask_layers) != set(task.output_layers):
            raise ConfigError(f"{meta['kind']} model predicts exactly {list(task.output_layers)}")
        mask_layers = task.output_layers
        if ens_cfg is not None:
            raise ConfigError("ensembles need an autoencoder checkpoint (--kind mae)")
    if not mask_layers:
        raise ConfigError("--mask-layers is required")
    unknown = np.broadcast_to(mask_from_layers(ds.layer_partition, mask_layers, n), (B, n)).copy()
    if args.mask_frac:
        # extra random masking of the remaining features
        rng = make_rng(_seeded(0, args.seed))
        free = np.flatnonzero(~unknown[0])
        k = min(int(np.floor(args.mask_frac * free.size + 0.5 + 1e-9)), free.size - 1)
        keys = rng.random((B, free.size))
        unknown[:, free] = np.argsort(np.argsort(keys, axis=1), axis=1) < k
    unknown |= np.isnan(X)
    F = np.where(unknown, means, np.nan_to_num(X))

    P = np.full((B, n), np.nan)
    if task_pred is not None:
        P[:, pred_fn.output_index] = pred_fn(F, unknown)
    elif ens_cfg is None:
        P = forward(model, F)
    elif args.dump_members:
        member_rows = []
        for i in range(B):
            p, members, _ = ensemble_predict(
                model, F[i], unknown[i], means, ens_cfg, make_rng((ens_cfg.seed, i)), True, ds.layer_partition
            )
            P[i] = p
            for it, q in enumerate(members):
                member_rows.extend([i, it, j, repr(float(q[j]))] for j in np.flatnonzero(unknown[i]))
        _write_rows(Path(args.dump_members_path), ["row", "iteration", "feature_index", "value"], member_rows)
    else:
        P = ensemble_predict_batch(model, F, unknown, means, ens_cfg, ds.layer_partition)

    scored = unknown & ~np.isnan(X)
    coords = ds.feature_coords
    out_rows = []
    for bi, i in enumerate(rows):
        for j in np.flatnonzero(unknown[bi]):
            layer, r, c = coords[j]
            out_rows.append([_stamp(ds.timestamps[i]), layer, r, c, _fmt(X[bi, j]), repr(float(P[bi, j]))])
    _write_rows(out / "predictions.csv", ["timestamp", "layer", "patch_row", "patch_col", "truth", "prediction"], out_rows)
    metrics = {
        "rows": int(B),
        "scored_values": int(scored.sum()),
        "accuracy": accuracy(X, P, scored) if scored.any() else None,
        "mean_baseline_accuracy": accuracy(X, np.broadcast_to(means, X.shape), scored) if scored.any() else None,
    }
    _write_json(out / "metrics.json", metrics)
    return {"kind": meta["kind"], "mask_layers": list(mask_layers)}


def cmd_predict(args, out: Path) -> dict:
    args.dump_members = False
    return _predict_common(args, out, None)


def cmd_ensemble(args, out: Path) -> dict:
    cfg = _ensemble_cfg(args)
    args.dump_members_path = args.dump_members
    if args.dump_members:
        # members go next to the other outputs
        args.dump_members_path = str(out / Path(args.dump_members).name)
    res = _predict_common(args, out, cfg)
    res["ensemble"] = cfg.to_dict()
    return res


def cmd_importance(args, out: Path) -> dict:
    model, meta = _load_model(args.model)
    if meta["kind"] != "mae":
        raise ConfigError("importance needs an autoencoder checkpoint")
    ds = _dataset_for(args, meta)
    seed = _seeded(0, args.seed)
    policy = MaskPolicy.from_dict(args.policy_doc) if args.policy_doc else MaskPolicy.fixed_fraction(args.mask_frac)
    lm = accumulate_loss_matrix(model, ds, policy, args.iterations, seed=seed, rows=_rows(ds, args.split))
    lm.save(out / "loss_matrix.bin")
    target = args.target
    if args.mode == "feature":
        parts = _names(target)
        if len(parts) == 3:
            target = ds.feature_index(parts[0], int(parts[1]), int(parts[2]))
        elif len(parts) == 1 and parts[0].isdigit():
            target = int(parts[0])
        else:
            raise ConfigError("--target for feature mode is an index or LAYER,ROW,COL")
    elif args.mode == "layer" and not target:
        raise ConfigError("--target LAYER is required in layer mode")
    report = summarize(lm, args.mode, target)
    report.to_csv(out / "importance.csv", ds.feature_coords)
    write_importance_maps(importance_to_map(report, ds), out)
    return {"policy": policy.to_dict(), "iterations": args.iterations, "mode": args.mode, "target": target, "seed": seed}


def _variability(args):
    raw = _load_raw(args, 0)
    layers = _names(args.layers) or tuple(raw.layer_names)
    return raw, {name: variability_map(raw, name) for name in layers}


def cmd_shift(args, out: Path) -> dict:
    raw, maps = _variability(args)
    for name, grid in maps.items():
        write_grid(out / f"variability_{name}.f32", grid)
    res = {"layers": list(maps)}
    if args.patch:
        layer, r, c = _names(args.patch)
        write_projection(out / "projection.csv", yearly_points_for(raw, layer, int(r), int(c)))
    if args.model:
        model, meta = _load_model(args.model)
        ds = _dataset_for(args, meta)
        means = np.asarray(meta["means"])
        outputs = _names(args.outputs) or tuple(meta.get("output_layers", ()))
        if not outputs:
            raise ConfigError("--outputs is required with an autoencoder checkpoint")
        oi = ds.layer_indices(outputs)
        task_pred = _task_predictor(model, meta, ds, means)
        pred = task_pred[0] if task_pred is not None else MAEPredictor(model, means, oi)
        rows = _rows(ds, "test")
        stamps = [ds.timestamps[i] for i in rows]
        trend = accuracy_trend(pred, ds.data[rows], oi, stamps)
        seed = _seeded(0, args.seed)
        p = trend.p_value(args.permutations, seed, args.alternative)
        _write_rows(out / "trend.csv", ["timestamp", "accuracy"], [[_stamp(t), repr(float(a))] for t, a in zip(stamps, trend.accuracies)])
        _write_json(out / "trend.json", {"slope": trend.slope, "p_value": p, "permutations": args.permutations, "alternative": args.alternative})
        res["trend"] = {"outputs": list(outputs), "permutations": args.permutations, "alternative": args.alternative, "seed": seed}
    return res


def cmd_select(args, out: Path) -> dict:
    _, maps = _variability(args)
    if args.combine:
        combined = combined_variability(maps)
        selected = {"combined": select_patches(combined)}
        maps = {"combined": combined}
    else:
        selected = {name: select_patches(grid) for name, grid in maps.items()}
    write_selected(out / "selected.csv", selected, maps)
    return {"layers": list(maps), "combine": bool(args.combine)}


def cmd_pseudo(args, out: Path) -> dict:
    teacher, meta = _load_model(args.teacher)
    if meta["kind"] != "mae":
        raise ConfigError("the teacher must be an autoencoder checkpoint")
    base = _dataset_for(args, meta)
    stats = {k: tuple(v) for k, v in meta["norm_stats"].items()}
    unl = normalize_layers(build_dataset(load_grids(args.unlabeled), 0), stats)
    if unl.layer_names != base.layer_names:
        raise DataError("unlabeled data must have the same layers as the labeled data")
    unknown = np.broadcast_to(mask_from_layers(unl.layer_partition, _names(args.unknown_layers), unl.n), unl.data.shape)
    cfg = _ensemble_cfg(args)
    pl = build_pseudo_dataset(base, teacher, unl.data, unknown, cfg, args.pseudo_weight)
    pl.write(out, unl.timestamps)
    _write_json(out / "construction.json", pl.construction_log)
    res = {"ensemble": cfg.to_dict(), "pseudo_weight": args.pseudo_weight, "unknown_layers": list(_names(args.unknown_layers))}
    if args.student:
        seed = _seeded(0, args.seed)
        outputs = _names(args.outputs) or _names(args.unknown_layers)
        task = TaskSpec.outputs_vs_rest(base, outputs) if args.student != "mae" else None
        scfg = StudentConfig(
            train=TrainConfig(seed=seed, policy=MaskPolicy.fixed_fraction(0.7, seed)),
            mlp=TaskMLPConfig(seed=seed),
            param_budget=param_count([base.n, 4 * base.n, 4 * base.n, base.n]),
        )
        fitted = train_student(pl, args.student, task, scfg)
        smeta = {k: meta[k] for k in ("norm_stats", "means", "test_months")}
        if task is not None:
            smeta["input_layers"], smeta["output_layers"] = list(task.input_layers), list(task.output_layers)
        if args.student == "mae":
            model, tlog = fitted
            tlog.to_csv(out / "student_log.csv")
        elif isinstance(fitted, TaskMLP):
            model = fitted.model
        else:
            model = fitted.as_mlp()
        save_checkpoint(out / "student.ckpt", model, args.student, smeta)
        res["student"] = args.student
    return res


def cmd_evaluate(args, out: Path) -> dict:
    specs = [(s, False) for s in args.models or []] + [(s, True) for s in args.ensemble_models or []]
    if not specs:
        raise ConfigError("give at least one --model NAME=PATH (or --ensemble-model)")
    loaded = []
    for spec, ens in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"expected NAME=PATH, got {spec!r}")
        model, meta = _load_model(os.path.abspath(path))
        loaded.append((name, model, meta, ens))
    meta0 = loaded[0][2]
    ds = _dataset_for(args, meta0)
    means = np.asarray(meta0["means"])
    outputs = _names(args.outputs) or next((tuple(m["output_layers"]) for _, _, m, _ in loaded if "output_layers" in m), ())
    if not outputs:
        raise ConfigError("--outputs is required when only autoencoders are evaluated")
    inputs = _names(args.inputs)
    task = TaskSpec(inputs, outputs) if inputs else TaskSpec.outputs_vs_rest(ds, outputs)
    ii, oi = task.input_index(ds), task.output_index(ds)
    ens_cfg = _ensemble_cfg(args)
    predictors = {}
    for name, model, meta, ens in loaded:
        if meta["test_months"] != meta0["test_months"] or meta["norm_stats"] != meta0["norm_stats"]:
            raise ConfigError(f"model {name} was trained on a different split or scale")
        if meta["kind"] == "mae":
            predictors[name] = EnsemblePredictor(model, means, oi, ens_cfg) if ens else MAEPredictor(model, means, oi)
        else:
            if ens:
                raise ConfigError(f"{name}: ensembles need an autoencoder checkpoint")
            pred, mtask = _task_predictor(model, meta, ds, means)
            if set(mtask.output_layers) != set(outputs):
                raise ConfigError(f"{name} predicts {list(mtask.output_layers)}, not {list(outputs)}")
            predictors[name] = pred
    X = ds.data[_rows(ds, args.split)]
    if args.sweep:
        fr = tuple(float(f) for f in _names(args.fractions)) if args.fractions else SweepConfig().fractions
        cfg = SweepConfig(fr, args.trials, _seeded(0, args.seed))
        result = masking_sweep(cfg, X, ii, oi, predictors)
        result.to_csv(out / "sweep.csv")
        return {"sweep": {"fractions": list(cfg.fractions), "trials": cfg.trials, "seed": cfg.seed}, "outputs": list(outputs)}
    unknown = np.zeros(X.shape, dtype=bool)
    unknown[:, oi] = True
    unknown |= np.isnan(X)
    F = np.where(unknown, means, np.nan_to_num(X))
    rows = [["mean", repr(mean_baseline_accuracy(X[:, oi], means[oi]))]]
    for name, pred in predictors.items():
        rows.append([name, repr(accuracy(X[:, oi], pred(F, unknown)))])
    _write_rows(out / "accuracy.csv", ["model", "accuracy"], rows)
    return {"outputs": list(outputs)}


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "importance": cmd_importance,
    "shift": cmd_shift,
    "select-patches": cmd_select,
    "pseudo-label": cmd_pseudo,
    "evaluate": cmd_evaluate,
}


# ---------------------------------------------------------------- parser


def _add_data(p, test_months=False):
    p.add_argument("--data", help="manifest.json of the grid export")
    p.add_argument("--grids-dir", help="grid directory (default: next to the manifest)")
    if test_months:
        p.add_argument("--test-months", type=int, default=0, help="hold out the last N observations")


def _add_ensemble(p):
    p.add_argument("--ensemble-iters", "--iters", type=int, default=32)
    p.add_argument("--ensemble-mask-frac", type=float, default=0.6)
    p.add_argument("--ensemble-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mrmae", description="Masked-autoencoder toolkit for layered gridded data.")
    ap.add_argument("--version", action="version", version=f"mrmae {__version__}")
    ap.add_argument("--seed", type=int, help="global seed (overrides config seeds)")
    ap.add_argument("--workers", type=int, default=1, help="worker cap (commands run single-process)")
    ap.add_argument("--out", required=True, help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic grid export")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="SyntheticSpec JSON")
    g.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--k", type=int, help="observations (presets only)")

    p = sub.add_parser("train", help="train an autoencoder or a baseline")
    _add_data(p, test_months=True)
    p.add_argument("--kind", choices=("mae", "mlp", "linear", "lasso"), default="mae")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--inputs", help="input layers, comma separated (default: all non-outputs)")
    p.add_argument("--outputs", help="output layers (baselines)")
    p.add_argument("--param-budget", type=int, help="mlp parameter budget (default: the autoencoder's)")

    for name, helptext in (("predict", "fill masked layers with one forward pass"), ("ensemble", "fill masked layers with a masking ensemble")):
        p = sub.add_parser(name, help=helptext)
        _add_data(p)
        p.add_argument("--model", required=True)
        p.add_argument("--mask-layers", help="layers to treat as unknown")
        p.add_argument("--mask-frac", type=float, default=0.0, help="also mask this fraction of the other features")
        p.add_argument("--split", choices=("train", "test", "all"), default="test")
        if name == "ensemble":
            _add_ensemble(p)
            p.add_argument("--dump-members", help="CSV file name for per-iteration predictions")

    p = sub.add_parser("importance", help="loss matrix and importance summaries")
    _add_data(p)
    p.add_argument("--model", required=True)
    p.add_argument("--policy", help="mask policy JSON (default: fixed fraction --mask-frac)")
    p.add_argument("--mask-frac", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--mode", choices=("global", "feature", "layer"), default="global")
    p.add_argument("--target", help="feature index, LAYER,ROW,COL or layer name")
    p.add_argument("--split", choices=("train", "test", "all"), default="train")

    p = sub.add_parser("shift", help="per-patch variability maps and accuracy trend")
    _add_data(p)
    p.add_argument("--layers")
    p.add_argument("--patch", help="LAYER,ROW,COL whose yearly projection to write")
    p.add_argument("--model", help="checkpoint whose test-split accuracy trend to test")
    p.add_argument("--outputs")
    p.add_argument("--permutations", type=int, default=10_000)
    p.add_argument("--alternative", choices=("less", "greater", "two-sided"), default="less")

    p = sub.add_parser("select-patches", help="locally most variable patches")
    _add_data(p)
    p.add_argument("--layers")
    p.add_argument("--combine", action="store_true", help="select on the max over layers")

    p = sub.add_parser("pseudo-label", help="teacher pseudo-labels for unlabeled observations")
    _add_data(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--unlabeled", required=True, help="manifest.json of the unlabeled export")
    p.add_argument("--unknown-layers", required=True)
    p.add_argument("--pseudo-weight", type=float, default=1.0)
    p.add_argument("--student", choices=STUDENT_KINDS)
    p.add_argument("--outputs", help="student output layers (default: the unknown layers)")
    _add_ensemble(p)

    p = sub.add_parser("evaluate", help="accuracy table or masking sweep")
    _add_data(p)
    p.add_argument("--model", dest="models", action="append", help="NAME=PATH, repeatable")
    p.add_argument("--ensemble-model", dest="ensemble_models", action="append", help="NAME=PATH run as an ensemble")
    p.add_argument("--inputs")
    p.add_argument("--outputs")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--fractions", help="comma separated masking fractions")
    p.add_argument("--trials", type=int, default=50)
    _add_ensemble(p)

    sub.add_parser("rerun", help="replay a previous run.json").add_argument("run_json")
    return ap


def _resolve(args) -> dict:
    """Absolutize paths and inline config files so run.json is self-contained."""
    for key in PATH_ARGS:
        if getattr(args, key, None):
            setattr(args, key, os.path.abspath(getattr(args, key)))
    for key, doc_key in (("config", "config_doc"), ("spec", "spec_doc"), ("policy", "policy_doc")):
        if hasattr(args, key):
            path = getattr(args, key)
            setattr(args, doc_key, _read_json(path) if path else None)
            delattr(args, key)
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("out", "command")}


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MRMAE_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rerun":
            doc = _read_json(args.run_json)
            out = args.out
            args = argparse.Namespace(**doc["args"], command=doc["command"], out=out)
            recorded = doc["args"]
        else:
            recorded = _resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved = COMMANDS[args.command](args, out)
        _write_json(
            out / "run.json",
            {"command": args.command, "args": recorded, "resolved": resolved, "rng": RNG_IDENTITY, "version": __version__},
        )
    except MRMAEError as exc:
        print(f"mrmae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
