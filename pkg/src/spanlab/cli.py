"""Command-line entry point.

Subcommands: ``gen`` (write datasets), ``train`` (fit a model and checkpoint
it), ``eval`` (metrics for a checkpoint on the test split), ``oracle-verify``
(re-derive every label in a dataset file), ``gradcheck`` (finite-difference
check through a model's full loss), and ``sweep`` (grid search selected on
validation loss).  Every run writes a manifest embedding the fully resolved
config, and identical config+seed reruns produce byte-identical outputs.

Experiment configs are flat JSON with three blocks (task, model, train) plus
optional ``split``, ``sweep`` and ``out_dir``; unknown keys are hard errors.
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from spanlab import __version__
from spanlab.metrics import (
    MetricRow,
    ablation_fractions,
    aggregate_report,
    average_relative_error,
    cosine_metric,
    invariance_delta,
)
from spanlab.models import (
    DeepSetsModel,
    JanossyModel,
    PiSgdModel,
    SpanFcModel,
    SpanModel,
    SpanNoApnModel,
    load_checkpoint,
)
from spanlab.nn import seed_chain
from spanlab.tasks import (
    TaskError,
    gen_biased_maxdigit,
    gen_flow_dataset,
    gen_flowgraph,
    gen_kary_distance,
    gen_percentile,
    gen_spiked,
    load_dataset,
    load_mnist_idx,
    oracle_verify,
    save_dataset,
    synthetic_digits,
)
from spanlab.tensor import Tensor, finite_difference_check
from spanlab.train import (
    TrainConfig,
    batch_loss,
    batch_loss_value,
    train_span,
    train_standard,
)

__all__ = ["main", "ConfigError", "load_config", "validate_config"]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# config schema

_TASK_KEYS = {
    "kary": {"kind", "count", "seed", "n", "d", "k"},
    "percentile": {"kind", "count", "seed", "n", "r", "value_range"},
    "maxflow": {"kind", "count", "seed", "vertices", "edges", "cap_range",
                "subset_size", "graph_seed"},
    "spiked": {"kind", "count", "seed", "n", "d", "sigma"},
    "maxdigit": {"kind", "count", "seed", "set_size", "biased", "source",
                 "per_class", "digit_dim", "noise", "corpus_seed",
                 "images_path", "labels_path", "test_count"},
}

_MODEL_KEYS = {
    "span": {"kind", "hidden", "tau", "sinkhorn_iters", "input_scale", "seed",
             "forget_bias"},
    "span-no-apn": {"kind", "hidden", "input_scale", "seed", "forget_bias"},
    "span-fc": {"kind", "width", "tau", "sinkhorn_iters", "input_scale", "seed"},
    "deepsets": {"kind", "width", "pooling", "dropout_rate", "seed"},
    "janossy": {"kind", "k", "width", "pooling", "dropout_rate", "seed"},
    "pisgd": {"kind", "hidden", "permutations", "input_scale", "seed",
              "forget_bias"},
}

_TRAIN_KEYS = {
    "loss", "learner_lr", "adversary_lr", "batch_size", "outer_iters",
    "learner_steps", "adversary_steps", "weight_decay", "dropout",
    "grad_clip", "optimizer", "adversary_optimizer", "seed",
    "checkpoint_every", "divergence_limit",
}

_TOP_KEYS = {"task", "model", "train", "split", "sweep", "out_dir", "gradcheck"}

_GRADCHECK_KEYS = {"n", "d", "L", "h", "loss", "seed", "batch"}


def load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _check_keys(block, allowed, where):
    unknown = sorted(set(block) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")


def validate_config(cfg, require=("task",)):
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, _TOP_KEYS, "config")
    for block in require:
        if block not in cfg:
            raise ConfigError(f"config is missing the {block!r} block")
    if "task" in cfg:
        task = cfg["task"]
        kind = task.get("kind")
        if kind not in _TASK_KEYS:
            raise ConfigError(f"unknown task kind {kind!r}")
        _check_keys(task, _TASK_KEYS[kind], f"task ({kind})")
        if "count" not in task:
            raise ConfigError("task block needs a count")
    if "model" in cfg:
        model = cfg["model"]
        kind = model.get("kind")
        if kind not in _MODEL_KEYS:
            raise ConfigError(f"unknown model kind {kind!r}")
        _check_keys(model, _MODEL_KEYS[kind], f"model ({kind})")
    if "train" in cfg:
        _check_keys(cfg["train"], _TRAIN_KEYS, "train")
    if "split" in cfg:
        _check_keys(cfg["split"], {"train", "val", "test"}, "split")
    if "gradcheck" in cfg:
        _check_keys(cfg["gradcheck"], _GRADCHECK_KEYS, "gradcheck")
    return cfg


# ---------------------------------------------------------------------------
# experiment assembly


def dataset_from_task(task, count=None, seed=None, biased=None):
    kind = task["kind"]
    count = task["count"] if count is None else count
    seed = task.get("seed", 0) if seed is None else seed
    if kind == "kary":
        return gen_kary_distance(task["n"], task["d"], task["k"], count, seed)
    if kind == "percentile":
        rng_range = task.get("value_range")
        return gen_percentile(task["n"], task["r"], count, seed,
                              value_range=rng_range)
    if kind == "maxflow":
        graph = gen_flowgraph(
            task["vertices"], task["edges"],
            cap_range=tuple(task.get("cap_range", (1, 20))),
            seed=task.get("graph_seed", 0),
        )
        return gen_flow_dataset(graph, task.get("subset_size", 3), count, seed)
    if kind == "spiked":
        return gen_spiked(task["n"], task["d"], task["sigma"], count, seed)
    if kind == "maxdigit":
        if task.get("source", "synthetic") == "mnist":
            images, labels = load_mnist_idx(task["images_path"],
                                            task["labels_path"])
        else:
            images, labels = synthetic_digits(
                per_class=task.get("per_class", 200),
                dim=task.get("digit_dim", 16),
                noise=task.get("noise", 0.1),
                seed=task.get("corpus_seed", 0),
            )
        use_bias = task.get("biased", False) if biased is None else biased
        return gen_biased_maxdigit(images, labels, task["set_size"], count,
                                   seed, biased=use_bias)
    raise ConfigError(f"unknown task kind {kind!r}")


def split_fractions(cfg):
    split = cfg.get("split", {})
    train = split.get("train", 0.8)
    val = split.get("val", 0.1)
    test = split.get("test", 0.1)
    if min(train, val, test) < 0 or abs(train + val + test - 1.0) > 1e-9:
        raise ConfigError("split fractions must be nonnegative and sum to 1")
    return train, val, test


def prepare_splits(cfg):
    """Dataset plus (train, val, test) instance lists.

    The biased digit task trains on biased sets but is always tested on the
    unbiased distribution, matching the ablation protocol.
    """
    task = cfg["task"]
    dataset = dataset_from_task(task)
    f_train, f_val, _ = split_fractions(cfg)
    count = len(dataset)
    if task["kind"] == "maxdigit" and task.get("biased", False):
        n_train = int(count * f_train)
        n_val = int(count * f_val)
        test_count = task.get("test_count", max(1, count // 4))
        test_ds = dataset_from_task(
            task, count=test_count,
            seed=seed_chain(task.get("seed", 0), 1), biased=False,
        )
        train_insts = dataset.instances[:n_train]
        val_insts = dataset.instances[n_train: n_train + n_val]
        return dataset, train_insts, val_insts, test_ds.instances
    order = np.random.default_rng(
        seed_chain(task.get("seed", 0), 8801)
    ).permutation(count)
    n_train = int(count * f_train)
    n_val = int(count * f_val)
    pick = lambda idx: [dataset.instances[i] for i in idx]
    return (
        dataset,
        pick(order[:n_train]),
        pick(order[n_train: n_train + n_val]),
        pick(order[n_train + n_val:]),
    )


def model_from_config(model_cfg, n, d, label_dim):
    kind = model_cfg["kind"]
    args = {k: v for k, v in model_cfg.items() if k != "kind"}
    if kind == "span":
        return SpanModel(n=n, d=d, L=label_dim, **args)
    if kind == "span-no-apn":
        return SpanNoApnModel(n=n, d=d, L=label_dim, **args)
    if kind == "span-fc":
        return SpanFcModel(n=n, d=d, L=label_dim, **args)
    if kind == "deepsets":
        return DeepSetsModel(d=d, L=label_dim, **args)
    if kind == "janossy":
        return JanossyModel(d=d, L=label_dim, **args)
    if kind == "pisgd":
        return PiSgdModel(n=n, d=d, L=label_dim, **args)
    raise ConfigError(f"unknown model kind {kind!r}")


def train_config_from(cfg):
    return TrainConfig(**cfg.get("train", {}))


def write_manifest(out_dir, command, cfg):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": cfg, "version": __version__}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# evaluation


class _AveragedPredictor:
    """Permutation-averaged inference wrapper for the sampled-permutation
    baseline."""

    def __init__(self, model, seed):
        self.model = model
        self.seed = seed

    def predict(self, x):
        rng = np.random.default_rng(seed_chain(self.seed, 9901))
        return self.model.predict_average(x, rng)


def evaluate_model(model, dataset, instances, model_kind, eval_seed=0):
    """Metric rows for a frozen model on held-out instances."""
    task = dataset.header["task"]
    predictor = model
    if model_kind == "pisgd":
        predictor = _AveragedPredictor(model, eval_seed)
    rows = []
    common = dict(
        task=task, model=model_kind, seed=eval_seed,
        n=dataset.header["n"], d=dataset.header["d"],
    )
    if task in ("kary", "percentile", "maxflow"):
        rows.append(MetricRow(metric="rel_error",
                              value=average_relative_error(predictor, instances),
                              **common))
    elif task == "spiked":
        cosines = [
            cosine_metric(inst.label, predictor.predict(inst.elements))
            for inst in instances
        ]
        rows.append(MetricRow(metric="abs_cosine",
                              value=float(np.mean(cosines)), **common))
    elif task == "maxdigit":
        max_f, last_f, other_f = ablation_fractions(predictor, instances)
        rows.append(MetricRow(metric="frac_max", value=max_f, **common))
        rows.append(MetricRow(metric="frac_last", value=last_f, **common))
        rows.append(MetricRow(metric="frac_other", value=other_f, **common))
    else:
        raise ConfigError(f"no evaluation defined for task {task!r}")

    deltas = []
    rng = np.random.default_rng(seed_chain(eval_seed, 9902))
    probe = instances[: min(50, len(instances))]
    for inst in probe:
        deltas.append(invariance_delta(model, inst.elements, rng=rng).value)
    deltas = np.array(deltas)
    rows.append(MetricRow(metric="delta_median",
                          value=float(np.median(deltas)), **common))
    rows.append(MetricRow(metric="delta_frac_le_1e-2",
                          value=float(np.mean(deltas <= 1e-2)), **common))
    return rows


def run_training(cfg, out_dir):
    dataset, train_insts, _val, _test = prepare_splits(cfg)
    model = model_from_config(cfg["model"], dataset.header["n"],
                              dataset.header["d"], dataset.header["L"])
    tcfg = train_config_from(cfg)
    if model.adversary_parameters():
        history = train_span(model, train_insts, tcfg, out_dir=out_dir)
    else:
        history = train_standard(model, train_insts, tcfg, out_dir=out_dir)
    return model, history


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg, out_dir, args):
    validate_config(cfg, require=("task",))
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = dataset_from_task(cfg["task"])
    save_dataset(out_dir / "dataset.jsonl", dataset)
    written = ["dataset.jsonl"]
    task = cfg["task"]
    if task["kind"] == "maxdigit" and task.get("biased", False):
        test_ds = dataset_from_task(
            task, count=task.get("test_count", max(1, task["count"] // 4)),
            seed=seed_chain(task.get("seed", 0), 1), biased=False,
        )
        save_dataset(out_dir / "dataset_test.jsonl", test_ds)
        written.append("dataset_test.jsonl")
    write_manifest(out_dir, "gen", cfg)
    print(f"gen: wrote {', '.join(written)} ({len(dataset)} instances) to {out_dir}")
    return 0


def cmd_train(cfg, out_dir, args):
    validate_config(cfg, require=("task", "model", "train"))
    write_manifest(out_dir, "train", cfg)
    model, history = run_training(cfg, out_dir)
    final = history[-1].batch_loss if history else float("nan")
    print(f"train: {len(history)} steps, final batch loss {final:.6g}, "
          f"checkpoint in {out_dir / 'checkpoint'}")
    return 0


def cmd_eval(cfg, out_dir, args):
    validate_config(cfg, require=("task", "model"))
    if args.checkpoint is None:
        raise ConfigError("eval needs --checkpoint")
    model, _extra = load_checkpoint(args.checkpoint)
    dataset, _train, _val, test_insts = prepare_splits(cfg)
    if not test_insts:
        raise ConfigError("eval: empty test split")
    rows = evaluate_model(model, dataset, test_insts, cfg["model"]["kind"],
                          eval_seed=cfg.get("train", {}).get("seed", 0))
    aggregate_report(rows, out_dir)
    write_manifest(out_dir, "eval", cfg)
    for row in rows:
        print(f"eval: {row.metric} = {row.value:.6g}")
    return 0


def cmd_oracle_verify(cfg_path, out_dir, args):
    # the config argument points straight at a dataset file
    dataset = load_dataset(cfg_path)
    failures = oracle_verify(dataset)
    if failures:
        for f in failures[:10]:
            print(f"oracle-verify: FAIL {f}", file=sys.stderr)
        return 1
    print(f"oracle-verify: pass ({len(dataset)} instances, "
          f"task {dataset.header.get('task')})")
    return 0


def cmd_gradcheck(cfg, out_dir, args):
    validate_config(cfg, require=("model", "gradcheck"))
    gc = cfg["gradcheck"]
    n, d, label_dim = gc["n"], gc["d"], gc.get("L", 1)
    model = model_from_config(cfg["model"], n, d, label_dim)
    rng = np.random.default_rng(seed_chain(gc.get("seed", 0), 31))
    batch = gc.get("batch", 1)
    x = Tensor(rng.normal(size=(batch, n, d)))
    y = Tensor(rng.normal(size=(batch, label_dim)))
    loss_kind = gc.get("loss", "mse")

    def objective(_):
        return batch_loss(loss_kind, model.forward(x), y)

    worst = 0.0
    for name, param in sorted(model.parameters().items()):
        err = finite_difference_check(lambda t, p=param: objective(t), param,
                                      h=gc.get("h", 1e-5))
        worst = max(worst, err)
    print(f"gradcheck: max relative error {worst:.3e}")
    return 0 if worst <= 1e-4 else 1


def _set_path(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node:
            raise ConfigError(f"sweep grid path {dotted!r} not in config")
        node = node[p]
    node[parts[-1]] = value


def _run_sweep_trial(payload):
    cfg, assignment, out_root = payload
    trial = copy.deepcopy(cfg)
    trial.pop("sweep", None)
    for path, value in assignment:
        _set_path(trial, path, value)
    validate_config(trial, require=("task", "model", "train"))
    label = "_".join(f"{p.split('.')[-1]}={v}" for p, v in assignment) or "base"
    out_dir = Path(out_root) / f"trial_{label}"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(out_dir, "sweep-trial", trial)
    dataset, train_insts, val_insts, test_insts = prepare_splits(trial)
    model = model_from_config(trial["model"], dataset.header["n"],
                              dataset.header["d"], dataset.header["L"])
    tcfg = train_config_from(trial)
    if model.adversary_parameters():
        train_span(model, train_insts, tcfg, out_dir=out_dir)
    else:
        train_standard(model, train_insts, tcfg, out_dir=out_dir)
    x = np.stack([inst.elements for inst in val_insts])
    y = np.stack([np.asarray(inst.label).reshape(-1) for inst in val_insts])
    val_loss = batch_loss_value(model, x, y, tcfg.loss)
    return {"assignment": assignment, "val_loss": val_loss,
            "out_dir": str(out_dir)}


def cmd_sweep(cfg, out_dir, args):
    validate_config(cfg, require=("task", "model", "train", "sweep"))
    grid = cfg["sweep"].get("grid", {})
    if not grid:
        raise ConfigError("sweep needs a non-empty grid")
    for path in grid:
        _set_path(copy.deepcopy(cfg), path, None)  # path check up front
    paths = sorted(grid)
    combos = list(itertools.product(*[grid[p] for p in paths]))
    payloads = [
        (cfg, tuple(zip(paths, combo)), str(out_dir)) for combo in combos
    ]
    workers = int(os.environ.get("SPANLAB_THREADS", "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_sweep_trial, payloads))
    else:
        results = [_run_sweep_trial(p) for p in payloads]

    best = min(results, key=lambda r: r["val_loss"])
    summary = {
        "trials": [
            {"assignment": [list(a) for a in r["assignment"]],
             "val_loss": r["val_loss"], "out_dir": r["out_dir"]}
            for r in results
        ],
        "best": {"assignment": [list(a) for a in best["assignment"]],
                 "val_loss": best["val_loss"], "out_dir": best["out_dir"]},
    }
    (out_dir / "sweep_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )

    # test metrics for the winner
    winner_cfg = copy.deepcopy(cfg)
    winner_cfg.pop("sweep", None)
    for path, value in best["assignment"]:
        _set_path(winner_cfg, path, value)
    model, _extra = load_checkpoint(Path(best["out_dir"]) / "checkpoint")
    dataset, _t, _v, test_insts = prepare_splits(winner_cfg)
    rows = evaluate_model(model, dataset, test_insts,
                          winner_cfg["model"]["kind"],
                          eval_seed=winner_cfg.get("train", {}).get("seed", 0))
    aggregate_report(rows, out_dir)
    write_manifest(out_dir, "sweep", cfg)
    print(f"sweep: {len(results)} trials, best val loss {best['val_loss']:.6g} "
          f"at {best['assignment']}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spanlab",
        description="Set-function learning lab: adversarial permutation "
                    "training, baselines, exact task oracles.",
    )
    parser.add_argument("command",
                        choices=["gen", "train", "eval", "oracle-verify",
                                 "gradcheck", "sweep"])
    parser.add_argument("--config", required=True,
                        help="experiment config JSON (for oracle-verify: "
                             "the dataset file)")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--checkpoint", default=None,
                        help="checkpoint directory (eval)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the training seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "oracle-verify":
            return cmd_oracle_verify(args.config, None, args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.setdefault("train", {})["seed"] = args.seed
        out_dir = Path(args.out or cfg.get("out_dir") or "spanlab-out")
        out_dir.mkdir(parents=True, exist_ok=True)
        handler = {
            "gen": cmd_gen,
            "train": cmd_train,
            "eval": cmd_eval,
            "gradcheck": cmd_gradcheck,
            "sweep": cmd_sweep,
        }[args.command]
        return handler(cfg, out_dir, args)
    except (ConfigError, TaskError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
