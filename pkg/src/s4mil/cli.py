"""Command-line entry point.

Commands: train, evaluate, kernel-check, grad-check, param-count, bench,
synth, export-heatmap, stats.

Configuration is a flat registry of dotted keys (model.*, train.*, synth.*,
bench.*, ...).  Effective values come from, in increasing precedence:
registry defaults, a JSON --config file (flat or nested), repeated
--set key=value overrides, and explicit command-line flags.  Every run
writes the merged result to <output>/resolved_config.json; feeding that file
back to the same command reproduces the run.  Unknown keys are rejected by
name.  All randomness derives from run.seed through labelled substreams.

Failures print a single line ``error <code>: <message>`` to stderr and exit
nonzero.
"""

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import parallel, ssm
from .autograd import Tape, check_gradients
from .checkpoint import load_checkpoint, save_checkpoint
from .data_io import Bag, corpus_stats, load_manifest, long_sequence_split, write_manifest, write_sequence_file
from .errors import ConfigError, ContractError, S4MilError
from .metrics import UndefinedMetricError, auroc_binary
from .model import (
    ModelConfig,
    build_tape,
    count_parameters,
    forward_mil,
    forward_pooling_baseline,
    init_parameters,
    init_pooling_baseline,
)
from .seeding import substream
from .train import (
    SyntheticTaskSpec,
    TrainConfig,
    evaluate_model,
    fit,
    generate_synthetic,
    kfold,
    write_history,
)

# key -> (default, type); None defaults carry their type explicitly
REGISTRY: dict[str, tuple[object, type]] = {
    "run.seed": (0, int),
    "run.threads": (1, int),
    "model.input_dim": (1024, int),
    "model.hidden_dim": (512, int),
    "model.state_dim": (32, int),
    "model.num_classes": (2, int),
    "model.num_patch_classes": (None, int),
    "model.num_ssm_layers": (1, int),
    "model.multitask": (False, bool),
    "model.discretization": ("bilinear", str),
    "train.learning_rate": (2e-4, float),
    "train.weight_decay": (1e-4, float),
    "train.lookahead_k": (5, int),
    "train.lookahead_alpha": (0.5, float),
    "train.adam_beta1": (0.9, float),
    "train.adam_beta2": (0.999, float),
    "train.adam_eps": (1e-8, float),
    "train.patience": (10, int),
    "train.max_epochs": (100, int),
    "train.lambda": (5.0, float),
    "train.grad_accum": (1, int),
    "train.folds": (10, int),
    "train.manifest": (None, str),
    "train.synthetic": (False, bool),
    "synth.task": ("needle", str),
    "synth.num_bags": (200, int),
    "synth.length_min": (128, int),
    "synth.length_max": (512, int),
    "synth.feature_dim": (16, int),
    "synth.signal_rate": (0.05, float),
    "synth.noise_sigma": (1.0, float),
    "bench.length": (30000, int),
    "bench.dim": (1024, int),
    "bench.repeats": (100, int),
    "kernel_check.trials": (100, int),
    "kernel_check.max_state": (8, int),
    "kernel_check.max_length": (512, int),
    "kernel_check.tolerance": (1e-6, float),
    "kernel_check.inject_fault": (False, bool),
    "grad_check.step": (1e-5, float),
    "grad_check.tolerance": (1e-4, float),
    "param_count.expect": (None, int),
    "stats.manifest": (None, str),
    "stats.percentile": (85.0, float),
    "evaluate.checkpoint": (None, str),
    "evaluate.manifest": (None, str),
    "evaluate.long_percentile": (None, float),
    "heatmap.checkpoint": (None, str),
    "heatmap.manifest": (None, str),
    "heatmap.bag_id": (None, str),
}


@dataclass
class RunSpec:
    command: str
    config_file: str | None
    overrides: list[str]
    seed: int
    output_dir: Path
    threads: int


# --------------------------------------------------------------------------
# Configuration resolution
# --------------------------------------------------------------------------

def _coerce(key: str, raw, kind: type):
    if raw is None:
        return None
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: cannot parse {raw!r} as a boolean")
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _flatten(obj, prefix="") -> dict:
    flat = {}
    for key, value in obj.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def _apply(config: dict, key: str, raw, command: str):
    if key == "run.command":
        if raw != command:
            raise ConfigError(
                f"resolved config was written by command {raw!r}, re-feed it to that command"
            )
        return
    if key not in REGISTRY:
        raise ConfigError(f"unknown configuration key {key!r}")
    config[key] = _coerce(key, raw, REGISTRY[key][1])


def resolve_config(spec: RunSpec, flag_values: dict[str, object]) -> dict:
    config = {key: default for key, (default, _) in REGISTRY.items()}
    if spec.config_file:
        path = Path(spec.config_file)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, raw in _flatten(loaded).items():
            _apply(config, key, raw, spec.command)
    for item in spec.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply(config, key.strip(), raw.strip(), spec.command)
    for key, value in flag_values.items():
        if value is not None:
            _apply(config, key, value, spec.command)
    return config


def write_resolved_config(spec: RunSpec, config: dict) -> Path:
    spec.output_dir.mkdir(parents=True, exist_ok=True)
    payload = {"run.command": spec.command}
    payload.update({k: config[k] for k in sorted(config)})
    path = spec.output_dir / "resolved_config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n")
    json.loads(path.read_text())  # written file must parse back
    return path


def model_config_from(config: dict) -> ModelConfig:
    return ModelConfig(
        input_dim=config["model.input_dim"],
        hidden_dim=config["model.hidden_dim"],
        state_dim=config["model.state_dim"],
        num_classes=config["model.num_classes"],
        num_patch_classes=config["model.num_patch_classes"],
        num_ssm_layers=config["model.num_ssm_layers"],
        multitask=config["model.multitask"],
        discretization=config["model.discretization"],
    )


def train_config_from(config: dict, seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=config["train.learning_rate"],
        weight_decay=config["train.weight_decay"],
        lookahead_k=config["train.lookahead_k"],
        lookahead_alpha=config["train.lookahead_alpha"],
        adam_beta1=config["train.adam_beta1"],
        adam_beta2=config["train.adam_beta2"],
        adam_eps=config["train.adam_eps"],
        patience=config["train.patience"],
        max_epochs=config["train.max_epochs"],
        lam=config["train.lambda"],
        grad_accum=config["train.grad_accum"],
        seed=seed,
    )


def synth_spec_from(config: dict) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        task=config["synth.task"],
        num_bags=config["synth.num_bags"],
        length_range=(config["synth.length_min"], config["synth.length_max"]),
        feature_dim=config["synth.feature_dim"],
        signal_rate=config["synth.signal_rate"],
        noise_sigma=config["synth.noise_sigma"],
    )


# --------------------------------------------------------------------------
# train / evaluate
# --------------------------------------------------------------------------

def _load_training_bags(config: dict, seed: int) -> list[Bag]:
    manifest = config["train.manifest"]
    if config["train.synthetic"] and manifest:
        raise ConfigError("choose either --manifest or --synthetic, not both")
    if config["train.synthetic"]:
        spec = synth_spec_from(config)
        if spec.feature_dim != config["model.input_dim"]:
            raise ConfigError(
                f"model.input_dim ({config['model.input_dim']}) must equal synth.feature_dim "
                f"({spec.feature_dim}) for synthetic training"
            )
        return generate_synthetic(spec, seed=seed)
    if not manifest:
        raise ConfigError("train needs --manifest PATH or --synthetic")
    return load_manifest(manifest)


def _fold_seed(seed: int, fold: int) -> int:
    return int(substream(seed, f"fold-{fold}").integers(0, 2**31))


def cmd_train(spec: RunSpec, config: dict) -> int:
    seed = config["run.seed"]
    bags = _load_training_bags(config, seed)
    model_cfg = model_config_from(config)
    if model_cfg.multitask and any(b.patch_labels is None for b in bags):
        raise ConfigError("multitask training needs patch labels for every bag")
    folds = config["train.folds"]
    splits = kfold([b.slide_label for b in bags], k=folds, seed=seed)  # fails before training
    rows = []
    for i, (train_idx, val_idx) in enumerate(splits):
        try:
            fold_seed = _fold_seed(seed, i)
            model = init_parameters(model_cfg, seed=fold_seed)
            result = fit(model, [bags[j] for j in train_idx], [bags[j] for j in val_idx],
                         train_config_from(config, seed=fold_seed))
            fold_dir = spec.output_dir / f"fold_{i:02d}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(fold_dir / "checkpoint.s4mc", result.model)
            load_checkpoint(fold_dir / "checkpoint.s4mc")  # must be re-parseable
            write_history(fold_dir / "history.csv", result.history)
            stats = evaluate_model(result.model, [bags[j] for j in val_idx],
                                   lam=config["train.lambda"])
            rows.append({"fold": i, "n_val": len(val_idx),
                         "accuracy": stats["accuracy"], "auroc": stats["auroc"]})
        except S4MilError as exc:
            raise type(exc)(f"fold {i}: {exc}") from exc
    summary = spec.output_dir / "summary.csv"
    n_total = sum(r["n_val"] for r in rows)
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "n_val", "accuracy", "auroc"])
        for r in rows:
            writer.writerow([r["fold"], r["n_val"], repr(r["accuracy"]), repr(r["auroc"])])
        writer.writerow(["mean", n_total,
                         repr(float(np.mean([r["accuracy"] for r in rows]))),
                         repr(float(np.mean([r["auroc"] for r in rows])))])
        writer.writerow(["weighted_mean", n_total,
                         repr(float(np.sum([r["accuracy"] * r["n_val"] for r in rows]) / n_total)),
                         repr(float(np.sum([r["auroc"] * r["n_val"] for r in rows]) / n_total))])
    with open(summary, newline="") as fh:
        assert len(list(csv.reader(fh))) == len(rows) + 3  # re-parseable
    print(f"trained {len(rows)} folds; mean accuracy "
          f"{np.mean([r['accuracy'] for r in rows]):.4f}, mean AUROC "
          f"{np.mean([r['auroc'] for r in rows]):.4f}; outputs in {spec.output_dir}")
    return 0


def cmd_evaluate(spec: RunSpec, config: dict) -> int:
    if not config["evaluate.checkpoint"] or not config["evaluate.manifest"]:
        raise ConfigError("evaluate needs --checkpoint and --manifest")
    model = load_checkpoint(config["evaluate.checkpoint"])
    bags = load_manifest(config["evaluate.manifest"])
    percentile = config["evaluate.long_percentile"]
    if percentile is not None:
        bags = long_sequence_split(bags, percentile=percentile)
        if not bags:
            raise ConfigError("long-sequence split left no bags to evaluate")
    stats = evaluate_model(model, bags)
    out_rows = [("count", len(bags)), ("loss", stats["loss"]),
                ("accuracy", stats["accuracy"]), ("auroc", stats["auroc"])]
    if model.config.multitask and all(b.patch_labels is not None for b in bags):
        token_scores = np.concatenate([p[:, 1] for p in stats["patch_probs"]])
        token_labels = np.concatenate([b.patch_labels for b in bags])
        try:
            out_rows.append(("patch_auroc", auroc_binary(token_scores, token_labels)))
        except UndefinedMetricError:
            out_rows.append(("patch_auroc", float("nan")))
    path = spec.output_dir / "metrics.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in out_rows:
            writer.writerow([name, repr(value) if isinstance(value, float) else value])
    with open(path, newline="") as fh:
        assert len(list(csv.reader(fh))) == len(out_rows) + 1
    for name, value in out_rows:
        print(f"{name}: {value}")
    return 0


# --------------------------------------------------------------------------
# kernel-check / grad-check / param-count
# --------------------------------------------------------------------------

def _random_stable_channel(rng, n_half):
    a = -rng.uniform(0.05, 2.0, n_half) + 1j * rng.uniform(-8.0, 8.0, n_half)
    c = rng.standard_normal(n_half) + 1j * rng.standard_normal(n_half)
    d = float(rng.standard_normal())
    dt = float(rng.uniform(1e-3, 1.0))
    return ssm.SsmChannelParams.from_timestep(a=a, c=c, d=d, dt=dt)


def run_kernel_check(trials: int, max_state: int, max_length: int, tolerance: float,
                     seed: int, inject_fault: bool = False) -> tuple[bool, float, int]:
    """Recurrence vs convolution duality over random stable channels."""
    rng = substream(seed, "kernel-check")
    worst = 0.0
    checked = 0
    for trial in range(trials):
        n_half = int(rng.integers(1, max_state + 1))
        length = int(rng.integers(1, max_length + 1))
        params = _random_stable_channel(rng, n_half)
        u = rng.standard_normal(length)
        for rule in ("bilinear", "zoh"):
            disc = ssm.discretize(params, rule)
            kernel = ssm.compute_kernel(disc, params.c, length)
            if inject_fault and trial == 0:
                kernel = ssm.KernelCache(length=length, values=-kernel.values)
            y_conv = ssm.convolve(kernel, u, d=params.d)
            y_rec = ssm.run_recurrence(disc, params.c, params.d, u)
            err = float(np.max(np.abs(y_conv - y_rec)) / (1.0 + np.max(np.abs(y_rec))))
            worst = max(worst, err)
            checked += 1
    return worst <= tolerance, worst, checked


def cmd_kernel_check(spec: RunSpec, config: dict) -> int:
    trials = config["kernel_check.trials"]
    tolerance = config["kernel_check.tolerance"]
    passed, worst, checked = run_kernel_check(
        trials, config["kernel_check.max_state"], config["kernel_check.max_length"],
        tolerance, config["run.seed"], inject_fault=config["kernel_check.inject_fault"],
    )
    note = " (0 trials: vacuous)" if trials == 0 else ""
    report = spec.output_dir / "kernel_check.txt"
    report.write_text(
        f"trials={trials}\nchecked={checked}\ntolerance={tolerance!r}\n"
        f"worst_relative_error={worst!r}\nstatus={'pass' if passed else 'fail'}{note}\n"
    )
    parsed = dict(line.split("=", 1) for line in report.read_text().splitlines())
    assert "status" in parsed  # re-parseable
    print(f"kernel-check: {'pass' if passed else 'fail'}{note}, "
          f"worst relative error {worst:.3e} over {checked} comparisons")
    if not passed:
        print(f"error check-failed: kernel-check worst error {worst:.3e} > {tolerance}",
              file=sys.stderr)
        return 1
    return 0


def _grad_check_cases(seed: int):
    rng = substream(seed, "grad-check")

    def scalarize(tape, node, labels):
        return tape.softmax_log_loss(node, labels, reduction="sum")

    cases = {}

    affine_params = {"x": rng.standard_normal((6, 3)), "w": rng.standard_normal((3, 4)),
                     "b": rng.standard_normal(4)}
    affine_labels = rng.integers(0, 4, 6)

    def build_affine(p):
        tape = Tape(dtype=np.float64)
        z = tape.add(tape.matvec(tape.leaf(p["x"], "x"), tape.leaf(p["w"], "w")),
                     tape.leaf(p["b"], "b"))
        scalarize(tape, z, affine_labels)
        return tape

    cases["affine"] = (build_affine, affine_params)

    ew_params = {"a": rng.standard_normal((5, 3)), "g": rng.standard_normal((5, 3))}
    ew_labels = rng.integers(0, 3, 5)

    def build_elementwise(p):
        tape = Tape(dtype=np.float64)
        a = tape.leaf(p["a"], "a")
        z = tape.mul(a, tape.sigmoid(tape.leaf(p["g"], "g")))
        z = tape.log(tape.exp(tape.scale(z, 0.31)))
        scalarize(tape, z, ew_labels)
        return tape

    cases["elementwise"] = (build_elementwise, ew_params)

    ln_params = {"x": rng.standard_normal((7, 4)), "s": 1 + 0.2 * rng.standard_normal(4),
                 "t": 0.1 * rng.standard_normal(4)}
    ln_labels = rng.integers(0, 4, 7)

    def build_layernorm(p):
        tape = Tape(dtype=np.float64)
        z = tape.layernorm(tape.leaf(p["x"], "x"), tape.leaf(p["s"], "s"), tape.leaf(p["t"], "t"))
        scalarize(tape, z, ln_labels)
        return tape

    cases["layernorm"] = (build_layernorm, ln_params)

    mp_params = {"x": rng.standard_normal((9, 5))}

    def build_maxpool(p):
        tape = Tape(dtype=np.float64)
        tape.softmax_log_loss(tape.max_pool_sequence(tape.leaf(p["x"], "x")), [2])
        return tape

    cases["max-pool"] = (build_maxpool, mp_params)

    for rule in ("bilinear", "zoh"):
        h, n_half = 3, 2
        p_ssm = {
            "u": rng.standard_normal((10, h)),
            "a_re": -rng.uniform(0.2, 1.5, (h, n_half)),
            "a_im": np.pi * rng.uniform(0, 2, (h, n_half)),
            "c_re": rng.standard_normal((h, n_half)),
            "c_im": rng.standard_normal((h, n_half)),
            "d": rng.standard_normal(h),
            "log_dt": rng.uniform(np.log(0.01), np.log(0.5), h),
        }
        ssm_labels = rng.integers(0, h, 10)

        def build_ssm(p, rule=rule):
            tape = Tape(dtype=np.float64)
            nodes = {k: tape.leaf(v, k) for k, v in p.items()}
            out = tape.ssm_conv(nodes["u"], nodes["a_re"], nodes["a_im"], nodes["c_re"],
                                nodes["c_im"], nodes["d"], nodes["log_dt"], rule=rule)
            scalarize(tape, out, ssm_labels)
            return tape

        cases[f"ssm-conv-{rule}"] = (build_ssm, p_ssm)

    mil_cfg = ModelConfig(input_dim=8, hidden_dim=4, state_dim=4, num_classes=2,
                          multitask=True, num_patch_classes=2)
    mil_model = init_parameters(mil_cfg, seed=seed)
    mil_features = rng.standard_normal((16, 8))
    mil_patch = rng.integers(0, 2, 16)
    mil_params = {k: v.astype(np.float64) for k, v in mil_model.parameters().items()}

    def build_mil(p):
        bundle = build_tape(mil_cfg, p, mil_features, slide_label=1, patch_labels=mil_patch,
                            lam=5.0, dtype=np.float64)
        return bundle.tape

    cases["mil-model"] = (build_mil, mil_params)
    return cases


def cmd_grad_check(spec: RunSpec, config: dict) -> int:
    step = config["grad_check.step"]
    tolerance = config["grad_check.tolerance"]
    lines = []
    all_ok = True
    for name, (build, params) in _grad_check_cases(config["run.seed"]).items():
        worst, failures = check_gradients(build, params, step=step, rtol=tolerance)
        ok = not failures
        all_ok &= ok
        lines.append(f"{name}: {'pass' if ok else 'fail'} worst_rel={worst!r}")
        print(f"grad-check {lines[-1]}")
    report = spec.output_dir / "grad_check.txt"
    report.write_text("\n".join(lines) + "\n")
    assert all("worst_rel=" in line for line in report.read_text().splitlines())
    if not all_ok:
        print("error check-failed: gradient check failed", file=sys.stderr)
        return 1
    return 0


def cmd_param_count(spec: RunSpec, config: dict) -> int:
    count = count_parameters(model_config_from(config))
    path = spec.output_dir / "param_count.txt"
    path.write_text(f"count={count}\n")
    assert int(path.read_text().split("=")[1]) == count
    print(f"trainable parameters: {count}")
    expect = config["param_count.expect"]
    if expect is not None and expect != count:
        print(f"error check-failed: parameter count {count} != expected {expect}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def run_bench(config: dict, seed: int) -> list[dict]:
    length, dim, repeats = config["bench.length"], config["bench.dim"], config["bench.repeats"]
    if length < 1 or dim < 1 or repeats < 1:
        raise ConfigError("bench needs length, dim and repeats all >= 1")
    model_cfg = ModelConfig(
        input_dim=dim, hidden_dim=config["model.hidden_dim"],
        state_dim=config["model.state_dim"], num_classes=config["model.num_classes"],
        discretization=config["model.discretization"],
    )
    model = init_parameters(model_cfg, seed=seed)
    baselines = {kind: init_pooling_baseline(kind, dim, model_cfg.num_classes, seed)
                 for kind in ("mean", "max")}
    features = substream(seed, "bench").standard_normal((length, dim)).astype(np.float32)

    def timed(fn):
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            samples.append((time.perf_counter() - t0) * 1e3)
        return float(np.mean(samples)), float(np.std(samples))

    results = []
    for mode in ("conv", "recurrence"):
        mean, std = timed(lambda mode=mode: forward_mil(model, features, mode=mode))
        results.append({"mode": mode, "repeats": repeats, "mean_ms": mean, "std_ms": std})
    for kind, baseline in baselines.items():
        mean, std = timed(lambda b=baseline: forward_pooling_baseline(b, features))
        results.append({"mode": f"{kind}-pool", "repeats": repeats, "mean_ms": mean, "std_ms": std})
    return results


def cmd_bench(spec: RunSpec, config: dict) -> int:
    results = run_bench(config, config["run.seed"])
    path = spec.output_dir / "bench.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "repeats", "mean_ms", "std_ms"])
        for r in results:
            writer.writerow([r["mode"], r["repeats"], repr(r["mean_ms"]), repr(r["std_ms"])])
    with open(path, newline="") as fh:
        assert len(list(csv.reader(fh))) == len(results) + 1
    for r in results:
        print(f"{r['mode']:>11}: {r['mean_ms']:10.2f} ms +/- {r['std_ms']:.2f} "
              f"({r['repeats']} repeats)")
    conv = next(r for r in results if r["mode"] == "conv")
    rec = next(r for r in results if r["mode"] == "recurrence")
    if conv["mean_ms"] > 0:
        print(f"recurrence/convolution time ratio: {rec['mean_ms'] / conv['mean_ms']:.1f}x")
    return 0


# --------------------------------------------------------------------------
# synth / stats / export-heatmap
# --------------------------------------------------------------------------

def cmd_synth(spec: RunSpec, config: dict) -> int:
    bags = generate_synthetic(synth_spec_from(config), seed=config["run.seed"])
    data_dir = spec.output_dir / "bags"
    data_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for bag in bags:
        write_sequence_file(data_dir / f"{bag.id}.seqf", bag.features)
        write_sequence_file(data_dir / f"{bag.id}.patch.seqf",
                            bag.patch_labels[:, None].astype(np.float32))
        write_sequence_file(data_dir / f"{bag.id}.coords.seqf",
                            bag.coords.astype(np.float32))
        rows.append({"id": bag.id, "label": bag.slide_label,
                     "features": f"bags/{bag.id}.seqf",
                     "patch_labels": f"bags/{bag.id}.patch.seqf",
                     "coords": f"bags/{bag.id}.coords.seqf"})
    manifest = spec.output_dir / "manifest.csv"
    write_manifest(manifest, rows)
    reloaded = load_manifest(manifest)  # outputs must be re-parseable
    assert len(reloaded) == len(bags)
    print(f"wrote {len(bags)} bags and manifest to {spec.output_dir}")
    return 0


def cmd_stats(spec: RunSpec, config: dict) -> int:
    if not config["stats.manifest"]:
        raise ConfigError("stats needs --manifest PATH")
    bags = load_manifest(config["stats.manifest"])
    stats = corpus_stats(bags)
    percentile = config["stats.percentile"]
    long_bags = long_sequence_split(bags, percentile=percentile)
    rows = list(stats.items()) + [
        ("long_percentile", percentile),
        ("long_count", len(long_bags)),
        ("long_min_length", min(b.length for b in long_bags)),
    ]
    path = spec.output_dir / "stats.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)
    with open(path, newline="") as fh:
        assert len(list(csv.reader(fh))) == len(rows) + 1
    for name, value in rows:
        print(f"{name}: {value}")
    return 0


def write_heatmap(path, grid: np.ndarray) -> None:
    rows, cols = grid.shape
    with open(path, "w") as fh:
        fh.write(f"{rows} {cols}\n")
        for r in range(rows):
            fh.write(" ".join(f"{v:.17g}" for v in grid[r]) + "\n")


def parse_heatmap(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    rows, cols = (int(x) for x in lines[0].split())
    grid = np.array([[float(v) for v in line.split()] for line in lines[1 : rows + 1]])
    if grid.shape != (rows, cols):
        raise ContractError(f"heatmap body {grid.shape} does not match header ({rows}, {cols})")
    return grid


def heatmap_grid(patch_probs: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Positive-class probability per grid cell; -1 marks empty cells."""
    r0, c0 = coords.min(axis=0)
    r1, c1 = coords.max(axis=0)
    grid = np.full((int(r1 - r0 + 1), int(c1 - c0 + 1)), -1.0)
    grid[coords[:, 0] - r0, coords[:, 1] - c0] = patch_probs
    return grid


def cmd_export_heatmap(spec: RunSpec, config: dict) -> int:
    for key in ("heatmap.checkpoint", "heatmap.manifest", "heatmap.bag_id"):
        if not config[key]:
            raise ConfigError("export-heatmap needs --checkpoint, --manifest and --bag-id")
    model = load_checkpoint(config["heatmap.checkpoint"])
    if not model.config.multitask:
        raise ConfigError("export-heatmap needs a multitask checkpoint (it has no patch head)")
    if model.config.patch_classes < 2:
        raise ConfigError("patch head must score at least 2 classes")
    bags = {b.id: b for b in load_manifest(config["heatmap.manifest"])}
    bag_id = config["heatmap.bag_id"]
    if bag_id not in bags:
        raise ConfigError(f"bag id {bag_id!r} not present in the manifest")
    bag = bags[bag_id]
    if bag.coords is None:
        raise ConfigError(f"bag {bag_id!r} carries no coordinates")
    out = forward_mil(model, bag.features)
    grid = heatmap_grid(out.patch_probs[:, 1], bag.coords)
    path = spec.output_dir / f"heatmap_{bag_id}.txt"
    write_heatmap(path, grid)
    again = parse_heatmap(path)
    assert np.array_equal(again, grid)  # round-trips through the parser
    print(f"wrote {grid.shape[0]}x{grid.shape[1]} heatmap to {path}")
    return 0


# --------------------------------------------------------------------------
# argument parsing and dispatch
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s4mil",
        description="Diagonal state space engine for long patch-feature sequences",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flat dotted or nested keys)")
        p.add_argument("--seed", type=int, default=None, help="root random seed")
        p.add_argument("--output", default="s4mil-out", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="worker thread cap")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("train", help="k-fold training on a manifest or synthetic bags")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--synthetic", action="store_const", const=True, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--multitask", action="store_const", const=True, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on a manifest")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--long-percentile", type=float, default=None)

    p = sub.add_parser("kernel-check", help="recurrence vs convolution duality check")
    common(p)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--max-state", type=int, default=None)
    p.add_argument("--max-length", type=int, default=None)
    p.add_argument("--inject-fault", action="store_const", const=True, default=None)

    p = sub.add_parser("grad-check", help="finite-difference gradient audit")
    common(p)

    p = sub.add_parser("param-count", help="closed-form trainable parameter count")
    common(p)
    p.add_argument("--expect", type=int, default=None)

    p = sub.add_parser("bench", help="forward-pass timing of both evaluation modes")
    common(p)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--repeats", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic bag corpus")
    common(p)

    p = sub.add_parser("export-heatmap", help="patch-probability grid for one bag")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--bag-id")

    p = sub.add_parser("stats", help="corpus length statistics")
    common(p)
    p.add_argument("--manifest")
    p.add_argument("--percentile", type=float, default=None)

    return parser


_FLAG_KEYS = {
    "train": {"manifest": "train.manifest", "synthetic": "train.synthetic",
              "folds": "train.folds", "multitask": "model.multitask", "lam": "train.lambda"},
    "evaluate": {"checkpoint": "evaluate.checkpoint", "manifest": "evaluate.manifest",
                 "long_percentile": "evaluate.long_percentile"},
    "kernel-check": {"trials": "kernel_check.trials", "tolerance": "kernel_check.tolerance",
                     "max_state": "kernel_check.max_state", "max_length": "kernel_check.max_length",
                     "inject_fault": "kernel_check.inject_fault"},
    "grad-check": {},
    "param-count": {"expect": "param_count.expect"},
    "bench": {"length": "bench.length", "dim": "bench.dim", "repeats": "bench.repeats"},
    "synth": {},
    "export-heatmap": {"checkpoint": "heatmap.checkpoint", "manifest": "heatmap.manifest",
                       "bag_id": "heatmap.bag_id"},
    "stats": {"manifest": "stats.manifest", "percentile": "stats.percentile"},
}

_DISPATCH = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "kernel-check": cmd_kernel_check,
    "grad-check": cmd_grad_check,
    "param-count": cmd_param_count,
    "bench": cmd_bench,
    "synth": cmd_synth,
    "export-heatmap": cmd_export_heatmap,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    spec = RunSpec(
        command=args.command,
        config_file=args.config,
        overrides=list(args.set),
        seed=args.seed if args.seed is not None else 0,
        output_dir=Path(args.output),
        threads=args.threads if args.threads is not None else 1,
    )
    try:
        flag_values = {key: getattr(args, attr) for attr, key in _FLAG_KEYS[spec.command].items()}
        if args.seed is not None:
            flag_values["run.seed"] = args.seed
        if args.threads is not None:
            flag_values["run.threads"] = args.threads
        config = resolve_config(spec, flag_values)
        parallel.set_threads(config["run.threads"])
        write_resolved_config(spec, config)
        return _DISPATCH[spec.command](spec, config)
    except S4MilError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return 1
    finally:
        parallel.set_threads(1)


if __name__ == "__main__":
    sys.exit(main())
