"""The sequence aggregator and its pooling baselines.

Pipeline per bag: linear projection to H channels, per-token layer
normalization, then one or more blocks of [feature-wise SSM with skip ->
token-wise mixing to 2H -> gated linear unit back to H], an optional
per-token patch head, max pooling over the sequence, and a linear
classifier with softmax.

The mixing affine is stored as two H->H maps (value half and gate half of
the 2H output); together they are exactly the doubling affine feeding the
GLU and count H*2H + 2H parameters.

Each SSM channel keeps n_half = N/2 complex poles; real/imaginary parts are
separate trainable arrays so one channel contributes 2N pole/projection
parameters, plus one timestep and one feedthrough.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import ssm
from .autograd import POLE_REAL_CEILING, Node, Tape
from .errors import ContractError, EmptyBagError
from .seeding import substream

DISCRETIZATIONS = ("bilinear", "zoh")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 1024
    hidden_dim: int = 512
    state_dim: int = 32
    num_classes: int = 2
    num_ssm_layers: int = 1
    multitask: bool = False
    discretization: str = "bilinear"
    num_patch_classes: int | None = None

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "state_dim", "num_classes", "num_ssm_layers"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ContractError(f"{name} must be a positive integer, got {v!r}")
        if self.state_dim % 2 != 0:
            raise ContractError(f"state_dim must be even (conjugate-pair storage), got {self.state_dim}")
        if self.discretization not in DISCRETIZATIONS:
            raise ContractError(f"discretization must be one of {DISCRETIZATIONS}, got {self.discretization!r}")
        if self.num_patch_classes is not None and (not isinstance(self.num_patch_classes, int) or self.num_patch_classes < 1):
            raise ContractError(f"num_patch_classes must be a positive integer, got {self.num_patch_classes!r}")

    @property
    def n_half(self) -> int:
        return self.state_dim // 2

    @property
    def patch_classes(self) -> int:
        return self.num_patch_classes if self.num_patch_classes is not None else self.num_classes


def parameter_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Declaration-ordered shapes; this order is the checkpoint layout."""
    d, h, n = config.input_dim, config.hidden_dim, config.n_half
    shapes: dict[str, tuple] = {
        "projection.weight": (d, h),
        "projection.bias": (h,),
        "norm.scale": (h,),
        "norm.shift": (h,),
    }
    for i in range(config.num_ssm_layers):
        shapes[f"ssm{i}.a_re"] = (h, n)
        shapes[f"ssm{i}.a_im"] = (h, n)
        shapes[f"ssm{i}.c_re"] = (h, n)
        shapes[f"ssm{i}.c_im"] = (h, n)
        shapes[f"ssm{i}.log_dt"] = (h,)
        shapes[f"ssm{i}.d"] = (h,)
        shapes[f"mix{i}.value_weight"] = (h, h)
        shapes[f"mix{i}.value_bias"] = (h,)
        shapes[f"mix{i}.gate_weight"] = (h, h)
        shapes[f"mix{i}.gate_bias"] = (h,)
    shapes["classifier.weight"] = (h, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    if config.multitask:
        shapes["patch_head.weight"] = (h, config.patch_classes)
        shapes["patch_head.bias"] = (config.patch_classes,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    """Closed-form trainable parameter count.

    D*H + H (projection) + 2H (norm) + per layer [2*H*N (pole and projection
    halves) + H (log timestep) + H (feedthrough) + 2H^2 + 2H (mixing)]
    + H*C + C (classifier) [+ H*P + P patch head when multitask].
    """
    d, h, n_state = config.input_dim, config.hidden_dim, config.state_dim
    per_layer = 2 * h * n_state + h + h + 2 * h * h + 2 * h
    total = d * h + h + 2 * h + config.num_ssm_layers * per_layer \
        + h * config.num_classes + config.num_classes
    if config.multitask:
        total += h * config.patch_classes + config.patch_classes
    return total


@dataclass
class MilModel:
    """Configuration plus the full trainable parameter set (float32)."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        expected = parameter_shapes(self.config)
        if list(self.params.keys()) != list(expected.keys()):
            raise ContractError(
                f"parameter names/order mismatch: {list(self.params)} vs {list(expected)}"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name} must have shape {shape}, got {self.params[name].shape}")

    def parameters(self) -> dict[str, np.ndarray]:
        return self.params

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def init_parameters(config: ModelConfig, seed: int) -> MilModel:
    """Deterministic initialization.

    Poles start at -1/2 + i*pi*k (k-th conjugate pair), projections are
    unit-variance circular normals, log timesteps are uniform over
    [log 0.001, log 0.1], feedthrough starts at 1, and affine maps use
    fan-in-scaled uniform weights and biases.
    """
    rng = substream(seed, "init")
    h, n = config.hidden_dim, config.n_half

    def affine(fan_in, shape_w, shape_b):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, shape_w)
        b = rng.uniform(-bound, bound, shape_b)
        return w, b

    params: dict[str, np.ndarray] = {}
    pw, pb = affine(config.input_dim, (config.input_dim, h), (h,))
    params["projection.weight"] = pw
    params["projection.bias"] = pb
    params["norm.scale"] = np.ones(h)
    params["norm.shift"] = np.zeros(h)
    for i in range(config.num_ssm_layers):
        params[f"ssm{i}.a_re"] = np.full((h, n), -0.5)
        params[f"ssm{i}.a_im"] = np.tile(np.pi * np.arange(n), (h, 1))
        params[f"ssm{i}.c_re"] = rng.standard_normal((h, n)) * np.sqrt(0.5)
        params[f"ssm{i}.c_im"] = rng.standard_normal((h, n)) * np.sqrt(0.5)
        params[f"ssm{i}.log_dt"] = rng.uniform(np.log(0.001), np.log(0.1), h)
        params[f"ssm{i}.d"] = np.ones(h)
        vw, vb = affine(h, (h, h), (h,))
        gw, gb = affine(h, (h, h), (h,))
        params[f"mix{i}.value_weight"] = vw
        params[f"mix{i}.value_bias"] = vb
        params[f"mix{i}.gate_weight"] = gw
        params[f"mix{i}.gate_bias"] = gb
    cw, cb = affine(h, (h, config.num_classes), (config.num_classes,))
    params["classifier.weight"] = cw
    params["classifier.bias"] = cb
    if config.multitask:
        hw, hb = affine(h, (h, config.patch_classes), (config.patch_classes,))
        params["patch_head.weight"] = hw
        params["patch_head.bias"] = hb
    return MilModel(config=config, params={k: v.astype(np.float32) for k, v in params.items()})


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gated_linear_unit(v: np.ndarray) -> np.ndarray:
    """out_i = v_i * sigmoid(v_{H+i}) for a vector of even length 2H."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] % 2 != 0:
        raise ContractError(f"gated linear unit needs an even-length vector, got shape {v.shape}")
    h = v.shape[0] // 2
    gate = v[h:]
    sig = np.where(gate >= 0, 1.0 / (1.0 + np.exp(-np.abs(gate))),
                   np.exp(-np.abs(gate)) / (1.0 + np.exp(-np.abs(gate))))
    return v[:h] * sig


class TapeBundle(NamedTuple):
    tape: Tape
    slide_logits: Node
    patch_logits: Node | None
    loss: Node | None


def _check_features(config: ModelConfig, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ContractError(f"bag features must be (L, D), got shape {features.shape}")
    if features.shape[0] == 0:
        raise EmptyBagError("empty bag: a sequence needs at least one token")
    if features.shape[1] != config.input_dim:
        raise ContractError(
            f"feature dimension {features.shape[1]} does not match input_dim {config.input_dim}"
        )
    return features


def _recurrence_layer_output(params: dict, prefix: str, u: np.ndarray, rule: str) -> np.ndarray:
    """Per-channel oracle path: run each channel's stepped recurrence."""
    a_re = np.minimum(np.asarray(params[f"{prefix}.a_re"], dtype=np.float64), POLE_REAL_CEILING)
    a_im = np.asarray(params[f"{prefix}.a_im"], dtype=np.float64)
    c = np.asarray(params[f"{prefix}.c_re"], dtype=np.float64) \
        + 1j * np.asarray(params[f"{prefix}.c_im"], dtype=np.float64)
    d = np.asarray(params[f"{prefix}.d"], dtype=np.float64)
    log_dt = np.asarray(params[f"{prefix}.log_dt"], dtype=np.float64)
    out = np.empty((u.shape[0], u.shape[1]), dtype=np.float64)
    for hch in range(u.shape[1]):
        channel = ssm.SsmChannelParams(
            a=a_re[hch] + 1j * a_im[hch], c=c[hch], d=float(d[hch]), log_dt=float(log_dt[hch])
        )
        disc = ssm.discretize(channel, rule, channel=str(hch))
        out[:, hch] = ssm.run_recurrence(disc, channel.c, channel.d, u[:, hch])
    return out


def build_tape(config: ModelConfig, params: dict[str, np.ndarray], features: np.ndarray,
               slide_label: int | None = None, patch_labels=None, lam: float = 0.0,
               mode: str = "conv", dtype=np.float32, grad_enabled: bool = True) -> TapeBundle:
    """Assemble the forward (and optional loss) graph for one bag."""
    features = _check_features(config, features)
    if mode not in ("conv", "recurrence"):
        raise ContractError(f"unknown forward mode {mode!r}")
    tape = Tape(dtype=dtype, grad_enabled=grad_enabled)
    leaves = {name: tape.leaf(value, name) for name, value in params.items()}
    x = tape.leaf(features)
    x = tape.add(tape.matvec(x, leaves["projection.weight"]), leaves["projection.bias"])
    x = tape.layernorm(x, leaves["norm.scale"], leaves["norm.shift"])
    for i in range(config.num_ssm_layers):
        if mode == "conv":
            y = tape.ssm_conv(x, leaves[f"ssm{i}.a_re"], leaves[f"ssm{i}.a_im"],
                              leaves[f"ssm{i}.c_re"], leaves[f"ssm{i}.c_im"],
                              leaves[f"ssm{i}.d"], leaves[f"ssm{i}.log_dt"],
                              rule=config.discretization)
        else:
            # Oracle path: forward-only, parameters enter as a plain input.
            y = tape.leaf(_recurrence_layer_output(params, f"ssm{i}", x.value.astype(np.float64),
                                                   config.discretization))
        value = tape.add(tape.matvec(y, leaves[f"mix{i}.value_weight"]), leaves[f"mix{i}.value_bias"])
        gate = tape.add(tape.matvec(y, leaves[f"mix{i}.gate_weight"]), leaves[f"mix{i}.gate_bias"])
        x = tape.mul(value, tape.sigmoid(gate))
    patch_logits = None
    if config.multitask:
        patch_logits = tape.add(tape.matvec(x, leaves["patch_head.weight"]), leaves["patch_head.bias"])
    pooled = tape.max_pool_sequence(x)
    slide_logits = tape.add(tape.matvec(pooled, leaves["classifier.weight"]), leaves["classifier.bias"])
    loss = None
    if slide_label is not None:
        loss = tape.softmax_log_loss(slide_logits, [int(slide_label)], reduction="mean")
        if config.multitask and lam != 0.0:
            if patch_labels is None:
                raise ContractError("multitask loss with lam != 0 requires patch labels")
            patch_labels = np.asarray(patch_labels, dtype=np.int64)
            if patch_labels.shape != (features.shape[0],):
                raise ContractError(
                    f"patch labels must have length {features.shape[0]}, got {patch_labels.shape}"
                )
            patch_term = tape.softmax_log_loss(patch_logits, patch_labels, reduction="sum")
            loss = tape.add(loss, tape.scale(patch_term, lam / features.shape[0]))
    return TapeBundle(tape=tape, slide_logits=slide_logits, patch_logits=patch_logits, loss=loss)


class ForwardResult(NamedTuple):
    slide_probs: np.ndarray
    patch_probs: np.ndarray | None


def forward_mil(model: MilModel, features: np.ndarray, mode: str = "conv",
                dtype=np.float32) -> ForwardResult:
    """Class probabilities for one bag (and per-token probabilities when multitask)."""
    bundle = build_tape(model.config, model.params, features, mode=mode, dtype=dtype,
                        grad_enabled=False)
    slide = softmax(bundle.slide_logits.value)
    patch = softmax(bundle.patch_logits.value) if bundle.patch_logits is not None else None
    return ForwardResult(slide_probs=slide, patch_probs=patch)


# --------------------------------------------------------------------------
# Pooling baselines
# --------------------------------------------------------------------------

POOLING_KINDS = ("mean", "max")


@dataclass
class PoolingModel:
    """Feature-wise pooling over the sequence plus an affine softmax head."""

    kind: str
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (C,)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"head.weight": self.weight, "head.bias": self.bias}


def init_pooling_baseline(kind: str, input_dim: int, num_classes: int, seed: int) -> PoolingModel:
    if kind not in POOLING_KINDS:
        raise ContractError(f"pooling kind must be one of {POOLING_KINDS}, got {kind!r}")
    rng = substream(seed, f"pool-init-{kind}")
    bound = 1.0 / np.sqrt(input_dim)
    return PoolingModel(
        kind=kind,
        weight=rng.uniform(-bound, bound, (input_dim, num_classes)).astype(np.float32),
        bias=rng.uniform(-bound, bound, num_classes).astype(np.float32),
    )


def pool_features(kind: str, features: np.ndarray) -> np.ndarray:
    """Order-independent pooling: identical bytes out for any token permutation."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise EmptyBagError(f"pooling needs a non-empty (L, D) bag, got shape {features.shape}")
    if kind == "max":
        return features.max(axis=0).astype(np.float64)
    if kind == "mean":
        # summing in sorted order makes the result independent of token order
        ordered = np.sort(np.asarray(features, dtype=np.float64), axis=0)
        return ordered.sum(axis=0) / features.shape[0]
    raise ContractError(f"pooling kind must be one of {POOLING_KINDS}, got {kind!r}")


def forward_pooling_baseline(model: PoolingModel, features: np.ndarray) -> np.ndarray:
    pooled = pool_features(model.kind, features)
    if pooled.shape[0] != model.weight.shape[0]:
        raise ContractError(
            f"feature dimension {pooled.shape[0]} does not match head input {model.weight.shape[0]}"
        )
    logits = pooled @ model.weight.astype(np.float64) + model.bias.astype(np.float64)
    return softmax(logits)


def pooling_tape(model: PoolingModel, features: np.ndarray, label: int,
                 dtype=np.float32) -> TapeBundle:
    """Training graph for a pooling baseline (the pooling itself is fixed)."""
    pooled = pool_features(model.kind, features)
    tape = Tape(dtype=dtype)
    w = tape.leaf(model.weight, "head.weight")
    b = tape.leaf(model.bias, "head.bias")
    logits = tape.add(tape.matvec(tape.leaf(pooled), w), b)
    loss = tape.softmax_log_loss(logits, [int(label)], reduction="mean")
    return TapeBundle(tape=tape, slide_logits=logits, patch_logits=None, loss=loss)
