"""Execution-time prediction for fused ops.

Original ops come straight from the profile (exact lookup). Fused
groups are predicted by one of three regressors:

* ``analytic``: white-box model with a launch overhead and a memory
  cost per externally-moved byte. Each member's raw compute time is
  recovered from its profiled time by subtracting its own overhead, so
  a singleton prediction reproduces the profiled time exactly.
* ``linear_features``: affine model over the aggregate feature vector,
  softplus output.
* ``message_passing``: mean-aggregation message passing over the member
  subgraph, sum readout over member embeddings, then a three-layer
  dense head with softplus output. Forward and reverse passes are
  written out by hand in numpy so gradients can be checked against
  finite differences.

Both learned variants train with Adam on the squared-log-error loss.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    Divergence,
    GraphFormatError,
    InvalidConfig,
    MissingCost,
    NonPositiveTime,
    UnknownOp,
)
from .graph import KIND_PARAMETER, FusionGroup, HloGraph, group_io
from .comm import CommModelParams, predict as comm_predict
from .simulator import CostProviders

OTHER_OP_CODE = "<other>"


# ---------------------------------------------------------------------------
# Profile


@dataclass(frozen=True)
class Profile:
    """Measured per-op times, keyed by (op_code, input_shape_key)."""

    times: Mapping[tuple[str, str], float]

    def __post_init__(self) -> None:
        for key, value in self.times.items():
            if not value > 0:
                raise ValueError(f"profiled time for {key} must be > 0")


def lookup(profile: Profile, op) -> float:
    """Exact-match profile lookup; never guesses."""
    key = (op.op_code, op.input_shape_key)
    try:
        return profile.times[key]
    except KeyError:
        raise UnknownOp(f"no profile entry for {key}") from None


def save_profile(path, profile: Profile) -> None:
    entries = [
        {"op_code": code, "input_shape_key": shape, "time_us": t}
        for (code, shape), t in sorted(profile.times.items())
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"entries": entries}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_profile(path) -> Profile:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        times = {
            (str(e["op_code"]), str(e["input_shape_key"])): float(e["time_us"])
            for e in doc["entries"]
        }
    except (KeyError, TypeError) as exc:
        raise GraphFormatError(f"{path}: bad profile document") from exc
    return Profile(times)


# ---------------------------------------------------------------------------
# Features


@dataclass(frozen=True)
class SubgraphFeatures:
    """Per-member node features plus whole-group aggregates for one
    fused op. Node order follows ascending member op id; ``edges`` are
    member-local index triples (src, dst, bytes)."""

    op_codes: tuple[str, ...]
    compute_us: tuple[float, ...]
    in_bytes: tuple[int, ...]
    out_bytes: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...]
    member_count: int
    total_compute_us: float
    internal_bytes: int
    external_in_bytes: int
    external_out_bytes: int
    longest_path_len: int

    def aggregate_vector(self) -> np.ndarray:
        return np.array(
            [
                self.member_count,
                self.total_compute_us,
                self.internal_bytes,
                self.external_in_bytes,
                self.external_out_bytes,
                self.longest_path_len,
            ],
            dtype=np.float64,
        )


def _longest_path_nodes(n: int, edges: Sequence[tuple[int, int, int]]) -> int:
    if n == 0:
        return 0
    succs: dict[int, list[int]] = {i: [] for i in range(n)}
    indeg = [0] * n
    for i, j, _ in edges:
        succs[i].append(j)
        indeg[j] += 1
    order = [i for i in range(n) if indeg[i] == 0]
    out = list(order)
    while order:
        nxt = []
        for u in order:
            for v in succs[u]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    nxt.append(v)
        out.extend(nxt)
        order = nxt
    depth = [1] * n
    for u in out:
        for v in succs[u]:
            depth[v] = max(depth[v], depth[u] + 1)
    return max(depth)


def featurize(g: HloGraph, group: FusionGroup, profile: Profile) -> SubgraphFeatures:
    """Feature extraction for one group. Replica members contribute
    exactly like ordinary members."""
    members = sorted(group.member_ops)
    local = {op_id: i for i, op_id in enumerate(members)}
    idx = g.index
    op_codes = []
    compute = []
    in_b = []
    out_b = []
    for op_id in members:
        op = g.op(op_id)
        op_codes.append(op.op_code)
        compute.append(lookup(profile, op))
        in_b.append(sum(e.bytes for e in idx.in_edges[op_id]))
        out_b.append(op.out_bytes)
    edges = tuple(
        (local[e.src], local[e.dst], e.bytes)
        for e in g.edges
        if e.src in group.member_ops and e.dst in group.member_ops
    )
    io = group_io(g, group.id)
    return SubgraphFeatures(
        op_codes=tuple(op_codes),
        compute_us=tuple(compute),
        in_bytes=tuple(in_b),
        out_bytes=tuple(out_b),
        edges=edges,
        member_count=len(members),
        total_compute_us=float(sum(compute)),
        internal_bytes=io.internal_bytes,
        external_in_bytes=io.external_in_bytes,
        external_out_bytes=io.external_out_bytes,
        longest_path_len=_longest_path_nodes(len(members), edges),
    )


def features_to_record(f: SubgraphFeatures, label_us: float) -> dict:
    return {
        "nodes": [
            [f.op_codes[i], f.compute_us[i], f.in_bytes[i], f.out_bytes[i]]
            for i in range(f.member_count)
        ],
        "edges": [list(e) for e in f.edges],
        "agg": {
            "internal_bytes": f.internal_bytes,
            "external_in_bytes": f.external_in_bytes,
            "external_out_bytes": f.external_out_bytes,
            "longest_path_len": f.longest_path_len,
        },
        "label_us": label_us,
    }


def features_from_record(rec: dict) -> tuple[SubgraphFeatures, float]:
    try:
        nodes = rec["nodes"]
        agg = rec["agg"]
        feats = SubgraphFeatures(
            op_codes=tuple(str(n[0]) for n in nodes),
            compute_us=tuple(float(n[1]) for n in nodes),
            in_bytes=tuple(int(n[2]) for n in nodes),
            out_bytes=tuple(int(n[3]) for n in nodes),
            edges=tuple((int(e[0]), int(e[1]), int(e[2])) for e in rec["edges"]),
            member_count=len(nodes),
            total_compute_us=float(sum(float(n[1]) for n in nodes)),
            internal_bytes=int(agg["internal_bytes"]),
            external_in_bytes=int(agg["external_in_bytes"]),
            external_out_bytes=int(agg["external_out_bytes"]),
            longest_path_len=int(agg["longest_path_len"]),
        )
        return feats, float(rec["label_us"])
    except (KeyError, TypeError, IndexError, ValueError) as exc:
        raise GraphFormatError(f"bad training sample record: {rec!r}") from exc


def save_samples(path, samples: Iterable[tuple[SubgraphFeatures, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for feats, label in samples:
            fh.write(json.dumps(features_to_record(feats, label), sort_keys=True))
            fh.write("\n")


def load_samples(path) -> list[tuple[SubgraphFeatures, float]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(features_from_record(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Models


class EstimatorVariant(Enum):
    ANALYTIC = "analytic"
    LINEAR_FEATURES = "linear_features"
    MESSAGE_PASSING = "message_passing"


_AGG_DIM = 6
_NODE_NUMERIC_DIM = 6


@dataclass
class EstimatorModel:
    """``out_scale`` rescales the softplus output so the pre-activation
    works near 1 regardless of the label magnitude; training sets it to
    the median training label."""

    variant: EstimatorVariant
    params: dict[str, np.ndarray]
    vocab: tuple[str, ...] = ()
    node_norm: Optional[tuple[np.ndarray, np.ndarray]] = None
    agg_norm: Optional[tuple[np.ndarray, np.ndarray]] = None
    layers: int = 6
    hidden: int = 32
    out_scale: float = 1.0
    train_report: Optional["TrainReport"] = field(default=None, compare=False)


@dataclass(frozen=True)
class TrainReport:
    epochs: tuple[int, ...]
    train_loss: tuple[float, ...]
    val_loss: tuple[float, ...]
    best_epoch: int
    best_val_loss: float

    def lines(self) -> list[str]:
        out = ["epoch train_loss val_loss"]
        for e, tr, vl in zip(self.epochs, self.train_loss, self.val_loss):
            out.append(f"{e} {tr:.6f} {vl:.6f}")
        out.append(f"best_epoch {self.best_epoch} best_val_loss {self.best_val_loss:.6f}")
        return out


def _softplus(z: float) -> float:
    return float(np.logaddexp(0.0, z))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    e = float(np.exp(z))
    return e / (1.0 + e)


def loss(pred_us: float, actual_us: float) -> float:
    """Squared log error; zero iff the prediction is exact."""
    if pred_us <= 0 or actual_us <= 0:
        raise NonPositiveTime("loss needs strictly positive times")
    d = np.log(pred_us) - np.log(actual_us)
    return float(d * d)


def _standardize(x: np.ndarray, norm: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    mean, std = norm
    return (x - mean) / std


def _encode_nodes(f: SubgraphFeatures, vocab: tuple[str, ...]) -> np.ndarray:
    """Raw node matrix: each numeric carried twice, log-compressed for
    shape information and raw for the linear component (standardization
    fixes the scale of both), plus a one-hot op code. Unseen op codes
    fall into the reserved slot."""
    slot = {code: i for i, code in enumerate(vocab)}
    other = slot.get(OTHER_OP_CODE, len(vocab) - 1 if vocab else 0)
    n = f.member_count
    x = np.zeros((n, _NODE_NUMERIC_DIM + len(vocab)), dtype=np.float64)
    for i in range(n):
        x[i, 0] = np.log1p(f.compute_us[i])
        x[i, 1] = f.compute_us[i]
        x[i, 2] = np.log1p(f.in_bytes[i])
        x[i, 3] = f.in_bytes[i]
        x[i, 4] = np.log1p(f.out_bytes[i])
        x[i, 5] = f.out_bytes[i]
        x[i, _NODE_NUMERIC_DIM + slot.get(f.op_codes[i], other)] = 1.0
    return x


def _encode_agg(f: SubgraphFeatures) -> np.ndarray:
    """Aggregates carried twice, log-compressed and raw, like the node
    features."""
    agg = f.aggregate_vector()
    return np.concatenate([np.log1p(agg), agg])


def _mean_aggregation_matrix(f: SubgraphFeatures) -> np.ndarray:
    """Row-normalized undirected adjacency including self-loops."""
    n = f.member_count
    a = np.eye(n, dtype=np.float64)
    for i, j, _ in f.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a / a.sum(axis=1, keepdims=True)


def _check_shape(arr: np.ndarray, shape: tuple, name: str) -> None:
    if arr.shape != shape:
        raise DimensionMismatch(f"{name}: expected shape {shape}, got {arr.shape}")


def _mp_forward(model: EstimatorModel, x: np.ndarray, m: np.ndarray) -> tuple[float, dict]:
    p = model.params
    h = model.hidden
    feat_dim = x.shape[1]
    _check_shape(p["W_emb"], (h, feat_dim), "W_emb")
    cache: dict = {"X": x, "M": m, "H": [], "P": [], "Z": []}
    hidden = x @ p["W_emb"].T
    cache["H"].append(hidden)
    for layer in range(1, model.layers + 1):
        w = p[f"W_{layer}"]
        _check_shape(w, (h, h), f"W_{layer}")
        pooled = m @ hidden
        z = pooled @ w.T
        hidden = np.maximum(z, 0.0)
        cache["P"].append(pooled)
        cache["Z"].append(z)
        cache["H"].append(hidden)
    s = hidden.sum(axis=0)
    z_r = p["W_r"] @ s
    r = np.maximum(z_r, 0.0)
    z1 = p["A1"] @ r + p["c1"]
    d1 = np.maximum(z1, 0.0)
    z2 = p["A2"] @ d1 + p["c2"]
    d2 = np.maximum(z2, 0.0)
    z = float(p["a3"] @ d2 + p["c3"])
    cache.update(s=s, z_r=z_r, r=r, z1=z1, d1=d1, z2=z2, d2=d2, z=z)
    return max(_softplus(z) * model.out_scale, 1e-9), cache


def _mp_backward(model: EstimatorModel, cache: dict, dpred: float) -> dict[str, np.ndarray]:
    p = model.params
    grads: dict[str, np.ndarray] = {}
    dz = dpred * _sigmoid(cache["z"]) * model.out_scale
    grads["c3"] = np.array(dz)
    grads["a3"] = dz * cache["d2"]
    dd2 = dz * p["a3"]
    dz2 = dd2 * (cache["z2"] > 0)
    grads["A2"] = np.outer(dz2, cache["d1"])
    grads["c2"] = dz2
    dd1 = p["A2"].T @ dz2
    dz1 = dd1 * (cache["z1"] > 0)
    grads["A1"] = np.outer(dz1, cache["r"])
    grads["c1"] = dz1
    dr = p["A1"].T @ dz1
    dz_r = dr * (cache["z_r"] > 0)
    grads["W_r"] = np.outer(dz_r, cache["s"])
    ds = p["W_r"].T @ dz_r
    dh = np.broadcast_to(ds, cache["H"][-1].shape).copy()
    m = cache["M"]
    for layer in range(model.layers, 0, -1):
        dz_l = dh * (cache["Z"][layer - 1] > 0)
        grads[f"W_{layer}"] = dz_l.T @ cache["P"][layer - 1]
        dpool = dz_l @ p[f"W_{layer}"]
        dh = m.T @ dpool
    grads["W_emb"] = dh.T @ cache["X"]
    return grads


def _linear_forward(model: EstimatorModel, fs: np.ndarray) -> tuple[float, dict]:
    w = model.params["w"]
    if w.shape != fs.shape:
        raise DimensionMismatch(f"w: expected shape {fs.shape}, got {w.shape}")
    z = float(w @ fs + model.params["b"])
    return max(_softplus(z) * model.out_scale, 1e-9), {"fs": fs, "z": z}


def _linear_backward(model: EstimatorModel, cache: dict, dpred: float) -> dict[str, np.ndarray]:
    dz = dpred * _sigmoid(cache["z"]) * model.out_scale
    return {"w": dz * cache["fs"], "b": np.array(dz)}


def _analytic_predict(model: EstimatorModel, f: SubgraphFeatures) -> float:
    launch = float(model.params["launch_overhead_us"])
    mem = float(model.params["mem_us_per_byte"])
    raw = [
        f.compute_us[i] - launch - mem * (f.in_bytes[i] + f.out_bytes[i])
        for i in range(f.member_count)
    ]
    pred = (
        sum(raw)
        + launch
        + mem * (f.external_in_bytes + f.external_out_bytes)
    )
    return max(pred, 1e-9)


def model_inputs(model: EstimatorModel, f: SubgraphFeatures):
    """Encoded, normalized inputs for the learned variants."""
    if model.variant is EstimatorVariant.LINEAR_FEATURES:
        fs = _encode_agg(f)
        if model.agg_norm is not None:
            fs = _standardize(fs, model.agg_norm)
        return (fs,)
    x = _encode_nodes(f, model.vocab)
    if model.node_norm is not None:
        x = _standardize(x, model.node_norm)
    return (x, _mean_aggregation_matrix(f))


def predict_fused(model: EstimatorModel, f: SubgraphFeatures) -> float:
    """Strictly positive execution-time prediction for a fused group."""
    if model.variant is EstimatorVariant.ANALYTIC:
        return _analytic_predict(model, f)
    if model.variant is EstimatorVariant.LINEAR_FEATURES:
        pred, _ = _linear_forward(model, *model_inputs(model, f))
        return pred
    pred, _ = _mp_forward(model, *model_inputs(model, f))
    return pred


def _loss_and_grads(
    model: EstimatorModel, inputs, actual_us: float
) -> tuple[float, dict[str, np.ndarray]]:
    if model.variant is EstimatorVariant.LINEAR_FEATURES:
        pred, cache = _linear_forward(model, *inputs)
        backward = _linear_backward
    else:
        pred, cache = _mp_forward(model, *inputs)
        backward = _mp_backward
    value = loss(pred, actual_us)
    dpred = 2.0 * (np.log(pred) - np.log(actual_us)) / pred
    return value, backward(model, cache, dpred)


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 60
    seed: int = 0
    val_fraction: float = 0.2
    layers: int = 6
    hidden: int = 32

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise InvalidConfig("learning rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidConfig("Adam betas must lie in (0, 1)")
        if not (0 < self.val_fraction < 1):
            raise InvalidConfig("validation fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch size >= 1 and epochs >= 0 required")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
            v={k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    t = state.step + 1
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(value):
            raise DimensionMismatch(f"gradient for {name}: {g.shape} vs {np.shape(value)}")
        m = cfg.beta1 * state.m[name] + (1 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        new_params[name] = value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(new_m, new_v, t)


def _init_params(
    variant: EstimatorVariant, cfg: TrainConfig, feat_dim: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    if variant is EstimatorVariant.LINEAR_FEATURES:
        return {
            "w": rng.normal(0.0, 0.1, size=2 * _AGG_DIM),
            "b": np.array(rng.normal(0.0, 0.1)),
        }
    h = cfg.hidden
    params: dict[str, np.ndarray] = {
        "W_emb": rng.normal(0.0, np.sqrt(2.0 / feat_dim), size=(h, feat_dim))
    }
    for layer in range(1, cfg.layers + 1):
        params[f"W_{layer}"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h))
    params["W_r"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h))
    params["A1"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h))
    params["c1"] = np.zeros(h)
    params["A2"] = rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h))
    params["c2"] = np.zeros(h)
    params["a3"] = rng.normal(0.0, np.sqrt(2.0 / h), size=h)
    # softplus(c3) = 1, so the initial prediction sits at out_scale.
    params["c3"] = np.array(float(np.log(np.expm1(1.0))))
    return params


def _norm_stats(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return mean, std


def build_vocab(samples: Sequence[tuple[SubgraphFeatures, float]]) -> tuple[str, ...]:
    codes = sorted({c for f, _ in samples for c in f.op_codes})
    return tuple(codes) + (OTHER_OP_CODE,)


def _fit_analytic(
    samples: Sequence[tuple[SubgraphFeatures, float]],
) -> dict[str, np.ndarray]:
    """Least squares for (launch, mem) from the gap between the summed
    member times and the fused label."""
    rows = []
    targets = []
    for f, label in samples:
        saved_io = (
            sum(f.in_bytes) + sum(f.out_bytes)
            - f.external_in_bytes - f.external_out_bytes
        )
        rows.append([f.member_count - 1, saved_io])
        targets.append(f.total_compute_us - label)
    a = np.array(rows, dtype=np.float64)
    y = np.array(targets, dtype=np.float64)
    sol, *_ = np.linalg.lstsq(a, y, rcond=None)
    launch = max(float(sol[0]), 0.0)
    mem = max(float(sol[1]), 0.0)
    return {"launch_overhead_us": np.array(launch), "mem_us_per_byte": np.array(mem)}


def analytic_model(launch_overhead_us: float, mem_us_per_byte: float) -> EstimatorModel:
    return EstimatorModel(
        variant=EstimatorVariant.ANALYTIC,
        params={
            "launch_overhead_us": np.array(float(launch_overhead_us)),
            "mem_us_per_byte": np.array(float(mem_us_per_byte)),
        },
    )


def train(
    samples: Sequence[tuple[SubgraphFeatures, float]],
    cfg: TrainConfig,
    variant: EstimatorVariant,
) -> EstimatorModel:
    """Supervised training; returns the parameter set with the lowest
    validation loss seen across epochs. Deterministic given cfg.seed."""
    if len(samples) < cfg.batch_size:
        raise InvalidConfig("need at least batch_size samples")
    for _, label in samples:
        if not label > 0:
            raise NonPositiveTime("training labels must be > 0")

    if variant is EstimatorVariant.ANALYTIC:
        model = EstimatorModel(EstimatorVariant.ANALYTIC, _fit_analytic(samples))
        return model

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(cfg.val_fraction * len(samples))))
    n_val = min(n_val, len(samples) - 1)
    val_idx = order[:n_val]
    train_idx = order[n_val:]

    vocab = build_vocab(samples)
    feat_dim = _NODE_NUMERIC_DIM + len(vocab)

    model = EstimatorModel(
        variant=variant,
        params=_init_params(variant, cfg, feat_dim, rng),
        vocab=vocab,
        layers=cfg.layers,
        hidden=cfg.hidden,
    )
    if variant is EstimatorVariant.LINEAR_FEATURES:
        aggs = np.stack([_encode_agg(samples[i][0]) for i in train_idx])
        model.agg_norm = _norm_stats(aggs)
        # Scale so the pre-activation sits deep in softplus's identity
        # regime: the affine model then predicts times directly and the
        # transform only guards positivity.
        model.out_scale = float(np.median([samples[i][1] for i in train_idx])) / 16.0
    else:
        node_rows = np.concatenate(
            [_encode_nodes(samples[i][0], vocab) for i in train_idx]
        )
        model.node_norm = _norm_stats(node_rows)
        model.out_scale = float(np.median([samples[i][1] for i in train_idx]))

    encoded = [model_inputs(model, f) for f, _ in samples]
    labels = [label for _, label in samples]

    def mean_loss(indices: np.ndarray) -> float:
        total = 0.0
        for i in indices:
            pred = (
                _linear_forward(model, *encoded[i])[0]
                if variant is EstimatorVariant.LINEAR_FEATURES
                else _mp_forward(model, *encoded[i])[0]
            )
            total += loss(pred, labels[i])
        return total / len(indices)

    state = AdamState.zeros(model.params)
    best_params = copy.deepcopy(model.params)
    best_val = mean_loss(val_idx) if cfg.epochs > 0 else float("inf")
    best_epoch = 0
    epochs_out: list[int] = []
    train_hist: list[float] = []
    val_hist: list[float] = []

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train_idx)
        epoch_loss = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            grad_sum: dict[str, np.ndarray] = {
                k: np.zeros_like(v) for k, v in model.params.items()
            }
            for i in batch:
                value, grads = _loss_and_grads(model, encoded[i], labels[i])
                epoch_loss += value
                for k, gv in grads.items():
                    grad_sum[k] += gv
            scale = 1.0 / len(batch)
            mean_grads = {k: v * scale for k, v in grad_sum.items()}
            model.params, state = adam_step(model.params, mean_grads, state, cfg)
        train_mean = epoch_loss / len(perm)
        val_mean = mean_loss(val_idx)
        if not np.isfinite(val_mean):
            raise Divergence(f"validation loss became non-finite at epoch {epoch}")
        epochs_out.append(epoch)
        train_hist.append(train_mean)
        val_hist.append(val_mean)
        if val_mean < best_val:
            best_val = val_mean
            best_params = copy.deepcopy(model.params)
            best_epoch = epoch

    if cfg.epochs > 0:
        model.params = best_params
    model.train_report = TrainReport(
        epochs=tuple(epochs_out),
        train_loss=tuple(train_hist),
        val_loss=tuple(val_hist),
        best_epoch=best_epoch,
        best_val_loss=best_val if np.isfinite(best_val) else float("nan"),
    )
    return model


# ---------------------------------------------------------------------------
# Model file format (versioned JSON, decimal text parameters)

_FORMAT_VERSION = 1


def save_model(path, model: EstimatorModel) -> None:
    doc: dict = {
        "format_version": _FORMAT_VERSION,
        "variant": model.variant.value,
        "hyper": {
            "layers": model.layers,
            "hidden": model.hidden,
            "out_scale": model.out_scale,
        },
        "vocab": list(model.vocab),
        "node_norm": None
        if model.node_norm is None
        else {"mean": model.node_norm[0].tolist(), "std": model.node_norm[1].tolist()},
        "agg_norm": None
        if model.agg_norm is None
        else {"mean": model.agg_norm[0].tolist(), "std": model.agg_norm[1].tolist()},
        "params": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr).ravel().tolist()}
            for name, arr in sorted(model.params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> EstimatorModel:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        if doc["format_version"] != _FORMAT_VERSION:
            raise GraphFormatError(f"{path}: unsupported model format version")
        params = {
            name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
            for name, spec in doc["params"].items()
        }
        def norm(key):
            block = doc.get(key)
            if block is None:
                return None
            return (
                np.array(block["mean"], dtype=np.float64),
                np.array(block["std"], dtype=np.float64),
            )
        return EstimatorModel(
            variant=EstimatorVariant(doc["variant"]),
            params=params,
            vocab=tuple(doc.get("vocab", [])),
            node_norm=norm("node_norm"),
            agg_norm=norm("agg_norm"),
            layers=int(doc["hyper"]["layers"]),
            hidden=int(doc["hyper"]["hidden"]),
            out_scale=float(doc["hyper"].get("out_scale", 1.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"{path}: bad model document") from exc


# ---------------------------------------------------------------------------
# Cost providers for the simulator


def make_cost_providers(
    profile: Profile,
    comm_params: CommModelParams,
    model: Optional[EstimatorModel] = None,
) -> CostProviders:
    """Profile lookups for original ops, the estimator for fused groups,
    and the fitted linear model for buckets."""

    def op_cost(g: HloGraph, group: FusionGroup) -> float:
        if len(group.member_ops) == 1:
            op = g.op(next(iter(group.member_ops)))
            if op.kind == KIND_PARAMETER:
                return 0.0
            return lookup(profile, op)
        if model is None:
            raise MissingCost(
                f"group {group.id} is fused and no fused-op estimator was provided"
            )
        return predict_fused(model, featurize(g, group, profile))

    def comm_cost(g: HloGraph, bucket) -> float:
        return comm_predict(comm_params, bucket.total_bytes)

    return CostProviders(op_cost=op_cost, comm_cost=comm_cost)
