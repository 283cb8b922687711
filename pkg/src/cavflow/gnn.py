"""GraphSAGE regressor for per-vehicle exit-time prediction.

Plain-numpy implementation: mean neighbor aggregation over the full
neighborhood (graphs here are tiny, so no sampling), concatenation with the
node's own embedding, a fully connected layer with rectified-linear
activation per hop, and a linear head producing one scalar per node.  The
scalar is squashed through a sigmoid and rescaled into the vehicle's
feasible exit-time range, so predictions are always strictly inside it.

Training minimizes the Huber loss of the rescaled prediction against the
solver's exit time (stored as a duration) with mini-batch Adam; gradients
are hand-derived and validated against finite differences in the tests.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ModelError, ModelFormatError
from .scenario import CoordGraph, ScenarioConfig

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NodeFeatures:
    """Normalized per-vehicle input: position and speed fractions plus a
    one-hot lane encoding."""

    pos_norm: float
    speed_norm: float
    lane_onehot: tuple[float, ...]

    def vector(self) -> np.ndarray:
        return np.array([self.pos_norm, self.speed_norm, *self.lane_onehot])


@dataclass
class SageLayer:
    """One aggregation hop: weights act on [own embedding | neighbor mean]."""

    W: np.ndarray  # (out_dim, 2 * in_dim)
    b: np.ndarray  # (out_dim,)


@dataclass
class SageModel:
    layers: list[SageLayer]
    head_w: np.ndarray  # (hidden_dim,)
    head_b: float
    feature_dim: int
    hidden_dim: int
    norm_pos: float     # position scale (zone exit)
    norm_speed: float   # speed scale (v_max)
    lane_ids: tuple[int, ...]

    def lane_onehot(self, lane: int) -> tuple[float, ...]:
        try:
            idx = self.lane_ids.index(lane)
        except ValueError:
            raise ModelError(f"model has no encoding for lane {lane}") from None
        return tuple(1.0 if i == idx else 0.0 for i in range(len(self.lane_ids)))

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        out.append(self.head_w)
        return out


def init_model(
    feature_dim: int,
    hidden_dim: int,
    n_layers: int,
    norm_pos: float,
    norm_speed: float,
    lane_ids: Sequence[int],
    rng: np.random.Generator,
) -> SageModel:
    """He-scaled random initialization."""
    layers = []
    in_dim = feature_dim
    for _ in range(n_layers):
        scale = np.sqrt(2.0 / (2 * in_dim))
        layers.append(SageLayer(
            W=rng.normal(0.0, scale, size=(hidden_dim, 2 * in_dim)),
            b=np.zeros(hidden_dim),
        ))
        in_dim = hidden_dim
    head_w = rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=hidden_dim)
    return SageModel(layers=layers, head_w=head_w, head_b=0.0,
                     feature_dim=feature_dim, hidden_dim=hidden_dim,
                     norm_pos=norm_pos, norm_speed=norm_speed,
                     lane_ids=tuple(lane_ids))


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _directed_edges(graph: CoordGraph, index_of: Mapping[int, int]) -> tuple[np.ndarray, np.ndarray]:
    # Accumulation order is canonicalized by vehicle id so that permuting
    # the node rows cannot change the float summation order.
    pairs = []
    for a, b in graph.edges:
        pairs.append((b, a))
        pairs.append((a, b))
    pairs.sort()
    src = np.array([index_of[s] for _, s in pairs], dtype=np.intp)
    dst = np.array([index_of[d] for d, _ in pairs], dtype=np.intp)
    return src, dst


def _aggregate(h: np.ndarray, src: np.ndarray, dst: np.ndarray, deg: np.ndarray) -> np.ndarray:
    agg = np.zeros_like(h)
    if len(src):
        np.add.at(agg, dst, h[src])
    return agg / np.maximum(deg, 1.0)[:, None]


def _forward_arrays(
    model: SageModel,
    x: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    deg: np.ndarray,
    keep_cache: bool = False,
):
    if x.shape[1] != model.feature_dim:
        raise ModelError(f"feature width {x.shape[1]} != model feature_dim {model.feature_dim}")
    h = x
    cache = []
    for layer in model.layers:
        agg = _aggregate(h, src, dst, deg)
        concat = np.hstack([h, agg])
        z = concat @ layer.W.T + layer.b
        if keep_cache:
            cache.append((concat, z))
        h = np.maximum(z, 0.0)
    out = h @ model.head_w + model.head_b
    if keep_cache:
        return out, h, cache
    return out


def forward(model: SageModel, features: Sequence[NodeFeatures], graph: CoordGraph) -> np.ndarray:
    """Per-node scalar outputs; features[i] belongs to graph.nodes[i].

    A node with no neighbors aggregates the zero vector.  Outputs are
    exactly equivariant under a joint permutation of nodes and feature
    rows: the computation runs in ascending-vehicle-id order internally,
    so the float operation order cannot depend on how the caller happened
    to arrange the rows.
    """
    if len(features) != len(graph.nodes):
        raise ModelError(f"{len(features)} feature rows for {len(graph.nodes)} nodes")
    order = sorted(range(len(graph.nodes)), key=lambda i: graph.nodes[i])
    x = np.array([features[i].vector() for i in order])
    index_of = {graph.nodes[i]: rank for rank, i in enumerate(order)}
    src, dst = _directed_edges(graph, index_of)
    deg = np.zeros(len(graph.nodes))
    if len(dst):
        np.add.at(deg, dst, 1.0)
    canonical = _forward_arrays(model, x, src, dst, deg)
    out = np.empty_like(canonical)
    out[np.array(order)] = canonical
    return out


def instance_features(model: SageModel, instance, config: ScenarioConfig) -> list[NodeFeatures]:
    """Features for a PlanningInstance in graph-node order."""
    by_vid = {s.vid: s for s in instance.states}
    feats = []
    for vid in instance.graph.nodes:
        s = by_vid[vid]
        feats.append(NodeFeatures(
            pos_norm=s.pos / model.norm_pos,
            speed_norm=s.speed / model.norm_speed,
            lane_onehot=model.lane_onehot(s.lane),
        ))
    return feats


def predict_exit_times(model: SageModel, instance, config: ScenarioConfig) -> dict[int, float]:
    """Predicted absolute exit time per vehicle, strictly inside its range.

    The sigmoid keeps predictions in the open interval; a tiny clamp stops
    float saturation from landing exactly on a bound.
    """
    feats = instance_features(model, instance, config)
    raw = forward(model, feats, instance.graph)
    out = {}
    for vid, z in zip(instance.graph.nodes, raw):
        r = instance.ranges[vid]
        frac = min(max(float(sigmoid(float(z))), 1e-12), 1.0 - 1e-12)
        out[vid] = float(r.t_lo + (r.t_hi - r.t_lo) * frac)
    return out


def huber_loss(pred: float, label: float, delta: float = 1.0) -> float:
    """Quadratic within |error| <= delta, linear beyond."""
    if delta <= 0.0:
        raise ConfigurationError("huber delta must be positive")
    e = abs(pred - label)
    if e <= delta:
        return 0.5 * e * e
    return delta * (e - 0.5 * delta)


def _huber_grad(err: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(err, -delta, delta)


# ---------------------------------------------------------------------------
# Dataset records


@dataclass(frozen=True)
class RecordVehicle:
    vid: int
    pos: float
    speed: float
    lane: int
    t_lo: float    # duration from the snapshot instant
    t_hi: float
    label: float   # optimal exit duration from the snapshot instant


@dataclass(frozen=True)
class DatasetRecord:
    instance_id: int
    vehicles: tuple[RecordVehicle, ...]
    edges: tuple[tuple[int, int], ...]  # vid pairs


def write_records(records: Iterable[DatasetRecord], path: str, append: bool = False) -> int:
    n = 0
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rec in records:
            doc = {
                "instance": rec.instance_id,
                "vehicles": [
                    {"vid": v.vid, "pos": v.pos, "speed": v.speed, "lane": v.lane,
                     "t_lo": v.t_lo, "t_hi": v.t_hi, "label": v.label}
                    for v in rec.vehicles
                ],
                "edges": [list(e) for e in rec.edges],
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
            n += 1
    return n


def read_records(path: str) -> list[DatasetRecord]:
    records = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    doc = json.loads(line)
                    vehicles = tuple(
                        RecordVehicle(int(v["vid"]), float(v["pos"]), float(v["speed"]),
                                      int(v["lane"]), float(v["t_lo"]), float(v["t_hi"]),
                                      float(v["label"]))
                        for v in doc["vehicles"])
                    edges = tuple((int(a), int(b)) for a, b in doc["edges"])
                    records.append(DatasetRecord(int(doc["instance"]), vehicles, edges))
                except (TypeError, KeyError, ValueError, json.JSONDecodeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad record: {exc}") from exc
    except OSError as exc:
        raise DataError(f"dataset {path}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainSettings:
    hidden_dim: int = 256
    n_layers: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    patience: int = 20       # early stop after this many stagnant epochs
    huber_delta: float = 1.0
    split: float = 0.9       # train fraction, by record
    seed: int = 0
    norm_pos: float = 250.0
    norm_speed: float = 20.0
    lane_ids: tuple[int, ...] = (0, 1, 2, 3)
    val_target: float | None = None  # optional early-exit threshold

    @staticmethod
    def for_scenario(config: ScenarioConfig, **overrides) -> "TrainSettings":
        base = TrainSettings(norm_pos=config.exit_pos, norm_speed=config.v_max,
                             lane_ids=tuple(config.lane_ids()))
        for key, value in overrides.items():
            setattr(base, key, value)
        return base


@dataclass
class _Compiled:
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    labels: np.ndarray
    t_lo: np.ndarray
    t_hi: np.ndarray


@dataclass
class TrainResult:
    model: SageModel
    history: list[dict]      # per-epoch {"epoch", "train_loss", "val_loss"}
    best_epoch: int
    best_val_loss: float


def _compile_record(rec: DatasetRecord, settings: TrainSettings) -> _Compiled:
    lane_index = {lane: i for i, lane in enumerate(settings.lane_ids)}
    n = len(rec.vehicles)
    f = 2 + len(settings.lane_ids)
    x = np.zeros((n, f))
    index_of = {}
    labels = np.zeros(n)
    t_lo = np.zeros(n)
    t_hi = np.zeros(n)
    for i, v in enumerate(rec.vehicles):
        if v.lane not in lane_index:
            raise DataError(f"record {rec.instance_id}: unknown lane {v.lane}")
        x[i, 0] = v.pos / settings.norm_pos
        x[i, 1] = v.speed / settings.norm_speed
        x[i, 2 + lane_index[v.lane]] = 1.0
        index_of[v.vid] = i
        labels[i] = v.label
        t_lo[i] = v.t_lo
        t_hi[i] = v.t_hi
    src, dst = [], []
    for a, b in rec.edges:
        if a not in index_of or b not in index_of:
            raise DataError(f"record {rec.instance_id}: edge ({a},{b}) off the node set")
        src.extend((index_of[a], index_of[b]))
        dst.extend((index_of[b], index_of[a]))
    return _Compiled(x, np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp),
                     labels, t_lo, t_hi)


def _stack(parts: list[_Compiled]) -> _Compiled:
    sizes = [p.x.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes[:-1])
    x = np.vstack([p.x for p in parts])
    src = np.concatenate([p.src + off for p, off in zip(parts, offsets)])
    dst = np.concatenate([p.dst + off for p, off in zip(parts, offsets)])
    return _Compiled(x, src, dst,
                     np.concatenate([p.labels for p in parts]),
                     np.concatenate([p.t_lo for p in parts]),
                     np.concatenate([p.t_hi for p in parts]))


def _degrees(n: int, dst: np.ndarray) -> np.ndarray:
    deg = np.zeros(n)
    if len(dst):
        np.add.at(deg, dst, 1.0)
    return deg


def loss_and_grads(model: SageModel, batch: _Compiled, delta: float):
    """Mean Huber loss of the range-rescaled predictions, plus gradients
    for every layer weight, bias, head weight vector, and head bias."""
    n = batch.x.shape[0]
    deg = _degrees(n, batch.dst)
    z, h_last, cache = _forward_arrays(model, batch.x, batch.src, batch.dst, deg,
                                       keep_cache=True)
    width = batch.t_hi - batch.t_lo
    s = sigmoid(z)
    pred = batch.t_lo + width * s
    err = pred - batch.labels
    loss = float(np.mean(np.where(np.abs(err) <= delta,
                                  0.5 * err * err,
                                  delta * (np.abs(err) - 0.5 * delta))))

    dz = _huber_grad(err, delta) / n * width * s * (1.0 - s)
    grads: dict[str, np.ndarray | float] = {
        "head_w": h_last.T @ dz,
        "head_b": float(np.sum(dz)),
    }
    dh = np.outer(dz, model.head_w)
    for k in range(len(model.layers) - 1, -1, -1):
        concat, zk = cache[k]
        dzk = dh * (zk > 0.0)
        grads[f"W{k}"] = dzk.T @ concat
        grads[f"b{k}"] = dzk.sum(axis=0)
        dconcat = dzk @ model.layers[k].W
        d_in = dconcat.shape[1] // 2
        dh = dconcat[:, :d_in].copy()
        dagg = dconcat[:, d_in:] / np.maximum(deg, 1.0)[:, None]
        if len(batch.src):
            np.add.at(dh, batch.src, dagg[batch.dst])
    return loss, grads


def _eval_loss(model: SageModel, parts: list[_Compiled], delta: float,
               chunk: int = 2048) -> float:
    total, count = 0.0, 0
    for i in range(0, len(parts), chunk):
        batch = _stack(parts[i:i + chunk])
        n = batch.x.shape[0]
        deg = _degrees(n, batch.dst)
        z = _forward_arrays(model, batch.x, batch.src, batch.dst, deg)
        pred = batch.t_lo + (batch.t_hi - batch.t_lo) * sigmoid(z)
        err = pred - batch.labels
        total += float(np.sum(np.where(np.abs(err) <= delta,
                                       0.5 * err * err,
                                       delta * (np.abs(err) - 0.5 * delta))))
        count += n
    return total / max(count, 1)


class _Adam:
    """Per-array first/second moment step rule."""

    def __init__(self, shapes: list[tuple], lr: float):
        self.lr = lr
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def train(
    records: Sequence[DatasetRecord],
    settings: TrainSettings,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam over shuffled record batches.

    Records are split train/validation by instance before the first epoch;
    the returned model is the snapshot with the lowest validation loss.
    """
    if not records:
        raise ConfigurationError("empty dataset")
    rng = np.random.default_rng(settings.seed)
    compiled = [_compile_record(r, settings) for r in records]

    order = rng.permutation(len(compiled))
    n_train = int(round(settings.split * len(compiled)))
    if n_train == 0 or n_train == len(compiled):
        raise ConfigurationError(
            f"split {settings.split} leaves an empty train or validation set "
            f"for {len(compiled)} records")
    train_parts = [compiled[i] for i in order[:n_train]]
    val_parts = [compiled[i] for i in order[n_train:]]

    feature_dim = 2 + len(settings.lane_ids)
    model = init_model(feature_dim, settings.hidden_dim, settings.n_layers,
                       settings.norm_pos, settings.norm_speed, settings.lane_ids, rng)

    param_names = [f"{kind}{k}" for k in range(settings.n_layers) for kind in ("W", "b")]
    param_names += ["head_w", "head_b"]

    def live_params() -> list[np.ndarray]:
        arrs: list[np.ndarray] = []
        for layer in model.layers:
            arrs.extend((layer.W, layer.b))
        arrs.append(model.head_w)
        return arrs

    head_b_arr = np.array([model.head_b])
    adam = _Adam([p.shape for p in live_params()] + [(1,)], settings.learning_rate)

    best_val = np.inf
    best_epoch = -1
    best_state = None
    stagnant = 0
    history: list[dict] = []

    for epoch in range(settings.epochs):
        idx = rng.permutation(n_train)
        run_loss, run_nodes = 0.0, 0
        for start in range(0, n_train, settings.batch_size):
            batch = _stack([train_parts[i] for i in idx[start:start + settings.batch_size]])
            loss, grads = loss_and_grads(model, batch, settings.huber_delta)
            n_nodes = batch.x.shape[0]
            run_loss += loss * n_nodes
            run_nodes += n_nodes
            arrs = live_params()
            garrs = [np.asarray(grads[name]) for name in param_names[:-1]]
            adam.step(arrs + [head_b_arr], garrs + [np.array([grads["head_b"]])])
            model.head_b = float(head_b_arr[0])

        train_loss = run_loss / max(run_nodes, 1)
        val_loss = _eval_loss(model, val_parts, settings.huber_delta)
        entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}
        history.append(entry)
        if on_epoch:
            on_epoch(entry)

        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model)
            stagnant = 0
        else:
            stagnant += 1
        if settings.val_target is not None and best_val <= settings.val_target:
            break
        if stagnant >= settings.patience:
            break

    assert best_state is not None
    return TrainResult(model=best_state, history=history,
                       best_epoch=best_epoch, best_val_loss=float(best_val))


# ---------------------------------------------------------------------------
# Serialization: versioned text format, full-precision decimal floats.


def save_model(model: SageModel, path: str) -> None:
    # repr(float(x)) is the shortest decimal that round-trips bit-exactly.
    def fmt(values) -> str:
        return " ".join(repr(float(v)) for v in values)

    lines = [f"sage-model {MODEL_FORMAT_VERSION}"]
    lines.append(f"feature_dim {model.feature_dim}")
    lines.append(f"hidden_dim {model.hidden_dim}")
    lines.append(f"n_layers {len(model.layers)}")
    lines.append(f"norm_pos {float(model.norm_pos)!r}")
    lines.append(f"norm_speed {float(model.norm_speed)!r}")
    lines.append("lane_ids " + " ".join(str(i) for i in model.lane_ids))
    for k, layer in enumerate(model.layers):
        out_dim, in_cols = layer.W.shape
        lines.append(f"layer {k} {out_dim} {in_cols}")
        for row in layer.W:
            lines.append(fmt(row))
        lines.append("bias " + fmt(layer.b))
    lines.append(f"head {len(model.head_w)}")
    lines.append(fmt(model.head_w))
    lines.append(f"head_bias {float(model.head_b)!r}")
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str) -> SageModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ModelFormatError(f"model {path}: {exc}") from exc

    cursor = 0

    def next_line() -> str:
        nonlocal cursor
        if cursor >= len(lines):
            raise ModelFormatError(f"model {path}: truncated at line {cursor + 1}")
        line = lines[cursor]
        cursor += 1
        return line

    def expect(prefix: str) -> list[str]:
        line = next_line()
        parts = line.split()
        if not parts or parts[0] != prefix:
            raise ModelFormatError(f"model {path}: expected '{prefix}', got '{line}'")
        return parts[1:]

    try:
        header = expect("sage-model")
        version = int(header[0])
        if version != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"model {path}: unsupported format version {version}")
        feature_dim = int(expect("feature_dim")[0])
        hidden_dim = int(expect("hidden_dim")[0])
        n_layers = int(expect("n_layers")[0])
        norm_pos = float(expect("norm_pos")[0])
        norm_speed = float(expect("norm_speed")[0])
        lane_ids = tuple(int(v) for v in expect("lane_ids"))

        layers = []
        for k in range(n_layers):
            meta = expect("layer")
            if int(meta[0]) != k:
                raise ModelFormatError(f"model {path}: layer {meta[0]} out of order")
            out_dim, in_cols = int(meta[1]), int(meta[2])
            rows = [np.array([float(v) for v in next_line().split()])
                    for _ in range(out_dim)]
            w = np.vstack(rows)
            if w.shape != (out_dim, in_cols):
                raise ModelFormatError(f"model {path}: layer {k} shape mismatch")
            b = np.array([float(v) for v in expect("bias")])
            if b.shape != (out_dim,):
                raise ModelFormatError(f"model {path}: layer {k} bias length mismatch")
            layers.append(SageLayer(W=w, b=b))

        head_len = int(expect("head")[0])
        head_w = np.array([float(v) for v in next_line().split()])
        if head_w.shape != (head_len,):
            raise ModelFormatError(f"model {path}: head length mismatch")
        head_b = float(expect("head_bias")[0])
        expect("end")
    except (ValueError, IndexError) as exc:
        raise ModelFormatError(f"model {path}: malformed ({exc})") from exc

    return SageModel(layers=layers, head_w=head_w, head_b=head_b,
                     feature_dim=feature_dim, hidden_dim=hidden_dim,
                     norm_pos=norm_pos, norm_speed=norm_speed, lane_ids=lane_ids)
