"""Compositional outfit grader.

Each present part's raw edge descriptor and color vector go through their own
feature encoders (K), are concatenated and passed through a per-part item
encoder (G). Item codes of all eight slots (zeros for absent parts) are
concatenated in ``PARTS`` order, encoded by the shared outfit encoder (H) and
mapped to two logits ``[s_pos, s_neg]`` by the head (S).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import mathcore as mc
from .errors import DimensionError, InvariantError, UsageError
from .imagefeat import COLOR_DIM, FeatureConfig
from .mathcore import NEG, POS, Tape, Tensor
from .outfit import PARTS, ItemFeatures, Outfit, OutfitBatch, stack_outfits

log = logging.getLogger(__name__)

# (K widths, G widths, H width); an empty tuple means identity.
PRESETS = {
    1: ((), (), 4096),
    2: ((128,), (1024,), 2048),
    3: ((1024,), (1024,), 2048),
    4: ((128,), (128,), 128),
    5: ((128, 64), (512, 256), 2048),
    6: ((128, 64, 32), (512, 256), 2048),
}
LABELS = {"pos": POS, "neg": NEG}


@dataclass(frozen=True)
class GraderConfig:
    k_widths: tuple[int, ...]
    g_widths: tuple[int, ...]
    h_width: int
    batchnorm: bool = False
    preset: int | None = None
    edge_dim: int = 256
    color_dim: int = COLOR_DIM

    @property
    def edge_enc_dim(self) -> int:
        return self.k_widths[-1] if self.k_widths else self.edge_dim

    @property
    def color_enc_dim(self) -> int:
        return self.k_widths[-1] if self.k_widths else self.color_dim

    @property
    def item_code_dim(self) -> int:
        return self.g_widths[-1] if self.g_widths else self.edge_enc_dim + self.color_enc_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_widths"] = list(self.k_widths)
        d["g_widths"] = list(self.g_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GraderConfig":
        d = dict(d)
        d["k_widths"] = tuple(d["k_widths"])
        d["g_widths"] = tuple(d["g_widths"])
        return cls(**d)


def preset(preset_id: int, **overrides) -> GraderConfig:
    """Architecture rows 1-6 of the model-configuration table."""
    if preset_id not in PRESETS:
        raise UsageError(f"preset must be one of {sorted(PRESETS)}, got {preset_id}")
    k, g, h = PRESETS[preset_id]
    return GraderConfig(k_widths=k, g_widths=g, h_width=h, preset=preset_id, **overrides)


@dataclass
class GraderModel:
    config: GraderConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    temperature: float = 1.0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvariantError(f"temperature must be positive, got {self.temperature}")


def _layer_shapes(config: GraderConfig):
    """Yield (name, out, in) for every fully-connected layer, in a fixed order."""
    for part in PARTS:
        for feat, d_in in (("edge", config.edge_dim), ("colors", config.color_dim)):
            for l, w in enumerate(config.k_widths):
                yield f"K_{feat}.{part}.{l}", w, d_in
                d_in = w
        d_in = config.edge_enc_dim + config.color_enc_dim
        for l, w in enumerate(config.g_widths):
            yield f"G.{part}.{l}", w, d_in
            d_in = w
    yield "H", config.h_width, len(PARTS) * config.item_code_dim
    yield "S", 2, config.h_width


def init_model(config: GraderConfig, seed: int = 0, features: FeatureConfig | None = None,
               zero_bias: bool = True) -> GraderModel:
    """He-normal weights, zero biases (and unit BN scale) from a seeded generator."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, n_out, n_in in _layer_shapes(config):
        params[f"{name}.W"] = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in))
        params[f"{name}.b"] = np.zeros(n_out) if zero_bias else rng.normal(0.0, 0.1, n_out)
    buffers = {}
    if config.batchnorm:
        params["H.gamma"] = np.ones(config.h_width)
        params["H.beta"] = np.zeros(config.h_width)
        buffers["H.running_mean"] = np.zeros(config.h_width)
        buffers["H.running_var"] = np.ones(config.h_width)
    features = features or FeatureConfig()
    if features.edge_dim != config.edge_dim:
        raise DimensionError(f"feature grid gives {features.edge_dim}-d descriptors, config expects {config.edge_dim}")
    notes = {"batchnorm": "enabled" if config.batchnorm else "disabled (desk-scale default)"}
    return GraderModel(config, params, buffers, 1.0, features, notes)


@dataclass
class ForwardTrace:
    encodings: dict[tuple[str, str], Tensor]  # (part, feature) -> x_{i,f}, shape (B, w)
    item_codes: list[Tensor]                  # phi_i per slot, zeros where absent
    outfit_code: Tensor                       # Phi
    logits: Tensor                            # (B, 2) = [s_pos, s_neg]
    mask: np.ndarray


def _mlp(x: Tensor, prefix: str, n_layers: int, P: dict[str, Tensor], tape: Tape | None) -> Tensor:
    for l in range(n_layers):
        x = mc.relu(mc.linear(x, P[f"{prefix}.{l}.W"], P[f"{prefix}.{l}.b"], tape), tape)
    return x


def _as_batch(model: GraderModel, outfits) -> OutfitBatch:
    if isinstance(outfits, OutfitBatch):
        b = outfits
        if b.edge.shape[2] != model.config.edge_dim or b.colors.shape[2] != model.config.color_dim:
            raise DimensionError(f"batch features {b.edge.shape[2]}/{b.colors.shape[2]} vs model "
                                 f"{model.config.edge_dim}/{model.config.color_dim}")
        return b
    if isinstance(outfits, Outfit):
        outfits = [outfits]
    return stack_outfits(outfits, model.config.edge_dim, model.config.color_dim)


def _bn_state(model: GraderModel) -> mc.BatchNormState:
    return mc.BatchNormState(model.buffers["H.running_mean"], model.buffers["H.running_var"])


def forward(model: GraderModel, outfits, tape: Tape | None = None, train: bool = False,
            watch_encodings: bool = False, params: dict[str, Tensor] | None = None) -> ForwardTrace:
    """Run the grader on one outfit, a list of outfits or a prepared batch.

    With ``watch_encodings`` every x_{i,f} becomes a gradient sink on ``tape``.
    ``params`` lets the trainer pass parameter tensors that require gradients.
    """
    cfg = model.config
    batch = _as_batch(model, outfits)
    if np.any(batch.mask.sum(axis=1) < 1):
        raise InvariantError("every outfit needs at least one present part")
    P = params if params is not None else {k: Tensor(v) for k, v in model.params.items()}
    n_k, n_g = len(cfg.k_widths), len(cfg.g_widths)
    encodings = {}
    codes = []
    for i, part in enumerate(PARTS):
        xe = _mlp(Tensor(batch.edge[:, i]), f"K_edge.{part}", n_k, P, tape)
        xc = _mlp(Tensor(batch.colors[:, i]), f"K_colors.{part}", n_k, P, tape)
        if watch_encodings:
            xe.watch()
            xc.watch()
        encodings[(part, "edge_image")] = xe
        encodings[(part, "colors")] = xc
        phi = _mlp(mc.concat([xe, xc], tape), f"G.{part}", n_g, P, tape)
        codes.append(mc.mul_const(phi, batch.mask[:, i:i + 1], tape))
    z = mc.linear(mc.concat(codes, tape), P["H.W"], P["H.b"], tape)
    if cfg.batchnorm:
        state = _bn_state(model)
        z = mc.batchnorm(z, P["H.gamma"], P["H.beta"], state, train, tape)
        if train:
            model.buffers["H.running_mean"] = state.running_mean
            model.buffers["H.running_var"] = state.running_var
    outfit_code = mc.relu(z, tape)
    logits = mc.linear(outfit_code, P["S.W"], P["S.b"], tape)
    return ForwardTrace(encodings, codes, outfit_code, logits, batch.mask)


def logits(model: GraderModel, outfits, chunk: int = 256) -> np.ndarray:
    """Eval-mode logits, shape (B, 2)."""
    batch = _as_batch(model, outfits)
    out = [forward(model, batch.subset(slice(i, i + chunk))).logits.data for i in range(0, len(batch), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def scores_from_logits(s: np.ndarray, T: float) -> np.ndarray:
    return 100.0 * mc.softmax_probability(s, T)[..., POS]


def score(model: GraderModel, outfit, T: float | None = None) -> float | np.ndarray:
    """Fashionability score ``100 * softmax(s / T)[pos]`` in [0, 100]."""
    T = model.temperature if T is None else T
    s = logits(model, outfit)
    out = scores_from_logits(s, T)
    return float(out[0]) if isinstance(outfit, Outfit) else out


def _mlp_eval(x: np.ndarray, prefix: str, n_layers: int, params: dict[str, np.ndarray], start: int = 0) -> np.ndarray:
    for l in range(start, n_layers):
        x = np.maximum(x @ params[f"{prefix}.{l}.W"].T + params[f"{prefix}.{l}.b"], 0.0)
    return x


def encode_part(model: GraderModel, part: str, edge: np.ndarray | None, colors: np.ndarray | None,
                base: ItemFeatures | None = None) -> np.ndarray:
    """Item codes phi for a stack of (edge, colors) rows placed at ``part``.

    Either feature may be ``None`` to reuse ``base``'s value for every row; the
    constant feature is then encoded once and broadcast.
    """
    cfg, P = model.config, model.params
    n_k, n_g = len(cfg.k_widths), len(cfg.g_widths)
    enc = {}
    for feat, rows, fallback in (("edge", edge, base.edge if base else None),
                                 ("colors", colors, base.colors if base else None)):
        if rows is None:
            if fallback is None:
                raise InvariantError(f"no {feat} rows and no base item to take them from")
            enc[feat] = (_mlp_eval(fallback[None, :], f"K_{feat}.{part}", n_k, P), True)
        else:
            enc[feat] = (_mlp_eval(np.atleast_2d(rows), f"K_{feat}.{part}", n_k, P), False)
    (xe, e_const), (xc, c_const) = enc["edge"], enc["colors"]
    n = max(len(xe), len(xc))
    if n_g == 0:
        return np.concatenate([np.broadcast_to(xe, (n, xe.shape[1])), np.broadcast_to(xc, (n, xc.shape[1]))], axis=1)
    # the first item-encoder layer is affine in (xe, xc): split it so a constant half is computed once
    W, b = P[f"G.{part}.0.W"], P[f"G.{part}.0.b"]
    de = xe.shape[1]
    z = xe @ W[:, :de].T + (xc @ W[:, de:].T + b)
    if e_const and c_const:
        z = np.broadcast_to(z, (n, z.shape[1]))
    return _mlp_eval(np.maximum(z, 0.0), f"G.{part}", n_g, P, start=1)


class VariantScorer:
    """Logits of one outfit with a single part swapped, without re-running the whole grader.

    Only the replaced slot is re-encoded; the outfit encoder's pre-activation is
    updated by that slot's contribution. Agrees with ``logits`` to rounding.
    ``slot_weights`` may be shared between scorers of the same (unchanged) model
    to avoid re-slicing the outfit-encoder weights.
    """

    def __init__(self, model: GraderModel, outfit: Outfit, slot_weights: dict | None = None):
        self.model, self.outfit = model, outfit
        trace = forward(model, outfit)
        self.codes = [c.data for c in trace.item_codes]
        self.z_base = np.concatenate(self.codes, axis=1) @ model.params["H.W"].T + model.params["H.b"]
        self.slot_weights = {} if slot_weights is None else slot_weights

    def _slot_weight(self, part: str) -> np.ndarray:
        if part not in self.slot_weights:
            w = self.model.config.item_code_dim
            slot = PARTS.index(part)
            self.slot_weights[part] = np.ascontiguousarray(self.model.params["H.W"][:, slot * w:(slot + 1) * w])
        return self.slot_weights[part]

    def logits(self, part: str, edges: np.ndarray | None, colors: np.ndarray | None) -> np.ndarray:
        """One row of logits per replacement; ``None`` keeps the outfit's own feature."""
        model = self.model
        if part not in self.outfit.items:
            raise InvariantError(f"part {part} is not present in outfit {self.outfit.outfit_id!r}")
        phi_new = encode_part(model, part, edges, colors, self.outfit.items[part])
        z = self.z_base + (phi_new - self.codes[PARTS.index(part)]) @ self._slot_weight(part).T
        if model.config.batchnorm:
            z = mc.batchnorm(z, model.params["H.gamma"], model.params["H.beta"], _bn_state(model), False).data
        return np.maximum(z, 0.0) @ model.params["S.W"].T + model.params["S.b"]


def part_variant_logits(model: GraderModel, outfit: Outfit, part: str,
                        edges: np.ndarray | None, colors: np.ndarray | None) -> np.ndarray:
    """Logits of ``outfit`` with ``part`` replaced by each (edge, colors) row (see ``VariantScorer``)."""
    return VariantScorer(model, outfit).logits(part, edges, colors)


@dataclass
class TrainParams:
    epochs: int = 50
    lr: float = 1e-4
    batch_size: int = 256
    optimizer: str = "adam"
    seed: int = 0


@dataclass
class TrainResult:
    model: GraderModel
    history: list[dict]


def _labels_array(labels: Sequence) -> np.ndarray:
    out = []
    for l in labels:
        if isinstance(l, str):
            if l not in LABELS:
                raise InvariantError(f"unknown label {l!r}")
            out.append(LABELS[l])
        else:
            out.append(int(l))
    return np.asarray(out, dtype=np.int64)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_last: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < min_last:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def evaluate_loss(model: GraderModel, batch: OutfitBatch, y: np.ndarray) -> tuple[float, float]:
    s = logits(model, batch)
    p = mc.softmax_probability(s)
    loss = float(-np.log(np.maximum(p[np.arange(len(y)), y], mc.LOG_CLAMP)).mean())
    acc = float((s.argmax(axis=1) == y).mean())
    return loss, acc


def train(outfits: Sequence[Outfit] | OutfitBatch, labels: Sequence, config: GraderConfig,
          params: TrainParams = TrainParams(), features: FeatureConfig | None = None,
          validation: tuple | None = None, init: GraderModel | None = None) -> TrainResult:
    """Shuffled mini-batch cross-entropy training; deterministic given ``params.seed``.

    ``validation`` is an optional ``(outfits, labels)`` pair for the loss curve.
    The returned model has temperature 1.
    """
    y = _labels_array(labels)
    if len(np.unique(y)) < 2:
        raise InvariantError("training data must contain both positive and negative outfits")
    model = init or init_model(config, params.seed, features)
    batch = _as_batch(model, outfits)
    if len(batch) != len(y):
        raise DimensionError(f"{len(batch)} outfits but {len(y)} labels")
    if params.batch_size > len(y):
        raise UsageError(f"batch size {params.batch_size} exceeds dataset size {len(y)}")
    if params.optimizer not in ("adam", "sgd"):
        raise UsageError(f"unknown optimizer {params.optimizer!r}")
    val = None
    if validation is not None:
        val = (_as_batch(model, validation[0]), _labels_array(validation[1]))

    rng = np.random.default_rng(params.seed + 1)
    state = mc.AdamState()
    history = []
    for epoch in range(1, params.epochs + 1):
        tot_loss = tot_correct = 0.0
        for idx in _batches(len(y), params.batch_size, rng, 2 if config.batchnorm else 1):
            tape = Tape()
            P = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
            trace = forward(model, batch.subset(idx), tape, train=True, params=P)
            loss = mc.softmax_cross_entropy(trace.logits, y[idx], tape)
            tape.backward(loss)
            grads = {k: tape.grad(t) for k, t in P.items()}
            if params.optimizer == "adam":
                mc.adam_step(model.params, grads, state, params.lr)
            else:
                mc.sgd_step(model.params, grads, params.lr)
            tot_loss += float(loss.data) * len(idx)
            tot_correct += float((trace.logits.data.argmax(axis=1) == y[idx]).sum())
        row = {"epoch": epoch, "train_loss": tot_loss / len(y), "train_acc": tot_correct / len(y)}
        if val is not None:
            row["val_loss"], row["val_acc"] = evaluate_loss(model, *val)
        history.append(row)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})
    model.temperature = 1.0
    return TrainResult(model, history)


def shuffled_negatives(positives: Sequence[Outfit], n: int, seed: int = 0) -> list[Outfit]:
    """Negatives built by swapping every item of a positive with same-part items of other positives."""
    rng = np.random.default_rng(seed)
    by_part: dict[str, list] = {p: [] for p in PARTS}
    for o in positives:
        for p, it in o.items.items():
            by_part[p].append(it)
    out = []
    for k in range(n):
        src = positives[int(rng.integers(len(positives)))]
        items = {p: by_part[p][int(rng.integers(len(by_part[p])))] for p in src.present_parts}
        out.append(Outfit(items, f"shuffled{k:06d}", "neg"))
    return out
