"""TFT-lite quantile forecaster and the LSTM-from-scratch baseline.

Architecture, per forecast window::

    per-variable embeddings -> variable-selection GRN (softmax weights)
      -> encoder LSTM over the lookback (initial state from the static embedding)
      -> decoder LSTM over the horizon, seeded with the encoder's final state
      -> masked multi-head attention (decoder queries over encoder + decoder)
      -> post-attention GRN -> linear quantile head (d -> |Q|)

Dropout acts on GRN hidden activations and on the attention output.
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import WindowBatch
from .errors import AlignmentError, ContractError
from .freeze import PARAM_GROUPS, FreezePlan
from .tensor import Tensor

DEFAULT_QUANTILES = (0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98)

CHECKPOINT_MAGIC = b"XBCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TFTConfig:
    hidden_size: int = 64
    attention_heads: int = 4
    dropout_rate: float = 0.1
    lookback: int = 168
    horizon: int = 24
    quantiles: tuple[float, ...] = DEFAULT_QUANTILES
    n_unknown_channels: int = 1
    n_known_channels: int = 1
    n_static: int = 1

    def __post_init__(self):
        object.__setattr__(self, "quantiles", tuple(float(q) for q in self.quantiles))
        if self.hidden_size <= 0 or self.hidden_size % self.attention_heads:
            raise ContractError(
                f"hidden_size {self.hidden_size} must be positive and divisible by "
                f"attention_heads {self.attention_heads}"
            )
        if self.lookback <= 0 or self.horizon <= 0:
            raise ContractError("lookback and horizon must be positive")
        q = np.asarray(self.quantiles)
        if q.size == 0 or np.any(q <= 0) or np.any(q >= 1) or np.any(np.diff(q) <= 0):
            raise ContractError(f"quantiles must be strictly increasing in (0, 1): {self.quantiles}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if min(self.n_unknown_channels, self.n_known_channels, self.n_static) < 1:
            raise ContractError("channel counts must be positive")

    @property
    def median_index(self) -> int:
        """Column of the quantile closest to 0.5."""
        return int(np.argmin(np.abs(np.asarray(self.quantiles) - 0.5)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TFTConfig":
        return cls(**{**d, "quantiles": tuple(d.get("quantiles", DEFAULT_QUANTILES))})


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _grn_params(rng, prefix: str, n_in: int, n_hidden: int, n_out: int) -> dict[str, np.ndarray]:
    p = {
        f"{prefix}.w1": _glorot(rng, n_in, n_hidden),
        f"{prefix}.b1": np.zeros(n_hidden),
        f"{prefix}.w2": _glorot(rng, n_hidden, n_out),
        f"{prefix}.b2": np.zeros(n_out),
        f"{prefix}.wg": _glorot(rng, n_out, n_out),
        f"{prefix}.bg": np.zeros(n_out),
        f"{prefix}.wv": _glorot(rng, n_out, n_out),
        f"{prefix}.bv": np.zeros(n_out),
        f"{prefix}.gamma": np.ones(n_out),
        f"{prefix}.beta": np.zeros(n_out),
    }
    if n_in != n_out:
        p[f"{prefix}.ws"] = _glorot(rng, n_in, n_out)
        p[f"{prefix}.bs"] = np.zeros(n_out)
    return p


def _lstm_params(rng, n_in: int, d: int) -> dict[str, np.ndarray]:
    bias = np.zeros(4 * d)
    bias[d : 2 * d] = 1.0  # forget-gate bias
    return {
        "w_input": _glorot(rng, n_in, 4 * d),
        "w_hidden": _glorot(rng, d, 4 * d),
        "bias": bias,
    }


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def grn(p: dict[str, Tensor], prefix: str, x, rate: float, rng, active: bool, project=None) -> Tensor:
    """Gated residual network: LayerNorm(skip(x) + GLU(W2 · dropout(ELU(W1 x)))).

    ``p`` holds the block's tensors under ``prefix``; the skip projection
    exists only when input and output widths differ. ``project(w, b)`` may
    replace ``x @ w + b`` for the two input-side projections.
    """
    if project is None:
        def project(w, b):
            return linear(x, w, b)

    hidden = T.elu(project(p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    hidden = T.dropout(hidden, rate, rng, training=active)
    eta = linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    gate = T.sigmoid(linear(eta, p[f"{prefix}.wg"], p[f"{prefix}.bg"]))
    value = linear(eta, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    skip = x if f"{prefix}.ws" not in p else project(p[f"{prefix}.ws"], p[f"{prefix}.bs"])
    return T.layer_norm(T.add(skip, T.mul(gate, value)), p[f"{prefix}.gamma"], p[f"{prefix}.beta"])


def embedded_projection(x: np.ndarray, emb_w: Tensor, emb_b: Tensor):
    """``project(w, b)`` for the flattened per-variable embeddings of ``x``.

    The embedding of variable v is ``x[..., v] * emb_w[v] + emb_b[v]`` and the
    flattened (V*d) vector is never built: its product with ``w`` equals
    ``x @ A + c`` where ``A[v] = emb_w[v] @ w[v*d:(v+1)*d]`` and
    ``c = sum_v emb_b[v] @ w[v*d:(v+1)*d]``.
    """
    n_var, d = emb_w.shape

    def project(w: Tensor, b: Tensor) -> Tensor:
        blocks = T.reshape(w, (n_var, d, w.shape[-1]))
        a = T.reshape(T.matmul(T.reshape(emb_w, (n_var, 1, d)), blocks), (n_var, w.shape[-1]))
        c = T.sum_(T.matmul(T.reshape(emb_b, (n_var, 1, d)), blocks), axis=(0, 1))
        return T.add(T.matmul(x, a), T.add(c, b))

    return project


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """One LSTM step composed from primitives; reference for ``lstm_scan``."""
    d = h.shape[-1]
    z = T.add(T.add(T.matmul(x, p["w_input"]), T.matmul(h, p["w_hidden"])), p["bias"])
    i = T.sigmoid(z[:, :d])
    f = T.sigmoid(z[:, d : 2 * d])
    g = T.tanh(z[:, 2 * d : 3 * d])
    o = T.sigmoid(z[:, 3 * d :])
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    return T.mul(o, T.tanh(c_new)), c_new


def quantile_loss(pred, target, quantiles, mask=None) -> Tensor:
    """Mean pinball loss over valid horizon steps and all quantiles.

    ``pred`` is (..., H, Q), ``target`` and ``mask`` are (..., H). Masked steps
    contribute nothing and are excluded from the mean.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    q = np.asarray(quantiles, dtype=np.float64)
    if pred.shape != target.shape + (q.size,):
        raise ContractError(
            f"quantile_loss: prediction {pred.shape} does not match target {target.shape} x {q.size} quantiles"
        )
    valid = np.ones(target.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    n = valid.sum() * q.size
    if n == 0:
        raise ContractError("quantile_loss: every step is masked")
    err = T.sub(target[..., None], pred)
    # Pinball weight q for under-prediction and (q - 1) for over-prediction.
    weight = (q - (err.data < 0)) * valid[..., None] / n
    return T.sum_(T.mul(err, weight))


def repair_quantiles(pred: np.ndarray) -> np.ndarray:
    """Sort each horizon row ascending across quantiles."""
    return np.sort(pred, axis=-1)


class _ParamModel:
    """Shared parameter-group plumbing for the forecasters."""

    groups: dict[str, dict[str, Tensor]]

    def parameters(self, groups=None) -> dict[str, Tensor]:
        """Flat ``"group/name" -> Tensor`` mapping, optionally restricted."""
        chosen = self.groups if groups is None else {g: self.groups[g] for g in groups}
        return {f"{g}/{n}": t for g, ps in chosen.items() for n, t in ps.items()}

    def group_sizes(self) -> dict[str, int]:
        return {g: sum(t.size for t in ps.values()) for g, ps in self.groups.items()}

    def n_parameters(self) -> int:
        return sum(self.group_sizes().values())

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for g, ps in self.groups.items():
            for t in ps.values():
                t.requires_grad = g in groups
                t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ContractError("load_state: parameter names do not match the model")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ContractError(f"load_state: {k} has shape {state[k].shape}, expected {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)

    def clone(self):
        return copy.deepcopy(self)


class TFTLite(_ParamModel):
    kind = "tft"

    def __init__(self, config: TFTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d, C, K, S = (
            config.hidden_size,
            config.n_unknown_channels,
            config.n_known_channels,
            config.n_static,
        )
        nq = len(config.quantiles)
        raw = {
            "static_embed": {"weight": _glorot(rng, S, d), "bias": np.zeros(d)},
            "known_embed": {"weight": _glorot(rng, 1, d, (K, d)), "bias": np.zeros((K, d))},
            "unknown_embed": {"weight": _glorot(rng, 1, d, (C, d)), "bias": np.zeros((C, d))},
            "varsel_grn": {
                **_grn_params(rng, "encoder", (C + K) * d, d, C + K),
                **_grn_params(rng, "decoder", K * d, d, K),
            },
            "encoder_lstm": _lstm_params(rng, d, d),
            "decoder_lstm": _lstm_params(rng, d, d),
            "attention": {
                "wq": _glorot(rng, d, d),
                "bq": np.zeros(d),
                "wk": _glorot(rng, d, d),
                "bk": np.zeros(d),
                "wv": _glorot(rng, d, d),
                "bv": np.zeros(d),
                "wo": _glorot(rng, d, d),
                "bo": np.zeros(d),
            },
            "post_attn_grn": _grn_params(rng, "post", d, d, d),
            "output_head": {"weight": _glorot(rng, d, nq), "bias": np.zeros(nq)},
        }
        assert tuple(raw) == PARAM_GROUPS
        self.groups = {
            g: {n: Tensor(a, requires_grad=True, name=f"{g}/{n}") for n, a in ps.items()}
            for g, ps in raw.items()
        }

    def _check_batch(self, batch: WindowBatch) -> None:
        c = self.config
        got = (
            batch.encoder_unknown.shape[-1],
            batch.encoder_known.shape[-1],
            batch.static.shape[-1],
        )
        want = (c.n_unknown_channels, c.n_known_channels, c.n_static)
        if got != want:
            raise AlignmentError(
                f"batch channels (unknown, known, static)={got} but model expects {want}; "
                "map the frame onto the canonical layout with data.align_channels"
            )
        if batch.encoder_unknown.shape[-2] != c.lookback or batch.decoder_known.shape[-2] != c.horizon:
            raise AlignmentError(
                f"batch spans lookback={batch.encoder_unknown.shape[-2]}, "
                f"horizon={batch.decoder_known.shape[-2]}; model expects {c.lookback}/{c.horizon}"
            )

    def _select(self, x: np.ndarray, emb_w: Tensor, emb_b: Tensor, prefix: str, rng, active: bool) -> Tensor:
        """Variable selection over per-variable embeddings of ``x`` (B, T, V).

        Returns the softmax-weighted sum of embeddings, computed as
        ``(weights * x) @ emb_w + weights @ emb_b`` so the (B, T, V, d)
        embedding tensor is never materialised.
        """
        project = embedded_projection(x, emb_w, emb_b)
        logits = grn(self.groups["varsel_grn"], prefix, x, self.config.dropout_rate, rng, active, project)
        weights = T.softmax(logits)
        return T.add(T.matmul(T.mul(weights, x), emb_w), T.matmul(weights, emb_b))

    def forward(
        self,
        batch: WindowBatch,
        training: bool = False,
        rng: np.random.Generator | None = None,
        mc_dropout: bool = False,
    ) -> Tensor:
        """Quantile forecasts of shape (B, H, |Q|).

        Dropout is active when ``training`` or ``mc_dropout`` is set and then
        draws from ``rng``.
        """
        self._check_batch(batch)
        cfg = self.config
        active = (training or mc_dropout) and cfg.dropout_rate > 0
        d, L, H = cfg.hidden_size, cfg.lookback, cfg.horizon
        nh = cfg.attention_heads
        dh = d // nh
        g = self.groups
        enc_u = np.asarray(batch.encoder_unknown, dtype=np.float64)
        bsz = enc_u.shape[0]

        known_w, known_b = g["known_embed"]["weight"], g["known_embed"]["bias"]
        var_w = T.concat([g["unknown_embed"]["weight"], known_w], axis=0)
        var_b = T.concat([g["unknown_embed"]["bias"], known_b], axis=0)
        enc_x = np.concatenate([enc_u, np.asarray(batch.encoder_known, dtype=np.float64)], axis=-1)
        dec_x = np.asarray(batch.decoder_known, dtype=np.float64)
        enc_in = self._select(enc_x, var_w, var_b, "encoder", rng, active)
        dec_in = self._select(dec_x, known_w, known_b, "decoder", rng, active)

        state0 = linear(np.asarray(batch.static, dtype=np.float64), g["static_embed"]["weight"], g["static_embed"]["bias"])
        el = g["encoder_lstm"]
        enc = T.lstm_scan(enc_in, state0, state0, el["w_input"], el["w_hidden"], el["bias"])
        dl = g["decoder_lstm"]
        dec = T.lstm_scan(dec_in, enc[:, -1, 0, :], enc[:, -1, 1, :], dl["w_input"], dl["w_hidden"], dl["bias"])
        enc_h = enc[:, :, 0, :]
        dec_h = dec[:, :, 0, :]
        seq = T.concat([enc_h, dec_h], axis=1)

        a = g["attention"]

        def heads(x: Tensor, steps: int) -> Tensor:
            return T.transpose(T.reshape(x, (bsz, steps, nh, dh)), (0, 2, 1, 3))

        q = heads(linear(dec_h, a["wq"], a["bq"]), H)
        k = heads(linear(seq, a["wk"], a["bk"]), L + H)
        v = heads(linear(seq, a["wv"], a["bv"]), L + H)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = T.softmax(T.add(scores, causal_mask(L, H)))
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (bsz, H, d))
        attn_out = T.dropout(linear(ctx, a["wo"], a["bo"]), cfg.dropout_rate, rng, training=active)
        post = grn(g["post_attn_grn"], "post", T.add(dec_h, attn_out), cfg.dropout_rate, rng, active)
        head = g["output_head"]
        return linear(post, head["weight"], head["bias"])

    def predict(self, batch: WindowBatch, batch_size: int = 256) -> np.ndarray:
        """Deterministic (eval-mode) quantile forecasts, monotonically repaired."""
        outs = []
        with T.no_tape():
            for lo in range(0, len(batch), batch_size):
                outs.append(self.forward(batch[lo : lo + batch_size]).data)
        return repair_quantiles(np.concatenate(outs, axis=0))


def causal_mask(lookback: int, horizon: int) -> np.ndarray:
    """Additive (H, L+H) mask: decoder step t sees every encoder step and decoder steps <= t."""
    allowed = np.ones((horizon, lookback + horizon), dtype=bool)
    allowed[:, lookback:] = np.tril(np.ones((horizon, horizon), dtype=bool))
    return np.where(allowed, 0.0, -1e9)


class LSTMBaseline(_ParamModel):
    """Single-layer LSTM over the lookback with a linear head to H outputs."""

    kind = "lstm"

    def __init__(self, config: TFTConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.hidden_size
        n_in = config.n_unknown_channels + config.n_known_channels
        self.groups = {
            "lstm": {k: Tensor(v, requires_grad=True, name=f"lstm/{k}") for k, v in _lstm_params(rng, n_in, d).items()},
            "head": {
                "weight": Tensor(_glorot(rng, d, config.horizon), requires_grad=True, name="head/weight"),
                "bias": Tensor(np.zeros(config.horizon), requires_grad=True, name="head/bias"),
            },
        }

    def forward(self, batch: WindowBatch, training: bool = False, rng=None, mc_dropout: bool = False) -> Tensor:
        c = self.config
        n_in = batch.encoder_unknown.shape[-1] + batch.encoder_known.shape[-1]
        if n_in != c.n_unknown_channels + c.n_known_channels:
            raise AlignmentError(
                f"batch has {n_in} input channels, model expects "
                f"{c.n_unknown_channels + c.n_known_channels}; use data.align_channels"
            )
        x = np.concatenate(
            [np.asarray(batch.encoder_unknown, dtype=np.float64), np.asarray(batch.encoder_known, dtype=np.float64)],
            axis=-1,
        )
        zeros = np.zeros((x.shape[0], c.hidden_size))
        p = self.groups["lstm"]
        out = T.lstm_scan(Tensor(x), Tensor(zeros), Tensor(zeros), p["w_input"], p["w_hidden"], p["bias"])
        return linear(out[:, -1, 0, :], self.groups["head"]["weight"], self.groups["head"]["bias"])

    def predict(self, batch: WindowBatch, batch_size: int = 256) -> np.ndarray:
        outs = []
        with T.no_tape():
            for lo in range(0, len(batch), batch_size):
                outs.append(self.forward(batch[lo : lo + batch_size]).data)
        return np.concatenate(outs, axis=0)


def count_trainable(model: _ParamModel, plan: FreezePlan) -> int:
    """Number of scalar parameters the plan leaves trainable."""
    sizes = model.group_sizes()
    plan.validate(sizes)
    return sum(n for g, n in sizes.items() if g in plan.trainable_groups)


def permute_unknown_channels(model: TFTLite, i: int, j: int) -> TFTLite:
    """Copy of ``model`` with unknown channels ``i`` and ``j`` swapped in every
    channel-indexed parameter (embeddings and the encoder selection GRN)."""
    out = model.clone()
    C, K, d = model.config.n_unknown_channels, model.config.n_known_channels, model.config.hidden_size
    order = np.arange(C + K)
    order[[i, j]] = order[[j, i]]
    emb = out.groups["unknown_embed"]
    for name in ("weight", "bias"):
        data = emb[name].data.copy()
        data[[i, j]] = data[[j, i]]
        emb[name].data = data
    vs = out.groups["varsel_grn"]
    flat_order = (order[:, None] * d + np.arange(d)).reshape(-1)
    vs["encoder.w1"].data = vs["encoder.w1"].data[flat_order]
    vs["encoder.ws"].data = vs["encoder.ws"].data[flat_order][:, order]
    vs["encoder.bs"].data = vs["encoder.bs"].data[order]
    for name in ("w2", "wg", "wv"):
        w = vs[f"encoder.{name}"].data
        vs[f"encoder.{name}"].data = w[:, order] if name == "w2" else w[order][:, order]
    for name in ("b2", "bg", "bv", "gamma", "beta"):
        vs[f"encoder.{name}"].data = vs[f"encoder.{name}"].data[order]
    return out


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: _ParamModel, path, meta: dict | None = None) -> None:
    """Write header JSON plus raw little-endian float64 arrays.

    The layout is deterministic, so save -> load -> save is byte-identical.
    """
    entries = []
    blobs = []
    for g, ps in model.groups.items():
        for n, t in ps.items():
            entries.append({"group": g, "name": n, "shape": list(t.shape)})
            blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": model.kind,
            "config": model.config.to_dict(),
            "params": entries,
            "meta": meta or {},
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[_ParamModel, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path}: not a crossbuild checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = json.loads(raw[off : off + hlen])
    off += hlen
    config = TFTConfig.from_dict(header["config"])
    model = (TFTLite if header["kind"] == "tft" else LSTMBaseline)(config)
    for e in header["params"]:
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(e["shape"])
        off += 8 * n
        model.groups[e["group"]][e["name"]].data = arr.astype(np.float64)
    return model, header["meta"]
