"""Hand-rolled differentiable kernels for the two-stream classifier.

Peephole LSTM, soft attention, dense heads, focal loss, the gated fusion
stage, the ADAM update, and finite-difference gradient verification.
Everything is float64 and batch-first. There is no generic autodiff:
each component pairs its forward pass with an exact hand-derived
backward over cached activations, and `gradient_check` verifies the
pairing numerically.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass

import numpy as np

__all__ = [
    "sigmoid",
    "softmax",
    "Dense",
    "PeepholeLstm",
    "SoftAttention",
    "FusionGate",
    "StreamModel",
    "TwoStreamModel",
    "MODES",
    "FocalLossConfig",
    "focal_loss",
    "LOG_CLAMP",
    "AdamConfig",
    "adam_init",
    "adam_step",
    "gradient_check",
    "component_gradient_checks",
    "GRADCHECK_COMPONENTS",
    "CHECKPOINT_FORMAT",
    "params_to_vector",
    "vector_to_params",
    "save_named_arrays",
    "load_named_arrays",
]

LOG_CLAMP = 1e-12
CHECKPOINT_FORMAT = "two-stream-tree/1"


def sigmoid(z: np.ndarray) -> np.ndarray:
    # expressed through tanh: saturates cleanly with no overflow at either tail
    return 0.5 * (np.tanh(0.5 * np.asarray(z, dtype=float)) + 1.0)


def softmax(z, axis: int = -1) -> np.ndarray:
    """Stable softmax along `axis`; rows sum to 1."""
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine map y = x @ W + b."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator) -> None:
        self.params = {
            "W": _uniform_init(rng, (d_in, d_out), d_in),
            "b": np.zeros(d_out),
        }

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, cache, dy):
        x = cache
        grads = {"W": x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.params["W"].T, grads


class PeepholeLstm:
    """Single-layer LSTM with peephole connections, batch-first.

    The input and forget gates read the previous cell state; the output
    gate reads the current one. Hidden and cell states start at zero, so
    a single step equals one cell application to the zero state.
    """

    GATES = ("i", "f", "g", "o")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> None:
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        p: dict[str, np.ndarray] = {}
        for g in self.GATES:
            p[f"W_{g}"] = _uniform_init(rng, (input_dim, hidden_dim), input_dim)
            p[f"R_{g}"] = _uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim)
            p[f"b_{g}"] = np.zeros(hidden_dim)
        p["b_f"] = np.ones(hidden_dim)  # open forget gate at init
        for g in ("i", "f", "o"):
            p[f"p_{g}"] = _uniform_init(rng, (hidden_dim,), hidden_dim)
        self.params = p

    def _stacked(self):
        # single (.., 4d) views over the per-gate parameters, gate order i,f,g,o
        p = self.params
        W = np.concatenate([p[f"W_{g}"] for g in self.GATES], axis=1)
        R = np.concatenate([p[f"R_{g}"] for g in self.GATES], axis=1)
        b = np.concatenate([p[f"b_{g}"] for g in self.GATES])
        return W, R, b

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ValueError(f"expected inputs (batch, steps, {self.input_dim}), got {x.shape}")
        if x.shape[1] < 1:
            raise ValueError("need at least one time step")
        B, T, _ = x.shape
        d = self.hidden_dim
        p = self.params
        W, R, b = self._stacked()
        xproj = (x.reshape(B * T, -1) @ W).reshape(B, T, 4 * d) + b
        gates = np.empty((B, T, 4 * d))
        c_all = np.empty((B, T, d))
        tanh_c = np.empty((B, T, d))
        h_all = np.empty((B, T, d))
        h_prev = np.zeros((B, d))
        c_prev = np.zeros((B, d))
        for t in range(T):
            a = xproj[:, t] + h_prev @ R
            i = sigmoid(a[:, :d] + c_prev * p["p_i"])
            f = sigmoid(a[:, d:2 * d] + c_prev * p["p_f"])
            g = np.tanh(a[:, 2 * d:3 * d])
            c = f * c_prev + i * g
            o = sigmoid(a[:, 3 * d:] + c * p["p_o"])
            tc = np.tanh(c)
            gates[:, t, :d], gates[:, t, d:2 * d] = i, f
            gates[:, t, 2 * d:3 * d], gates[:, t, 3 * d:] = g, o
            c_all[:, t] = c
            tanh_c[:, t] = tc
            h_all[:, t] = o * tc
            h_prev = h_all[:, t]
            c_prev = c
        cache = {"x": x, "gates": gates, "c": c_all, "tanh_c": tanh_c, "h": h_all}
        return h_all, cache

    def backward(self, cache, dh_out):
        x = cache["x"]
        B, T, _ = x.shape
        d = self.hidden_dim
        p = self.params
        gates, c, tanh_c, h = cache["gates"], cache["c"], cache["tanh_c"], cache["h"]
        c_prev = np.concatenate([np.zeros((B, 1, d)), c[:, :-1]], axis=1)
        h_prev = np.concatenate([np.zeros((B, 1, d)), h[:, :-1]], axis=1)
        W, R, _ = self._stacked()
        da = np.empty((B, T, 4 * d))
        dh_rec = np.zeros((B, d))
        dc_rec = np.zeros((B, d))
        for t in range(T - 1, -1, -1):
            i, f = gates[:, t, :d], gates[:, t, d:2 * d]
            g, o = gates[:, t, 2 * d:3 * d], gates[:, t, 3 * d:]
            dh = dh_out[:, t] + dh_rec
            do = dh * tanh_c[:, t]
            dao = do * o * (1.0 - o)
            dc = dh * o * (1.0 - tanh_c[:, t] ** 2) + dc_rec + dao * p["p_o"]
            dai = dc * g * i * (1.0 - i)
            daf = dc * c_prev[:, t] * f * (1.0 - f)
            dag = dc * i * (1.0 - g ** 2)
            dc_rec = dc * f + dai * p["p_i"] + daf * p["p_f"]
            dat = da[:, t]
            dat[:, :d], dat[:, d:2 * d] = dai, daf
            dat[:, 2 * d:3 * d], dat[:, 3 * d:] = dag, dao
            dh_rec = dat @ R.T
        da_flat = da.reshape(B * T, 4 * d)
        dW = x.reshape(B * T, -1).T @ da_flat
        dR = h_prev.reshape(B * T, d).T @ da_flat
        db = da_flat.sum(axis=0)
        dx = (da_flat @ W.T).reshape(x.shape)
        grads: dict[str, np.ndarray] = {}
        for k, g in enumerate(self.GATES):
            sl = slice(k * d, (k + 1) * d)
            grads[f"W_{g}"] = dW[:, sl]
            grads[f"R_{g}"] = dR[:, sl]
            grads[f"b_{g}"] = db[sl]
        grads["p_i"] = (da[:, :, :d] * c_prev).sum(axis=(0, 1))
        grads["p_f"] = (da[:, :, d:2 * d] * c_prev).sum(axis=(0, 1))
        grads["p_o"] = (da[:, :, 3 * d:] * c).sum(axis=(0, 1))
        return dx, grads


class SoftAttention:
    """Convex pooling of hidden states.

    A step's logit is the sum of tanh(W h_t + b); the softmax over steps
    weights the hidden states into one context vector per sample.
    """

    def __init__(self, hidden_dim: int, rng: np.random.Generator) -> None:
        self.hidden_dim = hidden_dim
        self.params = {
            "W": _uniform_init(rng, (hidden_dim, hidden_dim), hidden_dim),
            "b": np.zeros(hidden_dim),
        }

    def forward(self, h):
        h = np.asarray(h, dtype=float)
        u = np.tanh(h @ self.params["W"] + self.params["b"])  # (B, T, d)
        scores = u.sum(axis=2)                                # (B, T)
        alpha = softmax(scores, axis=1)
        context = (alpha[:, :, None] * h).sum(axis=1)         # (B, d)
        cache = {"h": h, "u": u, "alpha": alpha}
        return context, alpha, cache

    def backward(self, cache, dcontext):
        h, u, alpha = cache["h"], cache["u"], cache["alpha"]
        B, T, d = h.shape
        dalpha = (dcontext[:, None, :] * h).sum(axis=2)
        dh = alpha[:, :, None] * dcontext[:, None, :]
        dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        du = dscores[:, :, None] * (1.0 - u ** 2)
        grads = {
            "W": h.reshape(B * T, d).T @ du.reshape(B * T, d),
            "b": du.sum(axis=(0, 1)),
        }
        dh = dh + du @ self.params["W"].T
        return dh, grads


@dataclass(frozen=True)
class FocalLossConfig:
    """Cross-entropy reshaped by alpha * (1 - p_t)^gamma."""

    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")


def _check_probabilities(p: np.ndarray) -> None:
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("inputs must be probability vectors")


def focal_loss(p, labels, cfg: FocalLossConfig = FocalLossConfig()):
    """Focal loss and its gradient through the softmax that produced `p`.

    Accepts one probability vector or a (batch, classes) stack. Returns
    (loss, dlogits, clamped): per-sample losses, exact gradients with
    respect to the pre-softmax logits, and a mask of samples whose
    true-class probability was clamped to LOG_CLAMP before the log.
    """
    p_arr = np.asarray(p, dtype=float)
    single = p_arr.ndim == 1
    if single:
        p_arr = p_arr[None, :]
        labels_arr = np.array([labels], dtype=np.int64)
    else:
        labels_arr = np.asarray(labels, dtype=np.int64)
    B, C = p_arr.shape
    if labels_arr.shape != (B,):
        raise ValueError("labels must match the batch dimension")
    if np.any((labels_arr < 0) | (labels_arr >= C)):
        raise ValueError("label out of range")
    _check_probabilities(p_arr)
    rows = np.arange(B)
    pt = p_arr[rows, labels_arr]
    clamped = pt < LOG_CLAMP
    log_pt = np.log(np.maximum(pt, LOG_CLAMP))
    miss = 1.0 - pt
    loss = -cfg.alpha * miss ** cfg.gamma * log_pt
    # dL/dz_j = s * (delta_tj - p_j); the gamma == 0 branch and the
    # miss == 0 guard avoid 0 * inf at the loss minimum
    if cfg.gamma == 0:
        scal = np.full(B, -cfg.alpha)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            mod = np.where(miss > 0.0, miss ** (cfg.gamma - 1.0), 0.0)
        scal = cfg.alpha * (cfg.gamma * pt * log_pt * mod - miss ** cfg.gamma)
    onehot = np.zeros_like(p_arr)
    onehot[rows, labels_arr] = 1.0
    dlogits = scal[:, None] * (onehot - p_arr)
    if single:
        return float(loss[0]), dlogits[0], bool(clamped[0])
    return loss, dlogits, clamped


class FusionGate:
    """Two-stream fusion: per-stream dense encoders, a two-way softmax gate
    over the concatenated features, and a dense classifier head.

    The gate has one weight per stream; each encoder output is scaled by
    its gate weight before the concatenated features reach the head.
    """

    def __init__(self, hidden_dim: int, fusion_dim: int, classes: int,
                 rng: np.random.Generator) -> None:
        self.fusion_dim = fusion_dim
        self.params = {
            "enc_t_W": _uniform_init(rng, (hidden_dim, fusion_dim), hidden_dim),
            "enc_t_b": np.zeros(fusion_dim),
            "enc_s_W": _uniform_init(rng, (hidden_dim, fusion_dim), hidden_dim),
            "enc_s_b": np.zeros(fusion_dim),
            "gate_W": _uniform_init(rng, (2 * fusion_dim, 2), 2 * fusion_dim),
            "gate_b": np.zeros(2),
            "head_W": _uniform_init(rng, (2 * fusion_dim, classes), 2 * fusion_dim),
            "head_b": np.zeros(classes),
        }

    def forward(self, h_tex, h_struct):
        p = self.params
        t_star = h_tex @ p["enc_t_W"] + p["enc_t_b"]
        s_star = h_struct @ p["enc_s_W"] + p["enc_s_b"]
        both = np.concatenate([t_star, s_star], axis=1)
        q = np.tanh(both @ p["gate_W"] + p["gate_b"])
        eta = softmax(q, axis=1)                                       # (B, 2)
        fused = np.concatenate([eta[:, :1] * t_star, eta[:, 1:] * s_star], axis=1)
        logits = fused @ p["head_W"] + p["head_b"]
        probs = softmax(logits, axis=1)
        cache = {"h_tex": h_tex, "h_struct": h_struct, "t_star": t_star,
                 "s_star": s_star, "both": both, "q": q, "eta": eta, "fused": fused}
        return logits, probs, eta, cache

    def backward(self, cache, dlogits):
        p = self.params
        df = self.fusion_dim
        t_star, s_star, eta, q = cache["t_star"], cache["s_star"], cache["eta"], cache["q"]
        grads = {
            "head_W": cache["fused"].T @ dlogits,
            "head_b": dlogits.sum(axis=0),
        }
        dfused = dlogits @ p["head_W"].T
        dt_gated = dfused[:, :df]
        ds_gated = dfused[:, df:]
        dt_star = dt_gated * eta[:, :1]
        ds_star = ds_gated * eta[:, 1:]
        deta = np.stack([(dt_gated * t_star).sum(axis=1),
                         (ds_gated * s_star).sum(axis=1)], axis=1)
        dq = eta * (deta - (eta * deta).sum(axis=1, keepdims=True))
        dz = dq * (1.0 - q ** 2)
        grads["gate_W"] = cache["both"].T @ dz
        grads["gate_b"] = dz.sum(axis=0)
        dboth = dz @ p["gate_W"].T
        dt_star = dt_star + dboth[:, :df]
        ds_star = ds_star + dboth[:, df:]
        grads["enc_t_W"] = cache["h_tex"].T @ dt_star
        grads["enc_t_b"] = dt_star.sum(axis=0)
        grads["enc_s_W"] = cache["h_struct"].T @ ds_star
        grads["enc_s_b"] = ds_star.sum(axis=0)
        dh_tex = dt_star @ p["enc_t_W"].T
        dh_struct = ds_star @ p["enc_s_W"].T
        return dh_tex, dh_struct, grads


class StreamModel:
    """One stream: peephole LSTM over token features, soft attention, and
    an auxiliary softmax classifier on the pooled context."""

    def __init__(self, input_dim: int, hidden_dim: int, classes: int,
                 rng: np.random.Generator) -> None:
        self.lstm = PeepholeLstm(input_dim, hidden_dim, rng)
        self.attention = SoftAttention(hidden_dim, rng)
        self.head = Dense(hidden_dim, classes, rng)

    def forward(self, x):
        h, lstm_cache = self.lstm.forward(x)
        context, alpha, att_cache = self.attention.forward(h)
        logits, head_cache = self.head.forward(context)
        return {
            "h": h, "context": context, "alpha": alpha,
            "logits": logits, "probs": softmax(logits, axis=1),
            "cache": {"lstm": lstm_cache, "att": att_cache, "head": head_cache},
        }

    def backward(self, out, dlogits, dcontext_extra=None):
        dcontext, head_grads = self.head.backward(out["cache"]["head"], dlogits)
        if dcontext_extra is not None:
            dcontext = dcontext + dcontext_extra
        dh, att_grads = self.attention.backward(out["cache"]["att"], dcontext)
        dx, lstm_grads = self.lstm.backward(out["cache"]["lstm"], dh)
        grads = {f"lstm.{k}": v for k, v in lstm_grads.items()}
        grads.update({f"attention.{k}": v for k, v in att_grads.items()})
        grads.update({f"head.{k}": v for k, v in head_grads.items()})
        return dx, grads

    def param_dict(self) -> dict[str, np.ndarray]:
        out = {f"lstm.{k}": v for k, v in self.lstm.params.items()}
        out.update({f"attention.{k}": v for k, v in self.attention.params.items()})
        out.update({f"head.{k}": v for k, v in self.head.params.items()})
        return out


MODES = ("full", "concat", "structure_only", "texture_only")


class TwoStreamModel:
    """Both streams plus the fusion stage, with ablation modes.

    "full" uses the gated fusion; "concat" replaces it with plain
    concatenation of the two attention contexts into a dense head;
    "structure_only" / "texture_only" drop the other stream entirely.
    """

    def __init__(self, texture_dim: int, classes: int, hidden_dim: int = 32,
                 fusion_dim: int = 32, structure_dim: int = 2, mode: str = "full",
                 seed: int = 0) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self.classes = classes
        self.hidden_dim = hidden_dim
        self.fusion_dim = fusion_dim
        self.structure_dim = structure_dim
        self.texture_dim = texture_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.structure = (StreamModel(structure_dim, hidden_dim, classes, rng)
                          if mode != "texture_only" else None)
        self.texture = (StreamModel(texture_dim, hidden_dim, classes, rng)
                        if mode != "structure_only" else None)
        self.fusion = (FusionGate(hidden_dim, fusion_dim, classes, rng)
                       if mode == "full" else None)
        self.concat_head = Dense(2 * hidden_dim, classes, rng) if mode == "concat" else None

    @property
    def uses_texture(self) -> bool:
        return self.texture is not None

    @property
    def uses_structure(self) -> bool:
        return self.structure is not None

    @property
    def head_count(self) -> int:
        """Number of focal-loss heads the mode trains (3 fused + streams,
        or 1 for a single-stream model)."""
        return 3 if self.mode in ("full", "concat") else 1

    def forward(self, x_struct, x_tex):
        out: dict = {}
        if self.structure is not None:
            out["structure"] = self.structure.forward(x_struct)
        if self.texture is not None:
            out["texture"] = self.texture.forward(x_tex)
        if self.mode == "full":
            logits, probs, eta, cache = self.fusion.forward(
                out["texture"]["context"], out["structure"]["context"])
            out["fused"] = {"logits": logits, "probs": probs, "eta": eta, "cache": cache}
        elif self.mode == "concat":
            joint = np.concatenate(
                [out["texture"]["context"], out["structure"]["context"]], axis=1)
            logits, cache = self.concat_head.forward(joint)
            out["fused"] = {"logits": logits, "probs": softmax(logits, axis=1), "cache": cache}
        return out

    def _heads(self, out):
        heads = {}
        if "fused" in out:
            heads["fused"] = out["fused"]["probs"]
        if self.structure is not None:
            heads["structure"] = out["structure"]["probs"]
        if self.texture is not None:
            heads["texture"] = out["texture"]["probs"]
        return heads

    def loss_parts(self, x_struct, x_tex, labels, focal: FocalLossConfig):
        """Mean per-sample focal loss of the fused, structure, and texture
        heads (0.0 for heads the mode does not have)."""
        out = self.forward(x_struct, x_tex)
        parts = []
        for name in ("fused", "structure", "texture"):
            probs = self._heads(out).get(name)
            if probs is None:
                parts.append(0.0)
            else:
                losses, _, _ = focal_loss(probs, labels, focal)
                parts.append(float(losses.mean()))
        return tuple(parts)

    def loss_and_grads(self, x_struct, x_tex, labels, focal: FocalLossConfig):
        """Summed focal loss over the batch and exact gradients.

        Returns (total, parts, grads, dx_struct, dx_tex) where `total` is
        the sum over samples and heads, `parts` are per-head means, and
        `grads` maps prefixed parameter names to summed-loss gradients.
        """
        labels = np.asarray(labels, dtype=np.int64)
        out = self.forward(x_struct, x_tex)
        losses = {}
        dlogits = {}
        for name, probs in self._heads(out).items():
            l, dl, _ = focal_loss(probs, labels, focal)
            losses[name] = l
            dlogits[name] = dl
        grads: dict[str, np.ndarray] = {}
        dxs = dxt = None
        if self.mode == "full":
            dh_tex, dh_struct, fus_grads = self.fusion.backward(
                out["fused"]["cache"], dlogits["fused"])
            grads.update({f"fusion.{k}": v for k, v in fus_grads.items()})
            dxt, tex_grads = self.texture.backward(out["texture"], dlogits["texture"], dh_tex)
            grads.update({f"texture.{k}": v for k, v in tex_grads.items()})
            dxs, struct_grads = self.structure.backward(
                out["structure"], dlogits["structure"], dh_struct)
            grads.update({f"structure.{k}": v for k, v in struct_grads.items()})
        elif self.mode == "concat":
            djoint, head_grads = self.concat_head.backward(
                out["fused"]["cache"], dlogits["fused"])
            grads.update({f"concat_head.{k}": v for k, v in head_grads.items()})
            d = self.hidden_dim
            dxt, tex_grads = self.texture.backward(
                out["texture"], dlogits["texture"], djoint[:, :d])
            grads.update({f"texture.{k}": v for k, v in tex_grads.items()})
            dxs, struct_grads = self.structure.backward(
                out["structure"], dlogits["structure"], djoint[:, d:])
            grads.update({f"structure.{k}": v for k, v in struct_grads.items()})
        elif self.mode == "structure_only":
            dxs, struct_grads = self.structure.backward(out["structure"], dlogits["structure"])
            grads.update({f"structure.{k}": v for k, v in struct_grads.items()})
        else:
            dxt, tex_grads = self.texture.backward(out["texture"], dlogits["texture"])
            grads.update({f"texture.{k}": v for k, v in tex_grads.items()})
        total = float(sum(l.sum() for l in losses.values()))
        parts = tuple(
            float(losses[name].mean()) if name in losses else 0.0
            for name in ("fused", "structure", "texture")
        )
        return total, parts, grads, dxs, dxt

    def predict_proba(self, x_struct, x_tex) -> dict[str, np.ndarray | None]:
        """Probabilities of every available head plus the mode's primary one."""
        out = self.forward(x_struct, x_tex)
        heads = self._heads(out)
        if "fused" in heads:
            primary = heads["fused"]
        elif self.mode == "structure_only":
            primary = heads["structure"]
        else:
            primary = heads["texture"]
        return {
            "primary": primary,
            "fused": heads.get("fused"),
            "structure": heads.get("structure"),
            "texture": heads.get("texture"),
        }

    def param_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.structure is not None:
            out.update({f"structure.{k}": v for k, v in self.structure.param_dict().items()})
        if self.texture is not None:
            out.update({f"texture.{k}": v for k, v in self.texture.param_dict().items()})
        if self.fusion is not None:
            out.update({f"fusion.{k}": v for k, v in self.fusion.params.items()})
        if self.concat_head is not None:
            out.update({f"concat_head.{k}": v for k, v in self.concat_head.params.items()})
        return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray]):
    return {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in params.items()}


def adam_step(params, grads, state, t: int, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected ADAM update, in place; `t` is 1-based."""
    if t < 1:
        raise ValueError("step index is 1-based")
    for k, g in grads.items():
        m, v = state[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        params[k] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params


# ---------------------------------------------------------------------------
# parameter vector utilities and gradient verification
# ---------------------------------------------------------------------------

def params_to_vector(params: dict[str, np.ndarray]) -> np.ndarray:
    keys = sorted(params)
    return np.concatenate([params[k].ravel() for k in keys]) if keys else np.zeros(0)


def vector_to_params(vec: np.ndarray, like: dict[str, np.ndarray]) -> None:
    """Write `vec` back into the arrays of `like`, in sorted-key order."""
    pos = 0
    for k in sorted(like):
        size = like[k].size
        like[k][...] = vec[pos:pos + size].reshape(like[k].shape)
        pos += size
    if pos != vec.size:
        raise ValueError("vector length does not match parameter count")


def gradient_check(f, theta, analytic, eps: float = 1e-5, max_coords: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between central differences of `f` and `analytic`.

    Coordinates are visited exhaustively unless `max_coords` caps them, in
    which case a seeded sample is drawn. The error denominator is floored
    at 1e-5 so near-zero gradients are effectively compared absolutely.
    """
    theta = np.asarray(theta, dtype=float).copy()
    analytic = np.asarray(analytic, dtype=float).ravel()
    if analytic.size != theta.size:
        raise ValueError("analytic gradient size must match theta")
    idx = np.arange(theta.size)
    if max_coords is not None and theta.size > max_coords:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(theta.size, size=max_coords, replace=False))
    worst = 0.0
    for k in idx:
        orig = theta[k]
        theta[k] = orig + eps
        f_plus = f(theta)
        theta[k] = orig - eps
        f_minus = f(theta)
        theta[k] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(numeric), abs(analytic[k]), 1e-5)
        worst = max(worst, abs(numeric - analytic[k]) / denom)
    return worst


GRADCHECK_COMPONENTS = ("lstm", "attention", "fusion", "focal_head", "full_model")


def _check_lstm(eps: float, rng: np.random.Generator) -> float:
    lstm = PeepholeLstm(3, 4, rng)
    x = rng.standard_normal((2, 5, 3))
    probe = rng.standard_normal((2, 5, 4))
    n_params = params_to_vector(lstm.params).size

    def loss(theta):
        vector_to_params(theta[:n_params], lstm.params)
        xv = theta[n_params:].reshape(x.shape)
        h, _ = lstm.forward(xv)
        return float((h * probe).sum())

    theta0 = np.concatenate([params_to_vector(lstm.params), x.ravel()])
    h, cache = lstm.forward(x)
    dx, grads = lstm.backward(cache, probe)
    analytic = np.concatenate([params_to_vector(grads), dx.ravel()])
    return gradient_check(loss, theta0, analytic, eps=eps)


def _check_attention(eps: float, rng: np.random.Generator) -> float:
    att = SoftAttention(5, rng)
    h = rng.standard_normal((2, 6, 5))
    probe = rng.standard_normal((2, 5))
    n_params = params_to_vector(att.params).size

    def loss(theta):
        vector_to_params(theta[:n_params], att.params)
        hv = theta[n_params:].reshape(h.shape)
        context, _, _ = att.forward(hv)
        return float((context * probe).sum())

    theta0 = np.concatenate([params_to_vector(att.params), h.ravel()])
    _, _, cache = att.forward(h)
    dh, grads = att.backward(cache, probe)
    analytic = np.concatenate([params_to_vector(grads), dh.ravel()])
    return gradient_check(loss, theta0, analytic, eps=eps)


def _check_fusion(eps: float, rng: np.random.Generator) -> float:
    fusion = FusionGate(5, 4, 3, rng)
    h_tex = rng.standard_normal((2, 5))
    h_struct = rng.standard_normal((2, 5))
    labels = np.array([0, 2])
    focal = FocalLossConfig()
    n_params = params_to_vector(fusion.params).size
    n_tex = h_tex.size

    def loss(theta):
        vector_to_params(theta[:n_params], fusion.params)
        ht = theta[n_params:n_params + n_tex].reshape(h_tex.shape)
        hs = theta[n_params + n_tex:].reshape(h_struct.shape)
        _, probs, _, _ = fusion.forward(ht, hs)
        losses, _, _ = focal_loss(probs, labels, focal)
        return float(losses.sum())

    theta0 = np.concatenate([params_to_vector(fusion.params), h_tex.ravel(), h_struct.ravel()])
    _, probs, _, cache = fusion.forward(h_tex, h_struct)
    _, dlogits, _ = focal_loss(probs, labels, focal)
    dht, dhs, grads = fusion.backward(cache, dlogits)
    analytic = np.concatenate([params_to_vector(grads), dht.ravel(), dhs.ravel()])
    return gradient_check(loss, theta0, analytic, eps=eps)


def _check_focal_head(eps: float, rng: np.random.Generator) -> float:
    head = Dense(6, 4, rng)
    x = rng.standard_normal((3, 6))
    labels = np.array([1, 3, 0])
    focal = FocalLossConfig()
    n_params = params_to_vector(head.params).size

    def loss(theta):
        vector_to_params(theta[:n_params], head.params)
        xv = theta[n_params:].reshape(x.shape)
        logits, _ = head.forward(xv)
        losses, _, _ = focal_loss(softmax(logits, axis=1), labels, focal)
        return float(losses.sum())

    theta0 = np.concatenate([params_to_vector(head.params), x.ravel()])
    logits, cache = head.forward(x)
    _, dlogits, _ = focal_loss(softmax(logits, axis=1), labels, focal)
    dx, grads = head.backward(cache, dlogits)
    analytic = np.concatenate([params_to_vector(grads), dx.ravel()])
    return gradient_check(loss, theta0, analytic, eps=eps)


def _check_full_model(eps: float, rng: np.random.Generator) -> float:
    # 2-class toy on a 4-node tree: traversal length 7
    model = TwoStreamModel(texture_dim=5, classes=2, hidden_dim=6, fusion_dim=5,
                           structure_dim=2, mode="full", seed=12345)
    x_struct = rng.standard_normal((3, 7, 2))
    x_tex = rng.standard_normal((3, 7, 5))
    labels = np.array([0, 1, 1])
    focal = FocalLossConfig()
    params = model.param_dict()

    def loss(theta):
        vector_to_params(theta, params)
        total, _, _, _, _ = model.loss_and_grads(x_struct, x_tex, labels, focal)
        return total

    theta0 = params_to_vector(params)
    _, _, grads, _, _ = model.loss_and_grads(x_struct, x_tex, labels, focal)
    analytic = params_to_vector({k: grads[k] for k in params})
    return gradient_check(loss, theta0, analytic, eps=eps)


def component_gradient_checks(eps: float = 1e-5, seed: int = 0,
                              corrupt: str | None = None) -> dict[str, float]:
    """Run the finite-difference check for every differentiable component.

    `corrupt` names a component whose analytic gradient is deliberately
    perturbed before checking; it exists as a negative control for the
    verification tooling itself.
    """
    checks = {
        "lstm": _check_lstm,
        "attention": _check_attention,
        "fusion": _check_fusion,
        "focal_head": _check_focal_head,
        "full_model": _check_full_model,
    }
    if corrupt is not None and corrupt not in checks:
        raise ValueError(f"unknown component {corrupt!r}")
    out = {}
    for name, fn in checks.items():
        rng = np.random.default_rng([seed, hash_seed(name)])
        err = fn(eps, rng)
        if corrupt == name:
            err = max(err, 1.0)  # negative-control hook: force a failure
        out[name] = err
    return out


def hash_seed(text: str) -> int:
    """Stable small seed derived from a string (process-independent)."""
    acc = 0
    for ch in text.encode():
        acc = (acc * 131 + ch) % (2 ** 31 - 1)
    return acc


# ---------------------------------------------------------------------------
# named-array container (checkpoint backing store)
# ---------------------------------------------------------------------------

def save_named_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float arrays plus JSON metadata as an uncompressed,
    timestamp-free zip (npz-compatible), so identical inputs always
    produce byte-identical files."""
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=stamp)
        zf.writestr(info, json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=stamp)
            zf.writestr(info, buf.getvalue())


def load_named_arrays(path):
    """Inverse of `save_named_arrays`: returns (arrays, meta)."""
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        with zf.open("meta.json") as fh:
            meta = json.load(fh)
        for name in zf.namelist():
            if name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[:-4]] = np.lib.format.read_array(fh)
    return arrays, meta
