"""Dual-branch multi-scene pose regression transformer.

Two parallel encoder/decoder stacks (position and orientation branches)
share one architecture: a linear stem projects raw tokens, post-norm
encoder layers with multi-head self-attention refine them, and a decoder
with per-scene learnable queries cross-attends into the encoder memory.
A shared linear head scores the concatenated decoder outputs per scene;
MLP regressors read the selected scene row. Positional encoding is added
to the query/key projection inputs at every layer (encoder self-attention
and decoder cross-attention keys), never to values.

Encoder self-attention per-head Q, K, and attention maps are captured on
every forward pass for the alignment loss and the diagnostics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, model_config_from_dict
from .errors import ContractError, DimensionError
from .posenc import PosEncoding, build_sinusoidal_2d

CKPT_MAGIC = b"QKALCKP1"
CKPT_VERSION = 1

BRANCHES = ("t", "r")


@dataclass
class LayerCapture:
    """Per-encoder-layer attention capture, batched over samples and heads.

    q, k: (B, N, H, head_dim) tensors (post positional-add, post projection);
    a: (B, H, N, N) attention maps. These stay attached to the graph so the
    alignment loss can differentiate through them.
    """

    branch: str
    layer: int  # 1-based
    q: Tensor
    k: Tensor
    a: Tensor


@dataclass
class AttentionRecord:
    """One (sample, branch, layer, head) slice for diagnostics, as arrays."""

    branch: str
    layer: int  # 1-based
    head: int  # 1-based
    q: np.ndarray  # (N, head_dim)
    k: np.ndarray  # (N, head_dim)
    a: np.ndarray  # (N, N)


@dataclass
class ModelOutput:
    scene_logits: Tensor  # (B, M)
    t_hat: Tensor  # (B, 3)
    r_hat: Tensor  # (B, 4)
    scene_choice: np.ndarray  # (B,) row used by the regressors
    decoder_t: Tensor  # (B, M, D)
    decoder_r: Tensor  # (B, M, D)
    captures_t: list  # encoder LayerCaptures, empty if self-attention is off
    captures_r: list

    @property
    def batch_size(self) -> int:
        return self.scene_logits.data.shape[0]

    def attention_records(self, sample: int) -> list:
        """Encoder self-attention records for one sample: 2 * L * H entries
        ordered (branch t then r, layer, head)."""
        records = []
        for branch, captures in (("t", self.captures_t), ("r", self.captures_r)):
            for cap in captures:
                heads = cap.q.data.shape[2]
                for h in range(heads):
                    records.append(
                        AttentionRecord(
                            branch=branch,
                            layer=cap.layer,
                            head=h + 1,
                            q=np.array(cap.q.data[sample, :, h, :]),
                            k=np.array(cap.k.data[sample, :, h, :]),
                            a=np.array(cap.a.data[sample, h]),
                        )
                    )
        return records

    def all_attention_records(self) -> list:
        out = []
        for b in range(self.batch_size):
            out.extend(self.attention_records(b))
        return out


class PoseTransformer:
    """The desk-scale multi-scene pose regression model."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(np.random.SeedSequence((seed, 100)))
        self._build_params()
        self.pe = {
            "t": self._make_pe("t", config.grid_t),
            "r": self._make_pe("r", config.grid_r),
        }

    # ---- parameter construction -------------------------------------------------

    def _lin(self, name: str, din: int, dout: int):
        w = self._rng.normal(0.0, 1.0 / math.sqrt(din), size=(din, dout))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(dout), requires_grad=True)

    def _ln(self, name: str, d: int):
        self.params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)

    def _mha_params(self, prefix: str, d: int):
        for part in ("q", "k", "v", "o"):
            self._lin(f"{prefix}.{part}", d, d)

    def _build_params(self):
        cfg = self.config
        d, hid, m = cfg.dim, cfg.mlp_hidden, cfg.scenes
        for br in BRANCHES:
            self._lin(f"{br}.stem", d, d)
            for l in range(cfg.layers):
                p = f"{br}.enc.{l}"
                if cfg.encoder_self_attention:
                    self._mha_params(f"{p}.attn", d)
                    self._ln(f"{p}.ln1", d)
                self._lin(f"{p}.mlp.1", d, hid)
                self._lin(f"{p}.mlp.2", hid, d)
                self._ln(f"{p}.ln2", d)
            for l in range(cfg.layers):
                p = f"{br}.dec.{l}"
                self._mha_params(f"{p}.self", d)
                self._ln(f"{p}.ln1", d)
                self._mha_params(f"{p}.cross", d)
                self._ln(f"{p}.ln2", d)
                self._lin(f"{p}.mlp.1", d, hid)
                self._lin(f"{p}.mlp.2", hid, d)
                self._ln(f"{p}.ln3", d)
            self.params[f"{br}.query"] = Tensor(
                self._rng.normal(0.0, 0.02, size=(m, d)), requires_grad=True
            )
            if cfg.pe_kind == "learnable":
                grid = cfg.grid_t if br == "t" else cfg.grid_r
                n = grid[0] * grid[1]
                self.params[f"{br}.pe"] = Tensor(
                    self._rng.normal(0.0, 0.02, size=(n, d)), requires_grad=True
                )
        self._lin("head.scene", 2 * d, 1)
        self._lin("head.reg_t.1", d, hid)
        self._lin("head.reg_t.2", hid, 3)
        self._lin("head.reg_r.1", d, hid)
        self._lin("head.reg_r.2", hid, 4)

    def _make_pe(self, branch: str, grid):
        cfg = self.config
        if cfg.pe_kind == "fixed":
            return build_sinusoidal_2d(grid, cfg.dim)
        return PosEncoding("learnable", tuple(grid), cfg.dim, self.params[f"{branch}.pe"])

    def parameters(self) -> dict:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # ---- forward ----------------------------------------------------------------

    def _mha(self, prefix: str, q_in, k_in, v_in):
        """Multi-head attention; returns output and (Q, K, A) captures."""
        p = self.params
        cfg = self.config
        h, dh = cfg.heads, cfg.head_dim
        q = ad.linear(q_in, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
        k = ad.linear(k_in, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
        v = ad.linear(v_in, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
        b, nq, _ = q.data.shape
        nk = k.data.shape[1]
        q4 = ad.reshape(q, (b, nq, h, dh))
        k4 = ad.reshape(k, (b, nk, h, dh))
        v4 = ad.reshape(v, (b, nk, h, dh))
        # scale Q instead of the (much larger) score map; same logits
        scores = ad.head_scores(ad.scale(q4, 1.0 / math.sqrt(dh)), k4)
        attn = ad.softmax_rows(scores)
        mixed = ad.head_mix(attn, v4)
        out = ad.linear(
            ad.reshape(mixed, (b, nq, cfg.dim)),
            p[f"{prefix}.o.w"],
            p[f"{prefix}.o.b"],
        )
        return out, (q4, k4, attn)

    def _mlp(self, prefix: str, x):
        p = self.params
        hidden = ad.relu(ad.linear(x, p[f"{prefix}.1.w"], p[f"{prefix}.1.b"]))
        return ad.linear(hidden, p[f"{prefix}.2.w"], p[f"{prefix}.2.b"])

    def _encoder_layer(self, branch: str, layer: int, x, pe_table, captures):
        cfg = self.config
        p = self.params
        prefix = f"{branch}.enc.{layer}"
        eps = cfg.layer_norm_eps
        if cfg.encoder_self_attention:
            encoded = ad.add(x, pe_table)
            attn_out, (q4, k4, a) = self._mha(f"{prefix}.attn", encoded, encoded, x)
            y = ad.layer_norm(
                ad.add(x, attn_out), p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], eps
            )
            captures.append(LayerCapture(branch, layer + 1, q4, k4, a))
        else:
            y = x
        out = ad.layer_norm(
            ad.add(y, self._mlp(f"{prefix}.mlp", y)),
            p[f"{prefix}.ln2.g"],
            p[f"{prefix}.ln2.b"],
            eps,
        )
        return out

    def _decoder_layer(self, branch: str, layer: int, z, memory, pe_table):
        cfg = self.config
        p = self.params
        prefix = f"{branch}.dec.{layer}"
        eps = cfg.layer_norm_eps
        sa_out, _ = self._mha(f"{prefix}.self", z, z, z)
        y = ad.layer_norm(
            ad.add(z, sa_out), p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], eps
        )
        keyed = ad.add(memory, pe_table)
        ca_out, _ = self._mha(f"{prefix}.cross", y, keyed, memory)
        u = ad.layer_norm(
            ad.add(y, ca_out), p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], eps
        )
        out = ad.layer_norm(
            ad.add(u, self._mlp(f"{prefix}.mlp", u)),
            p[f"{prefix}.ln3.g"],
            p[f"{prefix}.ln3.b"],
            eps,
        )
        return out

    def _branch(self, branch: str, tokens):
        cfg = self.config
        p = self.params
        pe_table = self.pe[branch].table
        x = ad.linear(tokens, p[f"{branch}.stem.w"], p[f"{branch}.stem.b"])
        captures = []
        for l in range(cfg.layers):
            x = self._encoder_layer(branch, l, x, pe_table, captures)
        z = ad.expand_batch(p[f"{branch}.query"], tokens.data.shape[0])
        for l in range(cfg.layers):
            z = self._decoder_layer(branch, l, z, x, pe_table)
        return z, captures

    def _check_tokens(self, tokens, expected_n: int, name: str) -> Tensor:
        t = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        if t.data.ndim == 2:
            t = Tensor(t.data[None], requires_grad=t.requires_grad)
        if t.data.ndim != 3 or t.data.shape[1] != expected_n or t.data.shape[2] != self.config.dim:
            raise DimensionError(
                f"{name} tokens must be (B, {expected_n}, {self.config.dim}), "
                f"got {t.data.shape}"
            )
        return t

    def forward(self, tokens_t, tokens_r, scene_index=None) -> ModelOutput:
        """Run both branches and the heads.

        ``scene_index`` of shape (B,) selects the regression row (training,
        teacher forcing); None means inference, which uses the argmax of the
        scene logits.
        """
        cfg = self.config
        t_tokens = self._check_tokens(tokens_t, cfg.n_tokens_t, "position")
        r_tokens = self._check_tokens(tokens_r, cfg.n_tokens_r, "orientation")
        if t_tokens.data.shape[0] != r_tokens.data.shape[0]:
            raise DimensionError(
                f"branch batch sizes differ: {t_tokens.data.shape[0]} vs "
                f"{r_tokens.data.shape[0]}"
            )
        b = t_tokens.data.shape[0]
        z_t, captures_t = self._branch("t", t_tokens)
        z_r, captures_r = self._branch("r", r_tokens)
        zcat = ad.concat([z_t, z_r], axis=-1)  # (B, M, 2D)
        logits = ad.reshape(
            ad.linear(zcat, self.params["head.scene.w"], self.params["head.scene.b"]),
            (b, cfg.scenes),
        )
        if scene_index is None:
            choice = np.argmax(logits.data, axis=1)
        else:
            choice = np.asarray(scene_index)
            if choice.shape != (b,):
                raise ContractError(
                    f"scene_index must have shape ({b},), got {choice.shape}"
                )
            if choice.dtype.kind not in "iu":
                raise ContractError("scene_index must be integer-valued")
            if np.any(choice < 0) or np.any(choice >= cfg.scenes):
                raise ContractError(
                    f"scene_index out of range [0, {cfg.scenes}): {choice}"
                )
        row_t = ad.gather_rows(z_t, choice)
        row_r = ad.gather_rows(z_r, choice)
        t_hat = self._mlp("head.reg_t", row_t)
        r_hat = self._mlp("head.reg_r", row_r)
        return ModelOutput(
            scene_logits=logits,
            t_hat=t_hat,
            r_hat=r_hat,
            scene_choice=choice,
            decoder_t=z_t,
            decoder_r=z_r,
            captures_t=captures_t,
            captures_r=captures_r,
        )


# ---- checkpoint container --------------------------------------------------------
#
# Layout (documented in README): 8-byte magic "QKALCKP1", little-endian u64
# header length, UTF-8 JSON manifest {format_version, config, phase, params:
# [{name, shape}...]}, then each parameter as row-major little-endian float64
# in manifest order. Stable across versions via format_version.


def save_checkpoint(path, model: PoseTransformer, extra_params=None, phase: str = "main"):
    extra_params = extra_params or {}
    names = list(model.params) + list(extra_params)
    tensors = {**model.params, **extra_params}
    manifest = {
        "format_version": CKPT_VERSION,
        "config": _model_config_dict(model.config),
        "phase": phase,
        "params": [{"name": n, "shape": list(tensors[n].data.shape)} for n in names],
        "extra": list(extra_params),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.uint64(len(blob)).astype("<u8").tobytes())
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n].data).astype("<f8").tobytes())


def _model_config_dict(cfg: ModelConfig) -> dict:
    from .config import to_dict

    return to_dict(cfg)


def load_checkpoint(path):
    """Returns (model, extras, manifest); extras holds non-model parameters
    such as the loss uncertainty scalars."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ContractError(f"{path} is not a qkalign checkpoint")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        manifest = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if manifest.get("format_version") != CKPT_VERSION:
            raise ContractError(
                f"unsupported checkpoint version {manifest.get('format_version')}"
            )
        cfg = model_config_from_dict(manifest["config"])
        model = PoseTransformer(cfg, seed=0)
        extras = {}
        extra_names = set(manifest.get("extra", []))
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").copy()
            if arr.size != count:
                raise DimensionError(f"checkpoint truncated at {entry['name']}")
            arr = arr.reshape(shape)
            name = entry["name"]
            if name in extra_names:
                extras[name] = Tensor(arr, requires_grad=True)
            else:
                if name not in model.params:
                    raise ContractError(f"checkpoint parameter {name} not in model")
                if model.params[name].data.shape != shape:
                    raise DimensionError(
                        f"checkpoint parameter {name} has shape {shape}, model "
                        f"expects {model.params[name].data.shape}"
                    )
                model.params[name].data = arr
    return model, extras, manifest
