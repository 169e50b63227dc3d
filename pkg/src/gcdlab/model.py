"""Toy pre-LN transformer with per-block residual adapter branches.

The backbone (patch embedding, class token, positional table, attention and
MLP blocks) is trained once by self-supervision and then frozen; category
discovery training updates only the adapter branches, the projection head,
and the class prototypes. Adapter up-projections start at exactly zero, so a
freshly adapted model reproduces the frozen model's features bit for bit.

Checkpoints are a ``GCDCKPT1`` magic, a length-prefixed JSON header (configs,
seed, epoch, parameter table), then raw little-endian float64 payloads in
sorted parameter-name order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import activations
from . import tensor as T
from .activations import ActivationKind
from .errors import ConfigError, FormatError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"GCDCKPT1"


@dataclass
class BackboneConfig:
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 2
    mlp_hidden: int = 0  # 0 means 4 * embed_dim
    seq_len: int = 9  # class token + content tokens

    def __post_init__(self):
        if self.mlp_hidden == 0:
            self.mlp_hidden = 4 * self.embed_dim
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")


@dataclass
class AdapterConfig:
    bottleneck_dim: int = 8
    scale: float = 0.2
    activation: str = "linear"
    adapted_blocks: int = 4  # counted from the top block downward
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.bottleneck_dim < 1:
            raise ConfigError(f"bottleneck_dim must be >= 1, got {self.bottleneck_dim}")
        if self.scale < 0:
            raise ConfigError(f"adapter scale must be >= 0, got {self.scale}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        self.kind  # validate the activation tag eagerly

    @property
    def kind(self) -> ActivationKind:
        return ActivationKind.parse(self.activation)


@dataclass
class AdapterBranch:
    ln_gamma: Tensor
    ln_beta: Tensor
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor


@dataclass
class PrototypeHead:
    weight: Tensor  # (K, d)
    tau_student: float = 0.1


def _uniform_linear(rng, out_dim, in_dim):
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def adapter_forward(branch, kind, x, train=False, rng=None, dropout_rate=0.0, stats=None):
    """Bottleneck branch: LN -> down -> activation -> (dropout) -> up.

    ``stats``, when given, collects the exact-zero fraction of the
    post-activation bottleneck (the sparsity the lab tracks).
    """
    u = T.layer_norm(x, branch.ln_gamma, branch.ln_beta)
    z = T.affine(u, branch.w_down, branch.b_down)
    z = activations.apply(kind, z)
    if stats is not None:
        stats.append(activations.sparsity(z.data))
    if train and dropout_rate > 0.0:
        z = T.dropout(z, dropout_rate, rng)
    return T.affine(z, branch.w_up, branch.b_up)


def count_tunable_params(bcfg, acfg):
    """Adapter parameters introduced into the frozen trunk.

    Per adapted block: two projection matrices, their biases, and the branch
    LN's gamma+beta, times the number of adapted blocks.
    """
    d, dh, n = bcfg.embed_dim, acfg.bottleneck_dim, acfg.adapted_blocks
    return (d * dh * 2 + dh + d + d * 2) * n


class GcdModel:
    """Backbone plus optional adapters, projection head, and prototypes."""

    def __init__(
        self,
        bcfg,
        in_dim,
        acfg=None,
        num_classes=None,
        proj_dim=16,
        seed=0,
        backbone_trainable=False,
    ):
        if acfg is not None and not 0 <= acfg.adapted_blocks <= bcfg.num_blocks:
            raise ConfigError(
                f"adapted_blocks {acfg.adapted_blocks} outside 0..{bcfg.num_blocks}"
            )
        if acfg is not None and acfg.bottleneck_dim > bcfg.embed_dim:
            raise ConfigError(
                f"bottleneck_dim {acfg.bottleneck_dim} exceeds embed_dim {bcfg.embed_dim}"
            )
        self.bcfg = bcfg
        self.acfg = acfg
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.proj_dim = proj_dim
        self.seed = seed
        self.params = {}
        self.adapters = {}
        self.prototype_head = None
        rng = np.random.default_rng(seed)
        self._init_backbone(rng, trainable=backbone_trainable)
        self._init_projection(rng)
        if acfg is not None:
            first = bcfg.num_blocks - acfg.adapted_blocks
            for i in range(first, bcfg.num_blocks):
                self._init_adapter(rng, i)
        if num_classes is not None:
            proto = Tensor(rng.normal(size=(num_classes, bcfg.embed_dim)), requires_grad=True)
            self.params["proto.weight"] = proto
            self.prototype_head = PrototypeHead(weight=proto)

    # ------------------------------------------------------------------
    # construction

    def _add(self, name, data, trainable):
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
        self.params[name] = t
        return t

    def _init_backbone(self, rng, trainable):
        c = self.bcfg
        d = c.embed_dim
        self._add("embed.weight", _uniform_linear(rng, d, self.in_dim), trainable)
        self._add("embed.bias", np.zeros(d), trainable)
        self._add("embed.cls", rng.normal(size=d) * 0.02, trainable)
        self._add("embed.pos", rng.normal(size=(c.seq_len, d)) * 0.02, trainable)
        for i in range(c.num_blocks):
            pre = f"block{i}."
            self._add(pre + "ln1.gamma", np.ones(d), trainable)
            self._add(pre + "ln1.beta", np.zeros(d), trainable)
            for proj in ("wq", "wk", "wv", "wo"):
                self._add(pre + "attn." + proj, _uniform_linear(rng, d, d), trainable)
            for bias in ("bq", "bk", "bv", "bo"):
                self._add(pre + "attn." + bias, np.zeros(d), trainable)
            self._add(pre + "ln2.gamma", np.ones(d), trainable)
            self._add(pre + "ln2.beta", np.zeros(d), trainable)
            self._add(pre + "mlp.w1", _uniform_linear(rng, c.mlp_hidden, d), trainable)
            self._add(pre + "mlp.b1", np.zeros(c.mlp_hidden), trainable)
            self._add(pre + "mlp.w2", _uniform_linear(rng, d, c.mlp_hidden), trainable)
            self._add(pre + "mlp.b2", np.zeros(d), trainable)

    def _init_projection(self, rng):
        d = self.bcfg.embed_dim
        self._add("proj.w1", _uniform_linear(rng, d, d), True)
        self._add("proj.b1", np.zeros(d), True)
        self._add("proj.w2", _uniform_linear(rng, d, d), True)
        self._add("proj.b2", np.zeros(d), True)
        self._add("proj.w3", _uniform_linear(rng, self.proj_dim, d), True)
        self._add("proj.b3", np.zeros(self.proj_dim), True)

    def _init_adapter(self, rng, block_idx):
        d = self.bcfg.embed_dim
        dh = self.acfg.bottleneck_dim
        pre = f"adapter{block_idx}."
        bound = np.sqrt(6.0 / d)  # Kaiming-style fan-in for the down projection
        branch = AdapterBranch(
            ln_gamma=self._add(pre + "ln.gamma", np.ones(d), True),
            ln_beta=self._add(pre + "ln.beta", np.zeros(d), True),
            w_down=self._add(pre + "down.weight", rng.uniform(-bound, bound, (dh, d)), True),
            b_down=self._add(pre + "down.bias", np.zeros(dh), True),
            w_up=self._add(pre + "up.weight", np.zeros((d, dh)), True),
            b_up=self._add(pre + "up.bias", np.zeros(d), True),
        )
        self.adapters[block_idx] = branch

    @classmethod
    def from_backbone_state(cls, state, bcfg, in_dim, acfg, num_classes, proj_dim=16, seed=0):
        """Fresh adapters/heads seeded by ``seed`` on top of frozen weights."""
        model = cls(
            bcfg,
            in_dim,
            acfg=acfg,
            num_classes=num_classes,
            proj_dim=proj_dim,
            seed=seed,
            backbone_trainable=False,
        )
        model.load_backbone_state(state)
        return model

    def load_backbone_state(self, state):
        for name in self.backbone_param_names():
            if name not in state:
                raise FormatError(f"backbone state missing parameter {name!r}")
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != self.params[name].data.shape:
                raise FormatError(
                    f"backbone parameter {name!r} shape {src.shape} != "
                    f"{self.params[name].data.shape}"
                )
            self.params[name].data = src.copy()

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def backbone_param_names(self):
        return [n for n in self.params if n.startswith(("embed.", "block"))]

    def trainable_params(self):
        return {n: t for n, t in sorted(self.params.items()) if t.requires_grad}

    def state(self):
        return {n: t.data.copy() for n, t in self.params.items()}

    def frozen_fingerprint(self):
        """Concatenated bytes of all frozen parameters, for freeze assertions."""
        frozen = [n for n in sorted(self.params) if not self.params[n].requires_grad]
        return b"".join(self.params[n].data.tobytes() for n in frozen)

    # ------------------------------------------------------------------
    # forward

    def _linear(self, x, wname, bname):
        return T.affine(x, self.params[wname], self.params[bname])

    def _attention(self, i, a):
        c = self.bcfg
        d = a.shape[2]
        heads = c.num_heads
        dh = d // heads
        pre = f"block{i}.attn."
        q = T.split_heads(self._linear(a, pre + "wq", pre + "bq"), heads)
        k = T.split_heads(self._linear(a, pre + "wk", pre + "bk"), heads)
        v = T.split_heads(self._linear(a, pre + "wv", pre + "bv"), heads)
        scores = T.scale(T.bmm(q, T.permute(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
        out = T.merge_heads(T.bmm(T.softmax(scores), v), heads)
        return self._linear(out, pre + "wo", pre + "bo")

    def block_forward(self, i, x, train=False, rng=None, stats=None):
        """Pre-LN attention, then the MLP sub-block fused with the adapter branch."""
        pre = f"block{i}."
        a = T.layer_norm(x, self.params[pre + "ln1.gamma"], self.params[pre + "ln1.beta"])
        x = T.add(x, self._attention(i, a))
        u = T.layer_norm(x, self.params[pre + "ln2.gamma"], self.params[pre + "ln2.beta"])
        m = self._linear(activations.apply(activations.GELU, self._linear(u, pre + "mlp.w1", pre + "mlp.b1")), pre + "mlp.w2", pre + "mlp.b2")
        out = T.add(m, x)
        branch = self.adapters.get(i)
        if branch is not None:
            tilde = adapter_forward(
                branch,
                self.acfg.kind,
                x,
                train=train,
                rng=rng,
                dropout_rate=self.acfg.dropout_rate,
                stats=stats,
            )
            out = T.add(out, T.scale(tilde, self.acfg.scale))
        return out

    def features(self, tokens, train=False, rng=None, stats=None):
        """Class-token feature of the final block: (B, L-1, in_dim) -> (B, d)."""
        if not isinstance(tokens, Tensor):
            tokens = Tensor(tokens)
        if tokens.data.ndim != 3 or tokens.data.shape[2] != self.in_dim:
            raise ConfigError(f"expected (B, {self.bcfg.seq_len - 1}, {self.in_dim}) tokens, got {tokens.shape}")
        x = self._linear(tokens, "embed.weight", "embed.bias")
        x = T.prepend_row(x, self.params["embed.cls"])
        x = T.add_rowmat(x, self.params["embed.pos"])
        for i in range(self.bcfg.num_blocks):
            x = self.block_forward(i, x, train=train, rng=rng, stats=stats)
        return T.take_token(x, 0)

    def project(self, h):
        z = activations.apply(activations.GELU, self._linear(h, "proj.w1", "proj.b1"))
        z = activations.apply(activations.GELU, self._linear(z, "proj.w2", "proj.b2"))
        return T.l2_normalize(self._linear(z, "proj.w3", "proj.b3"))

    def class_probs(self, h, tau, logit_offset=None):
        """Softmax over cosine similarity to the prototypes at temperature tau."""
        return T.softmax(self.class_logits(h, tau, logit_offset))

    def class_logits(self, h, tau, logit_offset=None):
        if self.prototype_head is None:
            raise ConfigError("model has no prototype head")
        if tau <= 0:
            raise ConfigError(f"temperature must be positive, got {tau}")
        hn = T.l2_normalize(h)
        cn = T.l2_normalize(self.prototype_head.weight)
        logits = T.scale(T.matmul(hn, T.transpose(cn)), 1.0 / tau)
        if logit_offset is not None:
            logits = T.add_bias(logits, Tensor(logit_offset))
        return logits


def prototype_probs(head, h, tau):
    """Standalone Eq.-style prototype classifier on raw tensors."""
    hn = T.l2_normalize(h)
    cn = T.l2_normalize(head.weight)
    return T.softmax(T.scale(T.matmul(hn, T.transpose(cn)), 1.0 / tau))


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, params, configs, seed, epoch):
    """params: mapping name -> ndarray/Tensor; written in sorted name order."""
    arrays = {
        name: (p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64))
        for name, p in params.items()
    }
    names = sorted(arrays)
    header = {
        "configs": configs,
        "seed": seed,
        "epoch": epoch,
        "params": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError("truncated checkpoint header length")
        (hlen,) = struct.unpack("<Q", raw_len)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise FormatError("truncated checkpoint header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"corrupt checkpoint header: {e}") from None
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise FormatError(f"truncated payload for parameter {entry['name']!r}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return params, header
