"""Tiny deterministic encoder-decoder transformer.

The model exposes three forward surfaces: a token-id path, a path that
accepts raw input embeddings (the hook attribution needs), and greedy
generation. Forward passes are pure functions of (parameters, inputs),
so identical inputs give bitwise-identical logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import BOS_ID, EOS_ID, PAD_ID, Example
from .errors import ConfigError, DataError

CHECKPOINT_MAGIC = b"GDST"
CHECKPOINT_VERSION = 1

_NEG_MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int = 256
    max_seq_len: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers_enc",
                     "n_layers_dec", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by "
                              f"n_heads={self.n_heads}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        try:
            return cls(**{k: int(v) for k, v in payload.items()})
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc


def sinusoidal_encoding(max_len: int, d_model: int) -> np.ndarray:
    """Parameter-free positional table: sin on even dims, cos on odd dims."""
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    dims = np.arange(d_model, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * (dims // 2) / d_model)
    table = np.where(dims % 2 == 0, np.sin(angles), np.cos(angles))
    return table


class Seq2SeqModel:
    """Pre-norm transformer with sinusoidal positions and greedy decoding."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        self._pe = sinusoidal_encoding(config.max_seq_len, config.d_model)
        self._init_params(np.random.default_rng(config.seed))

    # -- parameters ----------------------------------------------------------

    def _init_params(self, rng):
        c = self.config

        def glorot(fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_in, fan_out))

        def param(name, values):
            self.params[name] = ad.Tensor(values, requires_grad=True)

        param("embedding", rng.uniform(-1.0, 1.0, size=(c.vocab_size, c.d_model)))

        def attn_block(prefix):
            for proj in ("q", "k", "v", "o"):
                param(f"{prefix}.w{proj}", glorot(c.d_model, c.d_model))
                param(f"{prefix}.b{proj}", np.zeros(c.d_model))

        def norm_block(prefix):
            param(f"{prefix}.gain", np.ones(c.d_model))
            param(f"{prefix}.bias", np.zeros(c.d_model))

        def ff_block(prefix):
            param(f"{prefix}.w1", glorot(c.d_model, c.d_ff))
            param(f"{prefix}.b1", np.zeros(c.d_ff))
            param(f"{prefix}.w2", glorot(c.d_ff, c.d_model))
            param(f"{prefix}.b2", np.zeros(c.d_model))

        for i in range(c.n_layers_enc):
            norm_block(f"enc{i}.ln1")
            attn_block(f"enc{i}.attn")
            norm_block(f"enc{i}.ln2")
            ff_block(f"enc{i}.ff")
        norm_block("enc.final_ln")
        for i in range(c.n_layers_dec):
            norm_block(f"dec{i}.ln1")
            attn_block(f"dec{i}.self_attn")
            norm_block(f"dec{i}.ln2")
            attn_block(f"dec{i}.cross_attn")
            norm_block(f"dec{i}.ln3")
            ff_block(f"dec{i}.ff")
        norm_block("dec.final_ln")
        param("out.w", glorot(c.d_model, c.vocab_size))
        param("out.b", np.zeros(c.vocab_size))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p.data)) for p in self.params.values())

    # -- building blocks -----------------------------------------------------

    def _check_ids(self, ids, what="input"):
        ids = list(ids)
        if not ids:
            raise DataError(f"{what} sequence must be non-empty")
        if len(ids) > self.config.max_seq_len:
            raise DataError(f"{what} length {len(ids)} exceeds "
                            f"max_seq_len={self.config.max_seq_len}")
        if any(not 0 <= t < self.config.vocab_size for t in ids):
            raise DataError(f"{what} token id out of range "
                            f"[0, {self.config.vocab_size})")
        return ids

    def embed(self, input_ids) -> ad.Tensor:
        """Embedding rows plus positional encodings, graph-connected."""
        ids = self._check_ids(input_ids)
        gathered = ad.embedding_gather(self.params["embedding"], ids)
        pe = ad.Tensor(self._pe[: len(ids)], _validate=False)
        return ad.add(gathered, pe)

    def _norm(self, prefix, x):
        return ad.layer_norm(x, self.params[f"{prefix}.gain"],
                             self.params[f"{prefix}.bias"])

    def _attention(self, prefix, x_q, x_kv, mask):
        p = self.params
        q = ad.add(ad.matmul(x_q, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
        k = ad.add(ad.matmul(x_kv, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
        v = ad.add(ad.matmul(x_kv, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
        scores = ad.attention_scores(q, k, self.config.n_heads, mask=mask)
        probs = ad.softmax(scores, axis=-1)
        ctx = ad.attention_context(probs, v, self.config.n_heads)
        return ad.add(ad.matmul(ctx, p[f"{prefix}.wo"]), p[f"{prefix}.bo"])

    def _feed_forward(self, prefix, x):
        p = self.params
        hidden = ad.gelu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _encode(self, emb: ad.Tensor, key_mask: np.ndarray | None) -> ad.Tensor:
        n = emb.shape[0]
        mask = None
        if key_mask is not None and not key_mask.all():
            mask = np.where(key_mask, 0.0, _NEG_MASK)[None, :].repeat(n, axis=0)
        h = emb
        for i in range(self.config.n_layers_enc):
            normed = self._norm(f"enc{i}.ln1", h)
            h = ad.add(h, self._attention(f"enc{i}.attn", normed, normed, mask))
            h = ad.add(h, self._feed_forward(f"enc{i}.ff", self._norm(f"enc{i}.ln2", h)))
        return self._norm("enc.final_ln", h)

    def _decode(self, target_ids, enc_out: ad.Tensor,
                key_mask: np.ndarray | None) -> ad.Tensor:
        decoder_input = [BOS_ID] + list(target_ids[:-1])
        m = len(decoder_input)
        emb = self.embed(decoder_input)
        causal = np.where(np.triu(np.ones((m, m)), k=1) > 0, _NEG_MASK, 0.0)
        cross = None
        if key_mask is not None and not key_mask.all():
            cross = np.where(key_mask, 0.0, _NEG_MASK)[None, :].repeat(m, axis=0)
        h = emb
        for i in range(self.config.n_layers_dec):
            normed = self._norm(f"dec{i}.ln1", h)
            h = ad.add(h, self._attention(f"dec{i}.self_attn", normed, normed, causal))
            h = ad.add(h, self._attention(f"dec{i}.cross_attn",
                                          self._norm(f"dec{i}.ln2", h), enc_out, cross))
            h = ad.add(h, self._feed_forward(f"dec{i}.ff", self._norm(f"dec{i}.ln3", h)))
        h = self._norm("dec.final_ln", h)
        return ad.add(ad.matmul(h, self.params["out.w"]), self.params["out.b"])

    # -- public forward surfaces ----------------------------------------------

    def forward_from_embeddings(self, input_embeddings: ad.Tensor, target_ids,
                                input_mask: np.ndarray | None = None) -> ad.Tensor:
        """Teacher-forced logits [m, vocab] from raw encoder-input embeddings.

        ``input_mask`` marks attendable input positions (True = visible);
        the id-based ``forward`` derives it from padding and passes it here.
        """
        if input_embeddings.data.ndim != 2 or \
                input_embeddings.shape[1] != self.config.d_model:
            raise DataError(f"input embeddings must be (n, {self.config.d_model}), "
                            f"got {input_embeddings.shape}")
        target_ids = self._check_ids(target_ids, what="target")
        enc_out = self._encode(input_embeddings, input_mask)
        return self._decode(target_ids, enc_out, input_mask)

    def forward(self, input_ids, target_ids) -> ad.Tensor:
        ids = self._check_ids(input_ids)
        key_mask = np.array([t != PAD_ID for t in ids], dtype=bool)
        return self.forward_from_embeddings(self.embed(ids), target_ids,
                                            input_mask=key_mask)

    def generate(self, input_ids, max_len: int | None = None) -> list[int]:
        """Greedy decoding; stops at EOS or ``max_len`` generated tokens.

        Ties in the argmax resolve to the lowest token id. The terminating
        EOS, when produced, is included in the returned sequence.
        """
        if max_len is None:
            max_len = self.config.max_seq_len
        if not 1 <= max_len <= self.config.max_seq_len:
            raise DataError(f"max_len must be in [1, {self.config.max_seq_len}]")
        ids = self._check_ids(input_ids)
        key_mask = np.array([t != PAD_ID for t in ids], dtype=bool)
        out: list[int] = []
        with ad.no_grad():
            enc_out = self._encode(self.embed(ids), key_mask)
            for _ in range(max_len):
                # The next-token logits sit at the last teacher-forcing row.
                probe = out + [PAD_ID]
                logits = self._decode(probe, enc_out, key_mask)
                next_id = int(np.argmax(logits.data[-1]))
                out.append(next_id)
                if next_id == EOS_ID:
                    break
        return out

    def sequence_loss(self, input_ids, target_ids) -> ad.Tensor:
        """Mean token cross-entropy for one (input, target) pair."""
        logits = self.forward(input_ids, target_ids)
        return ad.cross_entropy(logits, target_ids, ignore_index=PAD_ID)

    def label_loss(self, examples: list[Example]) -> ad.Tensor:
        """Batch mean of per-example mean token cross-entropy on labels."""
        if not examples:
            raise DataError("label_loss needs a non-empty batch")
        total = None
        for ex in examples:
            loss = self.sequence_loss(ex.input_ids, list(ex.label_ids) + [EOS_ID])
            total = loss if total is None else ad.add(total, loss)
        return ad.mul_scalar(total, 1.0 / len(examples))

    # -- checkpointing ---------------------------------------------------------

    def save(self, path) -> None:
        if not self.all_finite():
            raise DataError("refusing to save checkpoint with non-finite parameters")
        manifest = []
        blobs = []
        offset = 0
        for name, tensor in self.params.items():
            blob = tensor.data.astype("<f8").tobytes()
            manifest.append({"name": name, "shape": list(tensor.shape),
                             "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = json.dumps({"format_version": CHECKPOINT_VERSION,
                             "config": self.config.to_dict(),
                             "manifest": manifest}).encode("utf-8")
        payload = (CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header
                   + b"".join(blobs))
        from .io_utils import atomic_write_bytes
        atomic_write_bytes(path, payload)

    @classmethod
    def load(cls, path) -> "Seq2SeqModel":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing checkpoint: {path}")
        payload = path.read_bytes()
        if payload[:4] != CHECKPOINT_MAGIC:
            raise DataError(f"not a model checkpoint: {path}")
        (header_len,) = struct.unpack("<I", payload[4:8])
        header = json.loads(payload[8:8 + header_len].decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version "
                            f"{header.get('format_version')}")
        model = cls(ModelConfig.from_dict(header["config"]))
        data = payload[8 + header_len:]
        for entry in header["manifest"]:
            name, shape, offset = entry["name"], entry["shape"], entry["offset"]
            if name not in model.params:
                raise DataError(f"unknown parameter in checkpoint: {name}")
            count = int(np.prod(shape))
            values = np.frombuffer(data, dtype="<f8", count=count,
                                   offset=offset).reshape(shape)
            model.params[name] = ad.Tensor(values.copy(), requires_grad=True)
        return model
