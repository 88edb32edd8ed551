"""Causal transformer over pointer/content token sequences.

Pre-norm blocks, GELU MLPs, learned sequence-position embeddings; pointer
tokens carry all spatial information. The training forward runs on the
autodiff tape; decoding runs a plain-numpy incremental path with a per-layer
KV cache and masks logits to the legal sub-vocabulary of the queried pointer,
so sampled codes can never leave their modality/level range.

Forward passes pad sequences to a multiple of the contraction block width
with BOS; together with the blocked reductions in ``numerics`` this makes
prefix logits bit-exact under truncation.
"""

import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import arrayio
from . import numerics as nm
from .serialize import SequenceLayout, PointerAddress, POSE_DIMS

MAGIC = b"LRAS"
_PAD = 64  # forward length granularity; equals numerics._KBLOCK


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    embed_dim: int = 128
    context: int = 1024
    dropout: float = 0.0
    dtype: str = "float32"
    init_seed: int = 0

    def validate(self, layout):
        if self.embed_dim % self.heads:
            raise ValueError("embed dim must divide evenly over heads")
        if self.context % _PAD:
            raise ValueError(f"context must be a multiple of {_PAD}")
        if self.dropout != 0.0:
            raise ValueError("dropout is fixed at 0 in this implementation")


@dataclass
class Sampler:
    temperature: float = 1.0
    top_k: int = 50
    rng: np.random.Generator = None

    def pick(self, logits):
        """Sample an index from a 1-D logit vector; temperature 0 = argmax."""
        if self.temperature == 0.0:
            return int(np.argmax(logits))
        z = logits / self.temperature
        if self.top_k and self.top_k < z.size:
            keep = np.argpartition(z, -self.top_k)[-self.top_k:]
            mask = np.full_like(z, -np.inf)
            mask[keep] = z[keep]
            z = mask
        z = z - z.max()
        p = np.exp(z)
        p /= p.sum()
        rng = self.rng if self.rng is not None else np.random.default_rng()
        return int(rng.choice(z.size, p=p))


class Transformer:
    def __init__(self, config, layout):
        config.validate(layout)
        self.config = config
        self.layout = layout
        self.step_counter = 0
        c = config
        dt = np.dtype(c.dtype).type
        rng = np.random.default_rng([c.init_seed, 11])
        d, v = c.embed_dim, layout.vocab_size
        std = 0.02
        out_std = std / np.sqrt(2.0 * c.layers)

        p = {
            "tok_emb": rng.normal(0, std, size=(v, d)),
            "pos_emb": rng.normal(0, std, size=(c.context, d)),
            "lnf.g": np.ones(d), "lnf.b": np.zeros(d),
            "head.w": rng.normal(0, std, size=(d, v)),
        }
        for i in range(c.layers):
            p[f"l{i}.ln1.g"] = np.ones(d)
            p[f"l{i}.ln1.b"] = np.zeros(d)
            p[f"l{i}.attn.wq"] = rng.normal(0, std, size=(d, d))
            p[f"l{i}.attn.wk"] = rng.normal(0, std, size=(d, d))
            p[f"l{i}.attn.wv"] = rng.normal(0, std, size=(d, d))
            p[f"l{i}.attn.wo"] = rng.normal(0, out_std, size=(d, d))
            p[f"l{i}.ln2.g"] = np.ones(d)
            p[f"l{i}.ln2.b"] = np.zeros(d)
            p[f"l{i}.mlp.w1"] = rng.normal(0, std, size=(d, 4 * d))
            p[f"l{i}.mlp.b1"] = np.zeros(4 * d)
            p[f"l{i}.mlp.w2"] = rng.normal(0, out_std, size=(4 * d, d))
            p[f"l{i}.mlp.b2"] = np.zeros(d)
        self.params = {k: nm.parameter(a, dtype=dt) for k, a in p.items()}
        self._mask_cache = {}

    # -- tape forward --------------------------------------------------------

    def _causal_mask(self, s, dtype):
        key = (s, dtype)
        if key not in self._mask_cache:
            m = np.triu(np.full((s, s), -np.inf), k=1)
            m[np.isneginf(m) == False] = 0.0  # noqa: E712  (keep zeros exact)
            self._mask_cache[key] = nm.tensor(m, dtype=dtype)
        return self._mask_cache[key]

    def _ln(self, x, g, b):
        return nm.add(nm.mul(nm.layernorm(x), self.params[g]), self.params[b])

    def _embed(self, tokens):
        c = self.config
        b, s = tokens.shape
        if tokens.min() < 0 or tokens.max() >= self.layout.vocab_size:
            raise ValueError(f"token id outside vocabulary of size {self.layout.vocab_size}")
        tok = nm.embedding_gather(self.params["tok_emb"], tokens.reshape(-1))
        tok = nm.reshape(tok, (b, s, c.embed_dim))
        pos = nm.embedding_gather(self.params["pos_emb"], np.arange(s))
        return nm.add(tok, pos)

    def _blocks(self, x, b, s):
        c = self.config
        d, h = c.embed_dim, c.heads
        dh = d // h
        dt = self.params["tok_emb"].data.dtype
        mask = self._causal_mask(s, dt.type)
        for i in range(c.layers):
            a_in = self._ln(x, f"l{i}.ln1.g", f"l{i}.ln1.b")
            flat = nm.reshape(a_in, (b * s, d))

            def heads(w):
                y = nm.reshape(nm.matmul(flat, self.params[w], row_tile=_PAD), (b, s, h, dh))
                return nm.transpose(y, (0, 2, 1, 3))

            q = nm.scale(heads(f"l{i}.attn.wq"), 1.0 / float(np.sqrt(dh)))
            k = heads(f"l{i}.attn.wk")
            v = heads(f"l{i}.attn.wv")
            scores = nm.matmul(q, nm.transpose(k, (0, 1, 3, 2)), row_tile=_PAD)
            probs = nm.softmax(nm.add(scores, mask), axis=-1)
            ctx = nm.matmul(probs, v, row_tile=_PAD)
            ctx = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b * s, d))
            attn = nm.reshape(nm.matmul(ctx, self.params[f"l{i}.attn.wo"], row_tile=_PAD), (b, s, d))
            x = nm.add(x, attn)

            m_in = self._ln(x, f"l{i}.ln2.g", f"l{i}.ln2.b")
            flat2 = nm.reshape(m_in, (b * s, d))
            hmid = nm.gelu(nm.add(nm.matmul(flat2, self.params[f"l{i}.mlp.w1"], row_tile=_PAD),
                                  self.params[f"l{i}.mlp.b1"]))
            mlp = nm.reshape(nm.add(nm.matmul(hmid, self.params[f"l{i}.mlp.w2"], row_tile=_PAD),
                                    self.params[f"l{i}.mlp.b2"]), (b, s, d))
            x = nm.add(x, mlp)
        return self._ln(x, "lnf.g", "lnf.b")

    def _padded(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, s = tokens.shape
        if s > self.config.context:
            raise ValueError(f"sequence length {s} exceeds context {self.config.context}")
        sp = ((s + _PAD - 1) // _PAD) * _PAD
        if sp != s:
            pad = np.full((b, sp - s), self.layout.bos, dtype=np.int64)
            tokens = np.concatenate([tokens, pad], axis=1)
        return tokens, b, s, sp

    def forward(self, tokens, return_embedded=False):
        """Per-position logits over the vocabulary; causal by construction."""
        tokens, b, s, sp = self._padded(tokens)
        emb = self._embed(tokens)
        x = self._blocks(emb, b, sp)
        flat = nm.reshape(x, (b * sp, self.config.embed_dim))
        logits = nm.reshape(nm.matmul(flat, self.params["head.w"], row_tile=_PAD),
                            (b, sp, self.layout.vocab_size))
        logits = nm.slice_(logits, (0, 0, 0), (b, s, self.layout.vocab_size))
        if return_embedded:
            return logits, emb
        return logits

    def supervised_loss(self, tokens, supervised):
        """Mean next-token cross-entropy over supervised target positions.

        The head matmul runs only on rows whose next token is supervised.
        """
        tokens_in, b, s, sp = self._padded(tokens)
        supervised = np.asarray(supervised, dtype=bool)
        if supervised.ndim == 1:
            supervised = supervised[None, :]
        target_mask = np.zeros((b, sp), dtype=bool)
        target_mask[:, :s - 1] = supervised[:, 1:]
        if not target_mask.any():
            raise ValueError("no supervised positions in the batch")
        emb = self._embed(tokens_in)
        x = self._blocks(emb, b, sp)
        flat = nm.reshape(x, (b * sp, self.config.embed_dim))
        idx = np.nonzero(target_mask.reshape(-1))[0]
        rows = nm.embedding_gather(flat, idx)
        logits = nm.matmul(rows, self.params["head.w"])
        targets = np.roll(tokens_in, -1, axis=1).reshape(-1)[idx]
        return nm.cross_entropy(logits, targets)

    # -- incremental decode ---------------------------------------------------

    def _np_params(self):
        return {k: p.data for k, p in self.params.items()}

    def prefill(self, tokens):
        """Run the context once, returning a KV cache ready for stepping."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        state = _DecodeState(self, tokens.shape[0])
        state.append(tokens)
        return state

    def decode(self, context_tokens, queries, sampler):
        """Sample content codes for queried pointers, one patch at a time.

        Appends each query's pointer token, then samples its content tokens
        autoregressively (4 codes for visual patches). Returns an int array
        (n_queries, levels). Fails on duplicate pointers or context overflow.
        """
        layout = self.layout
        context_tokens = np.asarray(context_tokens, dtype=np.int64)
        seen = set()
        for t in context_tokens.reshape(-1):
            kind, _, value = layout.classify(int(t))
            if kind == "pointer":
                seen.add(int(value))
        per_query = 1 + layout.levels
        if context_tokens.size + per_query * len(queries) > self.config.context:
            raise ValueError("context window too small for the requested queries")

        state = self.prefill(context_tokens)
        out = np.zeros((len(queries), layout.levels), dtype=np.int32)
        for qi, addr in enumerate(queries):
            if addr.modality == "camera":
                raise ValueError("camera pose is conditioning, not decodable content")
            flat = layout.address_to_flat(addr)
            if flat in seen:
                raise ValueError(f"pointer {addr} already present in the sequence")
            seen.add(flat)
            logits = state.append(np.array([[layout.pointer_token(addr)]]))
            for level in range(layout.levels):
                lo, hi = layout.content_range(addr.modality, level)
                masked = np.full(layout.vocab_size, -np.inf)
                masked[lo:hi] = logits[0, lo:hi]
                tok = sampler.pick(masked)
                out[qi, level] = tok - lo
                logits = state.append(np.array([[tok]]))
        return out


class _DecodeState:
    """Per-layer KV cache; mirrors the tape forward in plain numpy."""

    def __init__(self, model, batch):
        self.m = model
        self.p = model._np_params()
        self.pos = 0
        c = model.config
        self.k = [np.zeros((batch, c.heads, 0, c.embed_dim // c.heads), dtype=self.p["tok_emb"].dtype)
                  for _ in range(c.layers)]
        self.v = [k.copy() for k in self.k]

    def _ln(self, x, g, b):
        mean = x.mean(axis=-1, keepdims=True)
        xc = x - mean
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + 1e-5) * self.p[g] + self.p[b]

    def append(self, tokens):
        """Feed (B, T) tokens; returns logits of the last position (B, V)."""
        c = self.m.config
        p = self.p
        b, t = tokens.shape
        if self.pos + t > c.context:
            raise ValueError(f"decode position {self.pos + t} exceeds context {c.context}")
        d, h = c.embed_dim, c.heads
        dh = d // h
        x = p["tok_emb"][tokens] + p["pos_emb"][self.pos:self.pos + t]
        for i in range(c.layers):
            a_in = self._ln(x, f"l{i}.ln1.g", f"l{i}.ln1.b")
            q = (a_in @ p[f"l{i}.attn.wq"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            k = (a_in @ p[f"l{i}.attn.wk"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            v = (a_in @ p[f"l{i}.attn.wv"]).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
            self.k[i] = np.concatenate([self.k[i], k], axis=2)
            self.v[i] = np.concatenate([self.v[i], v], axis=2)
            scores = q @ self.k[i].transpose(0, 1, 3, 2) * (1.0 / float(np.sqrt(dh)))
            past = self.k[i].shape[2] - t
            if t > 1:
                mask = np.triu(np.full((t, t + past), -np.inf), k=1 + past)
                scores = scores + mask
            w = scores - scores.max(axis=-1, keepdims=True)
            np.exp(w, out=w)
            w /= w.sum(axis=-1, keepdims=True)
            ctx = (w @ self.v[i]).transpose(0, 2, 1, 3).reshape(b, t, d)
            x = x + ctx @ p[f"l{i}.attn.wo"]
            m_in = self._ln(x, f"l{i}.ln2.g", f"l{i}.ln2.b")
            hmid = m_in @ p[f"l{i}.mlp.w1"] + p[f"l{i}.mlp.b1"]
            hm2 = hmid * hmid
            hmid = 0.5 * hmid * (1.0 + np.tanh(float(np.sqrt(2 / np.pi)) * (hmid + 0.044715 * hm2 * hmid)))
            x = x + hmid @ p[f"l{i}.mlp.w2"] + p[f"l{i}.mlp.b2"]
        self.pos += t
        xl = self._ln(x[:, -1, :], "lnf.g", "lnf.b")
        return xl @ p["head.w"]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_model(path, model, optimizer=None):
    cfg_pairs = [f"{k} = {v}" for k, v in sorted(asdict(model.config).items())]
    cfg_pairs.append(f"step_counter = {model.step_counter}")
    cfg_pairs += [f"layout.{k} = {v}" for k, v in model.layout.to_pairs()]
    text = "\n".join(cfg_pairs).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(text)))
        f.write(text)
        arrays = {k: p.data for k, p in model.params.items()}
        if optimizer is not None:
            arrays.update(optimizer.state_arrays())
        arrayio.write_blocks(f, arrays)


def load_model(path, with_optimizer=False):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not an LRAS checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        fields = {}
        for line in f.read(n).decode("utf-8").splitlines():
            k, _, v = line.partition("=")
            fields[k.strip()] = v.strip()
        arrays = arrayio.read_blocks(f)
    layout = SequenceLayout.from_pairs(
        [(k[len("layout."):], v) for k, v in fields.items() if k.startswith("layout.")])
    cfg = ModelConfig(layers=int(fields["layers"]), heads=int(fields["heads"]),
                      embed_dim=int(fields["embed_dim"]), context=int(fields["context"]),
                      dropout=float(fields["dropout"]), dtype=fields["dtype"],
                      init_seed=int(fields["init_seed"]))
    model = Transformer(cfg, layout)
    model.step_counter = int(fields["step_counter"])
    for k in model.params:
        model.params[k] = nm.parameter(arrays[k], dtype=arrays[k].dtype)
    if with_optimizer:
        opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
        return model, opt_arrays
    return model
