"""Neural layers built on :mod:`mcqforecast.autograd`.

Parameters are plain :class:`Tensor` leaves with ``requires_grad=True``.
A :class:`Module` discovers them by walking its attributes, which yields
dotted names such as ``encoder.blocks.0.attn.wq.weight``.
"""
from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .exceptions import ContractError, ShapeError

INIT_STD = 0.02
NEG_INF = -1e9


def normal_param(rng, shape, std=INIT_STD):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        params = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    params[full] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{full}.{i}."))
        return params

    def parameters(self):
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, zero_init=False):
        shape = (in_features, out_features)
        self.weight = zeros_param(shape) if zero_init else normal_param(rng, shape)
        self.bias = zeros_param((out_features,)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects last dim {self.in_features}, got shape {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num_embeddings, dim, rng):
        self.weight = normal_param(rng, (num_embeddings, dim))

    def forward(self, ids):
        return ag.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = ones_param((dim,))
        self.beta = zeros_param((dim,))
        self.eps = eps

    def forward(self, x):
        if x.shape[-1] != self.gamma.shape[0]:
            raise ShapeError(f"layer_norm expects last dim {self.gamma.shape[0]}, got {x.shape}")
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


def attention_bias(mask, length, causal):
    """Additive attention bias of shape ``(B, 1, T, T)`` or ``(1, 1, T, T)``.

    ``mask`` is a ``(B, T)`` 0/1 array marking real tokens, or None.
    """
    bias = None
    if mask is not None:
        mask = np.asarray(mask)
        bias = np.where(mask[:, None, None, :] > 0, 0.0, NEG_INF)
    if causal:
        tri = np.triu(np.full((length, length), NEG_INF), k=1)[None, None]
        bias = tri if bias is None else bias + tri
    return bias


class MultiHeadAttention(Module):
    def __init__(self, hidden, n_heads, rng, causal=False, dropout=0.0):
        if hidden % n_heads:
            raise ContractError(f"hidden size {hidden} not divisible by {n_heads} heads")
        self.wq = Linear(hidden, hidden, rng)
        self.wk = Linear(hidden, hidden, rng)
        self.wv = Linear(hidden, hidden, rng)
        self.wo = Linear(hidden, hidden, rng)
        self.n_heads = n_heads
        self.causal = causal
        self.dropout = dropout

    def _split(self, x, b, t):
        return x.reshape(b, t, self.n_heads, -1).transpose(0, 2, 1, 3)

    def forward(self, x, mask=None, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"attention expects (batch, length, hidden), got {x.shape}")
        b, t, h = x.shape
        q = self._split(self.wq(x), b, t)
        k = self._split(self.wk(x), b, t)
        v = self._split(self.wv(x), b, t)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(h // self.n_heads))
        bias = attention_bias(mask, t, self.causal)
        if bias is not None:
            scores = scores + bias
        probs = ag.softmax(scores, axis=-1)
        if rng is not None:
            probs = ag.dropout(probs, self.dropout, rng, self.training)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t, h)
        return self.wo(ctx)


class FeedForward(Module):
    def __init__(self, hidden, ffn, rng):
        self.fc1 = Linear(hidden, ffn, rng)
        self.fc2 = Linear(ffn, hidden, rng)

    def forward(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Post-norm encoder/decoder block (BERT layout)."""

    def __init__(self, hidden, n_heads, ffn, rng, causal=False, dropout=0.0):
        self.attn = MultiHeadAttention(hidden, n_heads, rng, causal=causal, dropout=dropout)
        self.ln1 = LayerNorm(hidden)
        self.ffn = FeedForward(hidden, ffn, rng)
        self.ln2 = LayerNorm(hidden)
        self.dropout = dropout

    def forward(self, x, mask=None, rng=None):
        a = self.attn(x, mask, rng)
        if rng is not None:
            a = ag.dropout(a, self.dropout, rng, self.training)
        x = self.ln1(x + a)
        f = self.ffn(x)
        if rng is not None:
            f = ag.dropout(f, self.dropout, rng, self.training)
        return self.ln2(x + f)


class LSTMCell(Module):
    def __init__(self, input_size, hidden_size, rng):
        self.w_ih = normal_param(rng, (input_size, 4 * hidden_size))
        self.w_hh = normal_param(rng, (hidden_size, 4 * hidden_size))
        self.bias = zeros_param((4 * hidden_size,))
        self.hidden_size = hidden_size

    def forward(self, x, h, c):
        n = self.hidden_size
        gates = x @ self.w_ih + h @ self.w_hh + self.bias
        i = ag.sigmoid(gates[:, :n])
        f = ag.sigmoid(gates[:, n:2 * n])
        g = ag.tanh(gates[:, 2 * n:3 * n])
        o = ag.sigmoid(gates[:, 3 * n:])
        c = f * c + i * g
        h = o * ag.tanh(c)
        return h, c


class LSTM(Module):
    """Stacked unidirectional LSTM over ``(B, T, F)`` inputs."""

    def __init__(self, input_size, hidden_size, num_layers, rng):
        self.cells = [LSTMCell(input_size if i == 0 else hidden_size, hidden_size, rng)
                      for i in range(num_layers)]
        self.hidden_size = hidden_size

    def forward(self, x):
        """Return the top-layer output sequence ``(B, T, H)`` and final hidden state ``(B, H)``."""
        b, t, _ = x.shape
        layer_in = [x[:, s, :] for s in range(t)]
        for cell in self.cells:
            h = Tensor(np.zeros((b, self.hidden_size)))
            c = Tensor(np.zeros((b, self.hidden_size)))
            outs = []
            for step in layer_in:
                h, c = cell(step, h, c)
                outs.append(h)
            layer_in = outs
        return ag.stack(layer_in, axis=1), layer_in[-1]


LAYER_KINDS = ("linear", "embedding_lookup", "layer_norm", "relu", "gelu",
               "multi_head_attention", "ffn")


def layer_forward(kind, layer, inputs, mask=None):
    """Uniform entry point: apply the layer of ``kind`` to ``inputs``.

    ``layer`` is the module holding the parameters (ignored for the
    parameter-free activations).
    """
    if kind == "relu":
        return ag.relu(inputs)
    if kind == "gelu":
        return ag.gelu(inputs)
    if kind == "multi_head_attention":
        return layer(inputs, mask)
    if kind in ("linear", "embedding_lookup", "layer_norm", "ffn"):
        return layer(inputs)
    raise ContractError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")
