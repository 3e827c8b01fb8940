"""Multi-layer LSTM language models in numpy, trained by truncated BPTT.

Sentences are framed as ``<s> w1 .. wk </s>``; the network reads
``<s> w1 .. wk`` and predicts ``w1 .. wk </s>``.  A BACKWARD model is the
same network trained and scored on reversed sentences.
"""
from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

BOS, EOS, UNK = "<s>", "</s>", "<unk>"
MAGIC = b"DFLS1"


class Direction(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass(frozen=True)
class LstmConfig:
    layers: int = 2
    hidden: int = 200
    embed: int = 200
    batch: int = 20
    epochs: int = 13
    lr0: float = 1.0
    decay: float = 0.5
    decay_after_epoch: int = 4
    max_len: int = 50
    bptt_window: int = 20
    seed: int = 0
    direction: Direction = Direction.FORWARD
    clip_norm: float = 5.0
    init_scale: float = 0.05

    def __post_init__(self):
        for name in ("layers", "hidden", "embed", "batch", "epochs", "max_len", "bptt_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        object.__setattr__(self, "direction", Direction(self.direction))

    @classmethod
    def full(cls, **kw) -> "LstmConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "LstmConfig":
        kw.setdefault("hidden", 64)
        kw.setdefault("embed", 64)
        return cls(**kw)

    def learning_rate(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr0 * self.decay ** max(0, epoch - self.decay_after_epoch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["direction"] = self.direction.value
        return d


class EmptyCorpusError(ValueError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmModel:
    config: LstmConfig
    vocab: tuple[str, ...]
    params: dict[str, np.ndarray]
    train_ids: tuple[str, ...] = ()
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.unk = self.index[UNK]

    # -- helpers -------------------------------------------------------
    @property
    def V(self) -> int:
        return len(self.vocab)

    def param_names(self) -> list[str]:
        names = ["embed"]
        for l in range(self.config.layers):
            names += [f"W{l}", f"b{l}"]
        return names + ["W_out", "b_out"]

    def encode(self, sentence: Sequence[str]) -> list[int]:
        return [self.index.get(w, self.unk) for w in sentence]

    def prepare(self, sentence: Sequence[str]) -> list[str]:
        s = list(sentence)
        return s[::-1] if self.config.direction is Direction.BACKWARD else s

    # -- persistence ---------------------------------------------------
    def save(self, f: BinaryIO) -> None:
        names = self.param_names()
        header = {
            "config": self.config.to_dict(),
            "vocab": list(self.vocab),
            "train_ids": list(self.train_ids),
            "history": self.history,
            "params": [[n, list(self.params[n].shape)] for n in names],
        }
        f.write(MAGIC + b"\n")
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n")
        for n in names:
            f.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, f: BinaryIO) -> "LstmModel":
        head = f.readline().rstrip(b"\n")
        if head != MAGIC:
            raise ValueError(f"not an LSTM model file (magic {head!r})")
        header = json.loads(f.readline().decode("utf-8"))
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        return cls(LstmConfig(**header["config"]), tuple(header["vocab"]), params,
                   tuple(header["train_ids"]), list(header["history"]))

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()


def init_model(vocab: Sequence[str], config: LstmConfig) -> LstmModel:
    rng = np.random.default_rng(config.seed)
    s = config.init_scale
    H, Ein, V = config.hidden, config.embed, len(vocab)
    params = {"embed": rng.uniform(-s, s, (V, Ein))}
    for l in range(config.layers):
        n_in = Ein if l == 0 else H
        params[f"W{l}"] = rng.uniform(-s, s, (n_in + H, 4 * H))
        params[f"b{l}"] = rng.uniform(-s, s, 4 * H)
    params["W_out"] = rng.uniform(-s, s, (H, V))
    params["b_out"] = rng.uniform(-s, s, V)
    return LstmModel(config, tuple(vocab), params)


def build_vocab(sentences: Sequence[Sequence[str]]) -> tuple[str, ...]:
    words = sorted({w for s in sentences for w in s} - {BOS, EOS, UNK})
    return (BOS, EOS, UNK) + tuple(words)


# -- forward / backward ----------------------------------------------------------

def _zero_state(model: LstmModel, B: int):
    H = model.config.hidden
    dt = model.params["embed"].dtype
    return [(np.zeros((B, H), dt), np.zeros((B, H), dt)) for _ in range(model.config.layers)]


def forward(model: LstmModel, X: np.ndarray, Y: np.ndarray, M: np.ndarray, state=None,
            keep: bool = True):
    """Run ``X`` (T x B ids) through the network, one layer at a time.

    Returns ``(nll, logp_of_targets, cache, final_state)`` where ``nll`` is the
    masked negative log-likelihood summed over time and batch.
    """
    p = model.params
    T, B = X.shape
    H = model.config.hidden
    if state is None:
        state = _zero_state(model, B)
    x_seq = p["embed"][X]
    layers = []
    final = []
    for l, (h, c) in enumerate(state):
        W = p[f"W{l}"]
        n_in = x_seq.shape[2]
        Wx, Wh = W[:n_in], W[n_in:]
        Zx = (x_seq.reshape(T * B, n_in) @ Wx + p[f"b{l}"]).reshape(T, B, 4 * H)
        dt = W.dtype
        gates = np.empty((T, B, 4 * H), dt)
        h_prev = np.empty((T, B, H), dt)
        c_prev = np.empty((T, B, H), dt)
        tcs = np.empty((T, B, H), dt)
        h_seq = np.empty((T, B, H), dt)
        for t in range(T):
            h_prev[t], c_prev[t] = h, c
            z = Zx[t] + h @ Wh
            act = gates[t]
            act[:, :3 * H] = _sigmoid(z[:, :3 * H])
            act[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            c = act[:, H:2 * H] * c + act[:, :H] * act[:, 3 * H:]
            tcs[t] = np.tanh(c)
            h = act[:, 2 * H:3 * H] * tcs[t]
            h_seq[t] = h
        final.append((h, c))
        if keep:
            layers.append((x_seq, h_prev, c_prev, gates, tcs))
        x_seq = h_seq
    logits = x_seq.reshape(T * B, H) @ p["W_out"] + p["b_out"]
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    tgt_lp = logp[np.arange(T * B), Y.reshape(-1)].reshape(T, B)
    nll = -(tgt_lp * M).sum()
    cache = None
    if keep:
        cache = {"layers": layers, "h_top": x_seq, "probs": np.exp(logp)}
    return nll, tgt_lp, cache, final


def backward(model: LstmModel, X, Y, M, cache, scale: float = 1.0,
             forget_gate_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradients of ``scale * nll`` for a window processed by :func:`forward`.

    The incoming state is treated as a constant (truncated BPTT).
    ``forget_gate_scale`` exists only to inject faults in gradient checks.
    """
    p = model.params
    T, B = X.shape
    H = model.config.hidden
    grads = {}
    dlogits = cache["probs"].copy()
    dlogits[np.arange(T * B), Y.reshape(-1)] -= 1.0
    dlogits *= (M * scale).reshape(-1, 1)
    h_top = cache["h_top"].reshape(T * B, H)
    grads["W_out"] = h_top.T @ dlogits
    grads["b_out"] = dlogits.sum(axis=0)
    d_out = (dlogits @ p["W_out"].T).reshape(T, B, H)
    for l in range(len(cache["layers"]) - 1, -1, -1):
        x_seq, h_prev, c_prev, gates, tcs = cache["layers"][l]
        W = p[f"W{l}"]
        n_in = x_seq.shape[2]
        Wx, Wh = W[:n_in], W[n_in:]
        dZ = np.empty((T, B, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            act = gates[t]
            i, f, o, g = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
            tc = tcs[t]
            dh = d_out[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dZ[t]
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = forget_gate_scale * dc * c_prev[t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - g * g)
            dh_next = dz @ Wh.T
            dc_next = dc * f
        dZf = dZ.reshape(T * B, 4 * H)
        grads[f"W{l}"] = np.concatenate([x_seq.reshape(T * B, n_in).T @ dZf,
                                         h_prev.reshape(T * B, H).T @ dZf])
        grads[f"b{l}"] = dZf.sum(axis=0)
        d_out = (dZf @ Wx.T).reshape(T, B, n_in)
    g_embed = np.zeros_like(p["embed"])
    np.add.at(g_embed, X.reshape(-1), d_out.reshape(T * B, -1))
    grads["embed"] = g_embed
    return grads


def _next_word_probs(model: LstmModel, ids: Sequence[int]) -> np.ndarray:
    X = np.array(ids, dtype=np.int64)[:, None]
    _, _, cache, _ = forward(model, X, np.zeros_like(X), np.ones(X.shape))
    return cache["probs"].reshape(len(ids), -1)


def _batch_arrays(model: LstmModel, sents: Sequence[Sequence[str]]):
    """Pad framed sentences into (T x B) input, target and mask arrays."""
    B = len(sents)
    T = max(len(s) for s in sents) + 1
    X = np.zeros((T, B), dtype=np.int64)
    Y = np.zeros((T, B), dtype=np.int64)
    M = np.zeros((T, B))
    bos, eos = model.index[BOS], model.index[EOS]
    for b, s in enumerate(sents):
        ids = model.encode(s)
        X[: len(ids) + 1, b] = [bos] + ids
        Y[: len(ids) + 1, b] = ids + [eos]
        M[: len(ids) + 1, b] = 1.0
    return X, Y, M


# -- training ------------------------------------------------------------------

def _sentences(corpus) -> list[tuple[str, ...]]:
    out = []
    for item in corpus:
        if hasattr(item, "tokens"):
            item = item.fluent_words() if getattr(item, "gold", None) is not None else item.words
        out.append(tuple(item))
    return out


def train_lstm(corpus, config: LstmConfig, train_ids: Sequence[str] = (),
               log=None) -> LstmModel:
    """SGD training with truncated BPTT, global-norm clipping and step decay.

    ``corpus`` holds token sequences or utterances (labelled utterances
    contribute their fluent words).  ``train_ids`` is recorded on the model
    as provenance.  Per-epoch mean token NLL is kept in ``model.history``.
    """
    sents = [s for s in _sentences(corpus)]
    if not sents:
        raise EmptyCorpusError("cannot train an LSTM on an empty corpus")
    if not train_ids:
        train_ids = tuple(getattr(u, "id", "") for u in corpus if hasattr(u, "id"))
    model = init_model(build_vocab(sents), config)
    model.train_ids = tuple(sorted(train_ids))
    seqs = [list(s)[: config.max_len] for s in sents]
    if config.direction is Direction.BACKWARD:
        seqs = [s[::-1] for s in seqs]
    rng = np.random.default_rng(config.seed + 1)
    W = config.bptt_window
    for epoch in range(1, config.epochs + 1):
        lr = config.learning_rate(epoch)
        order = rng.permutation(len(seqs))
        total_nll, total_tok = 0.0, 0.0
        for start in range(0, len(order), config.batch):
            batch = [seqs[k] for k in order[start:start + config.batch]]
            X, Y, M = _batch_arrays(model, batch)
            B = X.shape[1]
            state = None
            for t0 in range(0, X.shape[0], W):
                sl = slice(t0, t0 + W)
                nll, _, cache, state = forward(model, X[sl], Y[sl], M[sl], state)
                grads = backward(model, X[sl], Y[sl], M[sl], cache, scale=1.0 / B)
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                k = lr * (config.clip_norm / norm if norm > config.clip_norm else 1.0)
                for name, g in grads.items():
                    model.params[name] -= k * g
                total_nll += nll
                total_tok += float(M[sl].sum())
        model.history.append(total_nll / max(total_tok, 1.0))
        if not math.isfinite(model.history[-1]):
            raise FloatingPointError(f"non-finite training loss in epoch {epoch}")
        if log is not None:
            log(f"epoch {epoch} lr {lr:g} nll/token {model.history[-1]:.4f}")
    return model


# -- scoring -------------------------------------------------------------------

def lstm_logprob(model: LstmModel, sentence: Sequence[str]) -> float:
    """log p(sentence), including the end-of-sentence transition."""
    return lstm_logprob_batch(model, [sentence])[0]


def lstm_logprob_batch(model: LstmModel, sentences: Sequence[Sequence[str]],
                       batch: int = 64) -> list[float]:
    out: list[float] = []
    for start in range(0, len(sentences), batch):
        chunk = [model.prepare(s) for s in sentences[start:start + batch]]
        X, Y, M = _batch_arrays(model, chunk)
        _, lp, _, _ = forward(model, X, Y, M, keep=False)
        out.extend(float(v) for v in (lp * M).sum(axis=0))
    return out


def next_word_distribution(model: LstmModel, prefix: Sequence[str]) -> np.ndarray:
    """Softmax over the vocabulary after reading ``<s> + prefix``."""
    return _next_word_probs(model, [model.index[BOS]] + model.encode(prefix))[-1]


def perplexity(model: LstmModel, sentences: Sequence[Sequence[str]]) -> float:
    lps = lstm_logprob_batch(model, sentences)
    n = sum(len(s) + 1 for s in sentences)
    return math.exp(-sum(lps) / n)


# -- gradient check -----------------------------------------------------------

def check_gradients(model: LstmModel, minibatch: Sequence[Sequence[str]], step: float = 1e-4,
                    forget_gate_scale: float = 1.0, floor: float = 1e-6,
                    blocks: Sequence[str] | None = None) -> float:
    """Max relative error between BPTT gradients and central finite differences.

    Every element of every parameter block is perturbed.  The loss is the
    summed NLL of ``minibatch`` with full (untruncated) backpropagation; the
    finite differences are taken in extended precision so that rounding in
    the loss does not swamp small gradients.
    """
    sents = [model.prepare(s) for s in minibatch]
    if not sents:
        return 0.0
    X, Y, M = _batch_arrays(model, sents)
    _, _, cache, _ = forward(model, X, Y, M)
    grads = backward(model, X, Y, M, cache, forget_gate_scale=forget_gate_scale)
    wide = LstmModel(model.config, model.vocab,
                     {k: v.astype(np.longdouble) for k, v in model.params.items()})
    h = np.longdouble(step)

    def loss():
        return forward(wide, X, Y, M, keep=False)[0]

    worst = 0.0
    for name in blocks or model.param_names():
        P = wide.params[name]
        G = grads[name]
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            up = loss()
            P[idx] = old - h
            down = loss()
            P[idx] = old
            num = float((up - down) / (2 * h))
            ana = float(G[idx])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


def block_errors(model: LstmModel, minibatch, step: float = 1e-4) -> dict[str, float]:
    """Per-block version of :func:`check_gradients`, for diagnostics."""
    return {name: check_gradients(model, minibatch, step, blocks=[name])
            for name in model.param_names()}
