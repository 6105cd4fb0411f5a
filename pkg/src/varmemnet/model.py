"""The memory network: deterministic baseline and Student-t variational
variant, with attention tracing, Monte Carlo prediction, and checkpoints.

Embeddings are tied across hops. Three embedding tables are used: A for
memories, B for the question, C for the per-fact output vectors; the output
layer W stays a point estimate in both modes. Each memory slot additionally
receives a trainable recency row (newest fact first), without which the
attention is a pure bag of sentences and cannot distinguish "before" from
"after"; the rows are point estimates like W and can be disabled.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tmath
from .corpus import EncodedStory, Vocabulary
from .errors import NumericError
from .tensor import Tape

__all__ = [
    "PointEmbedding",
    "VariationalEmbedding",
    "OutputLayer",
    "MemN2N",
    "AttentionTrace",
    "WeightSample",
    "embed_sentences",
    "forward",
    "sample_weights",
    "materialize_sample",
    "build_objective",
    "divergence_node",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

BASELINE = "baseline"
VARIATIONAL = "variational"

CHECKPOINT_MAGIC = b"VMNCK001"


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    """x with softplus(x) = y, stable for large y."""
    y = float(y)
    if y <= 0.0:
        raise ValueError("softplus is positive")
    if y > 30.0:
        return y + math.log1p(-math.exp(-y))
    return math.log(math.expm1(y))


@dataclass
class PointEmbedding:
    weights: np.ndarray


@dataclass
class VariationalEmbedding:
    """Posterior over one embedding table.

    mu is the mean table; softplus(rho_sigma) the per-entry standard
    deviation; exp(rho_nu) the single heavy-tail parameter nu shared by the
    whole table (log-parameterized so nu can move across orders of magnitude
    under Adagrad's bounded per-coordinate travel).
    """

    mu: np.ndarray
    rho_sigma: np.ndarray
    rho_nu: np.ndarray  # 0-d

    @property
    def nu(self):
        return float(np.exp(self.rho_nu))

    @property
    def sigma(self):
        return _softplus(self.rho_sigma)


@dataclass
class OutputLayer:
    w: np.ndarray


@dataclass
class AttentionTrace:
    """Per-hop attention over memory slots and the argmax slot."""

    probs: list
    argmax: list


@dataclass
class WeightSample:
    """Frozen unit-variance noise, one table each for A, B, C."""

    eps: dict


class MemN2N:
    def __init__(
        self,
        mode,
        embeddings,
        output,
        hops,
        prior_nu,
        memory_size,
        temporal=None,
        state_map=None,
    ):
        if mode not in (BASELINE, VARIATIONAL):
            raise ValueError(f"unknown mode {mode!r}")
        if int(hops) < 1:
            raise ValueError("at least one hop is required")
        want = VariationalEmbedding if mode == VARIATIONAL else PointEmbedding
        for key in "ABC":
            if not isinstance(embeddings[key], want):
                raise ValueError(f"embedding {key} must be {want.__name__} in {mode} mode")
        self.mode = mode
        self.embeddings = dict(embeddings)
        self.output = output
        self.hops = int(hops)
        self.prior_nu = float(prior_nu)
        self.memory_size = int(memory_size)
        self.temporal = temporal  # None or dict with "TA", "TC" (M+1, delta)
        self.state_map = state_map  # None or (delta, delta) hop transition

    @property
    def delta(self):
        return self.output.w.shape[1]

    @property
    def vocab_size(self):
        return self.output.w.shape[0]

    def nu_values(self):
        """Current (nu_A, nu_B, nu_C); NaNs in baseline mode."""
        if self.mode != VARIATIONAL:
            return (math.nan, math.nan, math.nan)
        return tuple(self.embeddings[k].nu for k in "ABC")

    def parameters(self):
        """Live (not copied) parameter arrays keyed by name, in fixed order."""
        out = {}
        for key in "ABC":
            emb = self.embeddings[key]
            if self.mode == VARIATIONAL:
                out[f"{key}.mu"] = emb.mu
                out[f"{key}.rho_sigma"] = emb.rho_sigma
                out[f"{key}.rho_nu"] = emb.rho_nu
            else:
                out[f"{key}.w"] = emb.weights
        out["W.w"] = self.output.w
        if self.temporal is not None:
            out["T.a"] = self.temporal["TA"]
            out["T.c"] = self.temporal["TC"]
        if self.state_map is not None:
            out["H.w"] = self.state_map
        return out

    def set_parameters(self, values):
        for name, arr in self.parameters().items():
            arr[...] = values[name]


def embed_sentences(ids, weights, pos_weights):
    """Position-weighted bag embedding of each row of token ids.

    out[i] = sum_j pos_weights[j] * weights[ids[i, j]]; the nil id 0
    contributes a zero vector.
    """
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= weights.shape[0]:
        raise ValueError("token id out of range")
    emb = weights[ids]
    nil = ids == 0
    if nil.any():
        emb = emb.copy()
        emb[nil] = 0.0
    return np.einsum("jd,mjd->md", pos_weights, emb)


def _temporal_index(n_facts, memory_size):
    """Row picks into the (M+1)-row recency table; 0 marks unused slots."""
    idx = np.zeros((memory_size, 1), dtype=np.int64)
    idx[:n_facts, 0] = np.arange(n_facts, 0, -1)
    return idx


_ONES_CACHE = {}


def _ones_row(delta):
    if delta not in _ONES_CACHE:
        _ONES_CACHE[delta] = np.ones((1, delta))
    return _ONES_CACHE[delta]


def build_forward(tape, enc: EncodedStory, nodes, hops):
    """Attention graph for one encoded story.

    ``nodes`` maps "A", "B", "C", "W" (and optionally "TA", "TC", "H") to
    tape tensors. Returns (answer probability node, list of per-hop
    attention nodes).
    """
    if enc.n_facts < 1:
        raise ValueError("story has no facts in memory")
    pw = enc.position_weights
    delta = pw.shape[1]
    m = tape.embedding_bag(nodes["A"], enc.memory, pw)
    c = tape.embedding_bag(nodes["C"], enc.memory, pw)
    if "TA" in nodes:
        tidx = _temporal_index(enc.n_facts, enc.memory.shape[0])
        ones = _ones_row(delta)
        m = tape.add(m, tape.embedding_bag(nodes["TA"], tidx, ones))
        c = tape.add(c, tape.embedding_bag(nodes["TC"], tidx, ones))
    u = _first_row(tape, tape.embedding_bag(nodes["B"], enc.question[None, :], pw))
    attention = []
    for _ in range(hops):
        scores = tape.matmul(m, u)
        probs = tape.softmax(scores, n_valid=enc.n_facts)
        attention.append(probs)
        o = tape.matmul(probs, c)
        if "H" in nodes:
            u = tape.add(tape.matmul(nodes["H"], u), o)
        else:
            u = tape.add(u, o)
    logits = tape.matmul(nodes["W"], u)
    return tape.softmax(logits), attention


def _first_row(tape, x):
    # (1, d) question embedding to a (d,) vector: ones(1) @ x
    return tape.matmul(tape.const(np.ones(1)), x)


def forward(enc: EncodedStory, weights, hops):
    """Numpy-level forward pass with explicit weight arrays.

    ``weights`` maps "A", "B", "C", "W" (optionally "TA", "TC") to arrays.
    Returns (probability vector over the vocabulary, AttentionTrace).
    """
    tape = Tape(record=False)
    nodes = {k: tape.const(v) for k, v in weights.items()}
    probs, attention = build_forward(tape, enc, nodes, hops)
    trace = AttentionTrace(
        probs=[a.data.copy() for a in attention],
        argmax=[int(np.argmax(a.data)) for a in attention],
    )
    return probs.data.copy(), trace


def sample_weights(net: MemN2N, rng) -> WeightSample:
    """One frozen noise table per embedding.

    Per table, a single Gamma precision draw is shared by every entry
    (matching the elliptical coupling of the multivariate density) and the
    per-entry normals are divided by its square root, giving Student-t noise
    at dof nu+2 whose reparameterized product has variance sigma^2.
    """
    if net.mode != VARIATIONAL:
        raise ValueError("sample_weights requires variational mode")
    eps = {}
    for key in "ABC":
        emb = net.embeddings[key]
        nu = emb.nu
        xi = tmath.sample_gamma((nu + 2.0) / 2.0, (nu + 2.0) / 2.0, rng)
        z = rng.standard_normal(emb.mu.shape)
        eps[key] = z / math.sqrt(xi)
    return WeightSample(eps=eps)


def materialize_sample(net: MemN2N, sample: WeightSample):
    """Numpy weight tables mu + sqrt(nu/(nu+2)) sigma (*) eps, plus W."""
    out = {}
    for key in "ABC":
        emb = net.embeddings[key]
        nu = emb.nu
        out[key] = emb.mu + math.sqrt(nu / (nu + 2.0)) * emb.sigma * sample.eps[key]
    out["W"] = net.output.w
    if net.temporal is not None:
        out["TA"] = net.temporal["TA"]
        out["TC"] = net.temporal["TC"]
    if net.state_map is not None:
        out["H"] = net.state_map
    return out


def point_weights(net: MemN2N):
    if net.mode == VARIATIONAL:
        out = {k: net.embeddings[k].mu for k in "ABC"}
    else:
        out = {k: net.embeddings[k].weights for k in "ABC"}
    out["W"] = net.output.w
    if net.temporal is not None:
        out["TA"] = net.temporal["TA"]
        out["TC"] = net.temporal["TC"]
    if net.state_map is not None:
        out["H"] = net.state_map
    return out


def divergence_node(tape, mu, rho_sigma, rho_nu, prior_nu):
    """Differentiable closed-form divergence of one posterior table from the
    zero-mean, unit-scale, dof ``prior_nu`` prior, summed over all entries.

    Mirrors tmath.t_divergence_closed; gradients flow into mu, rho_sigma,
    and rho_nu (through the per-coordinate factors, the 1+1/nu term, and the
    shared 1/(1-t) = -(1+nu)/2 normalization).
    """
    n_coord = float(mu.data.size)
    nu = tape.exp(rho_nu)
    sigma = tape.softplus(rho_sigma)
    # ln K_l = lgamma((nu+1)/2) - lgamma(nu/2) - 0.5 ln(pi nu) - ln sigma_l
    half_nu = tape.scale(nu, 0.5)
    ln_k_scalar = tape.sub(
        tape.lgamma(tape.add_const(half_nu, 0.5)),
        tape.add(
            tape.lgamma(half_nu),
            tape.scale(tape.log(tape.scale(nu, math.pi)), 0.5),
        ),
    )
    ln_k = tape.sub(ln_k_scalar, tape.log(sigma))  # (V, d) of ln K_l
    # psi_q_l = exp(-2/(nu+1) ln K_l)
    expo = tape.scale(tape.reciprocal(tape.add_const(nu, 1.0)), -2.0)
    psi_q_sum = tape.total(tape.exp(tape.elem_mul(ln_k, expo)))
    term_q = tape.elem_mul(psi_q_sum, tape.add_const(tape.reciprocal(nu), 1.0))
    psi_p = tmath.psi_prior(prior_nu)
    moment = tape.total(tape.add(tape.elem_mul(sigma, sigma), tape.elem_mul(mu, mu)))
    term_p = tape.scale(tape.add_const(tape.scale(moment, 1.0 / prior_nu), n_coord), psi_p)
    inv_one_minus_t = tape.scale(tape.add_const(nu, 1.0), -0.5)
    return tape.elem_mul(tape.sub(term_q, term_p), inv_one_minus_t)


def build_objective(net: MemN2N, batch, sample=None, kl_scale=0.0):
    """Training graph for one minibatch: mean answer NLL, plus the weighted
    divergences in variational mode. Returns (tape, loss node).

    The noise in ``sample`` is a constant of the graph; gradients reach the
    heavy-tail parameters through the divergence terms and through the
    deterministic sqrt(nu/(nu+2)) factor of the reparameterization.
    """
    if not batch:
        raise ValueError("empty batch")
    tape = Tape()
    params = {name: tape.param(name, arr) for name, arr in net.parameters().items()}
    nodes = {}
    if net.mode == VARIATIONAL:
        if sample is None:
            raise ValueError("variational objective needs a WeightSample")
        for key in "ABC":
            nu = tape.exp(params[f"{key}.rho_nu"])
            factor = tape.sqrt(
                tape.elem_mul(nu, tape.reciprocal(tape.add_const(nu, 2.0)))
            )
            sigma = tape.softplus(params[f"{key}.rho_sigma"])
            noise = tape.elem_mul(
                tape.elem_mul(sigma, tape.const(sample.eps[key])), factor
            )
            nodes[key] = tape.add(params[f"{key}.mu"], noise)
    else:
        for key in "ABC":
            nodes[key] = params[f"{key}.w"]
    nodes["W"] = params["W.w"]
    if net.temporal is not None:
        nodes["TA"] = params["T.a"]
        nodes["TC"] = params["T.c"]
    if net.state_map is not None:
        nodes["H"] = params["H.w"]

    losses = []
    for enc in batch:
        probs, _ = build_forward(tape, enc, nodes, net.hops)
        losses.append(tape.nll(probs, enc.answer_id))
    loss = tape.scale(tape.add_n(losses), 1.0 / len(losses))

    if net.mode == VARIATIONAL and kl_scale > 0.0:
        for key in "ABC":
            div = divergence_node(
                tape,
                params[f"{key}.mu"],
                params[f"{key}.rho_sigma"],
                params[f"{key}.rho_nu"],
                net.prior_nu,
            )
            loss = tape.add(loss, tape.scale(div, kl_scale))
    return tape, loss


def predict(net: MemN2N, enc: EncodedStory, n_samples=1, rng=None):
    """Answer a story; variational mode averages the probability vectors of
    ``n_samples`` posterior weight draws, point mode ignores the count.

    Returns (answer id, averaged probability vector, AttentionTrace with
    per-hop attention averaged over samples and renormalized).
    """
    if net.mode == BASELINE:
        probs, trace = forward(enc, point_weights(net), net.hops)
        return int(np.argmax(probs)), probs, trace
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if rng is None:
        raise ValueError("variational prediction needs an rng")
    acc_probs = None
    acc_att = None
    for _ in range(n_samples):
        weights = materialize_sample(net, sample_weights(net, rng))
        probs, trace = forward(enc, weights, net.hops)
        if acc_probs is None:
            acc_probs = probs
            acc_att = [a for a in trace.probs]
        else:
            acc_probs += probs
            for h, a in enumerate(trace.probs):
                acc_att[h] += a
    avg = acc_probs / n_samples
    att = []
    for a in acc_att:
        a = a / n_samples
        s = a.sum()
        if s <= 0.0:
            raise NumericError("attention mass vanished")
        att.append(a / s)
    trace = AttentionTrace(probs=att, argmax=[int(np.argmax(a)) for a in att])
    return int(np.argmax(avg)), avg, trace


def save_checkpoint(path, net: MemN2N, vocab: Vocabulary, extra=None):
    """Flat binary container: magic, JSON header, packed float64 tables."""
    params = net.parameters()
    header = {
        "mode": net.mode,
        "hops": net.hops,
        "prior_nu": net.prior_nu,
        "memory_size": net.memory_size,
        "temporal": net.temporal is not None,
        "state_map": net.state_map is not None,
        "vocab": vocab.tokens(),
        "extra": extra or {},
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Inverse of save_checkpoint; returns (net, vocab, extra header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        values = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            values[name] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    vocab = Vocabulary(header["vocab"])
    mode = header["mode"]
    if mode == VARIATIONAL:
        embeddings = {
            k: VariationalEmbedding(
                mu=values[f"{k}.mu"],
                rho_sigma=values[f"{k}.rho_sigma"],
                rho_nu=values[f"{k}.rho_nu"].reshape(()),
            )
            for k in "ABC"
        }
    else:
        embeddings = {k: PointEmbedding(weights=values[f"{k}.w"]) for k in "ABC"}
    temporal = None
    if header["temporal"]:
        temporal = {"TA": values["T.a"], "TC": values["T.c"]}
    state_map = values["H.w"] if header.get("state_map") else None
    net = MemN2N(
        mode=mode,
        embeddings=embeddings,
        output=OutputLayer(w=values["W.w"]),
        hops=header["hops"],
        prior_nu=header["prior_nu"],
        memory_size=header["memory_size"],
        temporal=temporal,
        state_map=state_map,
    )
    return net, vocab, header.get("extra", {})
