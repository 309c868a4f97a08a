"""Sequential transition model: GRU encoder, attention and GRU decoder.

The encoder consumes the embedded support items and exposes every step's
output plus the final hidden state.  The decoder runs autoregressively: each
step attends over the encoder outputs with weights produced from its own
previous output and hidden state, and emits the next prediction vector.

Parameters introduced here form the per-user adapted partition; the item
embedding table is created here too but belongs to the shared partition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .config import RunConfig
from .errors import ContractError, DimensionError

# Parameter name prefixes making up the per-user adapted partition.
ADAPTED_PREFIXES = ("enc_gru.", "dec_gru.", "fc1.", "fc2.", "fc3.")

_GATES = ("z", "r", "n")


@dataclass
class EncoderOutput:
    outputs: Variable  # (steps, D) stacked per-step encoder outputs
    steps: int
    h_final: Variable  # (D,)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_transition_params(item_count: int, cfg: RunConfig, rng: np.random.Generator) -> dict:
    """Fresh transition parameters, all drawn uniform(-1/sqrt(D), 1/sqrt(D))."""
    d, k = cfg.embed_dim, cfg.k_shots
    bound = 1.0 / np.sqrt(d)
    params: dict[str, Variable] = {}
    params["item_embeddings"] = ad.parameter(_uniform(rng, (item_count, d), bound))
    for block in ("enc_gru", "dec_gru"):
        for gate in _GATES:
            params[f"{block}.w_{gate}"] = ad.parameter(_uniform(rng, (d, d), bound))
            params[f"{block}.u_{gate}"] = ad.parameter(_uniform(rng, (d, d), bound))
            params[f"{block}.b_{gate}"] = ad.parameter(np.zeros(d))
    params["fc1.weight"] = ad.parameter(_uniform(rng, (k, 2 * d), bound))
    params["fc1.bias"] = ad.parameter(np.zeros(k))
    params["fc2.weight"] = ad.parameter(_uniform(rng, (d, 2 * d), bound))
    params["fc2.bias"] = ad.parameter(np.zeros(d))
    params["fc3.weight"] = ad.parameter(_uniform(rng, (d, d), bound))
    params["fc3.bias"] = ad.parameter(np.zeros(d))
    return params


def _affine(params: dict, name: str, x: Variable) -> Variable:
    return ad.add(ad.matvec(params[f"{name}.weight"], x), params[f"{name}.bias"])


def gru_cell(x: Variable, h: Variable, params: dict, block: str) -> Variable:
    """One gated recurrent step; the update gate interpolates old and candidate.

    With all-zero weights and biases both gates sit at 1/2 and the candidate
    vanishes, so the new hidden state is exactly half the old one.
    """
    if x.value.shape != h.value.shape:
        raise DimensionError(
            f"gru_cell: input {x.value.shape} and hidden {h.value.shape} differ"
        )

    def gate(name, activation):
        pre = ad.add(
            ad.add(ad.matvec(params[f"{block}.w_{name}"], x),
                   ad.matvec(params[f"{block}.u_{name}"], h)),
            params[f"{block}.b_{name}"],
        )
        return ad.apply_activation(pre, activation)

    z = gate("z", "sigmoid")
    r = gate("r", "sigmoid")
    pre_n = ad.add(
        ad.add(ad.matvec(params[f"{block}.w_n"], x),
               ad.matvec(params[f"{block}.u_n"], ad.mul(r, h))),
        params[f"{block}.b_n"],
    )
    n = ad.apply_activation(pre_n, "tanh")
    one_minus_z = ad.shift(ad.scale(z, -1.0), 1.0)
    return ad.add(ad.mul(z, h), ad.mul(one_minus_z, n))


def encode_sequence(items, params: dict, cfg: RunConfig) -> EncoderOutput:
    """Run the encoder over embedded items starting from a zero hidden state."""
    if len(items) == 0:
        raise ContractError("encode_sequence: empty item sequence")
    d = cfg.embed_dim
    h = ad.constant(np.zeros(d))
    outputs = []
    for item in items:
        x = ad.lookup_embedding(params["item_embeddings"], int(item))
        h = gru_cell(x, h, params, "enc_gru")
        outputs.append(h)
    return EncoderOutput(outputs=ad.stack_rows(outputs), steps=len(outputs), h_final=h)


def attend(o_prev: Variable, h_prev: Variable, enc: EncoderOutput, params: dict,
           cfg: RunConfig):
    """Attention weights over encoder outputs from the decoder's last state.

    The weight head is sized for K rows; positions beyond the actual number
    of encoder steps are excluded before the softmax, which is the masked
    softmax with those logits at minus infinity.
    """
    if enc.steps > cfg.k_shots:
        raise DimensionError(
            f"attend: {enc.steps} encoder rows exceed weight head width {cfg.k_shots}"
        )
    logits = _affine(params, "fc1", ad.concat(o_prev, h_prev))
    if enc.steps < cfg.k_shots:
        logits = ad.slice_head(logits, enc.steps)
    weights = ad.softmax(logits)
    context = ad.vecmat(weights, enc.outputs)
    return context, weights


def decode_step(o_prev: Variable, h_prev: Variable, context: Variable, params: dict,
                cfg: RunConfig):
    """One decoder step: fuse previous output with attention, advance the GRU."""
    x = ad.apply_activation(_affine(params, "fc2", ad.concat(o_prev, context)), "relu")
    h_gru = gru_cell(x, h_prev, params, "dec_gru")
    pre = _affine(params, "fc3", h_gru)
    o = ad.softmax(pre) if cfg.decoder_output_softmax else pre
    if cfg.decoder_hidden_from_input:
        h_next = h_gru
    else:
        # Degraded variant: the hidden update sees no decoder input.
        h_next = gru_cell(ad.constant(np.zeros(cfg.embed_dim)), h_prev, params, "dec_gru")
    return o, h_next


def predict_vectors(prefix, params: dict, cfg: RunConfig) -> list[Variable]:
    """Prediction vectors after each decode step over an encoded prefix.

    The prefix is encoded once; the decoder then runs one step per prefix
    item, consuming its own previous output, starting from a zero output and
    the encoder's final hidden state.  The last vector is the next-item
    prediction for the step after the prefix.
    """
    enc = encode_sequence(prefix, params, cfg)
    o = ad.constant(np.zeros(cfg.embed_dim))
    h = enc.h_final
    out = []
    for _ in range(enc.steps):
        context, _ = attend(o, h, enc, params, cfg)
        o, h = decode_step(o, h, context, params, cfg)
        out.append(o)
    return out
