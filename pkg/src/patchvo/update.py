"""The recurrent graph operator, executed once per edge per iteration.

Forward structure (blocks skipped per the config toggles):

1. input encoder: correlation feature -> FC -> hidden width, added to the
   patch's context vector;
2. two repeats of [temporal conv -> scatter-softmax aggregation ->
   recurrent unit]; the first aggregation groups edges by shared patch, the
   second by shared target frame; the recurrent unit is a GRU or, with
   ``use_gru`` off, a LayerNorm + two-FC replacement;
3. heads: one shared FC + ReLU, then linear flow delta (2) and a sigmoid
   confidence (1).

Edges are processed in a canonical order (sorted by patch then target
frame) regardless of how the batch is laid out, so results do not depend on
the caller's edge schedule. All reductions follow that order.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NumericFault

NORM_EPS = 1e-5


@dataclass
class UpdateBatch:
    """Per-edge rows, aligned: one entry per live edge."""

    hidden: np.ndarray        # (E, D)
    correlation: np.ndarray   # (E, L)
    context: np.ndarray       # (E, D)
    patch_index: np.ndarray   # (E,) graph-wide patch ids
    target_frame: np.ndarray  # (E,) target frame ids (the temporal key)

    def __len__(self):
        return self.hidden.shape[0]


@dataclass
class UpdateOutput:
    flow_delta: np.ndarray    # (E, 2) in quarter-resolution pixels
    confidence: np.ndarray    # (E,) in [0, 1]
    hidden: np.ndarray        # (E, D) new recurrent state


def update_tensor_shapes(config):
    """Tensor name -> shape for every parameter the active config requires."""
    d, l = config.cf_channels, config.corr_length
    shapes = {
        "update.encoder.weight": (l, d),
        "update.encoder.bias": (d,),
    }
    for k in (1, 2):
        if config.use_temporal:
            shapes[f"update.tc{k}.weight"] = (3 * d, d)
            shapes[f"update.tc{k}.bias"] = (d,)
        if config.use_softmax_agg:
            shapes[f"update.sa{k}.logit.weight"] = (d,)
            shapes[f"update.sa{k}.logit.bias"] = (1,)
            shapes[f"update.sa{k}.proj.weight"] = (d, d)
            shapes[f"update.sa{k}.proj.bias"] = (d,)
        if config.use_gru:
            for gate in ("reset", "gate", "cand"):
                shapes[f"update.gru{k}.{gate}.weight"] = (2 * d, d)
                shapes[f"update.gru{k}.{gate}.bias"] = (d,)
        else:
            shapes[f"update.light{k}.norm.gamma"] = (2 * d,)
            shapes[f"update.light{k}.norm.beta"] = (2 * d,)
            shapes[f"update.light{k}.fc1.weight"] = (2 * d, d)
            shapes[f"update.light{k}.fc1.bias"] = (d,)
            shapes[f"update.light{k}.fc2.weight"] = (d, d)
            shapes[f"update.light{k}.fc2.bias"] = (d,)
    shapes.update({
        "update.head.fc.weight": (d, d),
        "update.head.fc.bias": (d,),
        "update.flow.weight": (d, 2),
        "update.flow.bias": (2,),
        "update.conf.weight": (d, 1),
        "update.conf.bias": (1,),
    })
    return shapes


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def temporal_conv(states, patch_index, target_frame, weight, bias, counter=None):
    """FC over [previous, current, next] edge states within each patch chain.

    Chains are edges sharing a patch, ordered by target frame; missing
    neighbours at chain boundaries contribute zero vectors.
    """
    order = np.lexsort((target_frame, patch_index))
    s = states[order]
    pid = patch_index[order]
    prev = np.zeros_like(s)
    nxt = np.zeros_like(s)
    if len(s) > 1:
        same_prev = pid[1:] == pid[:-1]
        prev[1:][same_prev] = s[:-1][same_prev]
        nxt[:-1][same_prev] = s[1:][same_prev]
    stacked = np.concatenate([prev, s, nxt], axis=1)
    if counter is not None:
        counter.add(stacked.shape[0] * stacked.shape[1] * weight.shape[1])
    out_sorted = stacked @ weight + bias
    out = np.empty_like(out_sorted)
    out[order] = out_sorted
    return out


def scatter_softmax_agg(states, group_index, logit_weight, logit_bias,
                        proj_weight, proj_bias, counter=None,
                        esigma_counter=None):
    """Softmax-weighted aggregation across each group, fused residually.

    Per edge: a learned scalar logit; per group: softmax weights over member
    logits (summing to one) and the weighted state aggregate; the aggregate
    is projected by an FC and added back to every member state.

    Returns ``(fused_states, softmax_weights)``.
    """
    e, d = states.shape
    if e == 0:
        return states.copy(), np.zeros(0, dtype=states.dtype)
    if esigma_counter is not None:
        esigma_counter.add(e * d)
    if counter is not None:
        counter.add(e * d)                      # logits
        counter.add(e * d)                      # weighted aggregate
        counter.add(e * d * proj_weight.shape[1])  # per-edge projection
    logits = states @ logit_weight + logit_bias[0]

    order = np.argsort(group_index, kind="stable")
    g = group_index[order]
    lo = logits[order]
    starts = np.flatnonzero(np.concatenate([[True], g[1:] != g[:-1]]))
    counts = np.diff(np.append(starts, len(g)))
    gmax = np.maximum.reduceat(lo, starts)
    ex = np.exp(lo - np.repeat(gmax, counts))
    sums = np.add.reduceat(ex, starts)
    w_sorted = ex / np.repeat(sums, counts)

    agg = np.add.reduceat(w_sorted[:, None] * states[order], starts, axis=0)
    per_edge_agg = agg[np.repeat(np.arange(len(starts)), counts)]
    fused_sorted = states[order] + per_edge_agg @ proj_weight + proj_bias

    fused = np.empty_like(fused_sorted)
    fused[order] = fused_sorted
    weights = np.empty_like(w_sorted)
    weights[order] = w_sorted
    return fused, weights


def gru_step(hidden, x, params, counter=None):
    """Gated recurrent step: h' = (1 - z) * h + z * tanh(FC([r * h, x]))."""
    hx = np.concatenate([hidden, x], axis=1)
    if counter is not None:
        counter.add(3 * hx.shape[0] * hx.shape[1] * hidden.shape[1])
    r = _sigmoid(hx @ params["reset.weight"] + params["reset.bias"])
    z = _sigmoid(hx @ params["gate.weight"] + params["gate.bias"])
    masked = np.concatenate([r * hidden, x], axis=1)
    cand = np.tanh(masked @ params["cand.weight"] + params["cand.bias"])
    return (1.0 - z) * hidden + z * cand


def light_recurrent_step(hidden, x, params, counter=None):
    """Lightweight recurrent step: FC2(ReLU(FC1(LayerNorm([h, x]))))."""
    hx = np.concatenate([hidden, x], axis=1)
    mean = hx.mean(axis=1, keepdims=True)
    var = hx.var(axis=1, keepdims=True)
    normed = (hx - mean) / np.sqrt(var + NORM_EPS)
    normed = normed * params["norm.gamma"] + params["norm.beta"]
    if counter is not None:
        e, d2 = hx.shape
        d = params["fc1.weight"].shape[1]
        counter.add(e * d2 * d + e * d * params["fc2.weight"].shape[1])
    h1 = np.maximum(normed @ params["fc1.weight"] + params["fc1.bias"], 0.0)
    return h1 @ params["fc2.weight"] + params["fc2.bias"]


def _params(weights, prefix):
    plen = len(prefix) + 1
    return {name[plen:]: weights[name] for name in weights.names()
            if name.startswith(prefix + ".")}


def _check_finite(arr, block):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in update block {block!r}")


def update_forward(batch, weights, config, counter=None, esigma_counter=None):
    """One forward pass over every edge in the batch."""
    e = len(batch)
    d = config.cf_channels
    if e == 0:
        return UpdateOutput(np.zeros((0, 2), dtype=np.float32),
                            np.zeros(0, dtype=np.float32),
                            np.zeros((0, d), dtype=np.float32))
    # canonical edge order; all internal reductions follow it
    order = np.lexsort((batch.target_frame, batch.patch_index))
    pid = batch.patch_index[order]
    tfr = batch.target_frame[order]
    hidden = batch.hidden[order]
    if counter is not None:
        counter.add(e * batch.correlation.shape[1] * d)
    s = batch.correlation[order] @ weights["update.encoder.weight"] \
        + weights["update.encoder.bias"] + batch.context[order]
    _check_finite(s, "encoder")

    groupings = (pid, tfr)  # first aggregation by patch, second by frame
    for k in (1, 2):
        if config.use_temporal:
            s = temporal_conv(s, pid, tfr, weights[f"update.tc{k}.weight"],
                              weights[f"update.tc{k}.bias"], counter)
            _check_finite(s, f"tc{k}")
        if config.use_softmax_agg:
            s, _ = scatter_softmax_agg(
                s, groupings[k - 1],
                weights[f"update.sa{k}.logit.weight"],
                weights[f"update.sa{k}.logit.bias"],
                weights[f"update.sa{k}.proj.weight"],
                weights[f"update.sa{k}.proj.bias"],
                counter, esigma_counter)
            _check_finite(s, f"sa{k}")
        if config.use_gru:
            hidden = gru_step(hidden, s, _params(weights, f"update.gru{k}"), counter)
        else:
            hidden = light_recurrent_step(hidden, s,
                                          _params(weights, f"update.light{k}"), counter)
        _check_finite(hidden, f"recurrent{k}")
        s = hidden

    if counter is not None:
        counter.add(e * (d * d + d * 2 + d * 1))
    head = np.maximum(hidden @ weights["update.head.fc.weight"]
                      + weights["update.head.fc.bias"], 0.0)
    flow = head @ weights["update.flow.weight"] + weights["update.flow.bias"]
    conf = _sigmoid(head @ weights["update.conf.weight"]
                    + weights["update.conf.bias"])[:, 0]
    _check_finite(flow, "flow head")
    _check_finite(conf, "confidence head")

    inv = np.empty_like(order)
    inv[order] = np.arange(e)
    return UpdateOutput(flow_delta=flow[inv], confidence=conf[inv],
                        hidden=hidden[inv])


def update_macs_per_edge(config):
    """Analytic multiply-accumulate count of one edge's forward pass.

    Counts FC/matmul multiplies only (biases, activations, and
    normalizations excluded), mirroring the runtime instrumentation.
    """
    d, l = config.cf_channels, config.corr_length
    total = l * d
    for _ in (1, 2):
        if config.use_temporal:
            total += 3 * d * d
        if config.use_softmax_agg:
            total += 2 * d + d * d
        if config.use_gru:
            total += 3 * (2 * d) * d
        else:
            total += (2 * d) * d + d * d
    total += d * d + 3 * d
    return total
