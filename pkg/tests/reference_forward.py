"""Independent naive-loop reference for every forward variant.

Everything here is deliberately written with plain Python loops and the
math module — no numpy vector math and none of the library's tensor
primitives — so it can serve as an oracle for sap_forward.
"""

import math


def _matvec(w, x):
    return [sum(w[c][d] * x[d] for d in range(len(x))) for c in range(len(w))]


def _relu(xs):
    return [x if x > 0.0 else 0.0 for x in xs]


def _sigmoid(xs):
    out = []
    for x in xs:
        if x >= 0.0:
            out.append(1.0 / (1.0 + math.exp(-x)))
        else:
            e = math.exp(x)
            out.append(e / (1.0 + e))
    return out


def _softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    z = sum(es)
    return [e / z for e in es]


def _branch(own, other, rows, bp, variant, logit_scale):
    """One branch of the bank pipeline; bp is a dict of list-of-list weights."""
    n, c = len(rows), len(own)
    g_term = _matvec(bp["fusion_global"], own)
    fused = []
    for i in range(n):
        o_term = _matvec(bp["fusion_object"], rows[i])
        fused.append(_relu([g_term[k] + o_term[k] + bp["fusion_bias"][k]
                            for k in range(c)]))

    if variant in ("full", "no_arm"):
        src = other
    elif variant == "no_cross_stream":
        src = own
    else:
        src = None
    if src is not None:
        z = _matvec(bp["gate_weight"], src)
        gate = _sigmoid([z[k] + bp["gate_bias"][k] for k in range(c)])
        gated = [[fused[i][k] * gate[k] for k in range(c)] for i in range(n)]
    else:
        gated = fused

    if variant in ("no_arm", "no_csg_no_arm"):
        return [sum(gated[i][k] for i in range(n)) / n for k in range(c)]
    query = own if variant == "no_cross_stream" else other
    logits = [sum(gated[i][k] * query[k] for k in range(c)) for i in range(n)]
    if logit_scale is not None:
        logits = [logit_scale * x for x in logits]
    weights = _softmax(logits)
    return [sum(weights[i] * gated[i][k] for i in range(n)) for k in range(c)]


def _head(feat, head, bias):
    k = len(bias)
    return [sum(feat[c] * head[c][j] for c in range(len(feat))) + bias[j]
            for j in range(k)]


def _branch_dict(bp):
    return {
        "fusion_global": bp.fusion_global.data.tolist(),
        "fusion_object": bp.fusion_object.data.tolist(),
        "fusion_bias": bp.fusion_bias.data.tolist(),
        "gate_weight": bp.gate_weight.data.tolist(),
        "gate_bias": bp.gate_bias.data.tolist(),
    }


def reference_forward(f_v, f_n, rows, params, variant, logit_scale=None):
    """(verb_logits, noun_logits) lists matching sap_forward's contract.

    f_v, f_n are length-C lists, rows a list of length-C lists (possibly
    empty, which falls back to the baseline path).
    """
    if len(rows) == 0 and variant not in ("baseline", "noun_plus_verb"):
        variant = "baseline"
    noun_bp = _branch_dict(params.noun)
    verb_bp = _branch_dict(params.verb)

    if variant == "baseline":
        verb_feat, noun_feat = f_v, f_n
    elif variant == "noun_plus_verb":
        c = len(f_v)
        zn = _matvec(noun_bp["gate_weight"], f_v)
        gn = _sigmoid([zn[k] + noun_bp["gate_bias"][k] for k in range(c)])
        noun_feat = [f_n[k] * gn[k] for k in range(c)]
        zv = _matvec(verb_bp["gate_weight"], f_n)
        gv = _sigmoid([zv[k] + verb_bp["gate_bias"][k] for k in range(c)])
        verb_feat = [f_v[k] * gv[k] for k in range(c)]
    elif variant == "avg_pool":
        n = len(rows)
        pooled = [sum(r[k] for r in rows) / n for k in range(len(rows[0]))]
        verb_feat = noun_feat = pooled
    elif variant == "max_pool":
        pooled = [max(r[k] for r in rows) for k in range(len(rows[0]))]
        verb_feat = noun_feat = pooled
    else:
        noun_feat = _branch(f_n, f_v, rows, noun_bp, variant, logit_scale)
        verb_feat = _branch(f_v, f_n, rows, verb_bp, variant, logit_scale)

    verb_logits = _head(verb_feat, params.verb_head.data.tolist(),
                        params.verb_head_bias.data.tolist())
    noun_logits = _head(noun_feat, params.noun_head.data.tolist(),
                        params.noun_head_bias.data.tolist())
    return verb_logits, noun_logits
