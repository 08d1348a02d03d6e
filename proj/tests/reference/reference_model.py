# SPDX-License-Identifier: Apache-2.0
"""Independent reference for the checkpoint container and forward pass.

Writes, for each model below, a checkpoint built with numpy, a fixed prompt,
and the logits computed here in plain Python. The arithmetic mirrors the
documented numeric policy (f32 storage, f64 accumulation in index order,
one rounding on store), so the C++ loader and forward pass must reproduce
the logits bit for bit.

usage: reference_model.py OUT_DIR
"""
import json
import math
import os
import struct
import sys

import numpy as np

MAGIC = b"TXCKPT01"
VERSION = 1

MODELS = {
    "tied": dict(layers=2, hidden=16, heads=4, kv_heads=2, head_dim=4, ffn_inter=24, vocab=20,
                 tied_head=True, rope_base=10000.0, rms_eps=1e-6),
    "untied": dict(layers=3, hidden=12, heads=2, kv_heads=1, head_dim=6, ffn_inter=20, vocab=17,
                   tied_head=False, rope_base=1000000.0, rms_eps=1e-5),
}
PROMPT_LEN = 10


def f32(x):
    return float(np.float32(x))


def tensor_list(a):
    h, q, kv, di, v = a["hidden"], a["heads"] * a["head_dim"], a["kv_heads"] * a["head_dim"], a["ffn_inter"], a["vocab"]
    out = [("embed_tokens", (v, h))]
    for i in range(a["layers"]):
        p = "layers.%d." % i
        out += [(p + "input_layernorm", (h,)), (p + "q_proj.weight", (q, h)), (p + "q_proj.bias", (q,)),
                (p + "k_proj.weight", (kv, h)), (p + "k_proj.bias", (kv,)), (p + "v_proj.weight", (kv, h)),
                (p + "v_proj.bias", (kv,)), (p + "o_proj.weight", (h, q)), (p + "post_attention_layernorm", (h,)),
                (p + "gate_proj.weight", (di, h)), (p + "up_proj.weight", (di, h)), (p + "down_proj.weight", (h, di))]
    out.append(("norm", (h,)))
    if not a["tied_head"]:
        out.append(("lm_head", (v, h)))
    return out


def make_weights(a, seed):
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in tensor_list(a):
        if name.endswith("layernorm") or name == "norm":
            w[name] = rng.uniform(0.5, 1.5, size=shape).astype(np.float32)
        elif name.endswith(".bias"):
            w[name] = (0.1 * rng.standard_normal(shape)).astype(np.float32)
        else:
            scale = 1.0 if name == "embed_tokens" else 1.0 / math.sqrt(shape[1])
            w[name] = (scale * rng.standard_normal(shape)).astype(np.float32)
    return w


def write_checkpoint(path, a, w):
    entries, blobs, offset = [], [], 0
    for name, shape in tensor_list(a):
        data = np.ascontiguousarray(w[name], dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "f32", "shape": list(shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {"arch": a, "tensors": entries}
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)


# --- forward pass on lists of Python floats ---------------------------------

def linear(x, w, b=None):
    out = []
    for row in x:
        r = []
        for o in range(w.shape[0]):
            acc = float(b[o]) if b is not None else 0.0
            wr = w[o]
            for k in range(len(row)):
                acc += row[k] * float(wr[k])
            r.append(f32(acc))
        out.append(r)
    return out


def rmsnorm(x, weight, eps):
    out = []
    for row in x:
        ss = 0.0
        for v in row:
            ss += v * v
        inv = 1.0 / math.sqrt(ss / len(row) + eps)
        out.append([f32(row[k] * inv * float(weight[k])) for k in range(len(row))])
    return out


def rope(x, heads, dh, base):
    half = dh // 2
    for pos, row in enumerate(x):
        for hd in range(heads):
            o = hd * dh
            for j in range(half):
                freq = math.pow(base, -2.0 * j / dh)
                angle = pos * freq
                c, s = math.cos(angle), math.sin(angle)
                a, b = row[o + j], row[o + j + half]
                row[o + j] = f32(a * c - b * s)
                row[o + j + half] = f32(a * s + b * c)


def attention(q, k, v, a):
    n, dh = len(q), a["head_dim"]
    group = a["heads"] // a["kv_heads"]
    scale = 1.0 / math.sqrt(dh)
    out = [[0.0] * (a["heads"] * dh) for _ in range(n)]
    for hq in range(a["heads"]):
        hk = hq // group
        for i in range(n):
            scores = []
            for j in range(i + 1):
                dot = 0.0
                for d in range(dh):
                    dot += q[i][hq * dh + d] * k[j][hk * dh + d]
                scores.append(dot * scale)
            mx = max(scores)
            scores = [math.exp(s - mx) for s in scores]
            denom = 0.0
            for s in scores:
                denom += s
            for d in range(dh):
                acc = 0.0
                for j in range(i + 1):
                    acc += scores[j] * v[j][hk * dh + d]
                out[i][hq * dh + d] = f32(acc / denom)
    return out


def add_f32(x, y):
    return [[float(np.float32(a) + np.float32(b)) for a, b in zip(rx, ry)] for rx, ry in zip(x, y)]


def forward(a, w, tokens):
    x = [[float(v) for v in w["embed_tokens"][t]] for t in tokens]
    for i in range(a["layers"]):
        p = "layers.%d." % i
        xn = rmsnorm(x, w[p + "input_layernorm"], a["rms_eps"])
        q = linear(xn, w[p + "q_proj.weight"], w[p + "q_proj.bias"])
        k = linear(xn, w[p + "k_proj.weight"], w[p + "k_proj.bias"])
        v = linear(xn, w[p + "v_proj.weight"], w[p + "v_proj.bias"])
        rope(q, a["heads"], a["head_dim"], a["rope_base"])
        rope(k, a["kv_heads"], a["head_dim"], a["rope_base"])
        x = add_f32(x, linear(attention(q, k, v, a), w[p + "o_proj.weight"]))
        xf = rmsnorm(x, w[p + "post_attention_layernorm"], a["rms_eps"])
        gate = linear(xf, w[p + "gate_proj.weight"])
        up = linear(xf, w[p + "up_proj.weight"])
        act = [[f32(g / (1.0 + math.exp(-g)) * u) for g, u in zip(rg, ru)] for rg, ru in zip(gate, up)]
        x = add_f32(x, linear(act, w[p + "down_proj.weight"]))
    head = w["embed_tokens"] if a["tied_head"] else w["lm_head"]
    return linear(rmsnorm(x, w["norm"], a["rms_eps"]), head)


def mean_nll(logits, tokens):
    total = 0.0
    for t in range(len(tokens) - 1):
        row = logits[t]
        mx = max(row)
        s = 0.0
        for v in row:
            s += math.exp(v - mx)
        total += mx + math.log(s) - row[tokens[t + 1]]
    return total / (len(tokens) - 1)


def main():
    out = sys.argv[1]
    os.makedirs(out, exist_ok=True)
    index = []
    for seed, (name, a) in enumerate(sorted(MODELS.items()), start=11):
        w = make_weights(a, seed)
        rng = np.random.default_rng(seed + 100)
        tokens = [int(t) for t in rng.integers(0, a["vocab"], size=PROMPT_LEN)]
        logits = forward(a, w, tokens)
        write_checkpoint(os.path.join(out, name + ".ckpt"), a, w)
        with open(os.path.join(out, name + ".logits.bin"), "wb") as f:
            f.write(np.asarray(logits, dtype="<f4").tobytes())
        index.append({"name": name, "checkpoint": name + ".ckpt", "logits": name + ".logits.bin",
                      "tokens": tokens, "vocab": a["vocab"], "mean_nll": mean_nll(logits, tokens)})
    with open(os.path.join(out, "index.json"), "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
