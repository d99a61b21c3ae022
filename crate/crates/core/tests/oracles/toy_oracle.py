# SPDX-License-Identifier: MIT OR Apache-2.0
"""Straight-line float64 reimplementation of the toy checkpoint.

Reads fixtures/toy and oracles/inputs.json, writes oracles/golden.json.
Tokenization uses the reference GPT-2 tokenizer from `transformers` on
the toy vocab/merges files. Everything else is plain numpy.

    python3 toy_oracle.py
"""

import json
import math
import struct
from pathlib import Path

import numpy as np
from transformers import GPT2Tokenizer

HERE = Path(__file__).resolve().parent
TOY = HERE.parent / "fixtures" / "toy"
DATA = HERE.parents[3] / "data"


def load_safetensors(path):
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + n])
    body = raw[8 + n :]
    out = {}
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        assert meta["dtype"] == "F32"
        a, b = meta["data_offsets"]
        out[name] = np.frombuffer(body[a:b], dtype="<f4").reshape(meta["shape"]).astype(np.float64)
    return out


cfg = json.loads((TOY / "config.json").read_text())
W = load_safetensors(TOY / "model.safetensors")
inp = json.loads((HERE / "inputs.json").read_text())
tok = GPT2Tokenizer(str(TOY / "vocab.json"), str(TOY / "merges.txt"))

L = cfg["n_layers"]
H = cfg["n_heads"]
D = cfg["d_model"]
DH = D // H
EPS = cfg["norm_eps"]


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + EPS) * g + b


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def project(h):
    z = layer_norm(h, W["final_norm.weight"], W["final_norm.bias"])
    return W["embed.tokens"] @ z


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v):
    m = v.max()
    return v - (m + math.log(np.exp(v - m).sum()))


def forward(ids, noise=None, restore=None, clean=None, knock=None):
    """Return per-layer lists of R0, A, R1, M, R2 ([T, D] each) and final logits."""
    T = len(ids)
    x = W["embed.tokens"][ids].copy()
    if noise:
        for pos, vec in noise:
            x[pos] += np.asarray(vec, dtype=np.float64)
    x = x + W["embed.positions"][:T]
    rec = {k: [] for k in ("R0", "A", "R1", "M", "R2")}
    for l in range(L):
        p = f"layers.{l}"
        rec["R0"].append(x.copy())
        h = layer_norm(x, W[f"{p}.attn_norm.weight"], W[f"{p}.attn_norm.bias"])
        q = h @ W[f"{p}.attn.q.weight"] + W[f"{p}.attn.q.bias"]
        k = h @ W[f"{p}.attn.k.weight"] + W[f"{p}.attn.k.bias"]
        v = h @ W[f"{p}.attn.v.weight"] + W[f"{p}.attn.v.bias"]
        heads = np.zeros((T, D))
        for hd in range(H):
            s = slice(hd * DH, (hd + 1) * DH)
            for i in range(T):
                scores = np.array([q[i, s] @ k[j, s] / math.sqrt(DH) for j in range(i + 1)])
                if knock and l in knock["layers"] and i == T - 1:
                    for j in knock["keys"]:
                        scores[j] = -np.inf
                w = softmax(scores)
                heads[i, s] = sum(w[j] * v[j, s] for j in range(i + 1))
        a = heads @ W[f"{p}.attn.o.weight"] + W[f"{p}.attn.o.bias"]
        x = x + a
        rec["A"].append(a)
        rec["R1"].append(x.copy())
        h = layer_norm(x, W[f"{p}.mlp_norm.weight"], W[f"{p}.mlp_norm.bias"])
        m = gelu(h @ W[f"{p}.mlp.up.weight"] + W[f"{p}.mlp.up.bias"]) @ W[f"{p}.mlp.down.weight"] + W[f"{p}.mlp.down.bias"]
        x = x + m
        rec["M"].append(m)
        if restore is not None and restore[1] == l:
            x[restore[0]] = clean["R2"][l][restore[0]]
        rec["R2"].append(x.copy())
    return rec, project(x[-1])


def cand_tokens(text):
    return tok.encode(" " + text)


def cand_logprob(logits, ids):
    lp = log_softmax(logits)
    return max(lp[i] for i in ids)


golden = {}
golden["tokenize"] = [{"text": t, "ids": tok.encode(t)} for t in inp["tokenize"]]

ids = inp["token_ids"]
bos = tok.convert_tokens_to_ids("<|endoftext|>")
prompt_text = tok.decode(ids[1:]) if ids[0] == bos else tok.decode(ids)
golden["prompt_ids"] = ([bos] if ids[0] == bos else []) + tok.encode(prompt_text)

classes = json.loads((DATA / "class_tokens.json").read_text())
sets = {name: sorted({cand_tokens(w)[0] for w in words}) for name, words in classes.items()}
sets[inp["c_text"]] = sorted(set(cand_tokens(inp["c_text"])))
sets[inp["q_text"]] = sorted(set(cand_tokens(inp["q_text"])))
golden["token_sets"] = sets

clean, clean_logits = forward(ids)
golden["final_logits"] = clean_logits.tolist()

traj = {}
for name, members in sets.items():
    traj[name] = {
        site: [float(max(project(clean[site][l][-1])[members])) for l in range(L)]
        for site in ("R1", "R2", "A", "M")
    }
golden["trajectory"] = traj

lens = []
for l in range(L):
    for site in ("R1", "R2"):
        probs = softmax(project(clean[site][l][-1]))
        order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:2]
        for rank, i in enumerate(order):
            lens.append({"layer": l, "site": site, "rank": rank, "token_id": i, "prob": float(probs[i])})
golden["lens"] = lens

c_ids = cand_tokens(inp["c_text"])
q_ids = cand_tokens(inp["q_text"])
noise = inp["noise"]
_, corrupted_logits = forward(ids, noise=noise)
corr_c = cand_logprob(corrupted_logits, c_ids)
corr_q = cand_logprob(corrupted_logits, q_ids)
re_c, re_q = [], []
for i in range(len(ids)):
    row_c, row_q = [], []
    for l in range(L):
        _, logits = forward(ids, noise=noise, restore=(i, l), clean=clean)
        row_c.append(cand_logprob(logits, c_ids) - corr_c)
        row_q.append(cand_logprob(logits, q_ids) - corr_q)
    re_c.append(row_c)
    re_q.append(row_q)
golden["patching"] = {
    "re_c": re_c,
    "re_q": re_q,
    "corrupted_c": corr_c,
    "corrupted_q": corr_q,
    "clean_c": cand_logprob(clean_logits, c_ids),
    "clean_q": cand_logprob(clean_logits, q_ids),
}

_, knocked = forward(ids, knock={"layers": inp["knockout_layers"], "keys": inp["masked_keys"]})
golden["knockout"] = {
    "c_before": 100.0 * math.exp(cand_logprob(clean_logits, c_ids)),
    "q_before": 100.0 * math.exp(cand_logprob(clean_logits, q_ids)),
    "c_after": 100.0 * math.exp(cand_logprob(knocked, c_ids)),
    "q_after": 100.0 * math.exp(cand_logprob(knocked, q_ids)),
}

(HERE / "golden.json").write_text(json.dumps(golden, indent=1) + "\n")
print("wrote", HERE / "golden.json")
