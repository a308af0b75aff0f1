"""Random small workload graphs for property tests."""

from __future__ import annotations

import random

from podsim.workload import MODEL_INPUT, ModelGraph, build_model


def random_model(rng: random.Random, max_layers: int = 6) -> ModelGraph:
    """A random DAG of dense layers with occasional attention blocks and convs.

    Dense layers concatenate the features of up to two earlier layers.
    Attention blocks add q/k/v projections of one layer followed by the
    score (x @ k^T) and context (score @ v) matmuls.
    """
    seq = rng.randint(1, 40)
    layers = []
    outs = {}  # dense-like layer id -> out features

    if rng.random() < 0.3:
        h, cin, cout = rng.randint(3, 9), rng.randint(1, 6), rng.randint(1, 12)
        layers.append({"id": "conv", "kind": "conv2d", "in_h": h, "in_w": h, "in_c": cin, "kernel": rng.choice([1, 3]),
                       "out_c": cout, "stride": rng.choice([1, 2]), "padding": "same"})
        nxt = {"id": "conv2", "kind": "conv2d", "in_h": -(-h // layers[0]["stride"]), "in_w": -(-h // layers[0]["stride"]),
               "in_c": cout, "kernel": 3, "out_c": rng.randint(1, 12), "padding": "same", "predecessors": ["conv"]}
        layers.append(nxt)
        return build_model({"name": "rand_cnn", "layers": layers}, batch=rng.randint(1, 2))

    n = rng.randint(1, max_layers)
    for idx in range(n):
        lid = f"l{idx}"
        if outs and rng.random() < 0.25:
            src = rng.choice(sorted(outs))
            d = rng.randint(1, 40)
            for name in ("q", "k", "v"):
                layers.append({"id": f"{lid}_{name}", "kind": "dense", "in_features": outs[src], "out_features": d,
                               "seq": seq, "predecessors": [src]})
            layers.append({"id": f"{lid}_score", "kind": "matmul", "in_features": d, "out_features": seq, "seq": seq,
                           "predecessors": [f"{lid}_q"], "w_from": {"id": f"{lid}_k", "transpose": True}})
            layers.append({"id": lid, "kind": "matmul", "in_features": seq, "out_features": d, "seq": seq,
                           "predecessors": [f"{lid}_score"], "w_from": {"id": f"{lid}_v"}})
            outs[lid] = d
            continue
        preds = rng.sample(sorted(outs), k=min(len(outs), rng.randint(0, 2)))
        fin = sum(outs[p] for p in preds) if preds else rng.randint(1, 70)
        out = rng.randint(1, 70)
        layers.append({"id": lid, "kind": "dense", "in_features": fin, "out_features": out, "seq": seq, "predecessors": preds or [MODEL_INPUT]})
        outs[lid] = out
    return build_model({"name": "rand", "family": "transformer", "layers": layers}, batch=rng.randint(1, 2))
