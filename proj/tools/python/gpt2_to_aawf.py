"""Convert a GPT-2 checkpoint (Hugging Face layout) to an AAWF weight file.

    python gpt2_to_aawf.py path/to/gpt2-dir out.aawf [--golden logits.json]

The directory must hold config.json and model.safetensors or pytorch_model.bin.
--golden also runs the reference implementation (transformers) on the probe
prompts and writes their logits at every position for the parity check.
"""

import argparse
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import aawf  # noqa: E402


def load_state_dict(directory):
    st = os.path.join(directory, "model.safetensors")
    if os.path.exists(st):
        from safetensors.numpy import load_file

        return load_file(st)
    import torch

    sd = torch.load(os.path.join(directory, "pytorch_model.bin"), map_location="cpu")
    return {k: v.float().numpy() for k, v in sd.items()}


def convert(directory, out):
    with open(os.path.join(directory, "config.json")) as f:
        cfg = json.load(f)
    sd = {k.removeprefix("transformer."): v for k, v in load_state_dict(directory).items()}
    n_layers = cfg["n_layer"]
    config = {
        "n_layers": n_layers,
        "d_model": cfg["n_embd"],
        "n_heads": cfg["n_head"],
        "vocab_size": cfg["vocab_size"],
        "max_positions": cfg["n_positions"],
        "layernorm_epsilon": cfg.get("layer_norm_epsilon", 1e-5),
    }
    # HF Conv1D stores weights in x out; AAWF wants out x in.
    tensors = [("wte", sd["wte.weight"]), ("wpe", sd["wpe.weight"])]
    for i in range(n_layers):
        p = f"h.{i}."
        tensors += [
            (p + "ln1.g", sd[p + "ln_1.weight"]),
            (p + "ln1.b", sd[p + "ln_1.bias"]),
            (p + "attn.qkv.w", sd[p + "attn.c_attn.weight"].T),
            (p + "attn.qkv.b", sd[p + "attn.c_attn.bias"]),
            (p + "attn.proj.w", sd[p + "attn.c_proj.weight"].T),
            (p + "attn.proj.b", sd[p + "attn.c_proj.bias"]),
            (p + "ln2.g", sd[p + "ln_2.weight"]),
            (p + "ln2.b", sd[p + "ln_2.bias"]),
            (p + "mlp.up.w", sd[p + "mlp.c_fc.weight"].T),
            (p + "mlp.up.b", sd[p + "mlp.c_fc.bias"]),
            (p + "mlp.down.w", sd[p + "mlp.c_proj.weight"].T),
            (p + "mlp.down.b", sd[p + "mlp.c_proj.bias"]),
        ]
    tensors += [("lnf.g", sd["ln_f.weight"]), ("lnf.b", sd["ln_f.bias"])]
    aawf.write(out, {"kind": "model", "config": config, "source": os.path.basename(os.path.normpath(directory))},
               [(n, np.asarray(t, dtype=np.float32)) for n, t in tensors])


GOLDEN_PROMPTS = [
    "I went up to my friend and said",
    "The capital of France is",
    "I like weddings",
    "Love",
    "The weather today is",
]


def export_golden(directory, out):
    import torch
    from transformers import GPT2LMHeadModel, GPT2TokenizerFast

    tok = GPT2TokenizerFast.from_pretrained(directory)
    model = GPT2LMHeadModel.from_pretrained(directory, torch_dtype=torch.float32).eval()
    prompts = []
    for text in GOLDEN_PROMPTS:
        ids = [tok.eos_token_id] + tok.encode(text)
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0].numpy()
        prompts.append({"text": text, "tokens": ids, "logits": [[float(x) for x in row] for row in logits]})
    with open(out, "w") as f:
        json.dump({"source": os.path.basename(os.path.normpath(directory)), "prompts": prompts}, f)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("directory")
    ap.add_argument("out")
    ap.add_argument("--golden", help="also write reference logits for the probe prompts here")
    args = ap.parse_args()
    convert(args.directory, args.out)
    if args.golden:
        export_golden(args.directory, args.golden)


if __name__ == "__main__":
    main()
