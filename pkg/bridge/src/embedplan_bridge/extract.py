"""Batch embedding extraction from a frozen pretrained encoder.

Mean pooling averages the final layer's hidden states over real (non-padding)
tokens via the attention mask; cls pooling takes the first position of the
final layer and is only valid for encoders that expose a classification
token. Vectors are written raw (unnormalized); the consuming pipeline
L2-normalizes at ingestion.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .embt import write_embt

ACTION_KEY_PREFIX = "act:"


class ModelLoadError(RuntimeError):
    pass


class SequenceTruncated(UserWarning):
    pass


@dataclass
class BridgeConfig:
    model: str
    pooling: str = "mean"
    batch_size: int = 16
    max_length: int = 256
    device: str = "cpu"
    output: str = "table.embt"

    def __post_init__(self):
        if self.pooling not in ("mean", "cls"):
            raise ValueError(f"unknown pooling '{self.pooling}'")


def load_encoder(name_or_path, device="cpu"):
    try:
        from transformers import AutoModel, AutoTokenizer
        tokenizer = AutoTokenizer.from_pretrained(name_or_path)
        model = AutoModel.from_pretrained(name_or_path)
    except Exception as exc:
        raise ModelLoadError(f"cannot load encoder '{name_or_path}': {exc}")
    model.to(device)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return tokenizer, model


def pool_hidden(hidden, attention_mask, pooling):
    """Pool final-layer hidden states to one vector per sequence."""
    if pooling == "cls":
        return hidden[:, 0, :]
    mask = attention_mask.unsqueeze(-1).to(hidden.dtype)
    summed = (hidden * mask).sum(dim=1)
    counts = mask.sum(dim=1).clamp(min=1.0)
    return summed / counts


@torch.no_grad()
def encode_texts(texts, tokenizer, model, cfg):
    out = []
    for start in range(0, len(texts), cfg.batch_size):
        chunk = texts[start:start + cfg.batch_size]
        enc = tokenizer(chunk, padding=True, truncation=True,
                        max_length=cfg.max_length, return_tensors="pt")
        if (enc["attention_mask"].sum(dim=1) >= cfg.max_length).any():
            warnings.warn(
                f"batch at offset {start}: text at or beyond max_length "
                f"{cfg.max_length} was truncated", SequenceTruncated)
        enc = {k: v.to(cfg.device) for k, v in enc.items()}
        result = model(**enc)
        vecs = pool_hidden(result.last_hidden_state, enc["attention_mask"],
                           cfg.pooling)
        out.append(vecs.cpu().to(torch.float32).numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0), np.float32)


def read_states_jsonl(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rows.append((str(obj["id"]), obj["text"]))
    return rows


def extract(states_path, action_ids, cfg):
    """Encode every state text and action id string; write the EMBT file."""
    tokenizer, model = load_encoder(cfg.model, cfg.device)
    states = read_states_jsonl(states_path)
    keys, texts = [], []
    for sid, text in states:
        keys.append(sid)
        texts.append(text)
    for aid in action_ids:
        keys.append(ACTION_KEY_PREFIX + aid)
        texts.append(aid)
    vectors = encode_texts(texts, tokenizer, model, cfg)
    if len(vectors) != len(keys):
        raise RuntimeError("encoder returned wrong number of vectors")
    entries = {k: vectors[i] for i, k in enumerate(keys)}
    write_embt(entries, vectors.shape[1] if len(vectors) else 0, cfg.output)
    return len(entries), (vectors.shape[1] if len(vectors) else 0)


def read_action_ids(path):
    """Action id strings from a catalog.json or a plain one-per-line file."""
    with open(path, encoding="utf-8") as fh:
        head = fh.read(1)
        fh.seek(0)
        if head == "{":
            cat = json.load(fh)
            return sorted({a for dobj in cat["domains"].values()
                           for pobj in dobj["problems"].values()
                           for a in pobj["actions"]})
        return [line.strip() for line in fh if line.strip()]


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="embedplan-extract",
        description="extract frozen-encoder embeddings into an EMBT table")
    parser.add_argument("--model", required=True,
                        help="model name or local path")
    parser.add_argument("--pooling", choices=["mean", "cls"], default="mean")
    parser.add_argument("--in", dest="states", required=True,
                        help="states.jsonl produced by the data pipeline")
    parser.add_argument("--actions", help="catalog.json or one action id per line")
    parser.add_argument("--out", required=True, help="output .embt path")
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--max-length", type=int, default=256)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)

    cfg = BridgeConfig(model=args.model, pooling=args.pooling,
                       batch_size=args.batch_size, max_length=args.max_length,
                       device=args.device, output=args.out)
    action_ids = read_action_ids(args.actions) if args.actions else []
    try:
        count, dim = extract(args.states, action_ids, cfg)
    except ModelLoadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {count} vectors of dim {dim} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
