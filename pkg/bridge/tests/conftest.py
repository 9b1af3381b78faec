"""Builds a tiny local transformer so tests run without model downloads."""

import json

import pytest
import torch


@pytest.fixture(scope="session")
def tiny_encoder_dir(tmp_path_factory):
    from transformers import BertConfig, BertModel, BertTokenizerFast

    root = tmp_path_factory.mktemp("tiny-encoder")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab += [w for w in ("the", "ferry", "is", "at", "car", "block", "on",
                          "table", "arm", "holding", "clear", "empty",
                          "l0", "l1", "l2", "c1", "c2", "b1", "b2", "b3")]
    vocab += [chr(c) for c in range(ord("a"), ord("z") + 1)]
    vocab += ["##" + chr(c) for c in range(ord("a"), ord("z") + 1)]
    vocab += [str(d) for d in range(10)] + ["##" + str(d) for d in range(10)]
    vocab += ["(", ")", ",", ".", "-", "_"]
    (root / "vocab.txt").write_text("\n".join(vocab) + "\n")

    tokenizer = BertTokenizerFast(vocab_file=str(root / "vocab.txt"),
                                  do_lower_case=True)
    config = BertConfig(vocab_size=len(vocab), hidden_size=32,
                        num_hidden_layers=2, num_attention_heads=2,
                        intermediate_size=64, max_position_embeddings=256)
    torch.manual_seed(0)
    model = BertModel(config)
    model.save_pretrained(root)
    tokenizer.save_pretrained(root)
    return root


@pytest.fixture()
def states_jsonl(tmp_path):
    rows = [
        {"id": str(i), "domain": "ferry", "problem": "p0",
         "text": text}
        for i, text in enumerate([
            "The ferry is at l0, and Car c1 is at location l0.",
            "Car c1 is on the ferry, and The ferry is at l0.",
            "The ferry is at l1, and Car c1 is on the ferry.",
            "Car c1 is at location l1, and The ferry is at l1.",
            "Block b1 is on the table, and No blocks are placed on top of b1.",
            "The robotic arm is holding b1.",
            "The block b2 is currently situated under the block b1.",
            "The robotic arm is not holding anything.",
            "Car c2 is at location l2.",
            "The ferry is empty.",
        ])
    ]
    path = tmp_path / "states.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path
