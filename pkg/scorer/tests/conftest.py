import pytest

VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "capital", "of", "is", "in", "a", "big", ".", ",",
    "paris", "france", "italy", "rome", "berlin", "germany",
    "spain", "madrid", "lisbon", "portugal", "city",
    "works", "field", "physics", "chemistry", "##s",
]


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    """A tiny randomly initialized BERT saved to disk; weights are seeded."""
    import torch
    from transformers import BertConfig, BertForMaskedLM, BertTokenizerFast

    target = tmp_path_factory.mktemp("tiny-bert")
    vocab_file = target / "vocab.txt"
    vocab_file.write_text("\n".join(VOCAB) + "\n", encoding="utf-8")
    tokenizer = BertTokenizerFast.from_pretrained(str(target))

    torch.manual_seed(7)
    config = BertConfig(
        vocab_size=len(VOCAB),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=128,
    )
    model = BertForMaskedLM(config)
    tokenizer.save_pretrained(target)
    model.save_pretrained(target)
    return str(target)
