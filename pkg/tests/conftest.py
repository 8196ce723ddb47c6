import pytest

from clinsynth.data_pipeline import load_dataset
from clinsynth.phantoms import write_phantom_dataset
from clinsynth.tabular_text import default_schema, read_csv

TINY_VOCAB = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "patient", "is", "a", "an", "male", "female",
              "smoker", "non", "ex", "-", ".", "years", "old"] + [str(i) for i in range(121)]


@pytest.fixture(scope="session")
def tiny_hf_models(tmp_path_factory):
    """Randomly initialised one-layer BERT and CLIP text towers saved to disk, so no downloads are needed."""
    transformers = pytest.importorskip("transformers")
    import torch

    root = tmp_path_factory.mktemp("hf")
    vocab = root / "vocab.txt"
    vocab.write_text("\n".join(TINY_VOCAB) + "\n")
    tok = transformers.BertTokenizer(str(vocab))
    torch.manual_seed(0)
    bert = transformers.BertModel(transformers.BertConfig(
        vocab_size=len(TINY_VOCAB), hidden_size=16, num_hidden_layers=1, num_attention_heads=2,
        intermediate_size=32, max_position_embeddings=64))
    clip = transformers.CLIPTextModelWithProjection(transformers.CLIPTextConfig(
        vocab_size=len(TINY_VOCAB), hidden_size=16, num_hidden_layers=1, num_attention_heads=2,
        intermediate_size=32, projection_dim=8, max_position_embeddings=64, bos_token_id=2, eos_token_id=3,
        pad_token_id=0))
    paths = {}
    for name, model in (("bert", bert), ("clip", clip)):
        model.save_pretrained(root / name)
        tok.save_pretrained(root / name)
        paths[name] = str(root / name)
    return paths


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    return write_phantom_dataset(tmp_path_factory.mktemp("phantoms"), n_subjects=4, shape=(16, 24, 24), seed=0)


@pytest.fixture(scope="session")
def phantom_samples(phantom_dir):
    return load_dataset(phantom_dir["manifest"], read_csv(phantom_dir["csv"], default_schema()))
