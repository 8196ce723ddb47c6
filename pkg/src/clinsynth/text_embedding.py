"""Frozen text encoders producing one fixed-size vector per description.

Three backends share one handle type: a pretrained clinical language model, a
pretrained contrastive vision-language text tower, and a deterministic hash
stub that needs no downloads.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tabular_text import TextDescription

log = logging.getLogger(__name__)

BACKENDS = ("pretrained-clinical-LM", "pretrained-contrastive-VLM", "deterministic-stub")
DEFAULT_DIM = 768
CACHE_MAGIC = b"CSTXEMB1"
_HEADER = struct.Struct("<8sII")  # magic, dimension, flags
_FLAG_TRUNCATED = 1


class EncoderLoadError(RuntimeError):
    pass


class EmbeddingError(ValueError):
    def __init__(self, row: int, cause: Exception):
        super().__init__(f"row {row}: {cause}")
        self.row = row
        self.cause = cause


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    source_text_hash: str
    encoder_id: str
    truncated: bool = False

    @property
    def dimension(self) -> int:
        return int(self.vector.shape[0])


def _stub_vector(text: str, dim: int) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.Generator(np.random.PCG64(seed)).standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


@dataclass
class EncoderHandle:
    """A frozen encoder plus its embedding cache.

    ``model_name_or_path`` is only used by the pretrained backends; it may be a
    hub id or a local directory.
    """

    encoder_id: str = "stub-768"
    dimension: int = DEFAULT_DIM
    backend: str = "deterministic-stub"
    model_name_or_path: str | None = None
    max_tokens: int = 512
    cache_dir: str | os.PathLike | None = None
    backend_calls: int = field(default=0, init=False)
    cache_hits: int = field(default=0, init=False)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise EncoderLoadError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")
        self._memory: dict[str, TextEmbedding] = {}
        self._model = None
        self._tokenizer = None

    # -- backend plumbing -------------------------------------------------

    def _load(self):
        if self._model is not None or self.backend == "deterministic-stub":
            return
        if not self.model_name_or_path:
            raise EncoderLoadError(f"{self.encoder_id}: backend {self.backend} needs model_name_or_path")
        try:
            import transformers
        except ImportError as exc:
            raise EncoderLoadError(f"{self.encoder_id}: transformers is not installed") from exc
        try:
            self._tokenizer = transformers.AutoTokenizer.from_pretrained(self.model_name_or_path)
            if self.backend == "pretrained-contrastive-VLM":
                model = transformers.CLIPTextModelWithProjection.from_pretrained(self.model_name_or_path)
            else:
                model = transformers.AutoModel.from_pretrained(self.model_name_or_path)
        except Exception as exc:
            raise EncoderLoadError(f"{self.encoder_id}: cannot load {self.model_name_or_path!r}: {exc}") from exc
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        out_dim = self._output_dim()
        if out_dim != self.dimension:
            raise EncoderLoadError(f"{self.encoder_id}: model outputs dimension {out_dim}, handle declares {self.dimension}")

    def _output_dim(self) -> int:
        cfg = self._model.config
        if self.backend == "pretrained-contrastive-VLM":
            return int(cfg.projection_dim)
        return int(cfg.hidden_size)

    def parameter_checksum(self) -> str:
        """SHA-256 over encoder weights (over the handle config for the stub)."""
        h = hashlib.sha256()
        if self.backend == "deterministic-stub":
            h.update(f"{self.encoder_id}|{self.dimension}".encode())
            return h.hexdigest()
        self._load()
        for name, tensor in sorted(self._model.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def _encode(self, text: str) -> tuple[np.ndarray, bool]:
        self.backend_calls += 1
        if self.backend == "deterministic-stub":
            tokens = text.split()
            truncated = len(tokens) > self.max_tokens
            if truncated:
                text = " ".join(tokens[: self.max_tokens])
            return _stub_vector(text, self.dimension), truncated

        import torch

        self._load()
        full = self._tokenizer(text, truncation=False)["input_ids"]
        truncated = len(full) > self.max_tokens
        batch = self._tokenizer(text, truncation=True, max_length=self.max_tokens, return_tensors="pt")
        with torch.no_grad():
            out = self._model(**batch)
        if self.backend == "pretrained-contrastive-VLM":
            vec = out.text_embeds[0]
        elif getattr(self._tokenizer, "cls_token_id", None) is not None:
            vec = out.last_hidden_state[0, 0]
        else:
            mask = batch["attention_mask"][0].unsqueeze(-1).to(out.last_hidden_state.dtype)
            vec = (out.last_hidden_state[0] * mask).sum(0) / mask.sum()
        return vec.float().cpu().numpy().astype(np.float32), truncated

    # -- disk cache -------------------------------------------------------

    def _cache_key(self, text: str) -> str:
        return hashlib.sha256(f"{self.encoder_id}\x00{text}".encode("utf-8")).hexdigest()

    def _cache_path(self, text: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return Path(self.cache_dir) / f"{self._cache_key(text)}.emb"

    def _read_cache(self, path: Path, text: str) -> TextEmbedding | None:
        try:
            embedding = read_embedding_file(path)
        except (OSError, ValueError):
            return None
        vector, truncated = embedding
        if vector.shape[0] != self.dimension:
            return None
        return TextEmbedding(vector, text_hash(text), self.encoder_id, truncated)

    def lookup(self, text: str) -> TextEmbedding:
        if not text:
            raise ValueError("cannot embed empty text")
        key = self._cache_key(text)
        if key in self._memory:
            self.cache_hits += 1
            return self._memory[key]
        path = self._cache_path(text)
        if path is not None and path.exists():
            cached = self._read_cache(path, text)
            if cached is not None:
                self.cache_hits += 1
                self._memory[key] = cached
                return cached
        vector, truncated = self._encode(text)
        if not np.all(np.isfinite(vector)):
            raise FloatingPointError(f"{self.encoder_id}: non-finite embedding for text {text[:40]!r}")
        if truncated:
            log.warning("%s: text exceeds %d tokens and was truncated", self.encoder_id, self.max_tokens)
        vector.setflags(write=False)
        emb = TextEmbedding(vector, text_hash(text), self.encoder_id, truncated)
        if path is not None:
            write_embedding_file(path, vector, truncated)
        self._memory[key] = emb
        return emb


def write_embedding_file(path: str | os.PathLike, vector: np.ndarray, truncated: bool = False) -> None:
    """Atomically write a cache entry: 16-byte header then little-endian float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _HEADER.pack(CACHE_MAGIC, vector.shape[0], _FLAG_TRUNCATED if truncated else 0)
    payload += np.asarray(vector, dtype="<f4").tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_embedding_file(path: str | os.PathLike) -> tuple[np.ndarray, bool]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, dim, flags = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != 4 * dim:
        raise ValueError(f"{path}: expected {dim} floats, found {len(body) // 4}")
    vector = np.frombuffer(body, dtype="<f4").astype(np.float32)
    return vector, bool(flags & _FLAG_TRUNCATED)


def _text_of(text: TextDescription | str) -> str:
    return text.text if isinstance(text, TextDescription) else text


def embed(handle: EncoderHandle, text: TextDescription | str) -> TextEmbedding:
    return handle.lookup(_text_of(text))


def embed_batch(handle: EncoderHandle, texts: Sequence[TextDescription | str]) -> list[TextEmbedding]:
    # Sequential on purpose: padded batch inference is not bit-identical to single calls.
    out = []
    for i, t in enumerate(texts):
        try:
            out.append(embed(handle, t))
        except EncoderLoadError:
            raise
        except Exception as exc:
            raise EmbeddingError(i, exc) from exc
    return out


def stack(embeddings: Sequence[TextEmbedding]):
    """Stack embeddings into a (B, E) float32 torch tensor."""
    import torch

    return torch.from_numpy(np.stack([e.vector for e in embeddings]).astype(np.float32))


def make_encoder(encoder_id: str = "stub-768", backend: str = "deterministic-stub", dimension: int = DEFAULT_DIM,
                 model_name_or_path: str | None = None, max_tokens: int = 512,
                 cache_dir: str | os.PathLike | None = None) -> EncoderHandle:
    return EncoderHandle(encoder_id=encoder_id, dimension=dimension, backend=backend,
                         model_name_or_path=model_name_or_path, max_tokens=max_tokens, cache_dir=cache_dir)
