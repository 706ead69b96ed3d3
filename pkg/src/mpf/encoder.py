"""Toy contrastive dual encoder: conv image tower, bag-of-words text tower,
cosine scoring, and symmetric InfoNCE training."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DatasetManifest, base_vocabulary
from .errors import (
    ConfigError,
    DegenerateEmbeddingError,
    IoError,
    TrainingDivergedError,
    VocabError,
)
from .formats import read_tsr, write_json, write_tsr
from .tensor import Tensor

EMBED_DIM = 64
_TOKEN_DIM = 64
_HIDDEN = 256
_CONV1_CH = 8
_CONV2_CH = 16
_FLAT = _CONV2_CH * 7 * 7  # two stride-2 valid 3x3 convs: 32 -> 15 -> 7
_TEMP_INIT = math.log(1.0 / 0.07)
_TEMP_MAX = math.log(100.0)

_PARAM_SHAPES = {
    "img_conv1_w": (_CONV1_CH, 3, 3, 3),
    "img_conv1_b": (_CONV1_CH,),
    "img_conv2_w": (_CONV2_CH, _CONV1_CH, 3, 3),
    "img_conv2_b": (_CONV2_CH,),
    "img_fc1_w": (_FLAT, _HIDDEN),
    "img_fc1_b": (_HIDDEN,),
    "img_fc2_w": (_HIDDEN, EMBED_DIM),
    "img_fc2_b": (EMBED_DIM,),
    "txt_fc1_w": (_TOKEN_DIM, _HIDDEN),
    "txt_fc1_b": (_HIDDEN,),
    "txt_fc2_w": (_HIDDEN, EMBED_DIM),
    "txt_fc2_b": (EMBED_DIM,),
    "log_temp": (),
}


class DualEncoder:
    """Image and text encoders sharing a 64-d embedding space."""

    def __init__(self, vocab: list[str], params: dict[str, Tensor]):
        self.vocab = list(vocab)
        self.token_ids = {w: i for i, w in enumerate(self.vocab)}
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, seed: int, vocab: list[str] | None = None) -> "DualEncoder":
        vocab = list(vocab) if vocab is not None else base_vocabulary()
        rng = np.random.Generator(np.random.PCG64(seed))
        p: dict[str, Tensor] = {}
        fan_in = {
            "img_conv1_w": 3 * 9,
            "img_conv2_w": _CONV1_CH * 9,
            "img_fc1_w": _FLAT,
            "img_fc2_w": _HIDDEN,
            "txt_fc1_w": _TOKEN_DIM,
            "txt_fc2_w": _HIDDEN,
        }
        for name, shape in _PARAM_SHAPES.items():
            if name == "log_temp":
                data = np.float64(_TEMP_INIT)
            elif name.endswith("_b"):
                data = np.zeros(shape)
            else:
                data = T.he_init(rng, shape, fan_in[name])
            p[name] = Tensor._wrap(np.asarray(data, dtype=np.float64), True)
        p["txt_embed"] = Tensor._wrap(
            rng.standard_normal((len(vocab), _TOKEN_DIM)) * 0.1, True
        )
        return cls(vocab, p)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    # -- tokenization -------------------------------------------------------

    def tokenize(self, caption: str) -> list[int]:
        ids = []
        for word in caption.strip().split():
            if word not in self.token_ids:
                raise VocabError(f"token {word!r} not in vocabulary")
            ids.append(self.token_ids[word])
        if not ids:
            raise VocabError("empty caption")
        return ids

    # -- differentiable towers ---------------------------------------------

    def embed_images_t(self, images: Tensor) -> Tensor:
        """(N,3,32,32) -> raw (N,64) embeddings, on-tape."""
        p = self.params
        h = T.conv2d(images, p["img_conv1_w"], stride=2)
        h = T.relu(h + T.reshape(p["img_conv1_b"], (1, _CONV1_CH, 1, 1)))
        h = T.conv2d(h, p["img_conv2_w"], stride=2)
        h = T.relu(h + T.reshape(p["img_conv2_b"], (1, _CONV2_CH, 1, 1)))
        h = T.reshape(h, (images.shape[0], _FLAT))
        h = T.relu(h @ p["img_fc1_w"] + p["img_fc1_b"])
        return h @ p["img_fc2_w"] + p["img_fc2_b"]

    def embed_texts_t(self, captions: list[str]) -> Tensor:
        """Captions -> raw (N,64) embeddings via mean-pooled word vectors."""
        token_lists = [self.tokenize(c) for c in captions]
        flat = np.concatenate([np.asarray(t, dtype=np.intp) for t in token_lists])
        pool = np.zeros((len(captions), len(flat)))
        pos = 0
        for i, toks in enumerate(token_lists):
            pool[i, pos : pos + len(toks)] = 1.0 / len(toks)
            pos += len(toks)
        tok_vecs = T.gather(self.params["txt_embed"], flat)
        pooled = Tensor._wrap(pool, False) @ tok_vecs
        p = self.params
        h = T.relu(pooled @ p["txt_fc1_w"] + p["txt_fc1_b"])
        return h @ p["txt_fc2_w"] + p["txt_fc2_b"]

    def _unit(self, emb: Tensor) -> Tensor:
        norms = np.sqrt((emb.data * emb.data).sum(axis=-1))
        if np.any(norms == 0.0):
            raise DegenerateEmbeddingError("embedding with zero norm")
        return T.unit_rows(emb)

    def score_tensor(self, image: Tensor, caption: str) -> Tensor:
        """Differentiable cosine similarity of one image and one caption."""
        img = self._unit(self.embed_images_t(T.reshape(image, (1, 3, 32, 32))))
        txt = self._unit(self.embed_texts_t([caption]))
        return T.tsum(img * txt)

    # -- inference ----------------------------------------------------------

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.embed_images_t(Tensor(image[None])).data[0]

    def embed_text(self, caption: str) -> np.ndarray:
        with T.no_grad():
            return self.embed_texts_t([caption]).data[0]

    def score(self, image: np.ndarray, caption: str) -> float:
        return float(self.score_matrix(image[None], [caption])[0, 0])

    def score_matrix(self, images: np.ndarray, captions: list[str]) -> np.ndarray:
        """(N images) x (K captions) cosine similarity matrix."""
        with T.no_grad():
            img = self._unit(self.embed_images_t(Tensor(np.asarray(images))))
            txt = self._unit(self.embed_texts_t(captions))
        # unit-vector dot products can exceed 1 by an ulp; keep the contract
        return np.clip(img.data @ txt.data.T, -1.0, 1.0)

    def unit_image_embeddings(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self._unit(self.embed_images_t(Tensor(np.asarray(images)))).data

    def unit_text_embeddings(self, captions: list[str]) -> np.ndarray:
        with T.no_grad():
            return self._unit(self.embed_texts_t(captions)).data

    # -- persistence --------------------------------------------------------

    def config_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.vocab).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()[:16]

    def save(self, ckpt_dir) -> None:
        ckpt_dir = Path(ckpt_dir)
        for name, t in self.params.items():
            write_tsr(ckpt_dir / "params" / f"{name}.tsr", np.asarray(t.data))
        write_json(
            ckpt_dir / "meta.json",
            {
                "vocab": self.vocab,
                "embed_dim": EMBED_DIM,
                "params": sorted(self.params),
                "config_hash": self.config_hash(),
            },
        )

    @classmethod
    def load(cls, ckpt_dir, trainable: bool = False) -> "DualEncoder":
        ckpt_dir = Path(ckpt_dir)
        meta_path = ckpt_dir / "meta.json"
        if not meta_path.exists():
            raise IoError(f"no checkpoint at {ckpt_dir}")
        meta = json.loads(meta_path.read_text("utf-8"))
        params = {}
        for name in meta["params"]:
            arr = read_tsr(ckpt_dir / "params" / f"{name}.tsr")
            params[name] = Tensor._wrap(arr, trainable)
        return cls(meta["vocab"], params)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    epochs: int
    loss_trace: list[float]
    val_retrieval: float
    initial_loss: float


def _contrastive_loss(model: DualEncoder, images: np.ndarray, captions: list[str]) -> Tensor:
    img = model._unit(model.embed_images_t(Tensor(images)))
    txt = model._unit(model.embed_texts_t(captions))
    logits = (img @ T.transpose(txt)) * T.exp(model.params["log_temp"])
    diag = T.take_diag(logits)
    loss_img = T.tmean(T.logsumexp_rows(logits) - diag)
    loss_txt = T.tmean(T.logsumexp_rows(T.transpose(logits)) - diag)
    return (loss_img + loss_txt) * 0.5


def _round_robin_batches(
    records: list[dict], batch_size: int, rng: np.random.Generator
) -> list[list[dict]]:
    """Batches of distinct-caption records; every record appears once."""
    groups: dict[str, list[dict]] = {}
    for r in records:
        groups.setdefault(r["caption"], []).append(r)
    captions = sorted(groups)
    if batch_size > len(captions):
        raise ConfigError(
            f"batch size {batch_size} exceeds {len(captions)} distinct captions"
        )
    per_class = min(len(g) for g in groups.values())
    for c in captions:
        order = rng.permutation(len(groups[c]))
        groups[c] = [groups[c][i] for i in order]
    batches = []
    for rnd in range(per_class):
        class_order = rng.permutation(len(captions))
        for start in range(0, len(captions) - batch_size + 1, batch_size):
            chunk = class_order[start : start + batch_size]
            batches.append([groups[captions[ci]][rnd] for ci in chunk])
    return batches


def retrieval_accuracy(
    model: DualEncoder, manifest: DatasetManifest, split: str = "val", batch_size: int = 32
) -> float:
    """Caption->image top-1 accuracy within distinct-caption batches."""
    rng = np.random.Generator(np.random.PCG64(0))
    records = sorted(manifest.split(split), key=lambda r: r["id"])
    batches = _round_robin_batches(records, batch_size, rng)
    correct = 0
    total = 0
    for batch in batches:
        images = np.stack([manifest.load_image(r) for r in batch])
        captions = [r["caption"] for r in batch]
        sims = model.score_matrix(images, captions)
        correct += int((sims.argmax(axis=0) == np.arange(len(batch))).sum())
        total += len(batch)
    return correct / total if total else 0.0


def matched_pair_mean(
    model: DualEncoder, manifest: DatasetManifest, split: str = "val"
) -> float:
    """Mean cosine score over matched (image, own-caption) pairs."""
    records = manifest.split(split)
    scores = [model.score(manifest.load_image(r), r["caption"]) for r in records]
    return float(np.mean(scores))


def train_contrastive(
    model: DualEncoder,
    manifest: DatasetManifest,
    epochs: int = 30,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
) -> TrainReport:
    """Symmetric InfoNCE over in-batch negatives with learnable temperature."""
    if batch_size < 2:
        raise ConfigError("batch size must be >= 2")
    model.set_trainable(True)
    params = model.param_list()
    state = T.AdamState(params)
    rng = np.random.Generator(np.random.PCG64(seed))
    train_records = manifest.split("train")

    loss_trace: list[float] = []
    initial_loss = math.nan
    for _epoch in range(epochs):
        epoch_losses = []
        for batch in _round_robin_batches(train_records, batch_size, rng):
            images = np.stack([manifest.load_image(r) for r in batch])
            captions = [r["caption"] for r in batch]
            loss = _contrastive_loss(model, images, captions)
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDivergedError(f"loss became {val}")
            if math.isnan(initial_loss):
                initial_loss = val
            T.backward(loss)
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
            ]
            T.adam_step(params, grads, state, lr)
            T.zero_grads(params)
            lt = model.params["log_temp"]
            lt.data = np.minimum(lt.data, _TEMP_MAX)
            epoch_losses.append(val)
        loss_trace.append(float(np.mean(epoch_losses)))

    model.set_trainable(False)
    val_acc = retrieval_accuracy(model, manifest, "val", batch_size)
    return TrainReport(epochs, loss_trace, val_acc, initial_loss)
