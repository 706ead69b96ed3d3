"""Defenses: modality-gap shifting, artifact detection, off-manifold-token
refinement.

Gap shifting moves image and text embeddings toward each other along the
difference of their centroids before cosine scoring. The detector is a small
conv classifier trained on a 50/50 corpus of clean templates and prints mined
from them. Refinement co-trains the encoder against a live CMA-ES adversary
whose outputs are bound to a dedicated off-manifold caption token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import PromptSet, pgd_mine_batch
from .data import DatasetManifest
from .encoder import DualEncoder, _contrastive_loss
from .errors import ConfigError, IoError, TrainingDivergedError
from .formats import read_json, read_tsr, write_json, write_ndjson, write_tsr
from .lve import LveMiner
from .tensor import Tensor
from .vae import LATENT_DIM, TinyVae

OFF_MANIFOLD_TOKEN = "<off-manifold>"


# ---------------------------------------------------------------------------
# modality-gap shifting
# ---------------------------------------------------------------------------


@dataclass
class GapShift:
    delta: np.ndarray
    lam: float
    provenance: str = ""

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        write_tsr(out_dir / "gap_vector.tsr", self.delta)
        write_json(out_dir / "gapshift.json", {"lambda": self.lam, "provenance": self.provenance})

    @classmethod
    def load(cls, out_dir) -> "GapShift":
        out_dir = Path(out_dir)
        meta = read_json(out_dir / "gapshift.json")
        return cls(
            delta=read_tsr(out_dir / "gap_vector.tsr"),
            lam=float(meta["lambda"]),
            provenance=meta.get("provenance", ""),
        )


def compute_gap_vector(
    model: DualEncoder,
    manifest: DatasetManifest,
    split: str = "train",
    lam: float = 0.25,
) -> GapShift:
    """Difference of unit-embedding centroids: images minus texts."""
    records = manifest.split(split)
    if not records:
        raise ConfigError(f"split {split!r} is empty")
    images = np.stack([manifest.load_image(r) for r in records])
    captions = [r["caption"] for r in records]
    img_centroid = model.unit_image_embeddings(images).mean(axis=0)
    txt_centroid = model.unit_text_embeddings(captions).mean(axis=0)
    return GapShift(
        delta=img_centroid - txt_centroid,
        lam=lam,
        provenance=f"split={split},n={len(records)},ckpt={model.config_hash()}",
    )


def _renorm(embs: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embs, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ConfigError("shifted embedding collapsed to zero norm")
    return embs / norms


def shifted_image_embeddings(model, images, gapshift: GapShift) -> np.ndarray:
    """Pinned pipeline: unit-normalize, shift by -lambda*delta, re-normalize."""
    unit = model.unit_image_embeddings(np.asarray(images))
    if gapshift.lam == 0.0:
        return unit
    return _renorm(unit - gapshift.lam * gapshift.delta)


def shifted_text_embeddings(model, captions, gapshift: GapShift) -> np.ndarray:
    unit = model.unit_text_embeddings(list(captions))
    if gapshift.lam == 0.0:
        return unit
    return _renorm(unit + gapshift.lam * gapshift.delta)


def shifted_score_matrix(model, gapshift: GapShift, images, captions) -> np.ndarray:
    if gapshift.lam == 0.0:
        return model.score_matrix(np.asarray(images), list(captions))
    img = shifted_image_embeddings(model, images, gapshift)
    txt = shifted_text_embeddings(model, captions, gapshift)
    return np.clip(img @ txt.T, -1.0, 1.0)


def shifted_score(model, gapshift: GapShift, image: np.ndarray, caption: str) -> float:
    return float(shifted_score_matrix(model, gapshift, image[None], [caption])[0, 0])


def shifted_retrieval_accuracy(
    model: DualEncoder,
    gapshift: GapShift,
    manifest: DatasetManifest,
    split: str = "val",
    batch_size: int = 32,
) -> float:
    """Caption->image top-1 accuracy under gap-shifted scoring."""
    from .encoder import _round_robin_batches

    rng = np.random.Generator(np.random.PCG64(0))
    records = sorted(manifest.split(split), key=lambda r: r["id"])
    correct = 0
    total = 0
    for batch in _round_robin_batches(records, batch_size, rng):
        images = np.stack([manifest.load_image(r) for r in batch])
        captions = [r["caption"] for r in batch]
        sims = shifted_score_matrix(model, gapshift, images, captions)
        correct += int((sims.argmax(axis=0) == np.arange(len(batch))).sum())
        total += len(batch)
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# artifact detector
# ---------------------------------------------------------------------------


class DetectorCorpus:
    """50/50 balanced clean/adversarial image corpus with its own splits."""

    def __init__(self, records: list[dict], base_dir: Path):
        self.records = records
        self.base_dir = Path(base_dir)

    def split(self, name: str) -> list[dict]:
        return [r for r in self.records if r["split"] == name]

    def load_image(self, record: dict) -> np.ndarray:
        return read_tsr(self.base_dir / record["image"])

    def save(self, path) -> None:
        write_ndjson(path, self.records)

    @classmethod
    def load(cls, manifest_path) -> "DetectorCorpus":
        from .formats import read_ndjson

        path = Path(manifest_path)
        return cls(list(read_ndjson(path)), path.parent)


def build_detector_corpus(
    encoder: DualEncoder,
    manifest: DatasetManifest,
    out_dir,
    n: int = 1500,
    pgd_iters: int = 100,
    seed: int = 0,
    targets_per_print: int = 5,
    epsilon: int = 15,
    alpha: int = 1,
    mining_batch: int = 125,
) -> DetectorCorpus:
    """For each sampled template, mine a print against random captions; emit
    template (clean) and print (adversarial) records, split 4:1:1."""
    if n < 6:
        raise ConfigError("detector corpus needs at least 6 templates")
    if n > len(manifest.records):
        raise ConfigError(f"asked for {n} templates, manifest has {len(manifest.records)}")
    out_dir = Path(out_dir)
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.choice(len(manifest.records), size=n, replace=False)
    templates = [manifest.records[i] for i in picks]
    captions = sorted(manifest.captions())
    prompt_indices = rng.integers(0, len(captions), size=(n, targets_per_print))

    n_val = n // 6
    n_test = n // 6
    split_of = ["train"] * (n - n_val - n_test) + ["val"] * n_val + ["test"] * n_test

    records = []
    for start in range(0, n, mining_batch):
        batch = templates[start : start + mining_batch]
        images = np.stack([manifest.load_image(r) for r in batch])
        mined = pgd_mine_batch(
            encoder,
            images,
            prompt_indices[start : start + len(batch)],
            captions,
            iterations=pgd_iters,
            alpha=alpha,
            epsilon=epsilon,
        )
        for j, template in enumerate(batch):
            i = start + j
            clean_rel = f"images/clean-{i:05d}.tsr"
            adv_rel = f"images/adv-{i:05d}.tsr"
            write_tsr(out_dir / clean_rel, images[j])
            write_tsr(out_dir / adv_rel, mined[j])
            records.append(
                {
                    "id": f"clean-{i:05d}",
                    "image": clean_rel,
                    "label": "clean",
                    "split": split_of[i],
                    "template_id": template["id"],
                }
            )
            records.append(
                {
                    "id": f"adv-{i:05d}",
                    "image": adv_rel,
                    "label": "adversarial",
                    "split": split_of[i],
                    "template_id": template["id"],
                }
            )

    corpus = DetectorCorpus(records, out_dir)
    corpus.save(out_dir / "corpus.ndjson")
    return corpus


_DET_CH1 = 8
_DET_CH2 = 16


class DetectorModel:
    """2 conv layers, global average pooling, linear head to 2 logits."""

    def __init__(self, params: dict[str, Tensor], threshold: float = 0.5):
        self.params = params
        self.threshold = threshold

    @classmethod
    def init(cls, seed: int) -> "DetectorModel":
        rng = np.random.Generator(np.random.PCG64(seed))
        p = {
            "conv1_w": Tensor._wrap(T.he_init(rng, (_DET_CH1, 3, 3, 3), 27), True),
            "conv1_b": Tensor._wrap(np.zeros(_DET_CH1), True),
            "conv2_w": Tensor._wrap(T.he_init(rng, (_DET_CH2, _DET_CH1, 3, 3), _DET_CH1 * 9), True),
            "conv2_b": Tensor._wrap(np.zeros(_DET_CH2), True),
            "fc_w": Tensor._wrap(T.he_init(rng, (_DET_CH2, 2), _DET_CH2), True),
            "fc_b": Tensor._wrap(np.zeros(2), True),
        }
        return cls(p)

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def logits_t(self, images: Tensor) -> Tensor:
        p = self.params
        h = T.conv2d(images, p["conv1_w"], stride=2, pad=1)
        h = T.relu(h + T.reshape(p["conv1_b"], (1, _DET_CH1, 1, 1)))
        h = T.conv2d(h, p["conv2_w"], stride=2, pad=1)
        h = T.relu(h + T.reshape(p["conv2_b"], (1, _DET_CH2, 1, 1)))
        pooled = T.tmean(h, axis=(2, 3))
        return pooled @ p["fc_w"] + p["fc_b"]

    def adversarial_probability(self, images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits = self.logits_t(Tensor(np.asarray(images))).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e[:, 1] / e.sum(axis=1)

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        for name, t in self.params.items():
            write_tsr(out_dir / "params" / f"{name}.tsr", np.asarray(t.data))
        write_json(
            out_dir / "meta.json",
            {"params": sorted(self.params), "threshold": self.threshold},
        )

    @classmethod
    def load(cls, out_dir) -> "DetectorModel":
        out_dir = Path(out_dir)
        meta_path = out_dir / "meta.json"
        if not meta_path.exists():
            raise IoError(f"no detector checkpoint at {out_dir}")
        meta = read_json(meta_path)
        params = {
            name: Tensor._wrap(read_tsr(out_dir / "params" / f"{name}.tsr"), False)
            for name in meta["params"]
        }
        return cls(params, threshold=float(meta["threshold"]))


def detect(detector: DetectorModel, image: np.ndarray) -> tuple[str, float]:
    """Label one image as clean/adversarial with the adversarial confidence."""
    prob = float(detector.adversarial_probability(np.asarray(image)[None])[0])
    label = "adversarial" if prob >= detector.threshold else "clean"
    return label, prob


def detector_accuracy(detector: DetectorModel, corpus: DetectorCorpus, split: str) -> float:
    records = corpus.split(split)
    images = np.stack([corpus.load_image(r) for r in records])
    labels = np.array([1 if r["label"] == "adversarial" else 0 for r in records])
    probs = detector.adversarial_probability(images)
    predicted = (probs >= detector.threshold).astype(int)
    return float((predicted == labels).mean())


def train_detector(
    corpus: DetectorCorpus,
    epochs: int = 5,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[DetectorModel, float]:
    """Cross-entropy training on the corpus train split; returns the model
    and its test-split accuracy."""
    detector = DetectorModel.init(seed)
    params = detector.param_list()
    state = T.AdamState(params)
    rng = np.random.Generator(np.random.PCG64(seed))
    records = corpus.split("train")
    if not records:
        raise ConfigError("detector corpus has no train split")

    for _epoch in range(epochs):
        order = rng.permutation(len(records))
        for start in range(0, len(records), batch_size):
            batch = [records[i] for i in order[start : start + batch_size]]
            images = np.stack([corpus.load_image(r) for r in batch])
            labels = np.array(
                [1 if r["label"] == "adversarial" else 0 for r in batch], dtype=np.intp
            )
            logits = detector.logits_t(Tensor(images))
            lse = T.logsumexp_rows(logits)
            n = len(batch)
            flat = T.reshape(logits, (n * 2,))
            picked = T.gather(flat, np.arange(n) * 2 + labels)
            loss = T.tmean(lse - picked)
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDivergedError(f"detector loss became {val}")
            T.backward(loss)
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
            ]
            T.adam_step(params, grads, state, lr)
            T.zero_grads(params)

    detector.set_trainable(False)
    return detector, detector_accuracy(detector, corpus, "test")


# ---------------------------------------------------------------------------
# off-manifold-token refinement
# ---------------------------------------------------------------------------


def extend_vocabulary(model: DualEncoder, seed: int = 0) -> DualEncoder:
    """Copy of the model whose vocabulary gains the off-manifold token."""
    if OFF_MANIFOLD_TOKEN in model.vocab:
        raise ConfigError("vocabulary already contains the off-manifold token")
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {
        name: Tensor._wrap(t.data.copy(), False) for name, t in model.params.items()
    }
    new_row = rng.standard_normal((1, params["txt_embed"].data.shape[1])) * 0.1
    params["txt_embed"] = Tensor._wrap(
        np.concatenate([params["txt_embed"].data, new_row], axis=0), False
    )
    return DualEncoder(model.vocab + [OFF_MANIFOLD_TOKEN], params)


def refine_offmanifold(
    model: DualEncoder,
    manifest: DatasetManifest,
    vae: TinyVae,
    prompts: PromptSet,
    epochs: int = 1,
    seed: int = 0,
    lr: float = 1e-4,
    batch_size: int = 30,
    init_latent: np.ndarray | None = None,
    adversary_sigma0: float = 1.0,
):
    """Contrastive refinement where every batch carries a fresh decoded noise
    image and a co-evolving adversary, both captioned with the off-manifold
    token. The adversary advances one CMA-ES generation per step against the
    live model. Returns (refined model, final adversary as a MasterPrint)."""
    from .bridge import LocalScorer
    from .encoder import _round_robin_batches, _TEMP_MAX

    refined = extend_vocabulary(model, seed=seed)
    refined.set_trainable(True)
    params = refined.param_list()
    state = T.AdamState(params)
    rng = np.random.Generator(np.random.PCG64(seed))

    miner = LveMiner(
        LocalScorer(refined, identity="refine-loop"),
        prompts,
        vae,
        seed=seed,
        sigma0=adversary_sigma0,
        init_mean=init_latent,
    )
    train_records = manifest.split("train")

    for _epoch in range(epochs):
        for batch in _round_robin_batches(train_records, batch_size, rng):
            miner.step()
            noise = vae.decode(rng.standard_normal(LATENT_DIM))
            images = np.stack(
                [manifest.load_image(r) for r in batch] + [noise, miner.best_image]
            )
            captions = [r["caption"] for r in batch] + [
                OFF_MANIFOLD_TOKEN,
                OFF_MANIFOLD_TOKEN,
            ]
            loss = _contrastive_loss(refined, images, captions)
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingDivergedError(f"refinement loss became {val}")
            T.backward(loss)
            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
            ]
            T.adam_step(params, grads, state, lr)
            T.zero_grads(params)
            lt = refined.params["log_temp"]
            lt.data = np.minimum(lt.data, _TEMP_MAX)

    refined.set_trainable(False)
    adversary = miner.result(config_hash="refine")
    return refined, adversary
