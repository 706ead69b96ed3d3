"""White-box mining of fooling master images.

Both miners minimize the extremum loss ``-min_k s(x, c_k)`` over a caption
set: each step scores the current image against every targeted caption,
backpropagates the similarity of the single worst-scoring caption, and updates
the image (Adam on raw pixels for ``sgd``, sign steps projected onto an L-inf
ball in 0..255 space for ``pgd``). The iterate with the smallest recorded loss
is returned.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CapabilityError, ConfigError, IoError, ParseError
from .formats import (
    read_json,
    read_tsr,
    write_csv,
    write_json,
    write_ppm,
    write_tsr,
)
from .tensor import Tensor


@dataclass(frozen=True)
class PromptSet:
    captions: tuple[str, ...]

    def __post_init__(self):
        if not self.captions:
            raise ConfigError("prompt set is empty")
        if len(set(self.captions)) != len(self.captions):
            raise ConfigError("prompt set contains duplicates")

    def __len__(self) -> int:
        return len(self.captions)

    @classmethod
    def from_list(cls, captions) -> "PromptSet":
        return cls(tuple(captions))

    @classmethod
    def from_file(cls, path) -> "PromptSet":
        try:
            text = Path(path).read_text("utf-8")
        except OSError as e:
            raise IoError(f"cannot read prompts file {path}: {e}") from e
        captions = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                captions.append(line)
        if not captions:
            raise ParseError(f"prompts file {path} has no captions")
        return cls(tuple(captions))


@dataclass
class AttackConfig:
    method: str = "sgd"
    iterations: int = 1000
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    alpha: int = 1
    epsilon: int = 15
    seed: int = 0

    def validate(self) -> None:
        if self.method not in ("sgd", "pgd"):
            raise ConfigError(f"unknown attack method {self.method!r}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.method == "pgd":
            # epsilon 0 is a permitted degenerate budget: the projection
            # collapses every update back onto the template.
            if self.epsilon < 0 or self.alpha < 1:
                raise ConfigError("pgd needs epsilon >= 0 and alpha >= 1")
            if 0 < self.epsilon < self.alpha:
                raise ConfigError("pgd budget epsilon must be >= step alpha")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_adam": self.eps_adam,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "seed": self.seed,
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MasterPrint:
    image: np.ndarray
    scores: dict[str, float]
    loss_trace: list[float]
    min_score_trace: list[float]
    config_hash: str
    method: str
    prompts: list[str] = field(default_factory=list)

    def min_targeted_score(self) -> float:
        return min(self.scores.values())

    def save(self, run_dir, config: dict | None = None) -> None:
        run_dir = Path(run_dir)
        write_tsr(run_dir / "masterprint.tsr", self.image)
        write_ppm(run_dir / "masterprint.ppm", self.image)
        write_csv(
            run_dir / "trace.csv",
            ["iteration", "loss", "min-score"],
            [
                [i, lo, sc]
                for i, (lo, sc) in enumerate(zip(self.loss_trace, self.min_score_trace))
            ],
        )
        write_json(
            run_dir / "config.json",
            {
                "method": self.method,
                "config_hash": self.config_hash,
                "prompts": self.prompts,
                **(config or {}),
            },
        )
        write_json(run_dir / "scores.json", self.scores)

    @classmethod
    def load(cls, run_dir) -> "MasterPrint":
        run_dir = Path(run_dir)
        cfg = read_json(run_dir / "config.json")
        scores = read_json(run_dir / "scores.json")
        loss_trace: list[float] = []
        min_trace: list[float] = []
        lines = (run_dir / "trace.csv").read_text("utf-8").strip().splitlines()
        for line in lines[1:]:
            _, lo, sc = line.split(",")
            loss_trace.append(float(lo))
            min_trace.append(float(sc))
        return cls(
            image=read_tsr(run_dir / "masterprint.tsr"),
            scores=scores,
            loss_trace=loss_trace,
            min_score_trace=min_trace,
            config_hash=cfg["config_hash"],
            method=cfg["method"],
            prompts=cfg.get("prompts", []),
        )


def extremum_loss(scores: np.ndarray) -> tuple[float, int]:
    """Loss ``-min_k scores[k]`` and the index attaining it (ties -> lowest)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ConfigError("empty score vector")
    idx = int(np.argmin(scores))
    return float(-scores[idx]), idx


def _require_gradients(scorer) -> None:
    if not getattr(scorer, "provides_image_gradients", False):
        raise CapabilityError("attack requires a scorer with image gradients")


def _scores_graph(encoder, image: Tensor, txt_unit: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """On-tape (1,K) caption scores of one image plus their plain values."""
    emb = encoder._unit(encoder.embed_images_t(T.reshape(image, (1, 3, 32, 32))))
    scores_t = emb @ Tensor._wrap(txt_unit.T, False)
    return scores_t, scores_t.data[0].copy()


def sgd_mine(scorer, prompts: PromptSet, config: AttackConfig) -> MasterPrint:
    """Adam on raw pixels from a seeded uniform-random start, clamped to [0,1]."""
    _require_gradients(scorer)
    if config.method != "sgd":
        raise ConfigError("sgd_mine requires config.method == 'sgd'")
    config.validate()
    encoder = scorer.encoder
    txt_unit = encoder.unit_text_embeddings(list(prompts.captions))

    rng = np.random.Generator(np.random.PCG64(config.seed))
    x = Tensor(rng.uniform(0.0, 1.0, size=(3, 32, 32)), requires_grad=True)
    state = T.AdamState([x])

    best_loss = np.inf
    best_image = x.data.copy()
    best_scores = None
    loss_trace: list[float] = []
    min_trace: list[float] = []
    for _ in range(config.iterations):
        scores_t, scores = _scores_graph(encoder, x, txt_unit)
        loss_val, idx = extremum_loss(scores)
        loss_trace.append(loss_val)
        min_trace.append(-loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best_image = x.data.copy()
            best_scores = scores
        worst = T.gather(T.reshape(scores_t, (len(prompts),)), [idx])
        T.backward(T.neg(T.tsum(worst)))
        T.adam_step(
            [x], [x.grad], state, config.lr, config.beta1, config.beta2, config.eps_adam
        )
        T.zero_grads([x])
        np.clip(x.data, 0.0, 1.0, out=x.data)

    return MasterPrint(
        image=best_image,
        scores=dict(zip(prompts.captions, best_scores.tolist())),
        loss_trace=loss_trace,
        min_score_trace=min_trace,
        config_hash=config.hash(),
        method="sgd",
        prompts=list(prompts.captions),
    )


def pgd_mine(
    scorer, prompts: PromptSet, config: AttackConfig, template: np.ndarray
) -> MasterPrint:
    """Sign-gradient steps in 0..255 space, clipped to the template's
    L-inf epsilon ball and the valid pixel range after every step."""
    _require_gradients(scorer)
    if config.method != "pgd":
        raise ConfigError("pgd_mine requires config.method == 'pgd'")
    config.validate()
    if template.shape != (3, 32, 32):
        raise ConfigError(f"template must be (3,32,32), got {template.shape}")
    encoder = scorer.encoder
    txt_unit = encoder.unit_text_embeddings(list(prompts.captions))

    x_orig = np.rint(np.clip(template, 0.0, 1.0) * 255.0)
    lo = np.maximum(x_orig - config.epsilon, 0.0)
    hi = np.minimum(x_orig + config.epsilon, 255.0)
    x = x_orig.copy()

    best_loss = np.inf
    best_image = x.copy()
    best_scores = None
    loss_trace: list[float] = []
    min_trace: list[float] = []
    for _ in range(config.iterations):
        xt = Tensor(x / 255.0, requires_grad=True)
        scores_t, scores = _scores_graph(encoder, xt, txt_unit)
        loss_val, idx = extremum_loss(scores)
        loss_trace.append(loss_val)
        min_trace.append(-loss_val)
        if loss_val < best_loss:
            best_loss = loss_val
            best_image = x.copy()
            best_scores = scores
        worst = T.gather(T.reshape(scores_t, (len(prompts),)), [idx])
        T.backward(T.neg(T.tsum(worst)))
        x = np.clip(x - config.alpha * np.sign(xt.grad), lo, hi)

    return MasterPrint(
        image=best_image / 255.0,
        scores=dict(zip(prompts.captions, best_scores.tolist())),
        loss_trace=loss_trace,
        min_score_trace=min_trace,
        config_hash=config.hash(),
        method="pgd",
        prompts=list(prompts.captions),
    )


def pgd_mine_batch(
    encoder,
    templates: np.ndarray,
    prompt_indices: np.ndarray,
    all_captions: list[str],
    iterations: int,
    alpha: int = 1,
    epsilon: int = 15,
) -> np.ndarray:
    """Mine one PGD print per template in a single batched loop.

    ``prompt_indices`` is (N, P): each row selects that template's targeted
    captions from ``all_captions``. Returns images in [0,1]. Equivalent to N
    independent pgd_mine runs because per-image losses do not interact.
    """
    n = templates.shape[0]
    txt_unit = encoder.unit_text_embeddings(all_captions)
    x_orig = np.rint(np.clip(templates, 0.0, 1.0) * 255.0)
    lo = np.maximum(x_orig - epsilon, 0.0)
    hi = np.minimum(x_orig + epsilon, 255.0)
    x = x_orig.copy()
    k = len(all_captions)
    rows = np.arange(n)

    best_loss = np.full(n, np.inf)
    best_x = x.copy()
    for _ in range(iterations):
        xt = Tensor(x / 255.0, requires_grad=True)
        emb = encoder._unit(encoder.embed_images_t(xt))
        scores_t = emb @ Tensor._wrap(txt_unit.T, False)
        allowed = scores_t.data[rows[:, None], prompt_indices]
        worst_col = prompt_indices[rows, allowed.argmin(axis=1)]
        losses = -allowed.min(axis=1)
        improved = losses < best_loss
        best_loss = np.where(improved, losses, best_loss)
        best_x[improved] = x[improved]
        flat = T.gather(T.reshape(scores_t, (n * k,)), rows * k + worst_col)
        T.backward(T.neg(T.tsum(flat)))
        x = np.clip(x - alpha * np.sign(xt.grad), lo, hi)

    return best_x / 255.0
