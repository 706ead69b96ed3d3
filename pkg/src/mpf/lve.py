"""Black-box mining: CMA-ES over the VAE decoder's latent space.

Each generation asks the strategy for latent candidates, decodes them to
images, scores every image against every targeted caption through the scorer
bridge, and feeds back the extremum loss (negated worst-caption similarity)
as fitness. Gradients are never required, so any scorer backend works.
"""

from __future__ import annotations

import base64
from pathlib import Path

import numpy as np

from .attacks import MasterPrint, PromptSet, extremum_loss
from .cma import CmaState
from .errors import BridgeError
from .formats import read_json, tsr_bytes, tsr_from_bytes, write_json
from .vae import LATENT_DIM, TinyVae


class LveMiner:
    """Incremental LVE run; one :meth:`step` advances a single generation."""

    def __init__(
        self,
        scorer,
        prompts: PromptSet,
        vae: TinyVae,
        seed: int = 0,
        sigma0: float = 1.0,
        popsize: int | None = None,
        init_mean: np.ndarray | None = None,
    ):
        self.scorer = scorer
        self.prompts = prompts
        self.vae = vae
        rng = np.random.Generator(np.random.PCG64(seed))
        mean0 = rng.standard_normal(LATENT_DIM) if init_mean is None else np.asarray(init_mean)
        self.state = CmaState(mean0, sigma=sigma0, seed=seed + 1, popsize=popsize)
        self.best_loss = np.inf
        self.best_image: np.ndarray | None = None
        self.best_latent: np.ndarray | None = None
        self.best_scores: np.ndarray | None = None
        self.best_generation = -1
        self.loss_trace: list[float] = []

    def step(self) -> float:
        """One ask/decode/score/tell generation; returns its best loss."""
        candidates = self.state.ask()
        images = self.vae.decode(candidates)
        captions = list(self.prompts.captions)
        try:
            sims = self.scorer.score_batch(images, captions)
        except BridgeError:
            self.scorer.reset()
            sims = self.scorer.score_batch(images, captions)
        fitnesses = -sims.min(axis=1)
        self.state.tell(candidates, fitnesses)
        gen_best = int(np.argmin(fitnesses))
        gen_loss = float(fitnesses[gen_best])
        if gen_loss < self.best_loss:
            self.best_loss = gen_loss
            self.best_image = images[gen_best].copy()
            self.best_latent = candidates[gen_best].copy()
            self.best_scores = sims[gen_best].copy()
            self.best_generation = self.state.generation - 1
        self.loss_trace.append(gen_loss)
        return gen_loss

    # -- snapshot / resume -----------------------------------------------------

    def snapshot_dict(self) -> dict:
        return {
            "cma": self.state.to_dict(),
            "prompts": list(self.prompts.captions),
            "best_loss": None if self.best_image is None else self.best_loss,
            "best_generation": self.best_generation,
            "best_image": (
                None
                if self.best_image is None
                else base64.b64encode(tsr_bytes(self.best_image)).decode("ascii")
            ),
            "best_latent": (
                None
                if self.best_latent is None
                else base64.b64encode(tsr_bytes(self.best_latent)).decode("ascii")
            ),
            "best_scores": (
                None
                if self.best_scores is None
                else base64.b64encode(tsr_bytes(self.best_scores)).decode("ascii")
            ),
            "loss_trace": self.loss_trace,
        }

    def save_snapshot(self, path) -> None:
        write_json(path, self.snapshot_dict())

    def restore(self, snap: dict) -> None:
        self.state = CmaState.from_dict(snap["cma"])
        self.loss_trace = list(snap["loss_trace"])
        self.best_generation = snap["best_generation"]
        if snap["best_image"] is not None:
            self.best_loss = snap["best_loss"]
            self.best_image = tsr_from_bytes(base64.b64decode(snap["best_image"]))
            self.best_latent = tsr_from_bytes(base64.b64decode(snap["best_latent"]))
            self.best_scores = tsr_from_bytes(base64.b64decode(snap["best_scores"]))

    def result(self, config_hash: str) -> MasterPrint:
        if self.best_image is None:
            raise BridgeError("no generation completed")
        return MasterPrint(
            image=self.best_image,
            scores=dict(zip(self.prompts.captions, self.best_scores.tolist())),
            loss_trace=self.loss_trace,
            min_score_trace=[-v for v in self.loss_trace],
            config_hash=config_hash,
            method="lve",
            prompts=list(self.prompts.captions),
        )


def lve_mine(
    scorer,
    prompts: PromptSet,
    vae: TinyVae,
    iterations: int = 2000,
    seed: int = 0,
    sigma0: float = 1.0,
    popsize: int | None = None,
    stagnation_window: int = 200,
    snapshot_path=None,
    resume_from=None,
    config_hash: str = "",
) -> MasterPrint:
    """Run up to ``iterations`` generations, stopping early once the best
    loss has not improved for ``stagnation_window`` generations. A failed
    generation is retried once; a second bridge failure writes a resumable
    snapshot (when a path is given) and re-raises."""
    miner = LveMiner(scorer, prompts, vae, seed=seed, sigma0=sigma0, popsize=popsize)
    if resume_from is not None:
        miner.restore(read_json(resume_from))
    since_improvement = 0
    while len(miner.loss_trace) < iterations:
        prev_best = miner.best_loss
        try:
            miner.step()
        except BridgeError:
            if snapshot_path is not None:
                miner.save_snapshot(snapshot_path)
            raise
        if miner.best_loss < prev_best:
            since_improvement = 0
        else:
            since_improvement += 1
            if stagnation_window and since_improvement >= stagnation_window:
                break
    if snapshot_path is not None:
        miner.save_snapshot(snapshot_path)
    return miner.result(config_hash)
