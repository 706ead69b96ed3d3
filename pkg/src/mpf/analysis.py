"""Evaluation metrics: POI, score heatmaps, generalization grouping, and
occlusion maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DatasetManifest, related_prompts
from .errors import CapabilityError, CoverageError, ShapeError
from .formats import write_csv


def _matrix_fn(scorer, gapshift):
    if gapshift is None:
        return scorer.score_batch
    encoder = getattr(scorer, "encoder", None)
    if encoder is None:
        raise CapabilityError("gap-shifted scoring needs a local scorer")
    from .mitigation import shifted_score_matrix

    return lambda images, captions: shifted_score_matrix(
        encoder, gapshift, images, captions
    )


# ---------------------------------------------------------------------------
# percentage of outperformed images
# ---------------------------------------------------------------------------


@dataclass
class PoiReport:
    per_caption: dict[str, float]
    aggregate: float
    counts: dict[str, int]
    scorer_identity: str
    lam: float = 0.0

    def to_rows(self) -> list[list]:
        rows = [[c, self.counts[c], self.per_caption[c]] for c in self.per_caption]
        rows.append(["<aggregate>", sum(self.counts.values()), self.aggregate])
        return rows


def poi(
    print_image: np.ndarray,
    scorer,
    manifest: DatasetManifest,
    prompts,
    gapshift=None,
    split: str = "val",
) -> PoiReport:
    """Per caption: share of same-class split images scoring strictly below
    the print on their own caption. Ties count as not outperformed."""
    captions = list(getattr(prompts, "captions", prompts))
    score = _matrix_fn(scorer, gapshift)
    per_caption: dict[str, float] = {}
    counts: dict[str, int] = {}
    outperformed_total = 0
    total = 0
    for caption in captions:
        records = manifest.by_caption(caption, split)
        if not records:
            raise CoverageError(f"no {split} images for caption {caption!r}")
        images = np.stack([manifest.load_image(r) for r in records] + [print_image])
        col = score(images, [caption])[:, 0]
        class_scores, print_score = col[:-1], col[-1]
        outperformed = int((class_scores < print_score).sum())
        per_caption[caption] = 100.0 * outperformed / len(records)
        counts[caption] = len(records)
        outperformed_total += outperformed
        total += len(records)
    return PoiReport(
        per_caption=per_caption,
        aggregate=100.0 * outperformed_total / total,
        counts=counts,
        scorer_identity=getattr(scorer, "identity", "?"),
        lam=0.0 if gapshift is None else gapshift.lam,
    )


# ---------------------------------------------------------------------------
# score heatmap
# ---------------------------------------------------------------------------


def score_heatmap(
    scorer,
    images,
    captions: list[str],
    out_csv=None,
    image_ids: list[str] | None = None,
) -> np.ndarray:
    matrix = scorer.score_batch(images, captions)
    if out_csv is not None:
        ids = image_ids or [f"image-{i}" for i in range(len(images))]
        write_csv(
            out_csv,
            ["image"] + list(captions),
            [[ids[i]] + matrix[i].tolist() for i in range(len(images))],
        )
    return matrix


# ---------------------------------------------------------------------------
# generalization to related prompts
# ---------------------------------------------------------------------------


@dataclass
class GeneralizationReport:
    targeted_scores: dict[str, float]
    group_scores: dict[int, dict[str, float]]
    group_poi: dict[int, float]
    group_means: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        self.group_means = {
            k: (float(np.mean(list(v.values()))) if v else float("nan"))
            for k, v in self.group_scores.items()
        }

    def targeted_mean(self) -> float:
        return float(np.mean(list(self.targeted_scores.values())))


def untargeted_groups(targeted: list[str], dataset_captions: list[str]) -> dict[int, list[str]]:
    """Group untargeted captions by shared-attribute count: group k holds
    every caption related at exactly k attributes to at least one target."""
    targeted_set = set(targeted)
    available = set(dataset_captions) - targeted_set
    groups: dict[int, list[str]] = {}
    for k in range(4):
        members: dict[str, None] = {}
        for t in targeted:
            for c in related_prompts(t, k):
                if c in available:
                    members.setdefault(c, None)
        groups[k] = sorted(members)
    return groups


def generalization_eval(
    print_image: np.ndarray,
    scorer,
    manifest: DatasetManifest,
    targeted_prompts,
    split: str = "val",
    out_csv=None,
) -> GeneralizationReport:
    targeted = list(getattr(targeted_prompts, "captions", targeted_prompts))
    dataset_captions = manifest.captions()
    missing = [c for c in targeted if c not in dataset_captions]
    if missing:
        raise CoverageError(f"targeted prompts not in dataset: {missing}")
    groups = untargeted_groups(targeted, dataset_captions)

    all_captions = list(targeted)
    for k in range(4):
        all_captions += [c for c in groups[k] if c not in all_captions]
    row = scorer.score_batch([print_image], all_captions)[0]
    score_of = dict(zip(all_captions, row.tolist()))

    group_scores = {k: {c: score_of[c] for c in groups[k]} for k in range(4)}
    group_poi = {}
    for k in range(4):
        if groups[k]:
            report = poi(print_image, scorer, manifest, groups[k], split=split)
            group_poi[k] = report.aggregate
        else:
            group_poi[k] = float("nan")

    report = GeneralizationReport(
        targeted_scores={c: score_of[c] for c in targeted},
        group_scores=group_scores,
        group_poi=group_poi,
    )
    if out_csv is not None:
        rows = [["targeted", c, s, ""] for c, s in report.targeted_scores.items()]
        for k in range(4):
            rows += [[f"k={k}", c, s, ""] for c, s in group_scores[k].items()]
            rows.append([f"k={k}", "<group>", report.group_means[k], group_poi[k]])
        write_csv(out_csv, ["group", "caption", "score", "poi"], rows)
    return report


# ---------------------------------------------------------------------------
# occlusion maps
# ---------------------------------------------------------------------------


@dataclass
class OcclusionMap:
    delta: np.ndarray  # (captions, grid_y, grid_x)
    captions: list[str]
    window: int
    stride: int
    sigma: float
    base_scores: np.ndarray

    def to_rows(self) -> list[list]:
        rows = []
        for ci, caption in enumerate(self.captions):
            for gy in range(self.delta.shape[1]):
                for gx in range(self.delta.shape[2]):
                    rows.append([caption, gy, gx, float(self.delta[ci, gy, gx])])
        return rows


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at 3*sigma and renormalized,
    reflect boundary. Sub-pixel sigma degenerates to the identity."""
    radius = int(3.0 * sigma)
    if radius < 1:
        return image.copy()
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()

    def blur_axis(arr: np.ndarray, axis: int) -> np.ndarray:
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(arr, pad, mode="reflect")
        windows = np.lib.stride_tricks.sliding_window_view(
            padded, 2 * radius + 1, axis=axis
        )
        return windows @ kernel

    out = blur_axis(image, 1)
    return blur_axis(out, 2)


def occlusion_map(
    image: np.ndarray,
    scorer,
    captions: list[str],
    window: int = 8,
    stride: int = 2,
    sigma: float = 8.0,
    out_csv=None,
) -> OcclusionMap:
    """Score change when each sliding window is replaced by its blurred
    version: delta = occluded score - original score."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be (3,H,W), got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    if window > h or window > w:
        raise ShapeError(f"window {window} exceeds image side {h}x{w}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")

    blurred = gaussian_blur(image, sigma)
    gy = (h - window) // stride + 1
    gx = (w - window) // stride + 1
    occluded = []
    for iy in range(gy):
        for ix in range(gx):
            y0, x0 = iy * stride, ix * stride
            comp = image.copy()
            comp[:, y0 : y0 + window, x0 : x0 + window] = blurred[
                :, y0 : y0 + window, x0 : x0 + window
            ]
            occluded.append(comp)

    base = scorer.score_batch([image], captions)[0]
    occ = scorer.score_batch(occluded, captions)
    delta = (occ - base[None, :]).T.reshape(len(captions), gy, gx)
    result = OcclusionMap(
        delta=delta,
        captions=list(captions),
        window=window,
        stride=stride,
        sigma=sigma,
        base_scores=base,
    )
    if out_csv is not None:
        write_csv(out_csv, ["caption", "grid_y", "grid_x", "delta"], result.to_rows())
    return result
