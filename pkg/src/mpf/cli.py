"""Command-line entry point wiring all modules into reproducible runs.

Every subcommand resolves its full configuration (flags, optional ``--config``
JSON with unknown keys rejected, global seed), writes it next to its artifacts
together with a version string, and exits 0 on success, 1 on domain errors
(single machine-parseable JSON record on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, MpfError
from .formats import read_json, read_ppm, read_tsr, write_csv, write_json

SUBCOMMANDS = (
    "gen-data",
    "train-encoder",
    "train-vae",
    "mine",
    "evaluate",
    "occlusion",
    "mitigate-gap",
    "train-detector",
    "detect",
    "refine",
)


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"mpf-{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"mpf-{__version__}"


def prepare_run_dir(path, force: bool) -> Path:
    """Run directories are append-only; reuse needs --force."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(
            f"output directory {path} is not empty; pass --force to overwrite"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_config(out_dir, args: argparse.Namespace, command: str) -> dict:
    resolved = {
        k: v for k, v in vars(args).items() if k not in ("func", "config") and v is not None
    }
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in resolved.items()}
    resolved["command"] = command
    resolved["version"] = version_string()
    write_json(Path(out_dir) / "config.json", resolved)
    return resolved


def apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold ``--config file.json`` into defaults, rejecting unknown keys."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        parser.error("--config needs a file argument")
    cfg = read_json(argv[idx + 1])
    if not isinstance(cfg, dict):
        raise ConfigError("--config must hold a JSON object")
    known = {a.dest for a in parser._actions}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    parser.set_defaults(**cfg)
    return argv[:idx] + argv[idx + 2 :]


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        return read_ppm(path)
    return read_tsr(path)


def workers_from(args) -> int:
    if args.workers is not None:
        return args.workers
    return int(os.environ.get("MPF_WORKERS", "1"))


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import generate_dataset

    out = prepare_run_dir(args.out, args.force)
    manifest = generate_dataset(args.n_per_class, args.seed, out)
    write_run_config(out, args, "gen-data")
    print(f"wrote {len(manifest)} records to {out / 'manifest.ndjson'}")
    return 0


def cmd_train_encoder(args) -> int:
    from .data import DatasetManifest
    from .encoder import DualEncoder, train_contrastive

    out = prepare_run_dir(args.out, args.force)
    manifest = DatasetManifest.load(args.data)
    model = DualEncoder.init(args.seed)
    report = train_contrastive(
        model, manifest, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed,
    )
    model.save(out)
    write_run_config(out, args, "train-encoder")
    write_json(
        out / "train_report.json",
        {
            "val_retrieval": report.val_retrieval,
            "initial_loss": report.initial_loss,
            "loss_trace": report.loss_trace,
        },
    )
    print(f"val retrieval accuracy: {report.val_retrieval:.4f}")
    return 0


def cmd_train_vae(args) -> int:
    from .data import DatasetManifest
    from .vae import vae_train

    out = prepare_run_dir(args.out, args.force)
    manifest = DatasetManifest.load(args.data)
    vae, report = vae_train(
        manifest, epochs=args.epochs, seed=args.seed, lr=args.lr,
        kl_weight=args.kl_weight,
    )
    vae.save(out)
    write_run_config(out, args, "train-vae")
    write_json(
        out / "train_report.json",
        {"val_recon_error": report.val_recon_error, "loss_trace": report.loss_trace},
    )
    print(f"val reconstruction error: {report.val_recon_error:.4f}")
    return 0


def cmd_mine(args) -> int:
    from .attacks import AttackConfig, PromptSet, pgd_mine, sgd_mine
    from .bridge import make_scorer
    from .lve import lve_mine
    from .vae import TinyVae

    out = prepare_run_dir(args.out, args.force)
    prompts = PromptSet.from_file(args.prompts)
    scorer = make_scorer(args.scorer, workers=workers_from(args))
    try:
        if args.method in ("sgd", "pgd"):
            config = AttackConfig(
                method=args.method, iterations=args.iters, lr=args.lr,
                alpha=args.alpha, epsilon=args.eps, seed=args.seed,
            )
            if args.method == "sgd":
                print_ = sgd_mine(scorer, prompts, config)
            else:
                if args.template is None:
                    raise ConfigError("pgd mining needs --template")
                print_ = pgd_mine(scorer, prompts, config, load_image(args.template))
        elif args.method == "lve":
            if args.vae is None:
                raise ConfigError("lve mining needs --vae")
            vae = TinyVae.load(args.vae)
            config_hash = AttackConfig(method="sgd", seed=args.seed).hash()
            print_ = lve_mine(
                scorer, prompts, vae,
                iterations=args.iters, seed=args.seed, sigma0=args.sigma0,
                popsize=args.popsize, stagnation_window=args.stagnation,
                snapshot_path=out / "snapshot.json",
                resume_from=args.resume, config_hash=config_hash,
            )
        else:
            raise ConfigError(f"unknown mining method {args.method!r}")
    finally:
        scorer.close()
    resolved = write_run_config(out, args, "mine")
    print_.save(out, config=resolved)
    print(
        f"mined {args.method} print: min targeted score "
        f"{print_.min_targeted_score():.4f} over {len(prompts)} captions"
    )
    return 0


def cmd_evaluate(args) -> int:
    from .analysis import generalization_eval, poi, score_heatmap
    from .attacks import MasterPrint, PromptSet
    from .bridge import make_scorer
    from .data import DatasetManifest
    from .mitigation import GapShift

    out = prepare_run_dir(args.out, args.force)
    manifest = DatasetManifest.load(args.data)
    print_ = MasterPrint.load(args.print_dir)
    prompts = (
        PromptSet.from_file(args.prompts)
        if args.prompts
        else PromptSet.from_list(print_.prompts)
    )
    gapshift = GapShift.load(args.gapshift) if args.gapshift else None
    scorer = make_scorer(args.scorer, workers=workers_from(args))
    try:
        report = poi(
            print_.image, scorer, manifest, prompts, gapshift=gapshift,
            split=args.split,
        )
        write_csv(out / "poi.csv", ["caption", "images", "poi"], report.to_rows())
        if args.heatmap:
            records = manifest.split(args.split)
            images = [manifest.load_image(r) for r in records]
            ids = [r["id"] for r in records]
            score_heatmap(
                scorer, images + [print_.image], list(prompts.captions),
                out_csv=out / "heatmap.csv", image_ids=ids + ["masterprint"],
            )
        if args.generalization:
            gen = generalization_eval(
                print_.image, scorer, manifest, prompts, split=args.split,
                out_csv=out / "generalization.csv",
            )
            print(
                "generalization means: targeted "
                f"{gen.targeted_mean():.4f}, "
                + ", ".join(f"k={k}: {gen.group_means[k]:.4f}" for k in range(4))
            )
    finally:
        scorer.close()
    write_run_config(out, args, "evaluate")
    print(f"POI aggregate: {report.aggregate:.2f}% (lambda={report.lam})")
    return 0


def cmd_occlusion(args) -> int:
    from .analysis import occlusion_map
    from .attacks import PromptSet
    from .bridge import make_scorer

    out = prepare_run_dir(args.out, args.force)
    prompts = PromptSet.from_file(args.captions)
    scorer = make_scorer(args.scorer, workers=workers_from(args))
    try:
        result = occlusion_map(
            load_image(args.image), scorer, list(prompts.captions),
            window=args.window, stride=args.stride, sigma=args.sigma,
            out_csv=out / "occlusion.csv",
        )
    finally:
        scorer.close()
    write_run_config(out, args, "occlusion")
    grid = result.delta.shape
    print(f"occlusion grid {grid[1]}x{grid[2]} over {grid[0]} captions")
    return 0


def cmd_mitigate_gap(args) -> int:
    from .data import DatasetManifest
    from .encoder import DualEncoder
    from .mitigation import compute_gap_vector

    out = prepare_run_dir(args.out, args.force)
    manifest = DatasetManifest.load(args.data)
    model = DualEncoder.load(args.checkpoint)
    gapshift = compute_gap_vector(model, manifest, split=args.split, lam=args.lam)
    gapshift.save(out)
    write_run_config(out, args, "mitigate-gap")
    print(
        f"gap vector norm {float(np.linalg.norm(gapshift.delta)):.4f}, "
        f"lambda {gapshift.lam}"
    )
    return 0


def cmd_train_detector(args) -> int:
    from .data import DatasetManifest
    from .encoder import DualEncoder
    from .mitigation import build_detector_corpus, train_detector

    out = prepare_run_dir(args.out, args.force)
    manifest = DatasetManifest.load(args.data)
    encoder = DualEncoder.load(args.checkpoint)
    corpus = build_detector_corpus(
        encoder, manifest, out / "corpus", n=args.n, pgd_iters=args.pgd_iters,
        seed=args.seed, epsilon=args.eps, alpha=args.alpha,
    )
    detector, test_acc = train_detector(
        corpus, epochs=args.epochs, lr=args.lr, seed=args.seed,
    )
    detector.save(out / "detector")
    write_run_config(out, args, "train-detector")
    write_json(out / "detector_report.json", {"test_accuracy": test_acc})
    print(f"detector test accuracy: {test_acc:.4f}")
    return 0


def cmd_detect(args) -> int:
    from .mitigation import DetectorModel, detect

    detector = DetectorModel.load(args.detector)
    label, confidence = detect(detector, load_image(args.image))
    print(json.dumps({"label": label, "confidence": confidence}))
    return 0


def cmd_refine(args) -> int:
    from .attacks import MasterPrint, PromptSet
    from .data import DatasetManifest
    from .encoder import DualEncoder
    from .lve import LveMiner
    from .mitigation import refine_offmanifold
    from .vae import TinyVae

    out = prepare_run_dir(args.out, args.force)
    manifest = DatasetManifest.load(args.data)
    model = DualEncoder.load(args.checkpoint)
    vae = TinyVae.load(args.vae)
    prompts = PromptSet.from_file(args.prompts)
    init_latent = None
    if args.init_snapshot:
        snap = read_json(args.init_snapshot)
        if snap.get("best_latent"):
            import base64

            from .formats import tsr_from_bytes

            init_latent = tsr_from_bytes(base64.b64decode(snap["best_latent"]))
    refined, adversary = refine_offmanifold(
        model, manifest, vae, prompts, epochs=args.epochs, seed=args.seed,
        lr=args.lr, init_latent=init_latent,
    )
    refined.save(out / "checkpoint")
    adversary.save(out / "adversary")
    write_run_config(out, args, "refine")
    print(
        f"refined checkpoint written; adversary min targeted score "
        f"{adversary.min_targeted_score():.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpf",
        description="Mine, evaluate and mitigate fooling master images on a "
        "toy contrastive dual encoder.",
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON file of defaults (unknown keys rejected)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="allow non-empty --out")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate the synthetic caption-image corpus")
    common(p)
    p.add_argument("--n-per-class", type=int, default=10, dest="n_per_class")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-encoder", help="train the contrastive dual encoder")
    common(p)
    p.add_argument("--data", required=True, help="manifest.ndjson path")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32, dest="batch_size")
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("train-vae", help="train the tiny VAE used by LVE mining")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--kl-weight", type=float, default=0.05, dest="kl_weight")
    p.set_defaults(func=cmd_train_vae)

    p = sub.add_parser("mine", help="mine a fooling master image")
    common(p)
    p.add_argument("--method", choices=["sgd", "pgd", "lve"], required=True)
    p.add_argument("--scorer", required=True, help="local:<ckpt-dir> or exec:<command>")
    p.add_argument("--prompts", required=True, help="file with one caption per line")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--eps", type=int, default=15)
    p.add_argument("--template", help="template image for pgd (.tsr or .ppm)")
    p.add_argument("--vae", help="VAE checkpoint dir for lve")
    p.add_argument("--sigma0", type=float, default=1.0)
    p.add_argument("--popsize", type=int, default=None)
    p.add_argument("--stagnation", type=int, default=200)
    p.add_argument("--resume", help="resume lve from a snapshot file")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("evaluate", help="POI / heatmap / generalization reports")
    common(p)
    p.add_argument("--print", required=True, dest="print_dir", help="mine run dir")
    p.add_argument("--scorer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", help="defaults to the print's own prompts")
    p.add_argument("--split", default="val")
    p.add_argument("--gapshift", help="gap-shift dir from mitigate-gap")
    p.add_argument("--heatmap", action="store_true")
    p.add_argument("--generalization", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("occlusion", help="sliding-window blur occlusion map")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--scorer", required=True)
    p.add_argument("--captions", required=True, help="prompts file")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--sigma", type=float, default=8.0)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_occlusion)

    p = sub.add_parser("mitigate-gap", help="compute the modality gap vector")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--lambda", type=float, default=0.25, dest="lam")
    p.set_defaults(func=cmd_mitigate_gap)

    p = sub.add_parser("train-detector", help="mine a corpus and train the detector")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=1500, help="number of templates")
    p.add_argument("--pgd-iters", type=int, default=100, dest="pgd_iters")
    p.add_argument("--eps", type=int, default=15)
    p.add_argument("--alpha", type=int, default=1)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("detect", help="classify one image as clean/adversarial")
    p.add_argument("--config", help="JSON file of defaults (unknown keys rejected)")
    p.add_argument("--detector", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("refine", help="off-manifold-token adversarial refinement")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument(
        "--init-snapshot",
        dest="init_snapshot",
        help="lve snapshot whose best latent seeds the co-evolved adversary",
    )
    p.set_defaults(func=cmd_refine)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in SUBCOMMANDS:
            sub_parser = None
            for action in parser._actions:
                if isinstance(action, argparse._SubParsersAction):
                    sub_parser = action.choices[argv[0]]
            argv = [argv[0]] + apply_config_file(sub_parser, argv[1:])
        args = parser.parse_args(argv)
        return args.func(args)
    except MpfError as e:
        record = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
