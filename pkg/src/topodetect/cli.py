"""Command-line interface: ``topodetect <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 I/O or file-format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import LI_WYATT_DEFAULTS, score_jacdet, score_li_wyatt
from .detection import ControlSet, atlas_mean, inner_means, score_L_sym, score_Q
from .evaluation import bootstrap_auc, compute_roc, registration_metrics, warp_labels
from .io import (
    ConfigError,
    TensorFormatError,
    file_digest,
    load_config,
    load_image,
    read_json,
    read_tensor,
    write_json,
    write_pgm,
    write_png,
    write_roc_csv,
    write_tensor,
    write_trace_csv,
)
from .plotting import heatmap_overlay, plot_elbo_trace, plot_roc
from .prior import DegenerateBatchError, PriorParams
from .registration import RegistrationConfig, RegistrationError, register
from .synth import SynthSpec, generate_pairs, generate_population

logger = logging.getLogger("topodetect")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".tcd", ".pgm", ".png")
CACHE_FORMAT = "topodetect-inner-cache/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Run:
    """Collects outputs of one command and writes its manifest last."""

    def __init__(self, args, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = {"tool": "topodetect", "version": __version__, "command": args.command,
                         "argv": list(args.argv), "cwd": os.getcwd(), "outputs": []}

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, path: Path) -> Path:
        self.manifest["outputs"].append(str(Path(path).relative_to(self.out)))
        return path

    def tensor(self, arr, *parts) -> Path:
        return self.add(write_tensor(self.path(*parts), arr))

    def finish(self):
        missing = [p for p in self.manifest["outputs"] if not (self.out / p).exists()]
        if missing:
            raise OSError(f"outputs missing after run: {missing}")
        write_json(self.out / "manifest.json", self.manifest)


def _config(args) -> RegistrationConfig:
    cfg = load_config(args.config, RegistrationConfig) if getattr(args, "config", None) else RegistrationConfig()
    if getattr(args, "seed", None) is not None:
        cfg = RegistrationConfig(**{**cfg.to_dict(), "seed": args.seed})
    return cfg


def _image(path) -> np.ndarray:
    try:
        return load_image(path)
    except ValueError as exc:
        if isinstance(exc, TensorFormatError):
            raise
        raise UsageError(str(exc)) from None


def _features(path):
    return None if path is None else read_tensor(path)


def _list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images in {d}")
    return files


def _pairs(args) -> list[tuple[str, Path, Path]]:
    pairs = []
    for i, (a, b) in enumerate(args.pair or []):
        pairs.append((f"pair_{i:03d}", Path(a), Path(b)))
    if getattr(args, "from_synth", None):
        root = Path(args.from_synth) / "pairs"
        for src in sorted(root.glob("pair_*_I.tcd")):
            name = src.name[: -len("_I.tcd")]
            pairs.append((name, src, root / f"{name}_J.tcd"))
    if not pairs:
        raise UsageError("no image pairs given (use --pair MOVING FIXED or --from-synth DIR)")
    return pairs


def cmd_synth(args) -> None:
    spec = load_config(args.spec, SynthSpec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec = SynthSpec(**{**spec.to_dict(), "seed": args.seed})
    run = Run(args, Path(args.out))
    run.manifest["spec"] = spec.to_dict()
    run.manifest["seed"] = spec.seed
    for i, p in enumerate(generate_pairs(spec, args.count)):
        name = f"pair_{i:03d}"
        run.tensor(p.I, "pairs", f"{name}_I.tcd")
        run.tensor(p.J, "pairs", f"{name}_J.tcd")
        run.tensor(p.true_field, "pairs", f"{name}_field.tcd")
        run.tensor(p.mask.astype(np.float64), "masks", f"{name}.tcd")
        run.add(write_pgm(run.path("previews", f"{name}_I.pgm"), p.I))
        run.add(write_pgm(run.path("previews", f"{name}_J.pgm"), p.J))
        run.add(write_pgm(run.path("previews", f"{name}_mask.pgm"), p.mask.astype(np.float64)))
    if args.controls:
        pop = generate_population(spec, args.controls, changed=args.count)
        for img, name in pop.controls:
            run.tensor(img, "controls", f"{name}.tcd")
        for img, mask, name in pop.changed:
            run.tensor(img, "targets", f"{name}.tcd")
            run.tensor(mask.astype(np.float64), "target_masks", f"{name}.tcd")
        run.tensor(pop.base, "atlas.tcd")
    run.finish()


def cmd_register(args) -> None:
    cfg = _config(args)
    I = _image(args.moving)
    J = _image(args.fixed)
    prior = PriorParams(decay=cfg.decay)
    res = register(I, J, _features(args.features_moving), _features(args.features_fixed), cfg, prior)
    run = Run(args, Path(args.out))
    run.tensor(res.field, "field.tcd")
    run.tensor(res.q.mu, "mu.tcd")
    run.tensor(res.q.log_v, "log_v.tcd")
    from .grid import warp

    run.tensor(warp(I, res.field), "warped.tcd")
    run.add(write_trace_csv(run.path("elbo.csv"), res.elbo_trace))
    run.add(plot_elbo_trace(res.elbo_trace, run.path("elbo.png")))
    run.manifest.update(config=cfg.to_dict(), seed=cfg.seed, prior=res.prior.to_dict(),
                        noise=res.noise.to_dict(), elbo_traces={"moving->fixed": res.elbo_trace.tolist()})
    run.finish()


def cmd_detect(args) -> None:
    cfg = _config(args)
    prior = PriorParams(decay=cfg.decay)
    run = Run(args, Path(args.out))
    traces, pair_info = {}, {}
    for name, a, b in _pairs(args):
        I, J = _image(a), _image(b)
        res = score_L_sym(I, J, cfg=cfg, prior=prior)
        run.tensor(res.score, "scores", f"{name}.tcd")
        run.tensor(res.forward.field, "fields", f"{name}.tcd")
        run.add(write_png(run.path("heatmaps", f"{name}.png"), heatmap_overlay(res.score, J)))
        traces[name] = {"forward": res.forward.elbo_trace.tolist(), "backward": res.backward.elbo_trace.tolist()}
        pair_info[name] = {"moving": str(a), "fixed": str(b), "prior_forward": res.forward.prior.to_dict(),
                           "prior_backward": res.backward.prior.to_dict(),
                           "noise_forward": res.forward.noise.to_dict(),
                           "noise_backward": res.backward.noise.to_dict()}
        logger.info("%s: mean L_sym %.4f", name, float(res.score.mean()))
    run.manifest.update(config=cfg.to_dict(), seed=cfg.seed, prior=prior.to_dict(), pairs=pair_info,
                        elbo_traces=traces)
    run.finish()


def cmd_baseline(args) -> None:
    cfg = _config(args)
    prior = PriorParams(decay=cfg.decay)
    run = Run(args, Path(args.out))
    params = {"method": args.method}
    if args.method == "li-wyatt":
        params.update(sigma=args.sigma, K=args.K)
    for name, a, b in _pairs(args):
        I, J = _image(a), _image(b)
        field_path = Path(args.fields) / f"{name}.tcd" if args.fields else None
        if field_path is not None and field_path.exists():
            field = read_tensor(field_path)
        else:
            field = register(I, J, cfg=cfg, prior=prior).field
        if args.method == "li-wyatt":
            score = score_li_wyatt(I, J, field, sigma=args.sigma, K=args.K)
        else:
            score = score_jacdet(field)
        run.tensor(score, "scores", f"{name}.tcd")
    run.manifest.update(config=cfg.to_dict(), seed=cfg.seed, baseline=params)
    run.finish()


def _control_set(directory) -> tuple[ControlSet, list[Path]]:
    files = _list_images(directory)
    return ControlSet([(_image(p), None, p.stem) for p in files]), files


def _load_cache(index_path: Path, controls: ControlSet, files, cfg: RegistrationConfig):
    if not index_path.exists():
        return None
    index = read_json(index_path)
    if index.get("format") != CACHE_FORMAT or index.get("config") != cfg.to_dict():
        return None
    entries = index.get("controls", {})
    digests = {p.stem: file_digest(p) for p in files}
    if set(entries) != set(digests) or any(entries[k]["source"] != digests[k] for k in digests):
        return None
    return {k: read_tensor(index_path.parent / entries[k]["map"]) for k in controls.ids()}


def _inner_cache(index_path: Path, controls: ControlSet, files, cfg, prior) -> dict:
    cache = _load_cache(index_path, controls, files, cfg)
    if cache is not None:
        logger.info("using inner-expectation cache %s", index_path)
        return cache
    maps = inner_means(controls, cfg, prior)
    map_dir = index_path.parent / f"{index_path.stem}_maps"
    map_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for p in files:
        write_tensor(map_dir / f"{p.stem}.tcd", maps[p.stem])
        entries[p.stem] = {"source": file_digest(p), "map": str((map_dir / f"{p.stem}.tcd").relative_to(index_path.parent))}
    write_json(index_path, {"format": CACHE_FORMAT, "config": cfg.to_dict(), "controls": entries})
    # reload so warm and cold runs consume identical float32 maps
    return _load_cache(index_path, controls, files, cfg)


def cmd_outlier(args) -> None:
    cfg = _config(args)
    prior = PriorParams(decay=cfg.decay)
    controls, files = _control_set(args.controls)
    if len(controls) < 2:
        raise UsageError("outlier scoring needs at least 2 controls")
    J = _image(args.target)
    index_path = Path(args.cache)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    cache = _inner_cache(index_path, controls, files, cfg, prior)
    res = score_Q(J, controls, cfg=cfg, prior=prior, cache=cache)
    run = Run(args, Path(args.out))
    run.tensor(res.Q, "Q.tcd")
    run.tensor(res.mean_lsym, "mean_lsym.tcd")
    run.add(write_png(run.path("Q.png"), heatmap_overlay(res.Q, J)))
    run.manifest.update(config=cfg.to_dict(), seed=cfg.seed, prior=prior.to_dict(), cache=str(index_path),
                        controls=controls.ids())
    run.finish()


def cmd_atlas(args) -> None:
    cfg = _config(args)
    prior = PriorParams(decay=cfg.decay)
    controls, files = _control_set(args.controls)
    if len(controls) < 2:
        raise UsageError("atlas aggregation needs at least 2 controls")
    atlas = _image(args.atlas)
    inner = _inner_cache(Path(args.cache), controls, files, cfg, prior) if args.cache else None
    mean_map = atlas_mean(controls, atlas, cfg=cfg, prior=prior, inner=inner)
    run = Run(args, Path(args.out))
    run.tensor(mean_map, "atlas_mean.tcd")
    run.add(write_png(run.path("atlas_mean.png"), heatmap_overlay(mean_map, atlas)))
    run.manifest.update(config=cfg.to_dict(), seed=cfg.seed, prior=prior.to_dict(), controls=controls.ids())
    run.finish()


def cmd_eval(args) -> None:
    score_files = sorted(Path(args.scores).glob("*.tcd"))
    mask_files = sorted(Path(args.masks).glob("*.tcd"))
    if not score_files:
        raise FileNotFoundError(f"no score maps in {args.scores}")
    if len(score_files) != len(mask_files):
        raise UsageError(f"{len(score_files)} score maps but {len(mask_files)} masks")
    scores = {p.stem: read_tensor(p) for p in score_files}
    masks = {s.stem: read_tensor(m) > 0.5 for s, m in zip(score_files, mask_files)}
    roc = compute_roc(list(scores.values()), list(masks.values()))
    run = Run(args, Path(args.out))
    run.add(write_roc_csv(run.path("roc.csv"), roc.fpr, roc.tpr))
    run.add(plot_roc({Path(args.scores).parent.name or "scores": roc}, run.path("roc.png")))
    summary = {"auc": roc.auc, "pixels": int(sum(m.size for m in masks.values())),
               "positives": int(sum(m.sum() for m in masks.values()))}
    if args.bootstrap:
        if args.per_subject:
            index = read_json(args.per_subject)
            subjects = [(np.concatenate([scores[k].ravel() for k in keys]),
                         np.concatenate([masks[k].ravel() for k in keys])) for keys in index.values()]
        else:
            subjects = [(scores[k], masks[k]) for k in scores]
        boot = bootstrap_auc(subjects, args.bootstrap, args.seed)
        summary["bootstrap"] = {"mean": boot.mean, "stderr": boot.stderr, "resamples": boot.resamples,
                                "seed": args.seed}
    if args.seg_moving and args.seg_fixed and args.field:
        field = read_tensor(args.field)
        moving = np.rint(load_image(args.seg_moving)[0]).astype(np.int64)
        fixed = np.rint(load_image(args.seg_fixed)[0]).astype(np.int64)
        summary["registration"] = registration_metrics(warp_labels(moving, field), fixed, field)
    source = Path(args.scores).parent / "manifest.json"
    if source.exists():
        src = read_json(source)
        summary["source"] = {"command": src.get("command"), "baseline": src.get("baseline")}
    run.add(write_json(run.path("summary.json"), summary))
    run.manifest.update(summary=summary, seed=args.seed)
    run.finish()
    print(f"AUC {roc.auc:.4f}" + (f" bootstrap {summary['bootstrap']['mean']:.4f} +/- "
                                   f"{summary['bootstrap']['stderr']:.4f}" if "bootstrap" in summary else ""))


def cmd_replay(args) -> None:
    """Re-run a recorded command from its original working directory."""
    manifest = read_json(args.manifest)
    argv = list(manifest["argv"])
    if args.out:
        if "--out" not in argv:
            raise UsageError("manifest command has no --out to redirect")
        argv[argv.index("--out") + 1] = str(Path(args.out).resolve())
    cwd = manifest.get("cwd")
    here = os.getcwd()
    if cwd and Path(cwd).is_dir():
        os.chdir(cwd)
    try:
        code = main(argv)
    finally:
        os.chdir(here)
    if code:
        raise SystemExit(code)


def _add_pairs(p):
    p.add_argument("--pair", nargs=2, action="append", metavar=("MOVING", "FIXED"),
                   help="image pair; the score lives on FIXED's grid (repeatable)")
    p.add_argument("--from-synth", metavar="DIR", help="use all pairs emitted by `synth` into DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="topodetect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic pairs with change masks")
    p.add_argument("--spec", help="flat key = value synthesis spec")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--controls", type=int, default=0, help="also emit a control population of this size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="variationally register MOVING onto FIXED")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--features-moving")
    p.add_argument("--features-fixed")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("detect", help="symmetric change score for image pairs")
    _add_pairs(p)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("outlier", help="outlier score of a target against controls")
    p.add_argument("--target", required=True)
    p.add_argument("--controls", required=True)
    p.add_argument("--cache", required=True, help="inner-expectation cache index (JSON)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_outlier)

    p = sub.add_parser("atlas", help="mean control variability on an atlas grid")
    p.add_argument("--controls", required=True)
    p.add_argument("--atlas", required=True)
    p.add_argument("--cache")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_atlas)

    p = sub.add_parser("baseline", help="gradient-normalised residual (li-wyatt) or Jacobian-determinant baseline scores")
    p.add_argument("--method", choices=["li-wyatt", "jacdet"], required=True)
    _add_pairs(p)
    p.add_argument("--sigma", type=float, default=LI_WYATT_DEFAULTS["sigma"])
    p.add_argument("--K", type=float, default=LI_WYATT_DEFAULTS["K"])
    p.add_argument("--fields", help="directory of precomputed fields named like the pairs")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="pooled ROC/AUC with optional subject bootstrap")
    p.add_argument("--scores", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--per-subject", help="JSON mapping subject -> list of score names")
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seg-moving")
    p.add_argument("--seg-fixed")
    p.add_argument("--field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"topodetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TensorFormatError) as exc:
        print(f"topodetect: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RegistrationError, DegenerateBatchError, FloatingPointError) as exc:
        print(f"topodetect: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"topodetect: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
