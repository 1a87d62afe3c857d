"""Command-line pipeline: synthesize scenes, train the head, infer, evaluate.

Subcommands share one JSON config file (sections ``synth``, ``train``,
``infer``, ``eval`` plus a top-level ``seed``). Diagnostics go to stderr;
machine-readable artifacts go to files. Every JSON artifact embeds the
effective seed and a digest of the effective config, and all writes are
atomic (temp file, then rename), so interrupted runs never leave partial
artifacts behind.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric error,
5 shape/dim error, 6 empty input.
"""

from __future__ import annotations

import argparse
import colorsys
import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .cluster_probe import (
    Centroids,
    ConfusionMatrix,
    assign_clusters,
    evaluate,
    greedy_match,
    hungarian_match,
    kmeans_cosine,
    pad_square,
    upsample_mask,
    accumulate_confusion,
)
from .correspondence import LossTerms
from .dataset import (
    Palette,
    PaletteEntry,
    deepglobe_palette,
    load_palette,
    load_tile,
    mask_from_palette,
    mask_resize_nearest,
    palette_to_dict,
    render_mask,
)
from .errors import (
    ConfigError,
    CorrsegError,
    DataError,
    DecodeError,
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    InvariantError,
    ManifestError,
    NumericError,
    ParameterError,
    ShapeError,
    UndefinedMetricsError,
    WriteError,
)
from .feature_io import (
    SceneSpec,
    generate_synthetic_scene,
    random_rect_layout,
    read_feature_map,
    stripe_layout,
    write_feature_map,
)
from .seg_head import (
    PairMix,
    TrainConfig,
    head_forward,
    init_adam_state,
    init_head,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

_EXIT_OK = 0
_EXIT_CONFIG = 2
_EXIT_IO = 3
_EXIT_NUMERIC = 4
_EXIT_SHAPE = 5
_EXIT_EMPTY = 6

# most-derived classes first; OSError last so subclasses of CorrsegError win
_EXIT_BY_ERROR: tuple[tuple[type, int], ...] = (
    (ConfigError, _EXIT_CONFIG),
    (ParameterError, _EXIT_CONFIG),
    (WriteError, _EXIT_IO),
    (ManifestError, _EXIT_IO),
    (DecodeError, _EXIT_IO),
    (DataError, _EXIT_IO),
    (FormatError, _EXIT_IO),
    (NumericError, _EXIT_NUMERIC),
    (DegenerateInputError, _EXIT_NUMERIC),
    (ShapeError, _EXIT_SHAPE),
    (InvariantError, _EXIT_SHAPE),
    (EmptyInputError, _EXIT_EMPTY),
    (UndefinedMetricsError, _EXIT_EMPTY),
    (OSError, _EXIT_IO),
)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(command: str, config: dict, seed: int) -> str:
    """Short fingerprint of everything that determines a run's outputs."""
    blob = _canonical_json({"command": command, "config": config, "seed": seed})
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _atomic(path: Path, write_fn: Callable[[Path], None]) -> None:
    """Write through a sibling temp file so readers never see partial data."""
    tmp = path.with_name(path.name + ".tmp")
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp.exists():
            tmp.unlink()


def _write_json(path: Path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic(path, lambda tmp: tmp.write_text(text))


def _write_png(path: Path, tile) -> None:
    from PIL import Image

    img = Image.fromarray(tile.pixels, mode="RGB")
    _atomic(path, lambda tmp: img.save(tmp, format="PNG"))


def load_config(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def _section(config: dict, name: str) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise ConfigError(f'config section "{name}" must be an object')
    return section


def _get(section: dict, key: str, default=None, required: bool = False):
    if required and key not in section:
        raise ConfigError(f'config is missing required key "{key}"')
    return section.get(key, default)


def wheel_palette(k: int) -> Palette:
    """k visually distinct colors, evenly spaced in hue."""
    entries = []
    colors: set[tuple[int, int, int]] = set()
    for i in range(k):
        r, g, b = colorsys.hsv_to_rgb(i / k, 1.0, 1.0 if i % 2 == 0 else 0.6)
        rgb = (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))
        if rgb in colors:
            raise ParameterError(f"cannot build {k} distinct palette colors")
        colors.add(rgb)
        entries.append(PaletteEntry(i, f"class_{i}", rgb))
    return Palette(entries=tuple(entries), ignore_id=None)


def _resolve_palette(value, default: Palette | None = None) -> Palette:
    if value is None:
        if default is None:
            raise ConfigError("no palette configured and no default applies")
        return default
    if value == "deepglobe":
        return deepglobe_palette()
    return load_palette(value)


def _list_features(section: dict, default_glob: str) -> list[Path]:
    feat_dir = Path(_get(section, "features_dir", required=True))
    pattern = _get(section, "include", default_glob)
    if not feat_dir.is_dir():
        raise ManifestError(f"features_dir {feat_dir} is not a directory")
    files = sorted(feat_dir.glob(pattern))
    if not files:
        raise EmptyInputError(f"no feature files match {pattern!r} in {feat_dir}")
    return files


def cmd_synth(config: dict, seed: int, out_override: str | None) -> int:
    """Generate labeled synthetic scenes: .fmap features plus PNG masks."""
    section = _section(config, "synth")
    n_train = int(_get(section, "n_train", 200))
    n_test = int(_get(section, "n_test", 5))
    hp = int(_get(section, "hp", 32))
    wp = int(_get(section, "wp", 32))
    k = int(_get(section, "k", 5))
    c = int(_get(section, "c", 16))
    noise_sigma = float(_get(section, "noise_sigma", 0.1))
    layout_kind = _get(section, "layout", "rects")
    n_regions = int(_get(section, "n_regions", max(k, 8)))
    if layout_kind not in ("rects", "stripes"):
        raise ConfigError(f'synth.layout must be "rects" or "stripes", got {layout_kind!r}')
    if n_train < 0 or n_test < 0 or n_train + n_test == 0:
        raise ConfigError("synth needs a positive number of scenes")

    out_dir = Path(out_override or _get(section, "out_dir", "synth_out"))
    feat_dir = out_dir / "features"
    gt_dir = out_dir / "gt"
    feat_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)

    digest = config_digest("synth", config, seed)
    palette = wheel_palette(k)
    pal_doc = palette_to_dict(palette)
    pal_doc.update({"seed": seed, "config_digest": digest})
    _write_json(gt_dir / "palette.json", pal_doc)

    scenes = []
    for split_idx, (split, count) in enumerate((("train", n_train), ("test", n_test))):
        for i in range(count):
            ss = np.random.SeedSequence([seed, split_idx, i])
            layout_child, seed_child = ss.spawn(2)
            if layout_kind == "stripes":
                layout = stripe_layout(hp, wp, k)
            else:
                layout = random_rect_layout(
                    hp, wp, k, n_regions, np.random.default_rng(layout_child)
                )
            scene_seed = int(seed_child.generate_state(1, np.uint64)[0])
            # one dataset = one prototype basis; only layouts and noise vary
            spec = SceneSpec(
                hp, wp, k, c, noise_sigma, layout, scene_seed, proto_seed=seed
            )
            fm, mask = generate_synthetic_scene(spec)
            name = f"{split}_{i:04d}"
            _atomic(feat_dir / f"{name}.fmap", lambda p, fm=fm: write_feature_map(fm, p))
            _write_png(gt_dir / f"{name}.png", render_mask(mask, palette))
            scenes.append(
                {
                    "name": name,
                    "split": split,
                    "features": f"features/{name}.fmap",
                    "gt": f"gt/{name}.png",
                }
            )

    _write_json(
        out_dir / "manifest.json",
        {
            "seed": seed,
            "config_digest": digest,
            "k": k,
            "c": c,
            "hp": hp,
            "wp": wp,
            "noise_sigma": noise_sigma,
            "scenes": scenes,
        },
    )
    _log(
        f"synth: wrote {n_train} train + {n_test} test scenes "
        f"(k={k}, c={c}, {hp}x{wp}) to {out_dir}"
    )
    return _EXIT_OK


def _train_config(section: dict, seed: int) -> TrainConfig:
    loss_cfg = _get(section, "loss", {}) or {}
    mix_cfg = _get(section, "pair_mix", {}) or {}
    if not isinstance(loss_cfg, dict):
        raise ConfigError('train.loss must be an object, e.g. {"b_self": 0.3}')
    if not isinstance(mix_cfg, dict):
        raise ConfigError(
            'train.pair_mix must be an object with n_self/n_knn/n_random'
        )
    try:
        terms = LossTerms(
            lambda_self=float(loss_cfg.get("lambda_self", 1.0)),
            lambda_knn=float(loss_cfg.get("lambda_knn", 1.0)),
            lambda_rand=float(loss_cfg.get("lambda_rand", 1.0)),
            b_self=float(loss_cfg.get("b_self", 0.30)),
            b_knn=float(loss_cfg.get("b_knn", 0.30)),
            b_rand=float(loss_cfg.get("b_rand", 0.60)),
        )
        mix = PairMix(
            n_self=int(mix_cfg.get("n_self", 6)),
            n_knn=int(mix_cfg.get("n_knn", 5)),
            n_random=int(mix_cfg.get("n_random", 5)),
        )
        return TrainConfig(
            learning_rate=float(_get(section, "learning_rate", 1e-4)),
            batch_size=int(_get(section, "batch_size", 16)),
            epochs=int(_get(section, "epochs", 10)),
            loss_terms=terms,
            knn_k=int(_get(section, "knn_k", 7)),
            pair_mix=mix,
            seed=seed,
            centering=bool(_get(section, "centering", True)),
        )
    except (InvariantError, ParameterError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def cmd_train(config: dict, seed: int, out_override: str | None) -> int:
    """Distill backbone correspondences into a head checkpoint plus a log."""
    section = _section(config, "train")
    files = _list_features(section, "train_*.fmap")
    out_dir = Path(out_override or _get(section, "out_dir", "train_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest("train", config, seed)

    features = [read_feature_map(p) for p in files]
    c = features[0].c
    head_cfg = _get(section, "head", {}) or {}
    if not isinstance(head_cfg, dict):
        raise ConfigError('train.head must be an object, e.g. {"d": 16}')
    d = int(head_cfg.get("d", 16))
    h_hidden = head_cfg.get("h_hidden")
    h_hidden = 2 * c if h_hidden is None else int(h_hidden)
    cfg = _train_config(section, seed)

    params = init_head(c, d, h_hidden, seed)
    state = init_adam_state(params)
    epoch_logs = []
    for epoch in range(cfg.epochs):
        params, state, metrics = train_epoch(features, params, state, cfg, epoch)
        epoch_logs.append({"epoch": epoch, **metrics})
        _log(
            f"train: epoch {epoch + 1}/{cfg.epochs} "
            f"objective={metrics['total']:.6f}"
        )

    ckpt_path = out_dir / "head.sghd"
    _atomic(ckpt_path, lambda p: save_checkpoint(params, p))
    ckpt_sha = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()
    _write_json(
        out_dir / "train_log.json",
        {
            "seed": seed,
            "config_digest": digest,
            "checkpoint": ckpt_path.name,
            "checkpoint_sha256": ckpt_sha,
            "n_images": len(features),
            "files": [p.name for p in files],
            "head": {"c": c, "d": d, "h_hidden": h_hidden},
            "train": {
                "learning_rate": cfg.learning_rate,
                "batch_size": cfg.batch_size,
                "epochs": cfg.epochs,
                "knn_k": cfg.knn_k,
                "centering": cfg.centering,
                "pair_mix": {
                    "n_self": cfg.pair_mix.n_self,
                    "n_knn": cfg.pair_mix.n_knn,
                    "n_random": cfg.pair_mix.n_random,
                },
                "loss": {
                    "lambda_self": cfg.loss_terms.lambda_self,
                    "lambda_knn": cfg.loss_terms.lambda_knn,
                    "lambda_rand": cfg.loss_terms.lambda_rand,
                    "b_self": cfg.loss_terms.b_self,
                    "b_knn": cfg.loss_terms.b_knn,
                    "b_rand": cfg.loss_terms.b_rand,
                },
            },
            "epochs": epoch_logs,
        },
    )
    _log(f"train: saved {ckpt_path}")
    return _EXIT_OK


def _load_centroids(path: str | Path) -> Centroids:
    try:
        doc = json.loads(Path(path).read_text())
        return Centroids(
            k=int(doc["k"]),
            d=int(doc["d"]),
            vectors=np.asarray(doc["vectors"], dtype=np.float64),
        )
    except OSError as exc:
        raise ManifestError(f"cannot read centroids {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"centroids file {path} is malformed: {exc}") from exc


def cmd_infer(config: dict, seed: int, out_override: str | None) -> int:
    """Project features to codes, cluster, and write palette-colored masks."""
    section = _section(config, "infer")
    files = _list_features(section, "test_*.fmap")
    ckpt = _get(section, "checkpoint", required=True)
    k = int(_get(section, "k", 7))
    max_iters = int(_get(section, "max_iters", 100))
    n_init = int(_get(section, "n_init", 3))
    output_size = _get(section, "output_size")
    out_dir = Path(out_override or _get(section, "out_dir", "infer_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest("infer", config, seed)

    params = load_checkpoint(ckpt)
    features = [read_feature_map(p) for p in files]
    code_maps = [head_forward(fm, params) for fm in features]

    centroids_cfg = _get(section, "centroids")
    if centroids_cfg is not None:
        centroids = _load_centroids(centroids_cfg)
        if centroids.d != params.d:
            raise ShapeError(
                f"loaded centroids have dim {centroids.d}, head emits {params.d}"
            )
    else:
        stacked = np.vstack([cm.data.reshape(-1, cm.c) for cm in code_maps])
        centroids, _ = kmeans_cosine(
            stacked, k, max_iters=max_iters, seed=seed, n_init=n_init
        )

    palette = _resolve_palette(_get(section, "palette"), wheel_palette(centroids.k))
    if palette.n_classes < centroids.k:
        raise ConfigError(
            f"palette has {palette.n_classes} colors but k={centroids.k} clusters"
        )

    outputs = []
    for path, cm in zip(files, code_maps):
        mask = assign_clusters(cm, centroids)
        if output_size is not None:
            out_h, out_w = (int(v) for v in output_size)
            mask = upsample_mask(mask, out_h, out_w)
        _write_png(out_dir / f"{path.stem}.png", render_mask(mask, palette))
        outputs.append(f"{path.stem}.png")

    pal_doc = palette_to_dict(palette)
    pal_doc.update({"seed": seed, "config_digest": digest})
    _write_json(out_dir / "palette.json", pal_doc)
    _write_json(
        out_dir / "centroids.json",
        {
            "seed": seed,
            "config_digest": digest,
            "k": centroids.k,
            "d": centroids.d,
            "vectors": centroids.vectors.tolist(),
        },
    )
    _write_json(
        out_dir / "infer_manifest.json",
        {
            "seed": seed,
            "config_digest": digest,
            "checkpoint": str(ckpt),
            "outputs": outputs,
            "centroids": "centroids.json",
            "palette": "palette.json",
        },
    )
    _log(f"infer: wrote {len(outputs)} masks to {out_dir}")
    return _EXIT_OK


def cmd_eval(config: dict, seed: int, out_override: str | None) -> int:
    """Score predicted masks against ground truth, matched once globally."""
    section = _section(config, "eval")
    pred_dir = Path(_get(section, "pred_dir", required=True))
    gt_dir = Path(_get(section, "gt_dir", required=True))
    method = _get(section, "matching", "hungarian")
    out_dir = Path(out_override or _get(section, "out_dir", "eval_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest("eval", config, seed)

    pal_pred = _resolve_palette(
        _get(section, "palette_pred", str(pred_dir / "palette.json"))
    )
    pal_gt = _resolve_palette(
        _get(section, "palette_gt", str(gt_dir / "palette.json"))
    )

    pred_files = {p.stem: p for p in pred_dir.glob("*.png")}
    gt_files = {p.stem: p for p in gt_dir.glob("*.png")}
    stems = sorted(set(pred_files) & set(gt_files))
    if not stems:
        raise EmptyInputError(
            f"no filename stems shared between {pred_dir} and {gt_dir}"
        )

    k_pred = pal_pred.n_classes
    k_gt = pal_gt.n_classes
    per_image: list[tuple[str, ConfusionMatrix]] = []
    total = ConfusionMatrix(np.zeros((k_pred, k_gt), dtype=np.int64))
    for stem in stems:
        gt_mask = mask_from_palette(load_tile(gt_files[stem]), pal_gt)
        pred_mask = mask_from_palette(load_tile(pred_files[stem]), pal_pred)
        if (pred_mask.h, pred_mask.w) != (gt_mask.h, gt_mask.w):
            pred_mask = mask_resize_nearest(pred_mask, gt_mask.h, gt_mask.w)
        cm = accumulate_confusion(pred_mask, gt_mask, k_pred, k_gt)
        per_image.append((stem, cm))
        total = total + cm

    if method == "hungarian":
        matching = hungarian_match(pad_square(total))[:k_pred]
    elif method == "greedy":
        matching = greedy_match(total)
    else:
        raise ConfigError(f'eval.matching must be "hungarian" or "greedy", got {method!r}')
    report = evaluate(total, matching)

    pi = np.asarray(matching)
    per_sample = []
    for stem, cm in per_image:
        n = cm.total
        if n == 0:
            per_sample.append({"name": stem, "accuracy": None, "n_pixels": 0})
            continue
        correct = sum(
            int(cm.counts[p, pi[p]]) for p in range(k_pred) if pi[p] < k_gt
        )
        per_sample.append({"name": stem, "accuracy": correct / n, "n_pixels": n})

    doc = report.to_json_dict()
    doc.update(
        {
            "seed": seed,
            "config_digest": digest,
            "matching_method": method,
            "per_sample": per_sample,
        }
    )
    _write_json(out_dir / "eval_report.json", doc)
    print(
        f"pixel_accuracy={report.pixel_accuracy:.4f} miou={report.miou:.4f} "
        f"n_pixels={report.n_pixels} samples={len(per_sample)}"
    )
    return _EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrseg",
        description="Self-supervised land-cover segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="path to the JSON config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigError(f"seed {seed} is outside [0, 2^64)")
        return _COMMANDS[args.command](config, seed, args.out)
    except Exception as exc:  # noqa: BLE001 - boundary converts to exit codes
        for klass, code in _EXIT_BY_ERROR:
            if isinstance(exc, klass):
                _log(f"corrseg {args.command}: error: {exc}")
                return code
        if isinstance(exc, CorrsegError):
            _log(f"corrseg {args.command}: error: {exc}")
            return _EXIT_IO
        raise


if __name__ == "__main__":
    sys.exit(main())
