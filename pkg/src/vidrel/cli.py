"""Command-line pipeline driver.

Stages: synth (make a test corpus) -> edit-shots (detect shots, write the
segment manifest) -> build-samples (reproducible relation-pair index) ->
pretrain (relation classifier) -> finetune / retrieve / embed / attn
(downstream evaluation and inspection).

Every command resolves one RunConfig from an optional JSON file plus flag
overrides, echoes the resolved document, and stamps its artifacts with a
fingerprint of the config slice that produced them.  Later stages compare
those stamps and refuse mismatched inputs unless --force is given.

Exit status: 0 on success, 1 on a stage failure (with a diagnostic on
stderr), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import cv2
import numpy as np
import torch

from .backbones import BackboneConfig, build_backbone
from .config import ConfigError, RunConfig, load_run_config, relation_names
from .downstream import (
    attention_map,
    attention_overlays,
    evaluate_classifier,
    extract_descriptor,
    finetune,
    load_action_dataset,
    pca_embed,
    retrieve,
)
from .ingest import CANONICAL_HEIGHT, CANONICAL_WIDTH, FrameStore, probe_video, scan_corpus
from .sampling import CLIP_LEN, CROP_SIZE, RelationSampler, save_plans
from .shots import build_manifest, load_manifest
from .synthetic import generate_action_dataset, generate_synthetic_corpus
from .training import (
    clip_to_tensor,
    export_single_stack,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

__all__ = ["main", "parse_relations"]

# Compact lowercase aliases accepted anywhere a relation list is parsed,
# alongside the full names.
_RELATION_ALIASES = {
    "c_s": "same_shot",
    "c_v": "same_video",
    "c_d": "cross_video",
    "c_r": "rotated",
    "p_i": "reversed",
    "p_d": "shuffled",
    "p_s": "dilated",
}

_CENTER_Y = (CANONICAL_HEIGHT - CROP_SIZE) // 2
_CENTER_X = (CANONICAL_WIDTH - CROP_SIZE) // 2


def parse_relations(text: str) -> tuple[str, ...]:
    """Parse a comma-separated relation list into canonical names."""
    names: list[str] = []
    for token in text.split(","):
        name = token.strip().lower()
        if not name:
            continue
        name = _RELATION_ALIASES.get(name, name)
        if name not in relation_names():
            raise ConfigError(
                f"unknown relation {token.strip()!r}; valid: "
                f"{', '.join(relation_names())} "
                f"(aliases: {', '.join(sorted(_RELATION_ALIASES))})"
            )
        names.append(name)
    if not names:
        raise ConfigError(f"no relation names in {text!r}")
    return tuple(names)


def _parse_threshold(text: str) -> float | str:
    if text == "adaptive":
        return text
    try:
        return float(text)
    except ValueError:
        raise ConfigError(
            f"--threshold must be a number or 'adaptive', got {text!r}"
        ) from None


def _resolve_config(args: argparse.Namespace, overrides: dict) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        overrides = {**overrides, "seed": args.seed}
    return load_run_config(getattr(args, "config", None), overrides)


def _section(args: argparse.Namespace, section: str, **flag_to_key: str) -> dict:
    """Collect {config_key: flag_value} for the flags that were given."""
    values = {
        key: getattr(args, flag)
        for flag, key in flag_to_key.items()
        if getattr(args, flag, None) is not None
    }
    return {section: values} if values else {}


def _echo_config(cfg: RunConfig, stage: str, run_dir: Path | None) -> None:
    doc = {
        "stage": stage,
        "fingerprint": cfg.stage_fingerprint(stage),
        "stage_seed": int(cfg.stage_seed(stage)),
        "config": cfg.to_dict(),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / f"{stage}.config.json").write_text(text + "\n")


def _check_fingerprint(found: str, expected: str, what: str, force: bool) -> None:
    """Refuse inputs built under a different config unless forced."""
    if not found or found == expected:
        return
    message = (
        f"{what} carries config fingerprint {found} but the current "
        f"configuration gives {expected}; rerun the producing stage or "
        f"pass --force to use it anyway"
    )
    if force:
        print(f"warning: {message}", file=sys.stderr)
    else:
        raise ConfigError(message)


def _store_for_manifest(manifest) -> FrameStore:
    store = FrameStore()
    for video_id, path in manifest.sources.items():
        store.add(probe_video(path, video_id))
    return store


def _labels_path(path: Path) -> Path:
    return path / "labels.jsonl" if path.is_dir() else path


def _load_split(path: Path, prefer: str):
    splits = load_action_dataset(_labels_path(path))
    if prefer in splits:
        return splits[prefer]
    if len(splits) == 1:
        return next(iter(splits.values()))
    raise ConfigError(
        f"{path} defines splits {sorted(splits)}; expected {prefer!r} or a single split"
    )


def _load_backbone_checkpoint(path: Path, cfg: RunConfig, force: bool):
    ckpt = load_checkpoint(path)
    _check_fingerprint(
        ckpt.fingerprint, cfg.stage_fingerprint("pretrain"), f"checkpoint {path}", force
    )
    return ckpt


def _center_clip(store: FrameStore, video_id: str, start: int) -> np.ndarray:
    frames = store.canonical_frames(video_id, start, start + CLIP_LEN)
    return frames[
        :, _CENTER_Y : _CENTER_Y + CROP_SIZE, _CENTER_X : _CENTER_X + CROP_SIZE, :
    ]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args: argparse.Namespace) -> int:
    overrides = _section(args, "corpus", videos="videos")
    overrides.update(_section(args, "actions",
                              train_per_class="train_per_class",
                              test_per_class="test_per_class"))
    cfg = _resolve_config(args, overrides)
    stage = "synth" if args.kind == "shots" else "synth-actions"
    out = Path(args.out)
    _echo_config(cfg, stage, out)
    seed = cfg.stage_seed(stage)
    if args.kind == "shots":
        videos, truths = generate_synthetic_corpus(cfg.corpus.spec(seed), out)
        extra = {"videos": len(videos), "shots": len(truths)}
    else:
        labels = generate_action_dataset(cfg.actions.spec(seed), out)
        extra = {"labels": labels.name}
    info = {
        "kind": "corpus-info",
        "stage": stage,
        "fingerprint": cfg.stage_fingerprint(stage),
        **extra,
    }
    (out / "corpus-info.json").write_text(json.dumps(info, sort_keys=True) + "\n")
    print(f"wrote {args.kind} corpus to {out}")
    return 0


def _cmd_edit_shots(args: argparse.Namespace) -> int:
    overrides = _section(
        args, "shots", k="segment_len", min_len="min_segment_len", threshold="threshold"
    )
    cfg = _resolve_config(args, overrides)
    out = Path(args.output)
    _echo_config(cfg, "edit-shots", out.parent)
    info_path = Path(args.input) / "corpus-info.json"
    if info_path.exists():
        info = json.loads(info_path.read_text())
        if info.get("stage") == "synth":
            _check_fingerprint(
                info.get("fingerprint", ""),
                cfg.stage_fingerprint("synth"),
                f"corpus {args.input}",
                args.force,
            )
    videos = scan_corpus(args.input)
    manifest = build_manifest(
        videos,
        k=cfg.shots.segment_len,
        min_len=cfg.shots.min_segment_len,
        threshold=cfg.shots.threshold,
        fingerprint=cfg.stage_fingerprint("edit-shots"),
        out_path=out,
    )
    print(f"{len(videos)} videos -> {len(manifest)} segments -> {out}")
    return 0


def _cmd_build_samples(args: argparse.Namespace) -> int:
    overrides = _section(args, "samples", count="count")
    if args.relations is not None:
        overrides.setdefault("samples", {})["relations"] = list(parse_relations(args.relations))
    if args.aligned_patterns:
        overrides.setdefault("samples", {})["aligned_patterns"] = True
    cfg = _resolve_config(args, overrides)
    manifest_path = Path(args.manifest)
    out = Path(args.out) if args.out else manifest_path.with_name("samples.jsonl")
    _echo_config(cfg, "build-samples", out.parent)
    manifest = load_manifest(manifest_path)
    _check_fingerprint(
        manifest.fingerprint,
        cfg.stage_fingerprint("edit-shots"),
        f"manifest {manifest_path}",
        args.force,
    )
    sampler = RelationSampler(
        manifest,
        cfg.samples.categories(),
        seed=cfg.stage_seed("build-samples"),
        aligned_patterns=cfg.samples.aligned_patterns,
    )
    plans = [sampler.plan(i) for i in range(cfg.samples.count)]
    save_plans(
        plans,
        out,
        relations=sampler.relations,
        fingerprint=cfg.stage_fingerprint("build-samples"),
    )
    print(f"wrote {len(plans)} samples -> {out}")
    if sampler.fallback_counts:
        skews = {c.name.lower(): n for c, n in sorted(sampler.fallback_counts.items())}
        print(f"category fallbacks (unsatisfiable draws resampled): {skews}")
    return 0


def _cmd_pretrain(args: argparse.Namespace) -> int:
    overrides = _section(args, "training", epochs="epochs")
    overrides.update(_section(args, "backbone", backbone="arch", preset="preset"))
    if args.relations is not None:
        overrides["samples"] = {"relations": list(parse_relations(args.relations))}
    cfg = _resolve_config(args, overrides)
    out = Path(args.out)
    _echo_config(cfg, "pretrain", out.parent)
    manifest = load_manifest(args.manifest)
    _check_fingerprint(
        manifest.fingerprint,
        cfg.stage_fingerprint("edit-shots"),
        f"manifest {args.manifest}",
        args.force,
    )
    store = _store_for_manifest(manifest)
    backbone_config = BackboneConfig.preset(cfg.backbone.arch, cfg.backbone.preset)
    train_config = cfg.training.train_config(cfg.stage_seed("pretrain"))
    log_path = out.with_name(out.name + ".log.jsonl")
    ckpt = pretrain(
        manifest,
        store,
        train_config,
        backbone_config,
        relations=cfg.samples.categories(),
        fingerprint=cfg.stage_fingerprint("pretrain"),
        log_path=log_path,
    )
    save_checkpoint(ckpt, out)
    print(
        f"pretrained {cfg.backbone.arch}/{cfg.backbone.preset} for "
        f"{train_config.epochs} epochs; best held-out relation accuracy "
        f"{ckpt.val_accuracy:.3f}; checkpoint -> {out}, log -> {log_path}"
    )
    return 0


def _cmd_finetune(args: argparse.Namespace) -> int:
    overrides = _section(args, "downstream", epochs="epochs")
    cfg = _resolve_config(args, overrides)
    out = Path(args.out) if args.out else Path(args.ckpt).with_name("finetuned.pt")
    _echo_config(cfg, "finetune", out.parent)
    ckpt = _load_backbone_checkpoint(Path(args.ckpt), cfg, args.force)
    splits = load_action_dataset(_labels_path(Path(args.dataset)))
    if "train" not in splits:
        raise ConfigError(f"dataset {args.dataset} has no 'train' split")
    train = splits["train"]
    test = splits.get("test")
    store = FrameStore()
    for split in splits.values():
        for video, _ in split.items:
            store.add(video)
    if args.init == "pretrained":
        backbone = export_single_stack(ckpt)
    else:
        backbone = build_backbone(ckpt.backbone_config, seed=cfg.stage_seed("finetune"))
    result = finetune(
        backbone,
        train,
        store,
        cfg.downstream.train_config(cfg.stage_seed("finetune")),
        test=test,
        stop_test_acc=cfg.downstream.stop_test_acc,
    )
    log_path = out.with_name(out.name + ".log.jsonl")
    with open(log_path, "w") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    torch.save(
        {
            "kind": "video-classifier-checkpoint",
            "backbone_config": ckpt.backbone_config.to_dict(),
            "class_count": result.class_count,
            "model_state": result.model_state,
            "test_accuracy": result.test_accuracy,
            "epochs_to_threshold": result.epochs_to_threshold,
            "fingerprint": cfg.stage_fingerprint("finetune"),
        },
        out,
    )
    summary = f"fine-tuned on {len(train)} videos ({result.class_count} classes)"
    if test is not None:
        summary += f"; test accuracy {result.test_accuracy:.3f}"
    print(f"{summary}; checkpoint -> {out}, log -> {log_path}")
    return 0


def _cmd_retrieve(args: argparse.Namespace) -> int:
    overrides = _section(args, "downstream", metric="metric", level="level")
    if args.topk is not None:
        try:
            topk = tuple(int(t) for t in args.topk.split(","))
        except ValueError:
            raise ConfigError(f"--topk must be comma-separated integers, got {args.topk!r}")
        overrides.setdefault("downstream", {})["topk"] = list(topk)
    cfg = _resolve_config(args, overrides)
    out = Path(args.out)
    _echo_config(cfg, "retrieve", out.parent)
    ckpt = _load_backbone_checkpoint(Path(args.ckpt), cfg, args.force)
    backbone = export_single_stack(ckpt)
    database = _load_split(Path(args.train_split), "train")
    queries = _load_split(Path(args.test_split), "test")
    store = FrameStore()
    for split in (database, queries):
        for video, _ in split.items:
            store.add(video)
    db_desc = [extract_descriptor(backbone, v, store) for v in database.videos]
    q_desc = [extract_descriptor(backbone, v, store) for v in queries.videos]
    result = retrieve(
        q_desc,
        db_desc,
        queries.labels,
        database.labels,
        ks=cfg.downstream.topk,
        metric=cfg.downstream.metric,
        level=cfg.downstream.level,
    )
    table = result.table()
    print(table)
    out.write_text(table + "\n")
    print(f"table -> {out}")
    return 0


def _cmd_embed(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, {})
    out = Path(args.out)
    _echo_config(cfg, "embed", out.parent)
    ckpt = _load_backbone_checkpoint(Path(args.ckpt), cfg, args.force)
    backbone = export_single_stack(ckpt)
    videos_dir = Path(args.videos)
    videos = scan_corpus(videos_dir)
    if not videos:
        raise ConfigError(f"no decodable videos under {videos_dir}")
    store = FrameStore(videos)
    descriptors = [extract_descriptor(backbone, v, store) for v in videos]
    coords = pca_embed(np.stack([d.vector for d in descriptors]))

    labels = {}
    labels_file = videos_dir / "labels.jsonl"
    if labels_file.exists():
        for split in load_action_dataset(labels_file).values():
            for video, label in split.items:
                labels[video.video_id] = label

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    color = [labels.get(d.video_id, 0) for d in descriptors]
    scatter = ax.scatter(coords[:, 0], coords[:, 1], c=color, cmap="tab10", s=36)
    if labels:
        fig.colorbar(scatter, ax=ax, label="class")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title("video descriptors, first two principal components")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    print(f"embedded {len(descriptors)} videos -> {out}")
    return 0


def _cmd_attn(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, {})
    out = Path(args.out)
    _echo_config(cfg, "attn", out)
    if not 1 <= args.stage <= 5:
        raise ConfigError(f"--stage must be in 1..5, got {args.stage}")
    ckpt = _load_backbone_checkpoint(Path(args.ckpt), cfg, args.force)
    backbone = export_single_stack(ckpt)
    video = probe_video(args.video)
    if video.frame_count < CLIP_LEN:
        raise ConfigError(
            f"{args.video} has {video.frame_count} frames; need at least {CLIP_LEN}"
        )
    store = FrameStore([video])
    start = args.start
    if start is None:
        start = (video.frame_count - CLIP_LEN) // 2
    if not 0 <= start <= video.frame_count - CLIP_LEN:
        raise ConfigError(
            f"--start {start} out of range 0..{video.frame_count - CLIP_LEN}"
        )
    clip = _center_clip(store, video.video_id, start)
    backbone.eval()
    with torch.no_grad():
        batch = clip_to_tensor(clip).to(next(backbone.parameters()).dtype)[None]
        acts = backbone.forward_stages(batch)
    maps = attention_map(acts[args.stage - 1][0].double().numpy())
    overlays = attention_overlays(maps, clip)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(overlays):
        cv2.imwrite(str(out / f"frame_{t:03d}.png"), cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    print(f"wrote {len(overlays)} stage-{args.stage} attention frames -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidrel",
        description="Self-supervised video representation learning from clip relations.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int, metavar="S", help="global seed override")
    common.add_argument(
        "--force",
        action="store_true",
        help="use inputs even when their config fingerprint does not match",
    )

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic test corpus")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--kind", choices=("shots", "actions"), default="shots",
                   help="multi-shot pretraining corpus or labeled action set")
    p.add_argument("--videos", type=int, metavar="N", help="override corpus video count")
    p.add_argument("--train-per-class", type=int, dest="train_per_class", metavar="N")
    p.add_argument("--test-per-class", type=int, dest="test_per_class", metavar="N")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("edit-shots", parents=[common],
                       help="detect shot boundaries and write the segment manifest")
    p.add_argument("--input", required=True, metavar="DIR", help="corpus directory")
    p.add_argument("--output", required=True, metavar="FILE", help="manifest path")
    p.add_argument("--k", type=int, metavar="N", help="segment length in frames")
    p.add_argument("--min-len", type=int, dest="min_len", metavar="N",
                   help="minimum kept tail length in frames")
    p.add_argument("--threshold", type=_parse_threshold, metavar="VAL|adaptive",
                   help="shot-change threshold")
    p.set_defaults(func=_cmd_edit_shots)

    p = sub.add_parser("build-samples", parents=[common],
                       help="emit a reproducible relation-pair sample index")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--relations", metavar="LIST",
                   help="comma-separated relation names (or compact aliases)")
    p.add_argument("--count", type=int, metavar="N")
    p.add_argument("--aligned-patterns", action="store_true", dest="aligned_patterns",
                   help="temporally align partner clips for pattern relations")
    p.add_argument("--out", metavar="FILE", help="default: samples.jsonl next to the manifest")
    p.set_defaults(func=_cmd_build_samples)

    p = sub.add_parser("pretrain", parents=[common],
                       help="train the relation classifier from a manifest")
    p.add_argument("--manifest", required=True, metavar="FILE")
    p.add_argument("--relations", metavar="LIST")
    p.add_argument("--backbone", choices=("c3d", "r3d", "r2plus1d"), metavar="ARCH",
                   help="c3d, r3d, or r2plus1d")
    p.add_argument("--preset", choices=("tiny", "full"))
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common],
                       help="fine-tune a pretrained encoder for action recognition")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--dataset", required=True, metavar="DIR",
                   help="directory with labels.jsonl (train/test splits)")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--init", choices=("pretrained", "random"), default="pretrained",
                   help="start from the checkpoint encoder or a fresh one")
    p.add_argument("--out", metavar="CKPT")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("retrieve", parents=[common],
                       help="nearest-neighbor video retrieval with pretrained features")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--train-split", required=True, dest="train_split", metavar="DIR",
                   help="database videos (labels.jsonl)")
    p.add_argument("--test-split", required=True, dest="test_split", metavar="DIR",
                   help="query videos (labels.jsonl)")
    p.add_argument("--topk", metavar="LIST", help="e.g. 1,5,10,20,50")
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--level", choices=("video", "clip"))
    p.add_argument("--out", required=True, metavar="FILE", help="accuracy table path")
    p.set_defaults(func=_cmd_retrieve)

    p = sub.add_parser("embed", parents=[common],
                       help="2-D principal-component plot of video descriptors")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--videos", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="PNG")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("attn", parents=[common],
                       help="write per-frame activation heatmap overlays")
    p.add_argument("--ckpt", required=True, metavar="CKPT")
    p.add_argument("--video", required=True, metavar="FILE")
    p.add_argument("--stage", type=int, default=1, metavar="N", help="backbone stage 1..5")
    p.add_argument("--start", type=int, metavar="FRAME", help="clip start (default: centered)")
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=_cmd_attn)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
