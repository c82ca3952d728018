"""Command-line entry point: preprocess, train, sample, edit, eval, analyze.

Every subcommand resolves its settings as CLI flag > config file (JSON,
``--config`` or the SKELDIFF_CONFIG environment variable) > built-in default,
and writes a run manifest next to its outputs before exiting, on success and
on failure alike.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bvh import BvhError, parse_bvh, write_bvh
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import NoiseSchedule, edit_sample, sample
from .features import (
    clip_from_features,
    detect_contacts_for_clip,
    features_from_clip,
)
from .metrics import MetricConfig, MetricReport, evaluate_skeleton
from .motion import MotionTensor, load_motion, save_motion
from .preprocess import (
    PreprocessConfig,
    PreprocessError,
    compute_stats,
    document_from_motion,
    normalize,
    preprocess_clip,
    stats_to_dict,
)
from .training import (
    CheckpointManifest,
    Dataset,
    TrainConfig,
    load_checkpoint,
    train,
)
from . import analysis
from .skeleton import Skeleton, save_skeleton_text

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_VALIDATION = 4

CONFIG_ENV_VAR = "SKELDIFF_CONFIG"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.code = code


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    status: str = "running"
    error: str = ""

    def write(self, out_dir: Path) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        tmp = out_dir / ".run_manifest.tmp"
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        tmp.replace(out_dir / "run_manifest.json")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _fingerprint_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint_path(path: Path) -> str:
    if path.is_file():
        return _fingerprint_file(path)
    index = path / "index.json"
    if index.exists():
        return _fingerprint_file(index)
    names = sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file())
    return hashlib.sha256("\n".join(names).encode()).hexdigest()


def load_config_file(path: str | None) -> dict:
    resolved = path or os.environ.get(CONFIG_ENV_VAR)
    if not resolved:
        return {}
    p = Path(resolved)
    if not p.exists():
        raise CliError(f"config file not found: {p}", EXIT_CONFIG)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"config file is not valid JSON: {e}", EXIT_CONFIG)


def _build_dataclass(cls, section: dict, overrides: dict):
    """CLI flag > config file section > dataclass default."""
    known = {f.name for f in dataclasses.fields(cls)}
    bad = set(section) - known
    if bad:
        raise CliError(
            f"unknown {cls.__name__} keys in config file: {sorted(bad)}", EXIT_CONFIG
        )
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid {cls.__name__}: {e}", EXIT_CONFIG)


# --- preprocess ------------------------------------------------------------


def _skeleton_groups(in_dir: Path) -> dict[str, list[Path]]:
    groups: dict[str, list[Path]] = {}
    subdirs = [d for d in sorted(in_dir.iterdir()) if d.is_dir()]
    if subdirs:
        for d in subdirs:
            files = sorted(d.glob("*.bvh"))
            if files:
                groups[d.name] = files
    loose = sorted(in_dir.glob("*.bvh"))
    if loose:
        groups[in_dir.name] = loose
    return groups


def preprocess_directory(
    in_dir: Path, out_dir: Path, config: PreprocessConfig
) -> tuple[dict, list[str]]:
    """Run the unification pipeline over a directory of BVH files grouped
    per skeleton. Returns the dataset index and a list of per-file errors.

    Output layout: ``<out>/<skeleton>/{skeleton.txt, stats.json,
    <clip>.bvh, <clip>.motion.npz}`` plus a top-level ``index.json`` whose
    clip fingerprints make reruns comparable.
    """
    groups = _skeleton_groups(in_dir)
    if not groups:
        raise CliError(f"no BVH files found under {in_dir}", EXIT_MISSING)
    source_index = None
    if (in_dir / "index.json").exists():
        source_index = json.loads((in_dir / "index.json").read_text())

    errors: list[str] = []
    index: dict = {"version": 1, "canonical": True, "skeletons": {}}
    for skel_id, files in groups.items():
        docs = []
        for f in files:
            try:
                docs.append((f, parse_bvh(f.read_text())))
            except (BvhError, OSError) as e:
                errors.append(f"{f}: {e}")
        if not docs:
            continue

        # natural rest source: an explicit rest file beats an idle clip;
        # already-canonical inputs need no relativization at all.
        already_canonical = bool(source_index and source_index.get("canonical"))
        rest_doc = None
        clip_docs = docs
        if not already_canonical:
            rest_files = [(f, d) for f, d in docs if "rest" in f.stem.lower()]
            if rest_files:
                rest_doc = rest_files[0][1]
                clip_docs = [(f, d) for f, d in docs if (f, d) not in rest_files]
            else:
                idle = [
                    (f, d) for f, d in docs if config.idle_pattern in f.stem.lower()
                ]
                if idle:
                    rest_doc = idle[0][1]
                else:
                    errors.append(
                        f"{skel_id}: no rest or idle clip; using identity rest pose"
                    )
        if not clip_docs:
            errors.append(f"{skel_id}: only a rest file, no clips")
            continue

        results = []
        for f, doc in clip_docs:
            try:
                results.append(
                    (
                        f,
                        preprocess_clip(
                            doc,
                            rest_doc=rest_doc,
                            config=config,
                            skeleton_id=skel_id,
                            source_file=f.name,
                        ),
                    )
                )
            except PreprocessError as e:
                errors.append(f"{f}: {e}")
        if not results:
            continue

        # Every stored artifact is derived from the canonical BVH bytes:
        # write, re-parse, then featurize. Re-preprocessing the output is
        # then a bit-exact no-op (the canonicalization snaps near-identity
        # transforms to exact ones).
        canonical = []
        for f, res in results:
            text = write_bvh(
                document_from_motion(res.topology, res.rest, res.names, res.motion)
            )
            requantized = preprocess_clip(
                parse_bvh(text), config=config, skeleton_id=skel_id,
                source_file=f.name,
            )
            canonical.append((f, text, requantized))

        first = canonical[0][2]
        skeleton = Skeleton.build(
            first.topology, first.rest, first.names, d_max=config.d_max
        )
        sdir = out_dir / skel_id
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / "skeleton.txt").write_text(save_skeleton_text(skeleton))

        clips = []
        clip_entries = {}
        for f, text, res in canonical:
            if res.topology.joint_count != skeleton.joint_count:
                errors.append(f"{f}: topology differs from the group skeleton")
                continue
            contacts = detect_contacts_for_clip(skeleton, res.motion, config)
            tensor = features_from_clip(skeleton, res.motion, contacts)
            name = f.stem
            save_motion(sdir / f"{name}.motion.npz", tensor)
            (sdir / f"{name}.bvh").write_text(text)
            digest = hashlib.sha256(
                np.ascontiguousarray(tensor.data).tobytes()
            ).hexdigest()
            clip_entries[name] = {
                "frames": int(tensor.data.shape[0]),
                "fps": res.meta.fps,
                "fingerprint": digest,
                "in_place_suspect": res.meta.in_place_suspect,
            }
            clips.append(tensor)
        if not clips:
            continue
        stats = compute_stats(clips, epsilon=config.std_epsilon)
        (sdir / "stats.json").write_text(json.dumps(stats_to_dict(stats)))
        index["skeletons"][skel_id] = {
            "clips": sorted(clip_entries),
            "clip_info": clip_entries,
            "n_clips": len(clip_entries),
            "frames": int(sum(v["frames"] for v in clip_entries.values())),
        }

    if not index["skeletons"]:
        raise CliError("all input files failed preprocessing", EXIT_FAILURE)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    if errors:
        (out_dir / "errors.log").write_text("\n".join(errors) + "\n")
    return index, errors


# --- model loading ----------------------------------------------------------


def load_model(checkpoint: Path) -> tuple[Denoiser, CheckpointManifest]:
    if not (checkpoint / "manifest.json").exists():
        raise CliError(f"checkpoint not found: {checkpoint}", EXIT_MISSING)
    manifest = CheckpointManifest.from_json((checkpoint / "manifest.json").read_text())
    model = Denoiser(DenoiserConfig(**manifest.denoiser_config))
    load_checkpoint(checkpoint, model)
    model.eval()
    return model, manifest


def _dataset_entry(dataset: Dataset, skeleton_id: str):
    for e in dataset.entries:
        if e.skeleton_id == skeleton_id:
            return e
    raise CliError(
        f"skeleton {skeleton_id!r} not in dataset "
        f"(available: {[e.skeleton_id for e in dataset.entries]})",
        EXIT_MISSING,
    )


def _export_motion(out_base: Path, tensor: MotionTensor, skeleton: Skeleton) -> list[str]:
    save_motion(str(out_base) + ".motion.npz", tensor)
    motion = clip_from_features(tensor)
    doc = document_from_motion(
        skeleton.topology, skeleton.rest, skeleton.names, motion
    )
    Path(str(out_base) + ".bvh").write_text(write_bvh(doc))
    return [str(out_base) + ".motion.npz", str(out_base) + ".bvh"]


# --- subcommands -----------------------------------------------------------


def cmd_preprocess(args, file_cfg: dict) -> tuple[int, RunManifest]:
    cfg = _build_dataclass(
        PreprocessConfig,
        file_cfg.get("preprocess", {}),
        {"d_max": args.d_max, "target_bone_length": args.bone_length},
    )
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    manifest = RunManifest(
        command="preprocess", config=dataclasses.asdict(cfg), seed=0
    )
    if not in_dir.exists():
        raise CliError(f"input directory not found: {in_dir}", EXIT_MISSING)
    manifest.inputs[str(in_dir)] = _fingerprint_path(in_dir)
    index, errors = preprocess_directory(in_dir, out_dir, cfg)
    manifest.outputs = [str(out_dir / "index.json")]
    for skel_id in index["skeletons"]:
        print(
            f"{skel_id}: {index['skeletons'][skel_id]['n_clips']} clips, "
            f"{index['skeletons'][skel_id]['frames']} frames"
        )
    if errors:
        print(f"{len(errors)} file(s) failed; see errors.log", file=sys.stderr)
    return EXIT_OK, manifest


def cmd_train(args, file_cfg: dict) -> tuple[int, RunManifest]:
    train_cfg = _build_dataclass(
        TrainConfig,
        file_cfg.get("train", {}),
        {
            "total_steps": args.steps,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "seed": args.seed,
            "crop_length": args.crop_length,
            "checkpoint_every": args.checkpoint_every,
        },
    )
    den_cfg = _build_dataclass(
        DenoiserConfig,
        file_cfg.get("denoiser", {}),
        {"layers": args.layers, "latent": args.latent},
    )
    data_dir, out_dir = Path(args.data_dir), Path(args.out_dir)
    manifest = RunManifest(
        command="train",
        config={
            "train": dataclasses.asdict(train_cfg),
            "denoiser": dataclasses.asdict(den_cfg),
        },
        seed=train_cfg.seed,
    )
    if not (data_dir / "index.json").exists():
        raise CliError(f"no dataset index under {data_dir}", EXIT_MISSING)
    manifest.inputs[str(data_dir)] = _fingerprint_path(data_dir)
    dataset = Dataset.load(data_dir)
    max_joints = max(e.skeleton.joint_count for e in dataset.entries)
    if max_joints > den_cfg.max_joints:
        raise CliError(
            f"dataset needs {max_joints} joints, model allows {den_cfg.max_joints}",
            EXIT_VALIDATION,
        )
    torch.manual_seed(train_cfg.seed)
    model = Denoiser(den_cfg)
    result = train(
        dataset,
        model,
        train_cfg,
        out_dir=out_dir,
        resume_from=Path(args.resume) if args.resume else None,
        augment=not args.no_augment,
    )
    manifest.outputs = [str(result.checkpoint_dir)]
    last = result.history[-1] if result.history else {}
    print(
        f"trained {result.steps} steps; final loss "
        f"{last.get('total', float('nan')):.5f} "
        f"(simple {last.get('simple', float('nan')):.5f})"
    )
    print(f"checkpoint: {result.checkpoint_dir}")
    return EXIT_OK, manifest


def cmd_sample(args, file_cfg: dict) -> tuple[int, RunManifest]:
    out_dir = Path(args.out_dir)
    manifest = RunManifest(
        command="sample",
        config={"frames": args.frames, "count": args.count},
        seed=args.seed,
    )
    model, ckpt = load_model(Path(args.checkpoint))
    dataset = Dataset.load(Path(args.data_dir))
    manifest.inputs[str(args.checkpoint)] = ckpt.dataset_fingerprint
    entry = _dataset_entry(dataset, args.skeleton)
    schedule = NoiseSchedule.cosine(model.config.steps)
    # per-skeleton subdirectories, so a sample directory is directly
    # consumable by the eval command
    sdir = out_dir / args.skeleton
    sdir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        tensor = sample(
            model,
            schedule,
            entry.skeleton,
            args.frames,
            stats=entry.stats,
            seed=args.seed + i,
            fps=entry.clips[0].fps,
        )
        base = sdir / f"sample_{i:03d}"
        manifest.outputs.extend(_export_motion(base, tensor, entry.skeleton))
    print(f"wrote {args.count} sample(s) to {sdir}")
    return EXIT_OK, manifest


def _parse_ranges(spec: str, limit: int) -> list[int]:
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            a, b = part.split(":", 1)
            out.extend(range(int(a), min(int(b), limit)))
        else:
            out.append(int(part))
    bad = [i for i in out if not (0 <= i < limit)]
    if bad:
        raise CliError(f"indices out of range: {bad}", EXIT_VALIDATION)
    return out


def cmd_edit(args, file_cfg: dict) -> tuple[int, RunManifest]:
    out_dir = Path(args.out_dir)
    manifest = RunManifest(
        command="edit",
        config={"fix_frames": args.fix_frames, "fix_joints": args.fix_joints},
        seed=args.seed,
    )
    model, _ = load_model(Path(args.checkpoint))
    dataset = Dataset.load(Path(args.data_dir))
    entry = _dataset_entry(dataset, args.skeleton)
    source = Path(args.motion)
    if not source.exists():
        raise CliError(f"motion file not found: {source}", EXIT_MISSING)
    manifest.inputs[str(source)] = _fingerprint_path(source)
    tensor = load_motion(source, skeleton=entry.skeleton)
    n, j = tensor.data.shape[0], tensor.data.shape[1]
    if j != entry.skeleton.joint_count:
        raise CliError(
            f"motion has {j} joints, skeleton has {entry.skeleton.joint_count}",
            EXIT_VALIDATION,
        )
    fixed_mask = np.zeros((n, j), dtype=bool)
    if args.fix_frames:
        fixed_mask[_parse_ranges(args.fix_frames, n), :] = True
    if args.fix_joints:
        fixed_mask[:, _parse_ranges(args.fix_joints, j)] = True
    if not fixed_mask.any():
        raise CliError(
            "nothing fixed; pass --fix-frames and/or --fix-joints", EXIT_CONFIG
        )
    schedule = NoiseSchedule.cosine(model.config.steps)
    edited = edit_sample(
        model,
        schedule,
        entry.skeleton,
        n,
        fixed_mask=fixed_mask,
        fixed_values=tensor.data,
        stats=entry.stats,
        seed=args.seed,
        fps=tensor.fps,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    base = out_dir / f"{args.skeleton}_edit"
    manifest.outputs.extend(_export_motion(base, edited, entry.skeleton))
    print(f"wrote edited motion to {base}.bvh")
    return EXIT_OK, manifest


def _load_generated(gen_dir: Path, skeleton_id: str, entry) -> list[MotionTensor]:
    sdir = gen_dir / skeleton_id
    files = sorted(sdir.glob("*.motion.npz")) if sdir.exists() else []
    return [load_motion(f, skeleton=entry.skeleton) for f in files]


def cmd_eval(args, file_cfg: dict) -> tuple[int, RunManifest]:
    cfg = _build_dataclass(
        MetricConfig,
        file_cfg.get("metrics", {}),
        {"window": args.window},
    )
    manifest = RunManifest(
        command="eval", config=dataclasses.asdict(cfg), seed=0
    )
    data_dir, gen_dir, out_dir = (
        Path(args.data_dir),
        Path(args.gen_dir),
        Path(args.out_dir),
    )
    dataset = Dataset.load(data_dir)
    manifest.inputs[str(data_dir)] = _fingerprint_path(data_dir)
    manifest.inputs[str(gen_dir)] = _fingerprint_path(gen_dir)
    per_skeleton = {}
    counts = {}
    for entry in dataset.entries:
        generated = _load_generated(gen_dir, entry.skeleton_id, entry)
        if not generated:
            continue
        gt_norm = [normalize(c, entry.stats) for c in entry.clips]
        gen_norm = [normalize(g, entry.stats) for g in generated]
        per_skeleton[entry.skeleton_id] = evaluate_skeleton(gt_norm, gen_norm, cfg)
        counts[entry.skeleton_id] = len(generated)
    if not per_skeleton:
        raise CliError(f"no generated motions found under {gen_dir}", EXIT_MISSING)
    report = MetricReport(per_skeleton=per_skeleton, sample_counts=counts, config=cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out_dir / "report.txt").write_text(report.format_text() + "\n")
    manifest.outputs = [str(out_dir / "report.json"), str(out_dir / "report.txt")]
    for m, (mean, std) in report.aggregate().items():
        print(f"{m}: {mean:.3f}^{{+/-{std:.3f}}}")
    return EXIT_OK, manifest


def _motion_ref(dataset: Dataset, spec: str):
    if ":" not in spec:
        raise CliError(
            f"motion reference must be <skeleton>:<clip index>, got {spec!r}",
            EXIT_CONFIG,
        )
    skel_id, idx = spec.rsplit(":", 1)
    entry = _dataset_entry(dataset, skel_id)
    i = int(idx)
    if not (0 <= i < len(entry.clips)):
        raise CliError(f"clip index {i} out of range for {skel_id}", EXIT_MISSING)
    return entry, entry.clips[i]


def cmd_analyze(args, file_cfg: dict) -> tuple[int, RunManifest]:
    out_dir = Path(args.out_dir)
    manifest = RunManifest(
        command="analyze", config={"mode": args.mode}, seed=args.seed
    )
    model, _ = load_model(Path(args.checkpoint))
    dataset = Dataset.load(Path(args.data_dir))
    schedule = NoiseSchedule.cosine(model.config.steps)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode in ("spatial", "temporal"):
        if not args.ref or not args.tgt:
            raise CliError("--ref and --tgt are required", EXIT_CONFIG)
        ref_entry, ref_clip = _motion_ref(dataset, args.ref)
        tgt_entry, tgt_clip = _motion_ref(dataset, args.tgt)
        fn = (
            analysis.spatial_correspondence
            if args.mode == "spatial"
            else analysis.temporal_correspondence
        )
        result = fn(
            model,
            schedule,
            ref_clip,
            ref_entry.skeleton,
            tgt_clip,
            tgt_entry.skeleton,
            seed=args.seed,
            ref_stats=ref_entry.stats,
            tgt_stats=tgt_entry.stats,
        )
        out = out_dir / f"{args.mode}_correspondence.csv"
        analysis.write_records_csv(out, result.to_records())
        manifest.outputs = [str(out)]
        print(f"wrote {out}")
    elif args.mode == "segment":
        if not args.tgt:
            raise CliError("--tgt is required", EXIT_CONFIG)
        entry, clip = _motion_ref(dataset, args.tgt)
        result = analysis.temporal_segmentation(
            model,
            schedule,
            clip,
            entry.skeleton,
            k=args.clusters,
            seed=args.seed,
            stats=entry.stats,
        )
        out = out_dir / "segmentation.csv"
        analysis.write_records_csv(out, result.to_records())
        cmap = out_dir / "segmentation_colors.csv"
        analysis.write_label_colormap(cmap, result.labels)
        manifest.outputs = [str(out), str(cmap)]
        print(f"wrote {out}")
    else:
        raise CliError(f"unknown analyze mode {args.mode!r}", EXIT_CONFIG)
    return EXIT_OK, manifest


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skeldiff",
        description="Skeleton-conditioned motion diffusion toolkit",
    )
    parser.add_argument("--config", help="JSON config file (or set $SKELDIFF_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="canonicalize a directory of BVH files")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("--d-max", type=int, dest="d_max")
    p.add_argument("--bone-length", type=float, dest="bone_length")

    p = sub.add_parser("train", help="train a denoiser on a processed dataset")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--crop-length", type=int, dest="crop_length")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--layers", type=int)
    p.add_argument("--latent", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume")
    p.add_argument("--no-augment", action="store_true")

    p = sub.add_parser("sample", help="generate motions for a skeleton")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("skeleton")
    p.add_argument("out_dir")
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("edit", help="in-betweening / body-part editing")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("skeleton")
    p.add_argument("motion", help="input .motion.npz file")
    p.add_argument("out_dir")
    p.add_argument("--fix-frames", dest="fix_frames", help="e.g. 0:10,30:40")
    p.add_argument("--fix-joints", dest="fix_joints", help="e.g. 0,3,4")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="coverage/diversity report")
    p.add_argument("data_dir")
    p.add_argument("gen_dir")
    p.add_argument("out_dir")
    p.add_argument("--window", type=int)

    p = sub.add_parser("analyze", help="correspondence and segmentation")
    p.add_argument("mode", choices=["spatial", "temporal", "segment"])
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("out_dir")
    p.add_argument("--ref", help="<skeleton>:<clip index>")
    p.add_argument("--tgt", help="<skeleton>:<clip index>")
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(getattr(args, "out_dir", "."))
    manifest = RunManifest(
        command=args.command, config={}, seed=getattr(args, "seed", 0) or 0
    )
    manifest.started = _now()
    try:
        file_cfg = load_config_file(args.config)
        code, manifest = COMMANDS[args.command](args, file_cfg)
        manifest.started = manifest.started or _now()
        manifest.status = "ok"
        return code
    except CliError as e:
        manifest.status = "error"
        manifest.error = str(e)
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (PreprocessError, ValueError) as e:
        manifest.status = "error"
        manifest.error = str(e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    finally:
        manifest.finished = _now()
        try:
            manifest.write(out_dir)
        except OSError:
            pass


if __name__ == "__main__":
    sys.exit(main())
