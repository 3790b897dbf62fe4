"""Command-line surface: dataset generation, encoding, decoding, evaluation.

Subcommands: ``gen-dataset``, ``encode``, ``decode-logits``, ``eval``,
``crop``, ``pair-sample``.  Flag values override a ``--config`` JSON file,
which overrides built-in defaults; the effective configuration is echoed
into every output artifact for provenance.  ``KEYPOSE_SEED`` provides the
default seed.  Exit codes: 0 success, 1 usage error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import codec as codec_mod
from . import decoder as decoder_mod
from . import imitation as imitation_mod
from . import metrics as metrics_mod
from . import scenegen as scenegen_mod
from .codec import CodecConfig, DepthMode, Frame, TokenSequence
from .errors import KeyposeError, UnmatchedEpisode
from .geometry import Trajectory
from .metrics import EpisodeRecord, Prediction, UnitExchange


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the documented contract is 1.
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _default_seed() -> int:
    return int(os.environ.get("KEYPOSE_SEED", "0"))


def _merge_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly-set CLI flags."""
    effective = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path) as f:
            file_cfg = json.load(f)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        effective.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            effective[key] = value
    return effective


_CODEC_DEFAULTS = {
    "frame": "image",
    "n_loc": 1024,
    "depth_mode": "shared_loc",
    "depth_min": 0.2,
    "depth_max": 2.0,
    "pos_cube": 1.2,
}


def _add_codec_flags(parser):
    parser.add_argument("--frame", choices=["image", "robot"])
    parser.add_argument("--n-loc", dest="n_loc", type=int,
                        choices=[1024, 512, 256, 128])
    parser.add_argument("--depth-mode", dest="depth_mode",
                        choices=["shared_loc", "separate_band"])
    parser.add_argument("--depth-min", dest="depth_min", type=float)
    parser.add_argument("--depth-max", dest="depth_max", type=float)
    parser.add_argument("--pos-cube", dest="pos_cube", type=float,
                        help="side length of the robot-frame position cube (m)")


def _codec_config(cfg: dict) -> CodecConfig:
    half = cfg["pos_cube"] / 2.0
    return CodecConfig(
        n_loc=cfg["n_loc"],
        frame=Frame(cfg["frame"]),
        depth_mode=DepthMode(cfg["depth_mode"]),
        depth_range=(cfg["depth_min"], cfg["depth_max"]),
        position_range=((-half, half),) * 3,
    )


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# gen-dataset
# ---------------------------------------------------------------------------

def cmd_gen_dataset(args) -> int:
    defaults = {
        "n": 100,
        "mode": "easy",
        "seed": _default_seed(),
        "render": False,
        "augment": False,
        "background_dir": "",
        "validate": True,
        **_CODEC_DEFAULTS,
    }
    cfg = _merge_config(defaults, args)
    pool = None
    if cfg["augment"] and cfg["background_dir"]:
        pool = scenegen_mod.load_background_pool(cfg["background_dir"])
    manifest = scenegen_mod.generate_dataset(
        args.out,
        n=cfg["n"],
        mode=cfg["mode"],
        seed=cfg["seed"],
        codec_cfg=_codec_config(cfg),
        render=cfg["render"],
        augment=cfg["augment"],
        background_pool=pool,
        validate=cfg["validate"],
        extra_manifest={"config": cfg},
    )
    print(f"wrote {cfg['n']} records to {args.out} "
          f"(sha256 {manifest['records_sha256'][:12]})")
    return 0


# ---------------------------------------------------------------------------
# encode
# ---------------------------------------------------------------------------

def cmd_encode(args) -> int:
    defaults = {"seed": _default_seed(), **_CODEC_DEFAULTS}
    cfg = _merge_config(defaults, args)
    codec_cfg = _codec_config(cfg)
    records = scenegen_mod.read_records(args.records)
    with open(args.out, "w") as f:
        f.write(json.dumps({"type": "manifest", "config": cfg}) + "\n")
        for record in records:
            cam = record.camera if codec_cfg.frame is Frame.IMAGE else None
            tokens = codec_mod.encode_trajectory(record.trajectory, cam, codec_cfg)
            f.write(
                json.dumps(
                    {
                        "type": "tokens",
                        "scene_id": record.scene_id,
                        "tokens": tokens.text(),
                    }
                )
                + "\n"
            )
    print(f"encoded {len(records)} records to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# decode-logits
# ---------------------------------------------------------------------------

def cmd_decode_logits(args) -> int:
    defaults = {
        "strategy": "greedy",
        "n": 3,
        "temperature": 1.0,
        "window_loc": decoder_mod.DEFAULT_WINDOW_LOC,
        "window_seg": decoder_mod.DEFAULT_WINDOW_SEG,
        "seed": _default_seed(),
        "episode_id": "",
        **_CODEC_DEFAULTS,
    }
    cfg = _merge_config(defaults, args)
    dump = decoder_mod.read_dump(args.dump)
    if args.check:
        print(
            f"ok: vocab_size={dump.vocab_size} num_steps={dump.num_steps} "
            f"({Path(args.dump).name})"
        )
        return 0

    codec_cfg = _codec_config(cfg)
    grammar = codec_cfg.grammar()
    scorer = decoder_mod.replay_scorer(dump, expected_vocab=codec_mod.VOCAB_SIZE)
    if dump.num_steps < len(grammar):
        raise KeyposeError(
            f"dump has {dump.num_steps} steps, grammar needs {len(grammar)}"
        )
    strategy = cfg["strategy"]
    if strategy == "greedy":
        beams = [decoder_mod.decode_greedy(scorer, grammar)]
    elif strategy == "sample":
        beams = decoder_mod.decode_sampling(
            scorer, grammar, temperature=cfg["temperature"], seed=cfg["seed"], k=cfg["n"]
        )
    elif strategy == "beam":
        beams = decoder_mod.decode_beam(scorer, grammar, n=cfg["n"])
    elif strategy == "beam-nms":
        beams = decoder_mod.decode_beam_nms(
            scorer, grammar, n=cfg["n"],
            window_loc=cfg["window_loc"], window_seg=cfg["window_seg"],
        )
    else:
        raise UsageError(f"unknown strategy {strategy!r}")

    episode_id = cfg["episode_id"] or Path(args.dump).stem
    camera = None
    if codec_cfg.frame is Frame.IMAGE:
        if not args.camera:
            raise KeyposeError("image-frame decoding requires --camera (JSON file)")
        with open(args.camera) as f:
            camera = scenegen_mod.CameraModel.from_json(json.load(f))

    with open(args.out, "w") as f:
        f.write(json.dumps({"type": "manifest", "config": cfg}) + "\n")
        for rank, beam in enumerate(beams):
            tokens = TokenSequence(tuple(beam.tokens))
            trajectory = codec_mod.decode_trajectory(tokens, camera, codec_cfg)
            f.write(
                json.dumps(
                    {
                        "type": "prediction",
                        "episode_id": episode_id,
                        "rank": rank,
                        "tokens": tokens.text(),
                        "trajectory": trajectory.to_json(),
                        "log_prob": beam.log_prob,
                    }
                )
                + "\n"
            )
    print(f"decoded {len(beams)} beam(s) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_predictions(path) -> dict:
    """predictions.jsonl -> episode_id -> list of (Trajectory, log_prob)."""
    out: dict = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("type") != "prediction":
                continue
            out.setdefault(obj["episode_id"], []).append(
                Prediction(
                    trajectory=Trajectory.from_json(obj["trajectory"]),
                    confidence=float(obj["log_prob"]),
                )
            )
    return out


def cmd_eval(args) -> int:
    defaults = {
        "seed": _default_seed(),
        "thresholds": ",".join(str(t) for t in metrics_mod.MAP_THRESHOLDS_CM),
        "map_deg_per_cm": 10.0,
        "l1_deg_per_cm": 1.0,
    }
    cfg = _merge_config(defaults, args)
    records = scenegen_mod.read_records(args.records)
    predictions = _load_predictions(args.predictions)

    known_ids = {r.scene_id for r in records}
    unmatched = sorted(set(predictions) - known_ids)
    if unmatched:
        raise UnmatchedEpisode(f"predictions reference unknown episodes: {unmatched}")

    episodes = [
        EpisodeRecord(
            episode_id=r.scene_id,
            ground_truth=r.trajectory,
            predictions=tuple(predictions.get(r.scene_id, ())),
        )
        for r in records
    ]
    raw = cfg["thresholds"]
    if isinstance(raw, str):
        thresholds = [float(t) for t in raw.split(",") if t]
    else:
        thresholds = [float(t) for t in raw]
    map_units = UnitExchange(cfg["map_deg_per_cm"])
    l1_units = UnitExchange(cfg["l1_deg_per_cm"])

    result = metrics_mod.compute_map(episodes, units=map_units, thresholds_cm=thresholds)

    confidences, errors = [], []
    for ep in episodes:
        for pred in ep.predictions:
            confidences.append(pred.confidence)
            errors.append(metrics_mod.traj_l1(pred.trajectory, ep.ground_truth, l1_units))
    try:
        rho = metrics_mod.spearman(confidences, errors)
    except KeyposeError:
        rho = None

    def _mean_l1(mode):
        try:
            return metrics_mod.mean_l1(episodes, units=l1_units, mode=mode)
        except KeyposeError:
            return None

    report = {
        "config": cfg,
        "per_threshold": [
            {
                "threshold_cm": thr,
                "ap": ap,
                "pr_points": [
                    {
                        "recall": p.recall,
                        "precision": p.precision,
                        "confidence_cut": p.confidence_cut,
                    }
                    for p in curve.points
                ],
            }
            for thr, ap, curve in result.per_threshold
        ],
        "map": result.mean_ap,
        "spearman": rho,
        "mean_l1_top1": _mean_l1("top1"),
        "mean_l1_best": _mean_l1("best"),
    }
    _write_json(args.out, report)
    if args.pr_csv:
        with open(args.pr_csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["threshold_cm", "recall", "precision", "confidence_cut"])
            for thr, _, curve in result.per_threshold:
                for p in curve.points:
                    writer.writerow([thr, p.recall, p.precision, p.confidence_cut])
    print(f"map={result.mean_ap:.6f} spearman={rho} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# crop
# ---------------------------------------------------------------------------

def cmd_crop(args) -> int:
    defaults = {
        "seed": _default_seed(),
        "center_mode": "image_center",
        "crop_size": "full",
        "padded": True,
        "scene_id": "",
    }
    cfg = _merge_config(defaults, args)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    crop_size = None if str(cfg["crop_size"]) == "full" else int(cfg["crop_size"])

    start_point = end_point = None
    if cfg["center_mode"] in ("start_object", "midpoint"):
        if args.center:
            start_point = end_point = tuple(args.center)
        elif args.records and cfg["scene_id"]:
            records = {r.scene_id: r for r in scenegen_mod.read_records(args.records)}
            if cfg["scene_id"] not in records:
                raise KeyposeError(f"scene {cfg['scene_id']} not in {args.records}")
            start_point, end_point = scenegen_mod.crop_center_points(
                records[cfg["scene_id"]]
            )
        else:
            raise UsageError(
                f"center mode {cfg['center_mode']} needs --center or --records/--scene-id"
            )

    crop, cmap = scenegen_mod.crop_transform(
        image, cfg["center_mode"], crop_size, padded=cfg["padded"],
        start_point=start_point, end_point=end_point,
    )
    Image.fromarray(crop).save(args.out)
    _write_json(
        args.map_out or str(args.out) + ".map.json",
        {"config": cfg, "map": cmap.to_json()},
    )
    print(f"wrote {args.out} (window {cmap.width}x{cmap.height} at {cmap.x0},{cmap.y0})")
    return 0


# ---------------------------------------------------------------------------
# pair-sample
# ---------------------------------------------------------------------------

def cmd_pair_sample(args) -> int:
    defaults = {"k": 10, "seed": _default_seed(), **_CODEC_DEFAULTS}
    cfg = _merge_config(defaults, args)
    codec_cfg = _codec_config(cfg)
    records = scenegen_mod.read_records(args.records)
    index = imitation_mod.build_task_index(records)
    pairs = imitation_mod.sample_pairs(index, k=cfg["k"], seed=cfg["seed"])
    prompts = [imitation_mod.assemble_imitation_prompt(p, codec_cfg) for p in pairs]
    with open(args.out, "w") as f:
        f.write(json.dumps({"type": "manifest", "config": cfg,
                            "skipped_records": index.skipped}) + "\n")
        f.write(imitation_mod.pairs_to_jsonl(pairs, prompts))
    if args.text_dir:
        imitation_mod.write_pair_files(pairs, prompts, args.text_dir)
    print(f"sampled {len(pairs)} pairs to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="keypose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--mode", choices=["easy", "hard"])
    p.add_argument("--seed", type=int)
    p.add_argument("--render", action="store_const", const=True, default=None)
    p.add_argument("--no-render", dest="render", action="store_const", const=False)
    p.add_argument("--augment", action="store_const", const=True, default=None)
    p.add_argument("--background-dir", dest="background_dir")
    p.add_argument("--no-validate", dest="validate", action="store_const", const=False,
                   default=None)
    _add_codec_flags(p)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("encode", help="re-encode record trajectories as tokens")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_codec_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode-logits", help="decode an LGTD logit dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", default="predictions.jsonl")
    p.add_argument("--config")
    p.add_argument("--check", action="store_true",
                   help="validate the dump format and exit")
    p.add_argument("--strategy", choices=["greedy", "sample", "beam", "beam-nms"])
    p.add_argument("--n", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--window-loc", dest="window_loc", type=int)
    p.add_argument("--window-seg", dest="window_seg", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--episode-id", dest="episode_id")
    p.add_argument("--camera", help="camera JSON for image-frame decoding")
    _add_codec_flags(p)
    p.set_defaults(func=cmd_decode_logits)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pr-csv", dest="pr_csv")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--thresholds")
    p.add_argument("--map-deg-per-cm", dest="map_deg_per_cm", type=float)
    p.add_argument("--l1-deg-per-cm", dest="l1_deg_per_cm", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("crop", help="crop an image with an invertible map")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--map-out", dest="map_out")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--center-mode", dest="center_mode",
                   choices=list(scenegen_mod.CROP_CENTER_MODES))
    p.add_argument("--crop-size", dest="crop_size")
    p.add_argument("--padded", action="store_const", const=True, default=None)
    p.add_argument("--valid", dest="padded", action="store_const", const=False)
    p.add_argument("--center", nargs=2, type=float,
                   help="explicit center pixel for object-centered modes")
    p.add_argument("--records")
    p.add_argument("--scene-id", dest="scene_id")
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("pair-sample", help="sample demo/query imitation pairs")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text-dir", dest="text_dir")
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    _add_codec_flags(p)
    p.set_defaults(func=cmd_pair_sample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (KeyposeError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
