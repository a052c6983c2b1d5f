#  Copyright (c) 2020 Robert Lieck
"""
Command line: make-corpus, train, eval, attack, rir and gradcheck.

Configuration values can be overridden as `--section.key value` after the subcommand, e.g.
`wakejam attack --attack.steps 1`.
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import sources
from .attack import run_attack, baseline_audio, perturb_clips, eot_report, attack_loss
from .audio import read_wav, write_wav, DTYPE
from .config import ExperimentConfig
from .corpus import CorpusManifest, build_corpus, validation_ids, label_ratio, frame_labels
from .decision import det_curve, evaluate_model
from .detector import DetectorModel, train, save_checkpoint, load_checkpoint, extract_features
from .diff import check_gradients, reports_to_frame
from .procedural import generate_sources
from .psychoacoustic import masking_threshold, masking_loss
from .room import sample_rooms, image_source_rir, rooms_to_frame
from .synth import SynthParams, random_params, render_sequence, render_sequence_tensor, describe_notes
from .util import WakejamError, UsageError, DataError, SourceNotFoundError, GeometryError, NumericError

logger = logging.getLogger("wakejam")

EVAL_BASELINES = {"none": None, "random_music": "random_music", "random_notes": "random_single_notes",
                  "real_music": "real_music"}


#########
# helpers
#########

def setup_logging(verbose=False):
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("wakejam")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def parse_overrides(extra):
    """['--section.key', 'value', ...] -> [(section, key, value), ...]"""
    overrides = []
    it = iter(extra)
    for flag in it:
        if not flag.startswith("--") or "." not in flag:
            raise UsageError(f"Unexpected argument '{flag}' (overrides are written --section.key value)")
        section, key = flag[2:].split(".", 1)
        try:
            value = next(it)
        except StopIteration:
            raise UsageError(f"Override '{flag}' lacks a value")
        overrides.append((section, key, value))
    return overrides


def write_report(frame, path, cfg, command, **summary):
    """CSV report with a JSON summary sidecar and the effective configuration next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    sidecar = dict(command=command, report=path.name, rows=len(frame), columns=list(frame.columns), **summary)
    with open(path.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
    (path.parent / "config_summary.txt").write_text(cfg.summary() + "\n")
    logger.info(f"wrote {path}")


def load_utterances(location, prefix, sample_rate):
    """Raw utterances from a directory of WAVs or a registered source; None if no location is configured."""
    if location is None:
        return None
    path = Path(location).expanduser()
    if path.is_dir():
        corpus = sources.AudioCorpus(path, sample_rate=sample_rate)
    elif location in list(sources.sources()):
        corpus = sources.load(location, sample_rate=sample_rate)
    else:
        raise SourceNotFoundError(f"'{location}' is neither a directory nor a registered source")
    utterances = corpus.utterances(prefix)
    if not utterances:
        raise SourceNotFoundError(f"No WAV files found in '{location}'")
    return utterances


def manifest_path(cfg):
    return cfg.getpath("paths", "corpus_dir") / "manifest.json"


def load_split(cfg, split):
    manifest = CorpusManifest.load(manifest_path(cfg))
    clips = manifest.load_clips(cfg.getpath("paths", "corpus_dir"), cfg.frame_spec(), split,
                                sample_rate=cfg.getint("frontend", "sample_rate"))
    if not clips:
        raise DataError(f"The corpus has no {split} clips")
    return manifest, clips


def load_model(cfg):
    return load_checkpoint(cfg.getpath("paths", "model"), cfg.frontend())


def adversary_path(cfg):
    return cfg.getpath("paths", "attack_dir") / "params.json"


##########
# commands
##########

def cmd_make_corpus(cfg, args):
    sample_rate = cfg.getint("frontend", "sample_rate")
    given = dict(keyword=load_utterances(cfg.get("paths", "keywords"), "kw/", sample_rate),
                 negative=load_utterances(cfg.get("paths", "negatives"), "neg/", sample_rate),
                 background=load_utterances(cfg.get("paths", "backgrounds"), "bg/", sample_rate))
    if any(v is None for v in given.values()):
        generated = generate_sources(n_keywords=cfg.getint("corpus", "n_keywords"),
                                     n_negatives=cfg.getint("corpus", "n_negatives"),
                                     n_backgrounds=cfg.getint("corpus", "n_backgrounds"),
                                     seed=cfg.getint("corpus", "seed"), sample_rate=sample_rate,
                                     background_seconds=cfg.getfloat("corpus", "background_seconds"),
                                     color=cfg.get("corpus", "noise_color"),
                                     level_db=cfg.getfloat("corpus", "noise_level_db"))
        for kind, value in given.items():
            if value is None:
                logger.info(f"no {kind} recordings configured, using {len(generated[kind])} generated ones")
                given[kind] = generated[kind]
    manifest = build_corpus(given["keyword"], given["negative"], given["background"],
                            cfg.getpath("paths", "corpus_dir"), cfg.corpus_config(), cfg.augmentation_spec())
    frame = pd.DataFrame([dict(id=c["id"], split=c["split"], events=len(c["events"]),
                               placements=len(c["placements"])) for c in manifest.clips])
    write_report(frame, cfg.report_dir() / "corpus.csv", cfg, "make-corpus",
                 utterances=len(manifest.utterances), clips=len(manifest.clips),
                 train_ids=len(manifest.splits["train"]), test_ids=len(manifest.splits["test"]))
    return manifest


def cmd_train(cfg, args):
    manifest, train_clips = load_split(cfg, "train")
    _, test_clips = load_split(cfg, "test")
    validation = []
    fraction = cfg.getfloat("train", "validation_fraction")
    if fraction and fraction > 0:
        keyword_ids = sorted({u["raw_id"] for u in manifest.utterances
                              if u["kind"] == "keyword" and u["split"] == "train"})
        _, held = validation_ids(keyword_ids, fraction, cfg.getint("train", "seed"))
        held = set(held)
        validation = [c for c in train_clips if held & set(c.raw_ids)]
        train_clips = [c for c in train_clips if not held & set(c.raw_ids)]
    logger.info(f"{len(train_clips)} training clips ({label_ratio(train_clips):.3f} keyword frames), "
                f"{len(validation)} validation clips, {len(test_clips)} test clips")
    model = DetectorModel(cfg.frontend(), cfg.architecture(), seed=cfg.getint("detector", "seed"))
    result = train(model, train_clips, cfg.train_config(), validation=validation, decision=cfg.decision())
    save_checkpoint(result.model, cfg.getpath("paths", "model"))

    report_dir = cfg.report_dir()
    curve = pd.DataFrame(dict(epoch=np.arange(1, len(result.losses) + 1), loss=result.losses,
                              validation_f1=result.validation_f1 or [np.nan] * len(result.losses)))
    write_report(curve, report_dir / "train_loss.csv", cfg, "train", initial_loss=result.initial_loss,
                 best_epoch=None if result.best_epoch is None else result.best_epoch + 1)
    report = evaluate_model(result.model, test_clips, cfg.decision())
    write_report(report.to_frame(mode="clean", split="test"), report_dir / "train_metrics.csv", cfg, "train",
                 **report.to_dict())
    det = det_curve(result.model, test_clips, cfg.getfloats("decision", "det_taus"), cfg.decision())
    write_report(det, report_dir / "det.csv", cfg, "train", points=len(det))
    return report


def cmd_eval(cfg, args):
    kind = EVAL_BASELINES[args.baseline]
    if args.attacked and kind is not None:
        raise UsageError("Choose either --attacked or a --baseline, not both")
    model = load_model(cfg)
    _, clips = load_split(cfg, args.split)
    n = len(clips[0].audio)
    params_file = adversary_path(cfg)
    adversary = SynthParams.load(params_file) if params_file.is_file() else None
    if args.attacked and adversary is None:
        raise UsageError(f"--attacked needs the attack artifact '{params_file}' (run `wakejam attack` first)")
    perturbation = None
    mode = "clean"
    if args.attacked:
        mode = "attacked"
        perturbation = render_sequence(adversary, n)
    elif kind is not None:
        mode = kind
        music = None
        if kind == "real_music":
            music_path = cfg.getpath("paths", "music")
            if music_path is None:
                raise UsageError("The real_music baseline needs [paths] music")
            music = read_wav(music_path, cfg.getint("frontend", "sample_rate"))
        reference = render_sequence(adversary, n).rms() if adversary is not None else None
        a = cfg.attack_config()
        perturbation = baseline_audio(kind, n, reference_rms=reference, seed=cfg.getint("eval", "baseline_seed"),
                                      music=music, n_notes=a.n_notes, bpm=a.bpm, beats=a.beats,
                                      sample_rate=cfg.getint("frontend", "sample_rate"))
    report = evaluate_model(model, perturb_clips(clips, perturbation), cfg.decision())
    write_report(report.to_frame(mode=mode, split=args.split), cfg.report_dir() / f"eval_{mode}.csv", cfg,
                 "eval", mode=mode, **report.to_dict())
    return report


def cmd_attack(cfg, args):
    model = load_model(cfg)
    model.requires_grad_(False)
    _, train_clips = load_split(cfg, "train")
    _, test_clips = load_split(cfg, "test")
    attack_cfg = cfg.attack_config()
    rooms = cfg.room_distribution()
    synth = cfg.synth_defaults()
    sample_rate = cfg.getint("frontend", "sample_rate")
    initial = random_params(attack_cfg.n_notes, np.random.default_rng(attack_cfg.seed), bpm=attack_cfg.bpm,
                            sample_rate=sample_rate, beats=attack_cfg.beats, vol=attack_cfg.initial_vol, **synth)
    result = run_attack(model, train_clips, attack_cfg, rooms, initial)

    attack_dir = cfg.getpath("paths", "attack_dir")
    attack_dir.mkdir(parents=True, exist_ok=True)
    adversary = result.best_params
    adversary.save(attack_dir / "params.json")
    adversary.to_midi(attack_dir / "adversary.mid")
    n = len(test_clips[0].audio)
    music = render_sequence(adversary, n)
    write_wav(music, attack_dir / "adversary.wav")
    write_report(result.trajectory_frame(), attack_dir / "trajectory.csv", cfg, "attack",
                 best_loss=result.best_loss, initial_loss=result.initial_loss,
                 notes=describe_notes(adversary))

    decision = cfg.decision()
    clean = evaluate_model(model, test_clips, decision)
    attacked = evaluate_model(model, perturb_clips(test_clips, music), decision)
    metrics = pd.concat([clean.to_frame(mode="clean", split="test"),
                         attacked.to_frame(mode="attacked", split="test")], ignore_index=True)
    write_report(metrics, cfg.report_dir() / "attack_metrics.csv", cfg, "attack",
                 clean_f1=clean.f1, attacked_f1=attacked.f1)
    logger.info(f"test F1 clean {clean.f1:.3f}, attacked {attacked.f1:.3f}")

    if cfg.getbool("eval", "eot") and attack_cfg.use_rir:
        no_rir = run_attack(model, train_clips, replace(attack_cfg, use_rir=False), rooms, initial)
        heldout = sample_rooms(cfg.room_distribution(heldout=True))
        frame = eot_report(model, test_clips, dict(rir=adversary, no_rir=no_rir.best_params), heldout, decision)
        write_report(frame, cfg.report_dir() / "eot.csv", cfg, "attack", rooms=len(heldout))
    return result


def cmd_rir(cfg, args):
    rooms = sample_rooms(cfg.room_distribution())
    rir_dir = cfg.getpath("paths", "rir_dir")
    rows, failed = [], []
    for i, room in enumerate(rooms):
        row = dict(index=i, file=None, taps=0, error=None, **room.to_dict())
        try:
            rir = image_source_rir(room)
            path = rir_dir / f"rir_{i:03d}.wav"
            write_wav(rir.clip(), path)
            row.update(file=path.name, taps=int(np.count_nonzero(rir.taps)))
        except GeometryError as e:
            logger.error(f"room {i}: {e}")
            row.update(error=str(e))
            failed.append(i)
        rows.append(row)
    frame = pd.DataFrame(rows)
    write_report(frame, rir_dir / "rirs.csv", cfg, "rir", rooms=len(rooms), failed=failed)
    if failed:
        raise GeometryError(f"Impulse responses of rooms {failed} could not be computed")
    return rooms_to_frame(rooms)


def gradcheck_draw(params, x, model, rir, attack_cfg, directions, rng, eps, bounds):
    """
    Finite-difference reports of one draw, one frame per stage: the synthesizer (notes -> samples), the masking loss
    and the frontend (audio -> loss along random directions) and the attack loss of the whole chain.
    """
    n = x.shape[-1]
    delays = params.delays()

    def render(p):
        return render_sequence_tensor(params, p["freq"], p["vol"], delays=delays)

    weights = torch.as_tensor(rng.standard_normal(n), dtype=DTYPE)
    notes = dict(freq=params.freqs, vol=params.vols)
    reports = dict(synth=check_gradients(lambda p: (render(p) * weights).sum(), notes, eps=eps, bounds=bounds))

    spec = attack_cfg.masking_spec
    threshold = masking_threshold(x, spec)
    delta = render_sequence(params).tensor()
    basis = torch.as_tensor(rng.standard_normal((directions, n)) * 0.01, dtype=DTYPE)
    reports["masking"] = check_gradients(lambda p: masking_loss(x, delta + p["delta"] @ basis, spec, threshold),
                                         dict(delta=np.zeros(directions)), eps=eps)

    frontend = model.frontend
    feature_weights = torch.as_tensor(rng.standard_normal((frontend.spec.n_frames(n), frontend.n_features)),
                                      dtype=DTYPE)
    reports["features"] = check_gradients(
        lambda p: (extract_features(x + p["x"] @ basis, frontend) * feature_weights).sum(),
        dict(x=np.zeros(directions)), eps=eps)

    # keyword over the second half
    y = torch.as_tensor(frame_labels(((n // 2, n),), n, frontend.spec), dtype=DTYPE)
    reports["pipeline"] = check_gradients(
        lambda p: attack_loss(model, x, y, render(p), attack_cfg, [rir], thresholds=threshold), notes, eps=eps,
        bounds=bounds)

    frames = []
    for stage, stage_reports in reports.items():
        frame = reports_to_frame(stage_reports)
        frame.insert(0, "stage", stage)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def cmd_gradcheck(cfg, args):
    """Finite-difference check of every differentiable stage of the attack over random draws."""
    s = "gradcheck"
    seed = cfg.getint(s, "seed")
    rng = np.random.default_rng(seed)
    draws, n_notes, length = cfg.getint(s, "draws"), cfg.getint(s, "n_notes"), cfg.getint(s, "length")
    eps, directions = cfg.getfloat(s, "eps"), cfg.getint(s, "directions")
    vol = None if cfg.get(s, "vol") is None else cfg.getfloat(s, "vol")
    sample_rate = cfg.getint("frontend", "sample_rate")
    synth = cfg.synth_defaults()
    attack_cfg = cfg.attack_config()
    bounds = dict(freq=attack_cfg.freq_bounds, vol=attack_cfg.vol_bounds)
    model = DetectorModel(cfg.frontend(), cfg.architecture(), seed=seed)
    model.requires_grad_(False)
    rooms = sample_rooms(replace(cfg.room_distribution(), count=draws, fs=sample_rate))
    frames = []
    for draw in range(draws):
        params = random_params(n_notes, rng, sample_rate=sample_rate, beats=length / sample_rate * 2, vol=vol,
                               **synth)
        x = torch.as_tensor(rng.normal(0.0, 0.1, params.length), dtype=DTYPE)
        frame = gradcheck_draw(params, x, model, image_source_rir(rooms[draw]), attack_cfg, directions, rng, eps,
                               bounds)
        frame.insert(0, "draw", draw)
        frames.append(frame)
    frame = pd.concat(frames, ignore_index=True)
    kind = frame.stage + "." + frame.param.str.split("[").str[0]
    worst = {k: float(frame.rel_error[kind == k].max()) for k in kind.unique()}
    nonfinite = int((~np.isfinite(frame[["analytic", "numeric"]].to_numpy())).sum())
    write_report(frame, cfg.report_dir() / "gradcheck.csv", cfg, "gradcheck", max_rel_error=worst,
                 nonfinite=nonfinite)
    logger.info("max relative error: " + ", ".join(f"{k} {v:.2e}" for k, v in worst.items()))
    if nonfinite:
        raise NumericError(f"{nonfinite} non-finite gradients")
    return frame


######
# main
######

def make_parser():
    parser = argparse.ArgumentParser(prog="wakejam", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-c", "--config", action="append", default=[], help="additional config file (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("make-corpus", help="build the labeled corpus and its manifest")
    commands.add_parser("train", help="train the detector and report held-out metrics and the DET curve")
    evaluate = commands.add_parser("eval", help="evaluate the detector on clean, attacked or baseline audio")
    evaluate.add_argument("--baseline", choices=sorted(EVAL_BASELINES), default="none")
    evaluate.add_argument("--attacked", action="store_true", help="add the adversarial music")
    evaluate.add_argument("--split", choices=("train", "test"), default="test")
    commands.add_parser("attack", help="optimize adversarial music against the trained detector")
    commands.add_parser("rir", help="sample rooms and write their impulse responses")
    commands.add_parser("gradcheck", help="check synthesizer gradients against finite differences")
    return parser


HANDLERS = {"make-corpus": cmd_make_corpus, "train": cmd_train, "eval": cmd_eval, "attack": cmd_attack,
            "rir": cmd_rir, "gradcheck": cmd_gradcheck}


def main(argv=None):
    """Run a command; returns the exit code (0 success, 2 usage/config, 3 data, 4 numeric)."""
    parser = make_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = ExperimentConfig(*args.config, overrides=parse_overrides(extra))
        HANDLERS[args.command](cfg, args)
    except WakejamError as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        return e.exit_code
    except OSError as e:
        # unreadable or missing files are data problems
        logger.error(f"{e.__class__.__name__}: {e}")
        return DataError.exit_code
    except ValueError as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        return UsageError.exit_code
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
