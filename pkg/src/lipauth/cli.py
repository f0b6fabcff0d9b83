"""Command line front end: ``lipauth <subcommand> ...``.

Exit codes: 0 on success, 1 on a domain error, 2 on a usage error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

from . import authcli, dataprep, evalreport, sampler, siamese, synthgen
from .errors import CapacityError, LipAuthError

log = logging.getLogger("lipauth")


def _split_manifest(directory, split):
    directory = Path(directory)
    path = directory / f"{split}.tsv"
    if not path.exists():
        raise LipAuthError(f"no {split}.tsv in {directory}; run `split` first")
    return dataprep.Manifest.load(path)


def _pairs(manifest, requested, seed):
    capacity = sampler.positive_capacity(manifest)
    if requested is None:
        return sampler.sample_positive_pairs(manifest, min(10_000, capacity), seed)
    if requested > capacity:
        raise CapacityError(requested, capacity)
    return sampler.sample_positive_pairs(manifest, requested, seed)


def _threshold(value):
    try:
        return float(value)
    except ValueError:
        return evalreport.read_threshold(value)


# --------------------------------------------------------------------------
# subcommands


def cmd_prep(args):
    manifest, report = dataprep.build_manifest(
        args.grid_root, args.landmarks, args.out, units_per_frame=args.units_per_frame
    )
    print(f"kept {report.kept}, discarded {report.discarded} "
          f"({report.discard_ratio:.2%}), warnings {len(report.warnings)}")
    print(f"manifest: {Path(args.out) / 'manifest.tsv'} ({len(manifest)} records)")


def cmd_stats(args):
    print(dataprep.format_stats(dataprep.subpattern_stats(dataprep.Manifest.load(args.manifest))))


def cmd_synth(args):
    config = synthgen.SynthConfig(
        speakers=args.speakers, phrases=args.phrases, utterances=args.utts, frames=args.t,
        height=args.h, width=args.w, noise=args.noise, jitter=args.jitter, seed=args.seed,
    )
    manifest = synthgen.gen_corpus(config, args.out)
    print(f"wrote {len(manifest)} clips to {args.out}")
    if args.self_test:
        print(f"correlation self-test accuracy: {synthgen.correlation_self_test(config):.3f}")


def cmd_split(args):
    manifest = dataprep.Manifest.load(args.manifest)
    spec = sampler.SplitSpec.load(args.spec) if args.spec else sampler.GRID_SPLIT
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), sampler.split_speakers(manifest, spec)):
        # paths are rewritten so the split files resolve from their own directory
        records = [
            dataprep.UtteranceRecord(r.utterance_id, r.speaker_id, r.phrase,
                                     Path(os.path.relpath(manifest.resolve(r).resolve(), out.resolve())).as_posix(),
                                     r.frame_count, r.source)
            for r in part
        ]
        dataprep.Manifest(records, out).save(out / f"{name}.tsv")
        print(f"{name}: {len(records)} records, speakers {','.join(part.speakers)}")


def cmd_train(args):
    config = siamese.TrainConfig.from_file(args.config) if args.config else siamese.TrainConfig()
    config = siamese.with_overrides(config, epochs=args.epochs, seed=args.seed)
    train_m = _split_manifest(args.manifest, "train")
    val_path = Path(args.manifest) / "val.tsv"
    val_m = dataprep.Manifest.load(val_path) if val_path.exists() else None

    def progress(e):
        print(f"epoch {e.epoch}: loss {e.train_loss:.5f} val EER {e.val_eer:.4f} ({e.seconds:.1f}s)",
              flush=True)

    _, logs = siamese.train(train_m, val_m, config, out=args.out, progress=progress)
    log_path = args.log or f"{args.out}.log.csv"
    siamese.write_log(log_path, logs)
    print(f"checkpoint: {args.out}\nlog: {log_path}")


def cmd_calibrate(args):
    ckpt = siamese.load_checkpoint(args.ckpt)
    manifest = _split_manifest(args.manifest, args.split)
    pairs = _pairs(manifest, args.pairs, args.seed)
    table = evalreport.score_dataset(ckpt, pairs, args.batch, sampler.ClipCache(manifest), args.seed)
    threshold, eer = evalreport.find_eer_threshold(*evalreport.split_scores(table))
    evalreport.write_threshold(args.out, threshold, eer)
    print(f"threshold {threshold:.6f}, EER {eer:.4%} over {len(table)} scored pairs")


def cmd_eval(args):
    ckpt = siamese.load_checkpoint(args.ckpt)
    manifest = _split_manifest(args.manifest, args.split)
    threshold = _threshold(args.threshold)
    pairs = _pairs(manifest, args.pairs, args.seed)
    table = evalreport.score_dataset(ckpt, pairs, args.batch, sampler.ClipCache(manifest), args.seed)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    table.save(out / "scored_pairs.csv")
    report = evalreport.export_report(table, threshold, out)
    print("\n".join(report.lines()))


def cmd_report(args):
    table = evalreport.ScoreTable.load(args.scores)
    report = evalreport.export_report(table, _threshold(args.threshold), args.out)
    print("\n".join(report.lines()))


def cmd_enroll(args):
    record = authcli.enroll(args.user, args.clip, args.ckpt, authcli.EmbeddingStore(args.store),
                            phrase=args.phrase, overwrite=args.overwrite)
    print(f"enrolled {record.user_id} (checkpoint {record.fingerprint[:12]})")


def cmd_verify(args):
    verdict = authcli.verify(args.user, args.clip, args.ckpt, _threshold(args.threshold),
                             authcli.EmbeddingStore(args.store))
    print(f"score {verdict.score:.6f}: {'ACCEPT' if verdict.accept else 'REJECT'}")


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="lipauth", description="Lip-based biometric authentication")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    data_root = dataprep.default_data_root()

    p = sub.add_parser("prep", help="build a clip corpus from GRID videos and landmark files")
    p.add_argument("--grid-root", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--units-per-frame", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("stats", help="sub-pattern statistics of a manifest")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--phrases", type=int, default=8)
    p.add_argument("--utts", type=int, default=12)
    p.add_argument("--t", type=int, default=50)
    p.add_argument("--h", type=int, default=100)
    p.add_argument("--w", type=int, default=50)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--jitter", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--self-test", action="store_true", help="also run the correlation self-test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write train/val/test manifests by speaker")
    p.add_argument("--manifest", required=True)
    p.add_argument("--spec", help="split file; defaults to the GRID split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the embedding network")
    p.add_argument("--manifest", default=data_root, help="directory holding train.tsv and val.tsv")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--log", help="per-epoch CSV log (default <out>.log.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    for name, helptext in (("calibrate", "find the EER threshold on a split"),
                           ("eval", "score a split and write the report")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--manifest", default=data_root, help="directory holding <split>.tsv")
        p.add_argument("--split", default="train" if name == "calibrate" else "test")
        p.add_argument("--pairs", type=int, help="positive pairs to sample (default min(10000, capacity))")
        p.add_argument("--batch", type=int, default=40)
        p.add_argument("--seed", type=int, default=0)
        if name == "calibrate":
            p.add_argument("--out", required=True)
            p.set_defaults(func=cmd_calibrate)
        else:
            p.add_argument("--threshold", required=True, help="threshold file or value")
            p.add_argument("--report", required=True)
            p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="regenerate report files from scored_pairs.csv")
    p.add_argument("--scores", required=True)
    p.add_argument("--threshold", required=True, help="threshold file or value")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    for name in ("enroll", "verify"):
        p = sub.add_parser(name, help=f"{name} a user from one clip")
        p.add_argument("--user", required=True)
        p.add_argument("--clip", required=True)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--store", help="enrollment store (default $LBA_STORE or enrollments.tsv)")
        if name == "enroll":
            p.add_argument("--phrase", default="")
            p.add_argument("--overwrite", action="store_true")
            p.set_defaults(func=cmd_enroll)
        else:
            p.add_argument("--threshold", required=True, help="threshold file or value")
            p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (LipAuthError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
