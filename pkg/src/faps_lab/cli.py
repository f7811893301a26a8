"""faps-lab command line: synth, train, eval, align, convert, project.

Exit status: 0 ok, 1 validation or config error, 2 I/O error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import alignment, report
from .average import distance_report
from .config import RunConfig
from .encoder import EncoderParams
from .formats import FormatError, read_feature_file, write_feature_file
from .synth import Corpus, default_threads, generate_corpus, manifest_digest
from .training import NumericalAbort, latest_checkpoint, load_checkpoint, save_checkpoint, train
from .vclite import (load_decoder, probe_unseen_speakers, save_decoder, swap_test, train_decoder,
                     train_probe, convert)

log = logging.getLogger("faps_lab")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _open_corpus(args, cfg: RunConfig) -> Corpus:
    return Corpus.open(args.corpus or cfg.paths.corpus)


def _heldout(corpus: Corpus):
    _, ho = corpus.split()
    return [corpus.group(g) for g in ho]


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = cfg.replace("corpus", seed=args.seed)
    out = Path(args.out or cfg.paths.corpus)
    generate_corpus(cfg.corpus, out, threads=args.threads)
    print(json.dumps({"manifest": str(out / "manifest.json"), "groups": cfg.corpus.groups,
                      "sha256": manifest_digest(out)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    over = {}
    if args.no_comp_loss:
        over["comp_loss_enabled"] = False
    if args.no_lws:
        over["lws_in_training"] = False
    if args.steps is not None:
        over["step_count"] = args.steps
    if args.seed is not None:
        over["seed"] = args.seed
    if over:
        cfg = cfg.replace("training", **over)
    corpus = _open_corpus(args, cfg)
    out = Path(args.out or cfg.paths.run)
    out.mkdir(parents=True, exist_ok=True)
    train_ids, _ = corpus.split()

    if args.stage == "decoder":
        if args.decoder_steps is not None:
            cfg = cfg.replace("decoder", steps=args.decoder_steps)
        encoder = load_checkpoint(args.encoder or out / "encoder.avn")
        groups = [corpus.group(g) for g in train_ids[:cfg.decoder.train_groups]]
        dec, history = train_decoder(groups, encoder, cfg.decoder)
        save_decoder(dec, out / "decoder.vcl", {"run_config": cfg.to_dict()})
        (out / "decoder.log").write_text("".join(f"{s}\t{v:.6f}\n" for s, v in history))
        print(json.dumps({"decoder": str(out / "decoder.vcl"),
                          "final_loss": history[-1][1] if history else None}))
        return EXIT_OK

    resume = None
    if args.resume:
        resume = latest_checkpoint(out) if args.resume == "latest" else Path(args.resume)
        if resume is None:
            log.warning("no checkpoint in %s; starting from scratch", out)
    groups = [corpus.group(g) for g in train_ids]
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    params, entries = train(groups, cfg.encoder, cfg.training, out, resume_from=resume)
    # re-save the final checkpoint with the whole resolved config echoed
    save_checkpoint(params, out / "encoder.avn", cfg.training, cfg.training.step_count,
                    extra={"run_config": cfg.to_dict()})
    print(json.dumps({"checkpoint": str(out / "encoder.avn"), "steps": cfg.training.step_count,
                      "final": entries[-1].line() if entries else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.pairs is not None:
        cfg = cfg.replace("eval", pair_sample_count=args.pairs)
    ev = cfg.eval
    corpus = _open_corpus(args, cfg)
    encoder = load_checkpoint(args.checkpoint)
    held = _heldout(corpus)
    dist = distance_report(held, encoder, ev.pair_sample_count, np.random.default_rng([ev.seed, 1]))
    probe = None
    if not args.no_probe:
        probe = {}
        for rep in ("raw", "avenet"):
            probe[rep] = train_probe(held, rep, encoder, ev.probe_config())[1].to_dict()
        probe["raw_shuffled"] = train_probe(held, "raw", None, ev.probe_config(), shuffle_labels=True)[1].to_dict()
    conversion = None
    if args.decoder:
        dec = load_decoder(args.decoder)
        conversion = swap_test(dec, encoder, held, ev.conversion_pair_count,
                               np.random.default_rng([ev.seed, 2])).to_dict()
    extra = None
    if args.compare:
        variants = {"reference": (encoder, getattr(encoder, "header", {}).get("training"))}
        for spec in args.compare:
            name, _, path = spec.partition("=")
            other = load_checkpoint(path)
            variants[name] = (other, other.header.get("training"))
        extra = {"unseen_blends": probe_unseen_speakers(held, variants, ev.pair_sample_count, ev.seed,
                                                        ev.probe_config())}
    doc = report.aggregate_report(
        distance=dist, probe=probe, conversion=conversion, extra=extra,
        config={"run": cfg.to_dict(), "checkpoint": getattr(encoder, "header", {})},
        seeds={"corpus": corpus.config.seed, "eval": ev.seed,
               "encoder": encoder.config.seed})
    _emit(doc, args.out)
    return EXIT_OK


def _emit(doc: dict, out) -> None:
    text = report.dumps_report(doc)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_align(args) -> int:
    cfg = _load_config(args)
    skip = args.skip_labels.split(",") if args.skip_labels is not None else cfg.eval.skip_labels
    if args.corpus:
        corpus = Corpus.open(args.corpus)
        n = args.pairs or cfg.eval.align_pair_count
        rng = np.random.default_rng([cfg.eval.seed, 3])
        gids = corpus.group_ids
        pairs, ids = [], []
        for _ in range(n):
            gid = int(gids[int(rng.integers(len(gids)))])
            members = corpus.manifest["groups"][gid]["members"]
            i, j = (int(k) for k in rng.choice(len(members), size=2, replace=False))
            seq = alignment.parse_intervals(corpus.intervals_text(gid))
            # members of a group share the frozen duration sample, hence one interval file
            pairs.append((seq, seq))
            ids.append(f"g{gid:05d}:{i}-{j}")
        rep = alignment.e_avg(pairs, ids, skip)
    else:
        if len(args.files) != 2:
            raise ValueError("align needs exactly two interval files, or --corpus")
        seqs = []
        for path in args.files:
            text = Path(path).read_text(encoding="utf-8")
            try:
                seqs.append(alignment.parse_intervals(text))
            except alignment.IntervalParseError as exc:
                raise ValueError(f"{path}: {exc}") from None
        rep = alignment.e_avg([tuple(seqs)], [f"{args.files[0]}|{args.files[1]}"], skip)
    _emit(report.aggregate_report(alignment=rep, seeds={"eval": cfg.eval.seed}), args.out)
    return EXIT_OK


def cmd_convert(args) -> int:
    cfg = _load_config(args)
    corpus = _open_corpus(args, cfg)
    try:
        target = corpus.speaker(args.target)
    except KeyError:
        raise ValueError(f"unknown speaker id {args.target!r}; known: "
                         f"{', '.join(s.id for s in corpus.speakers)}") from None
    encoder = load_checkpoint(args.encoder)
    dec = load_decoder(args.decoder)
    source = read_feature_file(args.source)
    out_seq = convert(dec, encoder, source, target)
    write_feature_file(args.out, out_seq)
    metrics = {"source": str(args.source), "target_speaker": target.id, "output": str(args.out),
               "frames": out_seq.frames}
    loc = corpus.find_member(args.source)
    if loc is not None:
        g = corpus.group(loc[0])
        ref = next((m for m in g.members if m.speaker.id == target.id), None)
        if ref is not None:
            from .average import pair_distance
            metrics["l1_source_target"] = pair_distance(source, ref.features)
            metrics["l1_converted_target"] = pair_distance(out_seq, ref.features)
    doc = report.aggregate_report(conversion=metrics, config={"run": cfg.to_dict()})
    if args.report:
        Path(args.report).write_text(report.dumps_report(doc), encoding="utf-8")
    sys.stdout.write(report.dumps_report(doc))
    return EXIT_OK


def cmd_project(args) -> int:
    cfg = _load_config(args)
    corpus = _open_corpus(args, cfg)
    encoder = load_checkpoint(args.checkpoint) if args.checkpoint else EncoderParams.init(cfg.encoder)
    sel = report.figure_selection(_heldout(corpus), encoder, cfg.eval.projection_speakers,
                                  cfg.eval.projection_frames)
    export = report.project_2d(sel)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(export.to_csv(), encoding="utf-8")
    summary = {"rows": len(export.rows), "group_id": sel[0].group_id,
               "frames": list(sel[0].frame_indices),
               "speakers": sorted({s.speaker_tag for s in sel}),
               "mean_distance_to_average": report.cluster_distances(export)}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="faps-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True):
        sp.add_argument("--config", help="JSON run config (defaults used when omitted)")
        if corpus:
            sp.add_argument("--corpus", help="corpus directory (default: paths.corpus)")

    sp = sub.add_parser("synth", help="generate a synthetic FAPS corpus")
    common(sp, corpus=False)
    sp.add_argument("--out", help="output directory (default: paths.corpus)")
    sp.add_argument("--seed", type=int, help="override corpus.seed")
    sp.add_argument("--threads", type=int, default=default_threads(),
                    help="worker threads for generation; output is identical for any value "
                         "(default: $FAPS_LAB_THREADS or 1)")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the encoder or the conversion decoder")
    common(sp)
    sp.add_argument("--out", help="run directory (default: paths.run)")
    sp.add_argument("--stage", choices=("encoder", "decoder"), default="encoder",
                    help="what to train (default: encoder)")
    sp.add_argument("--no-comp-loss", action="store_true", help="drop the pair-consistency term")
    sp.add_argument("--no-lws", action="store_true", help="train on base speakers only")
    sp.add_argument("--steps", type=int, help="override training.step_count")
    sp.add_argument("--seed", type=int, help="override training.seed")
    sp.add_argument("--resume", nargs="?", const="latest",
                    help="resume from a checkpoint (no value: latest in the run directory)")
    sp.add_argument("--encoder", help="encoder checkpoint for --stage decoder (default: <out>/encoder.avn)")
    sp.add_argument("--decoder-steps", type=int, help="override decoder.steps")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="distance, probe and conversion report on held-out groups")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="encoder checkpoint (.avn)")
    sp.add_argument("--decoder", help="decoder checkpoint (.vcl); adds the swap test")
    sp.add_argument("--pairs", type=int, help="override eval.pair_sample_count")
    sp.add_argument("--no-probe", action="store_true", help="skip the speaker probes")
    sp.add_argument("--compare", action="append", metavar="NAME=CKPT",
                    help="extra encoder to compare on unseen blended speakers (repeatable)")
    sp.add_argument("--out", help="also write the JSON report here")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("align", help="phoneme boundary error between interval files")
    sp.add_argument("--config", help="JSON run config (defaults used when omitted)")
    sp.add_argument("files", nargs="*", help="two interval TSV files")
    sp.add_argument("--corpus", help="score sampled within-group pairs of this corpus instead")
    sp.add_argument("--pairs", type=int, help="pairs to sample in corpus mode (default: eval.align_pair_count)")
    sp.add_argument("--skip-labels", metavar="L1,L2",
                    help="comma-separated labels left out of the metric (default: eval.skip_labels)")
    sp.add_argument("--out", help="also write the JSON report here")
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("convert", help="convert a feature file to another speaker")
    common(sp)
    sp.add_argument("--encoder", required=True, help="encoder checkpoint (.avn)")
    sp.add_argument("--decoder", required=True, help="decoder checkpoint (.vcl)")
    sp.add_argument("--source", required=True, help="source FPK1 feature file")
    sp.add_argument("--target", required=True, help="target speaker id from the corpus")
    sp.add_argument("--out", required=True, help="converted FPK1 output")
    sp.add_argument("--report", help="also write the JSON metrics here")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("project", help="2-D PCA export of origin/encoder/average frames")
    common(sp)
    sp.add_argument("--checkpoint", help="encoder checkpoint (default: untrained identity encoder)")
    sp.add_argument("--out", required=True, help="CSV output path")
    sp.set_defaults(func=cmd_project)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
