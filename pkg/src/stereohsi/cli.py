"""``stereohsi`` command line: one subcommand per pipeline stage plus ``repro``.

Exit codes: 0 success, 1 validation or format error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import dataset as ds
from . import evalviz as ev
from . import fusion as fu
from . import phantom as ph
from . import pipeline
from . import preprocess as pp
from .core import AnnotationMask, read_cube, read_flags, read_mask, write_cube, write_flags, write_mask
from .errors import FormatError, HSIError, ValidationError
from .model.checkpoint import read_checkpoint, write_checkpoint
from .model.training import TrainConfig, train

log = logging.getLogger("stereohsi")

FORMATS = """file formats (little-endian):
  .hsr  HSR1 raw mosaic frame     .hsc  HSC1 hypercube
  .hsm  HSM1 annotation/label map .hsb  HSB1 boolean flag plane
  .hsp  HSP1 patch set            .hsn  HSN1 network checkpoint
  .ppm  binary P6 image           plan  text split plan
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _shift(text):
    try:
        dx, dy = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected dx,dy, got {text!r}")
    return dx, dy


def _read(path, reader):
    """Open ``path`` and run ``reader``; errors name the file."""
    try:
        with open(path, "rb") as fh:
            return reader(fh)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _write(path, writer, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        writer(obj, fh)


def _load_patches(paths):
    return ds.PatchSet.concatenate([_read(p, ds.read_patches) for p in paths])


def read_config(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


# ---------------------------------------------------------------- subcommands

def cmd_gen_phantom(args):
    """Write raw frames, references, label maps and a manifest for a phantom cohort."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = ph.default_spectrum_model()
    specs = ph.default_recipe(args.seed, n_subjects=args.subjects, size=args.size,
                              two_scene_subjects=min(args.two_scene_subjects, args.subjects))
    if args.scenes:
        specs = specs[:args.scenes]
    gain_a = ph.default_white_gain(ph.Camera.A)
    gain_b = ph.default_white_gain(ph.Camera.B)
    records = []
    for k, spec in enumerate(specs):
        scene = ph.generate_scene(spec, model)
        d = args.min_disparity + k % args.disparity_span
        stem = f"scene{spec.scene_id:03d}"
        fa = ph.render_camera(scene.cube, ph.Camera.A, 0, gain_a)
        fb = ph.render_camera(scene.cube, ph.Camera.B, d, gain_b)
        refs = ph.render_references(ph.Camera.A, gain_a, fa.raw.shape) + \
            ph.render_references(ph.Camera.B, gain_b, fb.raw.shape)
        names = [f"{stem}_{n}.hsr" for n in ("a", "b", "white_a", "dark_a", "white_b", "dark_b")]
        for name, frame in zip(names, (fa, fb) + tuple(refs)):
            _write(out / name, ph.write_frame, frame)
        _write(out / f"{stem}_mask.hsm", write_mask, pipeline.mask_in_b_frame(scene.mask.labels, d, fb.raw.shape))
        records.append(ph.SceneRecord(spec.subject_id, spec.scene_id, *names, f"{stem}_mask.hsm", d))
    ph.write_manifest(records, out / "manifest.tsv")
    print(f"wrote {len(records)} scenes to {out}")


def cmd_demosaic(args):
    frame = _read(args.input, ph.read_frame)
    _write(args.output, write_cube, pp.demosaic(frame))


def cmd_calibrate(args):
    raw = _read(args.input, read_cube)
    white = _read(args.white, read_cube)
    dark = _read(args.dark, read_cube)
    cube, spec = pp.calibrate(raw, white, dark)
    _write(args.output, write_cube, cube)
    if args.flags:
        _write(args.flags, write_flags, spec.flags)
    print(f"specular rate {spec.rate:.6f}")


def cmd_fuse(args):
    a = _read(args.cube_a, read_cube)
    b = _read(args.cube_b, read_cube)
    shift = args.shift if args.shift is not None else fu.estimate_translation(a, b, args.search_radius)
    fused = fu.fuse(a, b, shift)
    _write(args.output, write_cube, fused)
    _write(args.validity or str(Path(args.output).with_suffix(".valid.hsb")), write_flags,
           fused.validity())
    if args.flags_a and args.flags_b and args.flags_out:
        fa = _read(args.flags_a, read_flags)
        fb = _read(args.flags_b, read_flags)
        _write(args.flags_out, write_flags, fu.fuse_flags(fa, fb, shift))
    print(f"shift {shift[0]},{shift[1]}")


def cmd_patchify(args):
    cube = _read(args.cube, read_cube)
    mask = _read(args.mask, read_mask)
    specular = _read(args.specular, read_flags) if args.specular else None
    validity = _read(args.validity, read_flags) if args.validity else None
    patches = ds.extract_patches(cube, mask, specular, validity, stride=args.stride,
                                 subject_id=args.subject, scene_id=args.scene)
    _write(args.output, ds.write_patches, patches)
    print(f"{len(patches)} patches")


def cmd_split(args):
    patches = _load_patches(args.patches)
    if args.eval_subject:
        plan = ds.apply_split(patches, args.eval_subject, args.seed)
    else:
        plan = ds.plan_split(patches, args.n_eval_subjects, args.seed)
    ds.write_plan(plan, args.output)
    print("eval subjects " + " ".join(map(str, plan.eval_subjects)))


def _partitions(args):
    patches = _load_patches(args.patches)
    subjects, seed = ds.read_plan(args.plan)
    return ds.apply_split(patches, subjects, seed).partitions(patches)


def cmd_train(args):
    train_set, val_set, _ = _partitions(args)
    config = TrainConfig(learning_rate=args.learning_rate, batch_size=args.batch_size,
                         max_epochs=args.max_epochs, seed=args.seed)
    net, report = train(train_set.data, train_set.labels, val_set.data, val_set.labels, config)
    _write(args.output, write_checkpoint, net)
    if args.log:
        Path(args.log).write_text(report.as_text())
    print(f"best epoch {report.best_epoch}, validation accuracy "
          f"{report.val_accuracy[report.best_epoch - 1]:.6f}")


def cmd_eval(args):
    net, _, _ = _read(args.model, read_checkpoint)
    if args.plan:
        parts = dict(zip(("train", "val", "eval"), _partitions(args)))
        patches = parts[args.partition]
    else:
        patches = _load_patches(args.patches)
    cm, _ = ev.evaluate_patches(net, patches)
    report = ev.format_report(cm, f"{args.partition if args.plan else 'all'} patches")
    if args.output:
        Path(args.output).write_text(report)
    else:
        sys.stdout.write(report)


def cmd_predict(args):
    net, _, _ = _read(args.model, read_checkpoint)
    cube = _read(args.cube, read_cube)
    validity = _read(args.validity, read_flags) if args.validity else None
    labels, _ = ev.predict_image(net, cube, validity, stride=args.stride)
    if args.specular:
        labels = ev.postprocess_speculars(labels, _read(args.specular, read_flags), args.k)
    _write(args.output, write_mask, AnnotationMask(labels))


def cmd_overlay(args):
    cube = _read(args.cube, read_cube)
    labels = _read(args.labels, read_mask).labels
    _write(args.output, ev.write_ppm, ev.render_overlay(cube, labels, args.alpha))


def cmd_repro(args):
    config = pipeline.ReproConfig.from_mapping(args.repro_settings)
    summary = pipeline.run_repro(args.seed, args.out, config)
    for key, value in summary.items():
        print(f"{key}: {value}")


# --------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="cap BLAS worker threads (default: all cores)")
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key=value file; explicit flags win")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = _Parser(prog="stereohsi", description=__doc__, epilog=FORMATS,
                     formatter_class=argparse.RawDescriptionHelpFormatter, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=FORMATS,
                           formatter_class=argparse.RawDescriptionHelpFormatter, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("gen-phantom", cmd_gen_phantom, "render a synthetic cohort to raw frames (HSR1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=18)
    p.add_argument("--two-scene-subjects", type=int, default=9)
    p.add_argument("--size", type=int, default=160)
    p.add_argument("--scenes", type=int, default=0, help="keep only the first N scenes")
    p.add_argument("--min-disparity", type=int, default=4)
    p.add_argument("--disparity-span", type=int, default=9)

    p = add("demosaic", cmd_demosaic, "HSR1 frame -> raw HSC1 cube")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)

    p = add("calibrate", cmd_calibrate, "raw HSC1 + white/dark HSC1 -> reflectance HSC1")
    p.add_argument("input")
    p.add_argument("--white", required=True)
    p.add_argument("--dark", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--flags", help="write the specular flags (HSB1)")

    p = add("fuse", cmd_fuse, "register camera B to A and merge into a 41-band HSC1 cube")
    p.add_argument("cube_a")
    p.add_argument("cube_b")
    p.add_argument("--shift", type=_shift, default=None, help="dx,dy; estimated when omitted")
    p.add_argument("--search-radius", type=int, default=15)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--validity", help="validity sidecar (HSB1); default OUTPUT.valid.hsb")
    p.add_argument("--flags-a")
    p.add_argument("--flags-b")
    p.add_argument("--flags-out")

    p = add("patchify", cmd_patchify, "fused HSC1 + HSM1 labels -> HSP1 patches")
    p.add_argument("cube")
    p.add_argument("--mask", required=True)
    p.add_argument("--specular", help="specular flags (HSB1)")
    p.add_argument("--validity", help="fusion validity sidecar (HSB1)")
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--stride", type=int, default=ds.STRIDE)
    p.add_argument("-o", "--output", required=True)

    p = add("split", cmd_split, "plan a leave-subjects-out split over HSP1 files")
    p.add_argument("patches", nargs="+")
    p.add_argument("--n-eval-subjects", type=int, default=3)
    p.add_argument("--eval-subject", type=int, action="append",
                   help="use these eval subjects instead of searching (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)

    p = add("train", cmd_train, "train on the train/validation partitions of a plan")
    p.add_argument("patches", nargs="+")
    p.add_argument("--plan", required=True)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--max-epochs", type=int, default=TrainConfig.max_epochs)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="write per-epoch history (CSV)")
    p.add_argument("-o", "--output", required=True)

    p = add("eval", cmd_eval, "metrics report for a checkpoint on HSP1 patches")
    p.add_argument("model")
    p.add_argument("patches", nargs="+")
    p.add_argument("--plan", help="evaluate one partition of this plan")
    p.add_argument("--partition", choices=("train", "val", "eval"), default="eval")
    p.add_argument("-o", "--output")

    p = add("predict", cmd_predict, "dense label map (HSM1) for a fused cube")
    p.add_argument("model")
    p.add_argument("cube")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--validity", help="fusion validity sidecar (HSB1)")
    p.add_argument("--specular", help="HSB1 flags; enables specular post-processing")
    p.add_argument("-k", type=int, default=11, help="post-processing window")
    p.add_argument("-o", "--output", required=True)

    p = add("overlay", cmd_overlay, "RGB rendering of a cube blended with a label map (P6)")
    p.add_argument("cube")
    p.add_argument("labels")
    p.add_argument("--alpha", type=float, default=0.45)
    p.add_argument("-o", "--output", required=True)

    p = add("repro", cmd_repro, "run the full synthetic experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(repro_settings={})
    return parser, sub


def _apply_config(parser, sub, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = read_config(known.config)
    command = next((a for a in argv if a in sub.choices), None)
    if command is None:
        return
    target = sub.choices[command]
    dests = {a.dest for a in target._actions}
    extra = {k: v for k, v in values.items() if k not in dests}
    if command == "repro":
        target.set_defaults(repro_settings=extra)
    elif extra:
        raise ValidationError(f"{known.config}: unknown settings {sorted(extra)} for {command}")
    target.set_defaults(**{k: v for k, v in values.items() if k in dests})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sub = build_parser()
    try:
        _apply_config(parser, sub, argv)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(message)s")
        threads = getattr(args, "threads", None)
        if threads is not None:
            if threads < 1:
                raise ValidationError("--threads must be >= 1")
            with threadpool_limits(limits=threads):
                args.func(args)
        else:
            args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (HSIError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
