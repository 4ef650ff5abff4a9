"""End-to-end synthetic experiment: phantom cohort to metrics and overlays."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from . import dataset as ds
from . import evalviz as ev
from . import fusion as fu
from . import phantom as ph
from . import preprocess as pp
from .core import AnnotationMask, Hypercube
from .errors import ValidationError
from .model.checkpoint import write_checkpoint
from .model.training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReproConfig:
    """Everything the synthetic experiment depends on besides the seed."""

    n_subjects: int = 18
    scene_size: int = 160
    two_scene_subjects: int = 9
    n_eval_subjects: int = 3
    search_radius: int = 15
    min_disparity: int = 4
    disparity_span: int = 9
    learning_rate: float = 1.2e-4
    batch_size: int = 16
    max_epochs: int = 8
    overlay_stride: int = 8
    postprocess_k: int = 11

    @classmethod
    def from_mapping(cls, values) -> "ReproConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValidationError(f"unknown repro setting {key!r}")
            kwargs[key] = float(raw) if fields[key] in ("float", float) else int(raw)
        return cls(**kwargs)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, seed=seed)


@dataclass
class SceneResult:
    subject_id: int
    scene_id: int
    disparity: int
    shift: tuple
    cube: Hypercube
    mask: AnnotationMask
    specular: np.ndarray


def mask_in_b_frame(labels: np.ndarray, disparity: int, shape=None) -> AnnotationMask:
    """Camera B sees the scene shifted right by ``disparity`` columns.

    ``shape`` crops the result to camera B's frame size.
    """
    out = np.zeros_like(labels)
    if disparity > 0:
        out[:, disparity:] = labels[:, :-disparity]
    else:
        out[:] = labels
    if shape is not None:
        out = out[:shape[0], :shape[1]]
    return AnnotationMask(out)


def register_and_fuse(frame_a, white_a, dark_a, frame_b, white_b, dark_b, search_radius=15):
    """Demosaic, calibrate and fuse one stereo pair; returns ``(cube, flags, shift)``."""
    cube_a, spec_a = pp.calibrate(pp.demosaic(frame_a), pp.demosaic(white_a), pp.demosaic(dark_a))
    cube_b, spec_b = pp.calibrate(pp.demosaic(frame_b), pp.demosaic(white_b), pp.demosaic(dark_b))
    shift = fu.estimate_translation(cube_a, cube_b, search_radius)
    fused = fu.fuse(cube_a, cube_b, shift)
    return fused, fu.fuse_flags(spec_a.flags, spec_b.flags, shift), shift


def simulate_cohort(seed: int, config: ReproConfig = ReproConfig()) -> List[SceneResult]:
    model = ph.default_spectrum_model()
    specs = ph.default_recipe(seed, n_subjects=config.n_subjects, size=config.scene_size,
                              two_scene_subjects=config.two_scene_subjects)
    gain_a = ph.default_white_gain(ph.Camera.A)
    gain_b = ph.default_white_gain(ph.Camera.B)
    results = []
    for k, spec in enumerate(specs):
        scene = ph.generate_scene(spec, model)
        d = config.min_disparity + k % config.disparity_span
        fa = ph.render_camera(scene.cube, ph.Camera.A, 0, gain_a)
        fb = ph.render_camera(scene.cube, ph.Camera.B, d, gain_b)
        wa, da = ph.render_references(ph.Camera.A, gain_a, fa.raw.shape)
        wb, db = ph.render_references(ph.Camera.B, gain_b, fb.raw.shape)
        cube, flags, shift = register_and_fuse(fa, wa, da, fb, wb, db, config.search_radius)
        results.append(SceneResult(spec.subject_id, spec.scene_id, d, shift, cube,
                                   mask_in_b_frame(scene.mask.labels, d, fb.raw.shape), flags))
    return results


def cohort_patches(results: List[SceneResult]) -> ds.PatchSet:
    return ds.PatchSet.concatenate([
        ds.extract_patches(r.cube, r.mask, r.specular, subject_id=r.subject_id,
                           scene_id=r.scene_id) for r in results])


def run_repro(seed: int, out_dir, config: ReproConfig = ReproConfig()) -> dict:
    """Run the whole experiment and write its artifacts into ``out_dir``.

    Every output is a pure function of ``(seed, config)``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = simulate_cohort(seed, config)
    reg_lines = ["scene_id,subject_id,disparity,dx,dy,error_px"]
    for r in results:
        err = abs(r.shift[0] - r.disparity) + abs(r.shift[1])
        reg_lines.append(f"{r.scene_id},{r.subject_id},{r.disparity},{r.shift[0]},{r.shift[1]},{err}")
    (out / "registration.csv").write_text("\n".join(reg_lines) + "\n")

    patches = cohort_patches(results)
    with open(out / "patches.hsp", "wb") as fh:
        ds.write_patches(patches, fh)
    plan = ds.plan_split(patches, config.n_eval_subjects, seed)
    ds.write_plan(plan, out / "split.txt")
    train_set, val_set, eval_set = plan.partitions(patches)
    log.info("patches: %d train, %d validation, %d eval", len(train_set), len(val_set), len(eval_set))

    net, report = train(train_set.data, train_set.labels, val_set.data, val_set.labels,
                        config.train_config(seed))
    with open(out / "model.hsn", "wb") as fh:
        write_checkpoint(net, fh)
    (out / "train_log.csv").write_text(report.as_text())

    cm, metrics = ev.evaluate_patches(net, eval_set)
    (out / "metrics.txt").write_text(ev.format_report(cm, "held-out subjects"))
    np.savetxt(out / "confusion.csv", cm.counts, fmt="%d", delimiter=",")

    overlays = out / "overlays"
    overlays.mkdir(exist_ok=True)
    for r in results:
        if r.subject_id not in plan.eval_subjects:
            continue
        labels, _ = ev.predict_image(net, r.cube, stride=config.overlay_stride)
        labels = ev.postprocess_speculars(labels, r.specular, config.postprocess_k)
        with open(overlays / f"scene{r.scene_id:03d}.ppm", "wb") as fh:
            ev.write_ppm(ev.render_overlay(r.cube, labels), fh)

    best_val = report.val_accuracy[report.best_epoch - 1]
    hist = patches.class_histogram()
    summary = {
        "seed": seed,
        "patches": len(patches),
        "muscle_share": hist[3] / len(patches),
        "eval_subjects": " ".join(str(s) for s in plan.eval_subjects),
        "best_epoch": report.best_epoch,
        "val_accuracy": best_val,
        "eval_accuracy": metrics.accuracy,
        "registration_exact": sum(r.shift == (r.disparity, 0) for r in results),
        "scenes": len(results),
    }
    lines = [f"{k},{v:.6f}" if isinstance(v, float) else f"{k},{v}" for k, v in summary.items()]
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    return summary
