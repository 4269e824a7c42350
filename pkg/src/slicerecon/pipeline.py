"""End-to-end run: phantom -> OCM -> refine -> smooth -> reconstruct -> evaluate.

One JSON config drives everything. Each run evaluates three arms against
the reference: ``ocm_only``, ``refine_only`` (dense refinement straight on
the unaligned slices) and ``hybrid`` (refinement on top of OCM), plus the
untouched input as a baseline.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .contour import extract_contour, rasterize_contour, smooth_contour
from .errors import ConfigError, EmptyMask, InvalidConfig, ReconError
from .io import dumps, load_stack, save_field, save_stack, save_volume, write_json, read_json
from .metrics import evaluate_all
from .ocm import OcmOptions, register_stack
from .phantom import PhantomConfig, generate_phantom
from .refine.predictor import PredictorParams
from .refine.stack import refine_stack
from .refine.variational import RefineConfig
from .types import ParameterBounds, SliceStack
from .volume import measure, stack_to_volume

logger = logging.getLogger(__name__)

STAGES = ("phantom", "ocm", "refine", "smooth", "reconstruct", "evaluate")
ARMS = ("ocm_only", "refine_only", "hybrid")


@dataclass
class SmoothConfig:
    segment_len: int = 8
    samples_per_segment: int = 16


@dataclass
class PipelineConfig:
    output_dir: str = "out"
    seed: int = 0
    stages: Dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})
    arms: List[str] = field(default_factory=lambda: list(ARMS))
    phantom: PhantomConfig = field(default_factory=lambda: PhantomConfig(amplitude=4.0))
    input_stack: Optional[str] = None      # use a stack on disk instead of a phantom
    reference_stack: Optional[str] = None  # ground truth for evaluation when not a phantom
    bounds: Optional[ParameterBounds] = None
    ocm: OcmOptions = field(default_factory=OcmOptions)
    refine: RefineConfig = field(default_factory=RefineConfig)
    predictor: Optional[str] = None        # params file for the amortized backend
    smooth: SmoothConfig = field(default_factory=SmoothConfig)

    def validate(self) -> None:
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise InvalidConfig(f"unknown stages {sorted(unknown)}")
        bad_arms = set(self.arms) - set(ARMS)
        if bad_arms:
            raise InvalidConfig(f"unknown arms {sorted(bad_arms)}")
        for name in ("input_stack", "reference_stack", "predictor"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise InvalidConfig(f"{name} path does not exist: {p}")
        if not self.enabled("phantom") and self.input_stack is None:
            raise InvalidConfig("either enable the phantom stage or give input_stack")
        if self.refine.backend == "amortized" and self.enabled("refine") and self.predictor is None:
            raise InvalidConfig("the amortized backend needs a predictor params file")
        if self.enabled("phantom"):
            self.phantom.validate()

    def enabled(self, stage: str) -> bool:
        # stages left out of a partial mapping keep their default (on)
        return bool(self.stages.get(stage, True))

    def to_dict(self) -> dict:
        return {
            "output_dir": self.output_dir,
            "seed": self.seed,
            "stages": {s: self.enabled(s) for s in STAGES},
            "arms": list(self.arms),
            "phantom": self.phantom.to_dict(),
            "input_stack": self.input_stack,
            "reference_stack": self.reference_stack,
            "bounds": None if self.bounds is None else self.bounds.to_dict(),
            "ocm": self.ocm.to_dict(),
            "refine": self.refine.to_dict(),
            "predictor": self.predictor,
            "smooth": dict(self.smooth.__dict__),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {"output_dir", "seed", "stages", "arms", "phantom", "input_stack", "reference_stack",
                 "bounds", "ocm", "refine", "predictor", "smooth"}
        extra = set(d) - known
        if extra:
            raise InvalidConfig(f"unknown config keys {sorted(extra)}")
        cfg = cls()
        if "output_dir" in d:
            cfg.output_dir = str(d["output_dir"])
        if "seed" in d:
            cfg.seed = int(d["seed"])
        if "stages" in d:
            cfg.stages = {**{s: True for s in STAGES}, **d["stages"]}
        if "arms" in d:
            cfg.arms = list(d["arms"])
        try:
            if d.get("phantom") is not None:
                cfg.phantom = PhantomConfig.from_dict({**PhantomConfig(amplitude=4.0).to_dict(), **d["phantom"]})
            if d.get("bounds") is not None:
                cfg.bounds = ParameterBounds.from_dict(d["bounds"])
            if d.get("ocm") is not None:
                cfg.ocm = OcmOptions.from_dict(d["ocm"])
            if d.get("refine") is not None:
                cfg.refine = RefineConfig.from_dict(d["refine"])
            if d.get("smooth") is not None:
                cfg.smooth = SmoothConfig(**d["smooth"])
        except (TypeError, ValueError) as exc:
            raise InvalidConfig(str(exc)) from exc
        cfg.input_stack = d.get("input_stack")
        cfg.reference_stack = d.get("reference_stack")
        cfg.predictor = d.get("predictor")
        return cfg


@dataclass
class RunResult:
    status: str
    report: dict
    manifest: dict
    exit_code: int = 0


def smooth_stack(stack: SliceStack, cfg: SmoothConfig):
    """Bezier-smooth each mask slice; empty slices pass through."""
    out, contours = [], []
    h, w = stack.shape
    for m in stack:
        if not m.data.any():
            out.append(m)
            contours.append(None)
            continue
        c = smooth_contour(extract_contour(m), cfg.segment_len, cfg.samples_per_segment)
        out.append(rasterize_contour(c, (h, w), m.spacing))
        contours.append(c)
    return stack.replace(out), contours


def _versions() -> dict:
    import numba
    import scipy
    import torch
    return {"artifact": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "torch": torch.__version__}


def _write_refine_trace(path: Path, traces_by_arm: Dict[str, list]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["arm", "slice", "iteration", "loss"])
        for arm, traces in traces_by_arm.items():
            for i, tr in enumerate(traces):
                for k, v in enumerate(tr):
                    wr.writerow([arm, i, k, repr(float(v))])


def _write_ocm_trace(path: Path, records: list) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["slice", "objective", "s", "theta_deg", "tx", "ty", "converged"])
        for i, r in enumerate(records):
            wr.writerow([i, repr(float(r["objective"])), repr(r["s"]), repr(r["theta_deg"]),
                         repr(r["tx"]), repr(r["ty"]), int(r["converged"])])


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Execute the enabled stages in order and write every artifact.

    A failing stage stops the run; artifacts written so far stay on disk and
    the manifest names the stage that failed.
    """
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    # the output location does not change results, so it stays out of the hash
    hashed = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    config_json = dumps(hashed)
    manifest = {
        "versions": _versions(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_sha256": hashlib.sha256(config_json.encode()).hexdigest(),
        "stages": [],
        "status": "running",
    }
    report: dict = {"config_sha256": manifest["config_sha256"], "arms": {}}
    state: dict = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        entry = {"stage": name, "status": "ok"}
        try:
            fn()
        except Exception as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            manifest["failed_stage"] = name
            raise
        finally:
            entry["seconds"] = time.perf_counter() - t0
            manifest["stages"].append(entry)
            write_json(out / "run_manifest.json", manifest)

    def do_phantom():
        pcfg = PhantomConfig.from_dict({**cfg.phantom.to_dict(), "seed": cfg.seed})
        ph = generate_phantom(pcfg)
        save_stack(out / "phantom" / "truth", ph.truth)
        save_stack(out / "phantom" / "perturbed", ph.perturbed)
        write_json(out / "phantom" / "ground_truth.json", {
            "config": pcfg.to_dict(),
            "transforms": [T.to_dict() for T in ph.gt_transforms],
        })
        if pcfg.amplitude > 0:
            (out / "phantom" / "fields").mkdir(parents=True, exist_ok=True)
            for i, phi in enumerate(ph.gt_fields):
                save_field(out / "phantom" / "fields" / f"field_{i:03d}", phi)
        state["input"] = ph.perturbed
        state["reference"] = ph.truth

    def do_load():
        state["input"] = load_stack(cfg.input_stack)
        if cfg.reference_stack:
            state["reference"] = load_stack(cfg.reference_stack)

    def do_ocm():
        res = register_stack(state["input"], cfg.bounds, cfg.ocm)
        state["ocm"] = res.aligned
        d = out / "ocm"
        save_stack(d / "aligned", res.aligned)
        write_json(d / "transforms.json", res.to_records())
        _write_ocm_trace(d / "ocm_trace.csv", res.to_records())

    def do_refine():
        params = PredictorParams.load(cfg.predictor) if cfg.predictor else None
        traces = {}
        sources = {"hybrid": state.get("ocm"), "refine_only": state["input"]}
        for arm in ("refine_only", "hybrid"):
            if arm not in cfg.arms or sources[arm] is None:
                continue
            refined, fields, tr = refine_stack(sources[arm], cfg.refine, params)
            state[arm] = refined
            traces[arm] = tr
            d = out / "refine" / arm
            save_stack(d / "stack", refined)
            (d / "fields").mkdir(exist_ok=True)
            for i, phi in enumerate(fields):
                save_field(d / "fields" / f"field_{i:03d}", phi)
        _write_refine_trace(out / "refine" / "refine_trace.csv", traces)

    def arm_stacks() -> Dict[str, SliceStack]:
        stacks = {"input": state["input"]}
        if "ocm_only" in cfg.arms and "ocm" in state:
            stacks["ocm_only"] = state["ocm"]
        for arm in ("refine_only", "hybrid"):
            if arm in state:
                stacks[arm] = state[arm]
        return stacks

    def do_smooth():
        smoothed = {}
        for arm, st in arm_stacks().items():
            if not st.is_mask:
                continue
            s, contours = smooth_stack(st, cfg.smooth)
            smoothed[arm] = s
            save_stack(out / "smooth" / arm, s)
            write_json(out / "smooth" / f"{arm}_contours.json",
                       [None if c is None else c.to_dict() for c in contours])
        state["smoothed"] = smoothed

    def final_stacks() -> Dict[str, SliceStack]:
        stacks = arm_stacks()
        stacks.update(state.get("smoothed", {}))
        return stacks

    def scale_of(st: SliceStack) -> float:
        return st.scale if st.scale is not None else st.spacing[0]

    def do_reconstruct():
        ref = state.get("reference")
        ref_vol = stack_to_volume(ref, scale_of(ref)) if ref is not None else None
        meas = {}
        (out / "volumes").mkdir(parents=True, exist_ok=True)
        for arm, st in final_stacks().items():
            if not st.is_mask:
                continue
            vol = stack_to_volume(st, scale_of(st))
            save_volume(out / "volumes" / arm, vol)
            try:
                meas[arm] = measure(vol, ref_vol)
            except ReconError as exc:
                meas[arm] = {"error": str(exc)}
        write_json(out / "measurements.json", meas)

    def do_evaluate():
        ref = state.get("reference")
        if ref is None:
            raise ConfigError("evaluation needs a reference (phantom truth or reference_stack)")
        ref_vol = stack_to_volume(ref, scale_of(ref))
        for arm, st in final_stacks().items():
            try:
                rep = evaluate_all(st, ref_vol)
                report["arms"][arm] = rep.to_dict()
            except EmptyMask as exc:
                report["arms"][arm] = {"error": str(exc)}
        write_json(out / "report.json", report)

    status, code = "ok", 0
    try:
        if cfg.enabled("phantom") and cfg.input_stack is None:
            stage("phantom", do_phantom)
        else:
            stage("load", do_load)
        if cfg.enabled("ocm") and ("ocm_only" in cfg.arms or "hybrid" in cfg.arms):
            stage("ocm", do_ocm)
        if cfg.enabled("refine"):
            stage("refine", do_refine)
        if cfg.enabled("smooth"):
            stage("smooth", do_smooth)
        if cfg.enabled("reconstruct"):
            stage("reconstruct", do_reconstruct)
        if cfg.enabled("evaluate"):
            stage("evaluate", do_evaluate)
    except ReconError as exc:
        logger.error("pipeline failed: %s", exc)
        status, code = "failed", exc.exit_code
    except OSError as exc:
        logger.error("pipeline I/O failure: %s", exc)
        status, code = "failed", 4
    manifest["status"] = status
    write_json(out / "run_manifest.json", manifest)
    return RunResult(status, report, manifest, code)


def load_config(path) -> PipelineConfig:
    return PipelineConfig.from_dict(read_json(path))
