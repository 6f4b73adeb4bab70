"""SI-SNRi / SDRi metrics, cross-dataset evaluation and the gate probe."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .checkpoint import load_checkpoint
from .data import Manifest, materialize
from .dsp import AudioBuffer
from .losses import EPS, pit_si_snr, si_snr
from .model import SeparationModel

log = logging.getLogger(__name__)


def _f64(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        x = x.samples
    elif isinstance(x, ag.Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def si_snr_db(est, ref, eps: float = EPS) -> float:
    with ag.no_grad():
        return si_snr(ag.Tensor(_f64(est)), ag.Tensor(_f64(ref)), eps).item()


def si_snri(est, ref, mixture, eps: float = EPS) -> float:
    e, r, m = _f64(est), _f64(ref), _f64(mixture)
    if not e.shape == r.shape == m.shape:
        raise ValueError(f"length mismatch: {e.shape}, {r.shape}, {m.shape}")
    return si_snr_db(e, r, eps) - si_snr_db(m, r, eps)


def sdr_db(est, ref, eps: float = EPS) -> float:
    """Plain SDR, ``10 log10(|ref|^2 / (|ref - est|^2 + eps))``, without BSS-eval filtering."""
    e, r = _f64(est), _f64(ref)
    d = r - e
    return float(10 * np.log10(np.dot(r, r) / (np.dot(d, d) + eps)))


def sdri(est, ref, mixture, eps: float = EPS) -> float:
    e, r, m = _f64(est), _f64(ref), _f64(mixture)
    if not e.shape == r.shape == m.shape:
        raise ValueError(f"length mismatch: {e.shape}, {r.shape}, {m.shape}")
    return sdr_db(e, r, eps) - sdr_db(m, r, eps)


METRICS = ("si_snr_before", "si_snr_after", "si_snri", "sdri")


@dataclass
class EvalReport:
    tag: str
    model_id: str
    records: list[dict] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        out = {}
        for key in METRICS:
            vals = np.array([r[key] for r in self.records], dtype=np.float64)
            out[key] = {"mean": float(vals.mean()) if len(vals) else float("nan"),
                        "median": float(np.median(vals)) if len(vals) else float("nan"),
                        "count": int(len(vals))}
        return out

    def to_dict(self) -> dict:
        return {"tag": self.tag, "model": self.model_id, "aggregates": self.aggregates,
                "records": self.records, "missing": self.missing}

    def write(self, out_dir: str | os.PathLike, csv_export: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{self.tag}.jsonl", "w") as f:
            for r in self.records:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        with open(out / f"{self.tag}.summary.json", "w") as f:
            json.dump({"tag": self.tag, "model": self.model_id, "aggregates": self.aggregates,
                       "missing": self.missing}, f, indent=2, sort_keys=True)
        if csv_export:
            with open(out / f"{self.tag}.csv", "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=["id", "permutation", *METRICS])
                w.writeheader()
                for r in self.records:
                    w.writerow({**r, "permutation": " ".join(map(str, r["permutation"]))})


def evaluate_example(model: SeparationModel | None, mixture: AudioBuffer, sources: Sequence[AudioBuffer],
                     identity: bool = False) -> dict:
    """Separate one full utterance and score the PIT-aligned estimates.

    With ``identity`` every estimate is the mixture itself (debug path).
    """
    C = len(sources)
    if identity:
        ests = [_f64(mixture)] * C
    else:
        with ag.no_grad():
            y = model(ag.Tensor(mixture.samples.astype(model.dtype)))
        ests = [y.data[0, c].astype(np.float64) for c in range(y.shape[1])]
    refs = [_f64(s) for s in sources]
    with ag.no_grad():
        _, perm = pit_si_snr([ag.Tensor(e) for e in ests], [ag.Tensor(r) for r in refs])
    mix = _f64(mixture)
    before = [si_snr_db(mix, refs[perm[c]]) for c in range(C)]
    after = [si_snr_db(ests[c], refs[perm[c]]) for c in range(C)]
    improvements = [si_snri(ests[c], refs[perm[c]], mix) for c in range(C)]
    sdr_imp = [sdri(ests[c], refs[perm[c]], mix) for c in range(C)]
    return {"permutation": list(perm), "si_snr_before": float(np.mean(before)),
            "si_snr_after": float(np.mean(after)), "si_snri": float(np.mean(improvements)),
            "sdri": float(np.mean(sdr_imp))}


def evaluate(model: SeparationModel | str | os.PathLike | None, manifests: Sequence[tuple[str, Manifest]],
             identity: bool = False, model_id: str | None = None) -> dict[str, EvalReport]:
    """Evaluate one model over several tagged test manifests (full utterances, no cropping).

    Records whose audio files are missing are skipped and listed in the report.
    """
    if isinstance(model, (str, os.PathLike)):
        model_id = model_id or str(model)
        model = load_checkpoint(model).model
    if model is None and not identity:
        raise ValueError("a model is required unless identity=True")
    model_id = model_id or ("identity" if identity else "in-memory")
    reports = {}
    for tag, manifest in manifests:
        if not len(manifest):
            raise ValueError(f"test set {tag!r} is empty")
        report = EvalReport(tag, model_id)
        for rec in manifest.records:
            missing = [str(manifest.resolve(p)) for p in rec.source_paths if not manifest.resolve(p).exists()]
            if missing:
                log.warning("%s: skipping %s, missing %s", tag, rec.id, ", ".join(missing))
                report.missing.extend(missing)
                continue
            ex = materialize(manifest, rec)
            row = evaluate_example(model, ex.mixture, ex.sources, identity)
            report.records.append({"id": rec.id, **row})
        reports[tag] = report
    return reports


def summary_table(reports: dict[str, EvalReport]) -> str:
    """Side-by-side table, one column per test set."""
    tags = list(reports)
    width = max(12, *(len(t) for t in tags))
    lines = ["metric".ljust(16) + "".join(t.rjust(width + 2) for t in tags)]
    for key, label in (("si_snri", "SI-SNRi mean"), ("sdri", "SDRi mean"), ("si_snr_after", "SI-SNR mean")):
        cells = [f"{reports[t].aggregates[key]['mean']:.3f}".rjust(width + 2) for t in tags]
        lines.append(label.ljust(16) + "".join(cells))
    lines.append("count".ljust(16) + "".join(str(len(reports[t].records)).rjust(width + 2) for t in tags))
    return "\n".join(lines)


def probe_gates(model: SeparationModel | str | os.PathLike, x: AudioBuffer) -> list[dict]:
    """Time-averaged sigmoid gate value per channel for every gated layer."""
    if isinstance(model, (str, os.PathLike)):
        model = load_checkpoint(model).model
    if model.config.encoder_variant != "glu":
        raise ValueError(f"gate probe needs a glu-variant model, got {model.config.encoder_variant!r}")
    layers = model.gated_layers()
    for _, layer in layers:
        layer.record_gate = True
    try:
        with ag.no_grad():
            model(ag.Tensor(x.samples.astype(model.dtype)))
        stats = []
        for name, layer in layers:
            gate = layer.last_gate[0].astype(np.float64)  # [N, K]
            means = gate.mean(axis=-1)
            stats.append({"layer": name, "channel_mean": means.tolist(), "min": float(gate.min()),
                          "max": float(gate.max()), "frames": int(gate.shape[-1])})
        return stats
    finally:
        for _, layer in layers:
            layer.record_gate = False
            layer.last_gate = None
