"""Config-driven experiment execution, checkpointing, and report emission.

A run directory contains the verbatim config, one subdirectory per train
seed with per-stage checkpoints/reports, and an aggregate summary. Output
bytes are a pure function of (config, seeds): nothing time- or
path-dependent is written.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .buffer import ExemplarBuffer, update_buffer
from .config import ExperimentConfig
from .convlora import PluginSet, deserialize_adapter, serialize_adapter
from .datasets import Dataset, ingest_dataset
from .errors import DataError
from .gating import WeightingUnit
from .metrics import (MetricsReport, StageRecord, confusion_matrix,
                      drift_all_taps, memory_ledger, parameter_report,
                      stage_accuracy)
from .seeding import derive_seed, numpy_rng, param_checksum
from .streams import TaskStream, split_stream
from .substrate import ClassifierHead
from .tensorio import load_module, load_tensors, save_module
from .trainer import (DlcState, init_state, phase1_train, phase2_train,
                      predict, snapshot_teacher)

REPORT_COLUMNS = ("stage", "known_classes", "a_b", "a_mean_so_far",
                  "lora_params", "extractor_params", "buffer_count", "memory_mb")
DRIFT_PROBE_SIZE = 256


def _select_probe(stream: TaskStream, stage: int, seed: int) -> np.ndarray:
    """Seeded probe batch of old-task test images (current task at stage 1)."""
    upto = stage - 1 if stage > 1 else 1
    images, _ = stream.test_up_to(upto)
    rng = numpy_rng(derive_seed(seed, "probe", stage))
    take = min(DRIFT_PROBE_SIZE, len(images))
    picks = rng.choice(len(images), size=take, replace=False)
    return images[picks]


def _write_plugin_file(path: Path, state: DlcState) -> None:
    blob = bytearray(struct.pack("<I", len(state.plugin_sets)))
    for pset in state.plugin_sets:
        blob += struct.pack("<I", len(pset.adapters))
        for adapter in pset.adapters:
            payload = serialize_adapter(adapter, pset.task_id)
            blob += struct.pack("<Q", len(payload))
            blob += payload
    path.write_bytes(bytes(blob))


def read_plugin_file(path: Path) -> list[list[tuple]]:
    """Plugin checkpoint as [[(adapter, task_id), ...] per set]."""
    raw = path.read_bytes()
    (n_sets,) = struct.unpack_from("<I", raw, 0)
    offset = 4
    sets = []
    for _ in range(n_sets):
        (n_adapters,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        adapters = []
        for _ in range(n_adapters):
            (length,) = struct.unpack_from("<Q", raw, offset)
            offset += 8
            adapters.append(deserialize_adapter(raw[offset : offset + length]))
            offset += length
        sets.append(adapters)
    return sets


def _write_csv(path: Path, header: tuple[str, ...], rows) -> None:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(out.getvalue())


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_confusions(report: MetricsReport, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for record, matrix in zip(report.stages, report.confusions):
        path = directory / f"stage_{record.stage:02d}.txt"
        lines = [" ".join(str(int(v)) for v in row) for row in matrix]
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def emit_report(report: MetricsReport, directory: str | Path,
                header_info: dict | None = None) -> list[Path]:
    """Write report.csv, summary.txt, and per-stage confusion grids."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []

    csv_path = directory / "report.csv"
    rows = [
        [_format_cell(v) for v in (s.stage, s.known_classes, s.a_b, s.a_mean_so_far,
                                   s.lora_params, s.extractor_params,
                                   s.buffer_count, s.memory_mb)]
        for s in report.stages
    ]
    _write_csv(csv_path, REPORT_COLUMNS, rows)
    paths.append(csv_path)

    lines = []
    if header_info:
        lines.append("run:")
        for key, value in header_info.items():
            lines.append(f"  {key}: {_format_cell(value)}")
    lines.append("results:")
    lines.append(f"  a_last: {report.a_last!r}")
    lines.append(f"  a_bar: {report.a_bar!r}")
    lines.append("stage_accuracies:")
    for record in report.stages:
        lines.append(f"  stage_{record.stage}: {record.a_b!r}")
    summary_path = directory / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    paths.append(summary_path)

    paths.extend(_write_confusions(report, directory / "confusion"))
    return paths


def parse_report_csv(path: str | Path) -> list[StageRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected report columns {reader.fieldnames}")
        for row in reader:
            records.append(StageRecord(
                stage=int(row["stage"]),
                known_classes=int(row["known_classes"]),
                a_b=float(row["a_b"]),
                a_mean_so_far=float(row["a_mean_so_far"]),
                lora_params=int(row["lora_params"]),
                extractor_params=int(row["extractor_params"]),
                buffer_count=int(row["buffer_count"]),
                memory_mb=float(row["memory_mb"]),
            ))
    return records


def _save_checkpoint(stage_dir: Path, state: DlcState, buffer: ExemplarBuffer,
                     predictions: np.ndarray, labels: np.ndarray,
                     manifest: dict) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    save_module(stage_dir / "extractor.ten", state.extractor)
    save_module(stage_dir / "base_head.ten", state.base_head)
    if state.aggregate_head is not None:
        save_module(stage_dir / "aggregate_head.ten", state.aggregate_head)
    if state.gate_unit is not None:
        save_module(stage_dir / "gate.ten", state.gate_unit)
    if state.teacher_extractor is not None:
        save_module(stage_dir / "teacher_extractor.ten", state.teacher_extractor)
        save_module(stage_dir / "teacher_head.ten", state.teacher_head)
    _write_plugin_file(stage_dir / "plugins.bin", state)
    _write_csv(stage_dir / "buffer.csv", ("task_id", "label", "dataset_index"),
               buffer.manifest_rows())
    _write_csv(stage_dir / "predictions.csv", ("label", "prediction"),
               [(int(y), int(p)) for y, p in zip(labels, predictions)])
    (stage_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def run_single(config: ExperimentConfig, seed: int, seed_dir: str | Path,
               dataset: Dataset | None = None) -> MetricsReport:
    """One full incremental run under one train seed; writes the seed dir."""
    torch.set_num_threads(1)  # keeps reduction order, and thus bytes, reproducible
    seed_dir = Path(seed_dir)
    seed_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = ingest_dataset(
            config.dataset_format, config.dataset_path or None,
            config.class_count,
            config.synthetic_spec() if config.dataset_format == "synthetic" else None,
        )
    stream = split_stream(dataset, config.base_m, config.inc_n, config.order_seed)
    train_cfg = config.train_config(seed)
    in_channels = dataset.image_shape[2]
    state = init_state(config.backbone_spec(in_channels), train_cfg)
    buffer = ExemplarBuffer(train_cfg.buffer_capacity)
    bytes_per_exemplar = config.bytes_per_exemplar or dataset.bytes_per_image()

    report = MetricsReport()
    for task in stream.tasks:
        stage = task.task_id
        phase1_train(state, task, buffer, train_cfg)
        manifest: dict = {
            "stage": stage,
            "task_classes": list(task.class_ids),
            "phi_after_phase1": param_checksum(state.extractor),
        }
        if train_cfg.dlc:
            probe = _select_probe(stream, stage, seed)
            phi_before = copy.deepcopy(state.extractor)
            phase2_train(state, task, buffer, train_cfg)
            drifts = drift_all_taps(phi_before, state.extractor, probe)
            manifest["phase2_phi_before"] = param_checksum(phi_before)
            manifest["phase2_phi_after"] = param_checksum(state.extractor)
            manifest["phase2_drift"] = {
                d.layer: [d.mean_l2, d.max_l2] for d in drifts
            }
        state.complete_stage(task)
        snapshot_teacher(state)
        if train_cfg.uses_replay and train_cfg.buffer_capacity > 0:
            update_buffer(buffer, task, state.extractor)

        images, labels = stream.test_up_to(stage)
        predictions = predict(state, images)
        known = stream.known_classes(stage)
        a_b = stage_accuracy(predictions, labels)
        params = parameter_report(state)
        ledger = memory_ledger(params.model_total, config.bytes_per_param,
                               len(buffer), bytes_per_exemplar)
        record = StageRecord(
            stage=stage,
            known_classes=known,
            a_b=a_b,
            a_mean_so_far=0.0,  # filled below once appended
            lora_params=params.lora_total,
            extractor_params=params.extractor_total,
            buffer_count=len(buffer),
            memory_mb=ledger.total_mb,
        )
        report.stages.append(record)
        record.a_mean_so_far = sum(report.stage_accuracies) / len(report.stages)
        report.confusions.append(confusion_matrix(predictions, labels, known))

        manifest.update({
            "known_classes": known,
            "a_b": a_b,
            "buffer_count": len(buffer),
            "lora_params": params.lora_total,
            "extractor_params": params.extractor_total,
            "heads_params": params.heads_total,
            "gate_params": params.gate_total,
            "memory_mb": ledger.total_mb,
            "phi_final": param_checksum(state.extractor),
            "plugin_checksums": {
                str(pset.task_id): pset.checksum() for pset in state.plugin_sets
            },
        })
        _save_checkpoint(seed_dir / "checkpoints" / f"stage_{stage:02d}",
                         state, buffer, predictions, labels, manifest)

    emit_report(report, seed_dir, header_info={
        "method": train_cfg.method,
        "dlc": train_cfg.dlc,
        "gate": train_cfg.gate,
        "seed": seed,
        "stages": len(stream),
    })
    return report


def run_experiment(config: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Execute every configured seed; returns per-seed reports and means."""
    config.validate()
    root = Path(output_dir) if output_dir is not None else Path(config.output_dir)
    if str(root) in ("", "."):
        raise DataError("an output directory is required (output_dir or --output)")
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(config.to_text())
    marker = root / "INCOMPLETE"  # removed when every seed finished
    marker.write_text("run still in progress or aborted\n")

    dataset = ingest_dataset(
        config.dataset_format, config.dataset_path or None, config.class_count,
        config.synthetic_spec() if config.dataset_format == "synthetic" else None,
    )

    reports: dict[int, MetricsReport] = {}
    for seed in config.seeds:
        reports[seed] = run_single(config, seed, root / f"seed_{seed}", dataset=dataset)
    marker.unlink()

    mean_a_last = sum(r.a_last for r in reports.values()) / len(reports)
    mean_a_bar = sum(r.a_bar for r in reports.values()) / len(reports)

    lines = ["experiment:"]
    for key in ("method", "dlc", "gate", "base_m", "inc_n", "class_count"):
        lines.append(f"  {key}: {_format_cell(getattr(config, key))}")
    lines.append("seeds:")
    for seed, rep in reports.items():
        lines.append(f"  seed_{seed}:")
        lines.append(f"    a_last: {rep.a_last!r}")
        lines.append(f"    a_bar: {rep.a_bar!r}")
    lines.append("aggregate:")
    lines.append(f"  mean_a_last: {mean_a_last!r}")
    lines.append(f"  mean_a_bar: {mean_a_bar!r}")
    (root / "summary.txt").write_text("\n".join(lines) + "\n")

    return {
        "reports": reports,
        "mean_a_last": mean_a_last,
        "mean_a_bar": mean_a_bar,
        "root": root,
    }


def _load_head(stage_dir: Path, name: str, role: str) -> ClassifierHead | None:
    path = stage_dir / f"{name}.ten"
    if not path.exists():
        return None
    weight = load_tensors(path)["weight"]
    head = ClassifierHead(weight.shape[0], weight.shape[1], role)
    load_module(path, head)
    return head


def load_stage_checkpoint(stage_dir: str | Path, config: ExperimentConfig,
                          in_channels: int) -> DlcState:
    """Reconstruct an inference-ready learner from a stage checkpoint."""
    stage_dir = Path(stage_dir)
    manifest = json.loads((stage_dir / "manifest.json").read_text())
    state = init_state(config.backbone_spec(in_channels),
                       config.train_config(config.seeds[0]))
    load_module(stage_dir / "extractor.ten", state.extractor)
    state.base_head = _load_head(stage_dir, "base_head", "base")
    state.aggregate_head = _load_head(stage_dir, "aggregate_head", "aggregate")
    gate_path = stage_dir / "gate.ten"
    if gate_path.exists():
        tensors = load_tensors(gate_path)
        unit = WeightingUnit(tensors["w_down"].shape[1], tensors["w_down"].shape[0])
        load_module(gate_path, unit)
        state.gate_unit = unit
    else:
        state.gate_unit = None
    state.plugin_sets = []
    for adapters in read_plugin_file(stage_dir / "plugins.bin"):
        pset = PluginSet(adapters[0][1], [a for a, _ in adapters])
        pset.freeze()
        state.plugin_sets.append(pset)
    state.completed_stages = manifest["stage"]
    state.known_class_count = manifest["known_classes"]
    return state


def rebuild_report(seed_dir: str | Path) -> tuple[MetricsReport, dict]:
    """Reconstruct a metrics report from stored per-stage predictions."""
    seed_dir = Path(seed_dir)
    stage_dirs = sorted((seed_dir / "checkpoints").glob("stage_*"))
    if not stage_dirs:
        raise DataError(f"{seed_dir}: no stage checkpoints found")
    report = MetricsReport()
    header: dict = {}
    for stage_dir in stage_dirs:
        manifest = json.loads((stage_dir / "manifest.json").read_text())
        labels, predictions = [], []
        with open(stage_dir / "predictions.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                labels.append(int(row["label"]))
                predictions.append(int(row["prediction"]))
        labels_arr = np.array(labels, dtype=np.int64)
        preds_arr = np.array(predictions, dtype=np.int64)
        known = manifest["known_classes"]
        a_b = stage_accuracy(preds_arr, labels_arr)
        report.stages.append(StageRecord(
            stage=manifest["stage"],
            known_classes=known,
            a_b=a_b,
            a_mean_so_far=0.0,
            lora_params=manifest["lora_params"],
            extractor_params=manifest["extractor_params"],
            buffer_count=manifest["buffer_count"],
            memory_mb=manifest["memory_mb"],
        ))
        report.stages[-1].a_mean_so_far = (
            sum(report.stage_accuracies) / len(report.stages))
        report.confusions.append(confusion_matrix(preds_arr, labels_arr, known))
        header = {"stages": manifest["stage"]}
    return report, header
