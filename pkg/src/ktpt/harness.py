"""Experiment orchestration: the three comparison tables, configs, caching
and report emission."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
import statistics
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .data import (
    SPLITS,
    CsvSchema,
    DataSplits,
    GeneratorConfig,
    generate_synthetic,
    load_csv,
    standardize_splits,
)
from .models import Mlp, StackedLstm, save_model
from .numerics import rng_for
from .pretrain import CdConfig, PhaseConfigs, PretrainPlan, generate_soft_targets, run_plan
from .train import HardLoss, SgdConfig, frame_accuracy, gradient_variance_diagnostic, run_training

log = logging.getLogger(__name__)

DEFAULT_OUT = "ktpt-out"
TABLE1_SYSTEMS = ("teacher", "raw", "prt.", "prt.+ft.")
TABLE2_SYSTEMS = ("teacher-weak", "raw", "prt.", "prt.+ft.")
TABLE3_SYSTEMS = (
    "teacher-strong", "teacher-weak", "raw", "rbm", "discriminative",
    "kt(strong)", "kt(weak)", "rbm+kt(strong)", "rbm+kt(weak)",
)
# teachers first, then students in the order the tables list them
SYSTEM_ORDER = {s: i for i, s in enumerate((
    "teacher", "teacher-strong", "teacher-weak", "raw", "prt.", "prt.+ft.", *TABLE3_SYSTEMS[3:],
))}
HEADER = ("System", "#LSTM/Spec", "T", "TR FA%", "CV FA%", "ER%", "seed")


def _sgd(**kw):
    return field(default_factory=lambda: SgdConfig(**kw))


@dataclass
class ExperimentConfig:
    """Everything an experiment depends on besides the seed.

    ``data_dir`` (CSV splits written by ``gen-data``) takes precedence over
    the generator settings in ``data``.
    """

    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    data_dir: str | None = None
    teacher_sizes: list = field(default_factory=lambda: [64, 64])
    weak_teacher_sizes: list = field(default_factory=lambda: [64])
    lstm_hidden: int = 48
    lstm_layers: list = field(default_factory=lambda: [1, 2])
    mlp_student_sizes: list = field(default_factory=lambda: [48, 48, 48])
    temperatures: list = field(default_factory=lambda: [1.0, 2.0])
    table3_temperature: float = 2.0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    teacher_sgd: SgdConfig = _sgd(learning_rate=0.5, batch_size=128, max_epochs=20)
    lstm_sgd: SgdConfig = _sgd(learning_rate=0.05, batch_size=32, max_epochs=6)
    mlp_sgd: SgdConfig = _sgd(learning_rate=0.02, batch_size=128, max_epochs=6)
    cd: CdConfig = field(default_factory=CdConfig)
    lstm_reinit_output: bool = False
    mlp_reinit_output: bool = True
    diagnostic_temperatures: list = field(default_factory=lambda: [1.0, 2.0, 5.0])
    diagnostic_sequences: int = 20
    out_dir: str | None = None
    workers: int = 1
    timing: bool = False
    save_models: bool = False

    def validate(self):
        if not self.seeds:
            raise ValueError("seed list must be non-empty")
        if not self.temperatures:
            raise ValueError("temperature list must be non-empty")
        if self.data_dir is not None:
            for name in SPLITS:
                path = Path(self.data_dir) / f"{name}.csv"
                if not path.exists():
                    raise FileNotFoundError(f"missing {path} (produced by `ktpt gen-data`)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        self.data.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict):
        """Build from a nested mapping; unknown keys are rejected and missing
        nested keys keep this config's defaults."""
        nested = {"data": GeneratorConfig, "teacher_sgd": SgdConfig, "lstm_sgd": SgdConfig,
                  "mlp_sgd": SgdConfig, "cd": CdConfig}
        names = {f.name for f in dataclasses.fields(cls)}
        defaults = cls()
        kwargs = {}
        for key, value in raw.items():
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            if key in nested:
                sub = nested[key]
                allowed = {f.name for f in dataclasses.fields(sub)}
                bad = set(value) - allowed
                if bad:
                    raise ValueError(f"unknown config key(s) {sorted(bad)} under {key!r}")
                value = dataclasses.replace(getattr(defaults, key), **value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def cache_key(self):
        d = self.to_dict()
        for k in ("out_dir", "workers", "timing", "save_models", "seeds"):
            d.pop(k)
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class ResultRow:
    system: str
    spec: str
    temperature: float | None
    tr_fa: float
    cv_fa: float
    test_error_rate: float
    seed: int
    seconds: float = 0.0

    def __post_init__(self):
        for name in ("tr_fa", "cv_fa", "test_error_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a fraction")

    def sort_key(self):
        return (SYSTEM_ORDER.get(self.system, len(SYSTEM_ORDER)), self.system, self.spec,
                -1.0 if self.temperature is None else self.temperature, self.seed)


def load_splits(config: ExperimentConfig) -> DataSplits:
    if config.data_dir is None:
        raw = generate_synthetic(config.data)
    else:
        k = config.data.num_classes
        meta = Path(config.data_dir) / "dataset.json"
        if meta.exists():
            k = json.loads(meta.read_text(encoding="utf-8"))["num_classes"]
        raw = DataSplits(*(load_csv(Path(config.data_dir) / f"{s}.csv", CsvSchema(k, split=s))
                           for s in SPLITS))
    return standardize_splits(raw)


_CACHE: dict = {}


def _cached(key, fn):
    """Process-local memo for teachers and raw baselines shared by tables."""
    if key not in _CACHE:
        _CACHE[key] = fn()
    return _CACHE[key]


def _fingerprint(splits):
    return tuple(zlib.crc32(s.all_frames.tobytes()) for s in splits)


def clear_cache():
    _CACHE.clear()


def _row(system, spec, t, model, splits, seed, seconds):
    return ResultRow(system, spec, t, frame_accuracy(model, splits.train),
                     frame_accuracy(model, splits.cv), 1.0 - frame_accuracy(model, splits.test),
                     seed, seconds)


def _arm_dir(config, *parts):
    if config.out_dir is None or not config.save_models:
        return None
    path = Path(config.out_dir, "arms", *parts)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _maybe_save(model, directory, name):
    if directory is not None:
        save_model(model, directory / name)


def spec_label(sizes):
    return "-".join(str(s) for s in sizes)


def train_teacher(config, splits, seed, sizes, name):
    """``(model, seconds)`` for an MLP teacher, memoised per config, data and seed."""

    def build():
        t0 = time.perf_counter()
        model = Mlp.init(splits.train.feature_dim, sizes, splits.train.num_classes,
                         rng_for(seed, f"teacher-{name}-init"))
        run_training(model, HardLoss(), splits, config.teacher_sgd, rng_for(seed, f"teacher-{name}-train"))
        return model, time.perf_counter() - t0

    return _cached((config.cache_key(), _fingerprint(splits), seed, "teacher", name, tuple(sizes)), build)


def _lstm_raw(config, splits, seed, layers):
    def build():
        t0 = time.perf_counter()
        d, k = splits.train.feature_dim, splits.train.num_classes
        model = StackedLstm.init(d, config.lstm_hidden, layers, k, rng_for(seed, f"lstm{layers}-init"))
        run_training(model, HardLoss(), splits, config.lstm_sgd, rng_for(seed, f"lstm{layers}-raw"))
        return model, time.perf_counter() - t0

    return _cached((config.cache_key(), _fingerprint(splits), seed, "lstm-raw", layers), build)


def _rnn_table(config, splits, seed, teacher_sizes, teacher_name, systems):
    teacher_label, raw_label, prt_label, ft_label = systems
    table = "table1" if teacher_name == "strong" else "table2"
    teacher, t_secs = train_teacher(config, splits, seed, teacher_sizes, teacher_name)
    rows = [_row(teacher_label, spec_label(teacher_sizes), None, teacher, splits, seed, t_secs)]
    d, k = splits.train.feature_dim, splits.train.num_classes
    phases = PhaseConfigs(config.lstm_sgd, config.lstm_sgd, config.cd)
    for layers in config.lstm_layers:
        spec = str(layers)
        arm = _arm_dir(config, table, f"seed{seed}", f"lstm{layers}")
        raw, secs = _lstm_raw(config, splits, seed, layers)
        rows.append(_row(raw_label, spec, None, raw, splits, seed, secs))
        _maybe_save(raw, arm, "raw.ktpt")
        for t in config.temperatures:
            t0 = time.perf_counter()
            targets = generate_soft_targets(teacher, splits.train, t, f"teacher-{teacher_name}")
            student = StackedLstm.init(d, config.lstm_hidden, layers, k, rng_for(seed, f"lstm{layers}-init"))
            plan = PretrainPlan("kt", t, reinit_output=config.lstm_reinit_output)
            pre, final = run_plan(plan, student, splits, phases, rng_for(seed, f"lstm{layers}-kt-{t!r}"),
                                  targets=targets)
            secs = time.perf_counter() - t0
            rows.append(_row(prt_label, spec, t, pre, splits, seed, secs))
            rows.append(_row(ft_label, spec, t, final, splits, seed, secs))
            _maybe_save(pre, arm, f"prt-T{t:g}.ktpt")
            _maybe_save(final, arm, f"prt+ft-T{t:g}.ktpt")
    return rows


def table1_arm(config, splits, seed):
    return _rnn_table(config, splits, seed, config.teacher_sizes, "strong", TABLE1_SYSTEMS)


def table2_arm(config, splits, seed):
    return _rnn_table(config, splits, seed, config.weak_teacher_sizes, "weak", TABLE2_SYSTEMS)


TABLE3_ARMS = (
    ("raw", "raw", None),
    ("rbm", "rbm", None),
    ("discriminative", "discriminative", None),
    ("kt(strong)", "kt", "strong"),
    ("kt(weak)", "kt", "weak"),
    ("rbm+kt(strong)", "rbm_then_kt", "strong"),
    ("rbm+kt(weak)", "rbm_then_kt", "weak"),
)


def table3_arm(config, splits, seed):
    sizes = config.mlp_student_sizes
    spec = spec_label(sizes)
    t = config.table3_temperature
    d, k = splits.train.feature_dim, splits.train.num_classes
    rows, targets = [], {}
    for name, teacher_sizes in (("strong", config.teacher_sizes), ("weak", config.weak_teacher_sizes)):
        teacher, secs = train_teacher(config, splits, seed, teacher_sizes, name)
        rows.append(_row(f"teacher-{name}", spec_label(teacher_sizes), None, teacher, splits, seed, secs))
        targets[name] = generate_soft_targets(teacher, splits.train, t, f"teacher-{name}")
    phases = PhaseConfigs(config.mlp_sgd, config.mlp_sgd, config.cd)
    arm = _arm_dir(config, "table3", f"seed{seed}")
    for label, strategy, teacher_name in TABLE3_ARMS:
        t0 = time.perf_counter()
        student = Mlp.init(d, sizes, k, rng_for(seed, "mlp-init"))
        plan = PretrainPlan(strategy, t if teacher_name else None, reinit_output=config.mlp_reinit_output)
        _, final = run_plan(plan, student, splits, phases, rng_for(seed, f"mlp-{label}"),
                            targets=targets.get(teacher_name), hidden_sizes=sizes)
        rows.append(_row(label, spec, t if teacher_name else None, final, splits, seed,
                         time.perf_counter() - t0))
        _maybe_save(final, arm, f"{strategy}-{teacher_name or 'none'}.ktpt")
    return rows


ARMS = {1: table1_arm, 2: table2_arm, 3: table3_arm}


def _run_unit(args):
    table, config, seed = args
    return ARMS[table](config, load_splits(config), seed)


def run_tables(config: ExperimentConfig, tables, splits: DataSplits | None = None):
    """Rows per table, one independent unit per (table, seed).

    Units may run in worker processes; the merge is sorted, so the result
    does not depend on completion order.
    """
    config.validate()
    units = [(t, config, s) for t in tables for s in config.seeds]
    if config.workers > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_unit, units))
    else:
        splits = splits or load_splits(config)
        results = [ARMS[t](c, splits, s) for t, c, s in units]
    out = {t: [] for t in tables}
    for (t, _, _), rows in zip(units, results):
        out[t].extend(rows)
    return {t: sorted(rows, key=ResultRow.sort_key) for t, rows in out.items()}


def reproduce_table_1(config, splits=None):
    return run_tables(config, [1], splits)[1]


def reproduce_table_2(config, splits=None):
    return run_tables(config, [2], splits)[2]


def reproduce_table_3(config, splits=None):
    return run_tables(config, [3], splits)[3]


def _pct(x):
    return f"{100.0 * x:.1f}"


def _temp(t):
    return "-" if t is None else f"{t:g}"


def _cells(row: ResultRow, timing):
    cells = [row.system, row.spec, _temp(row.temperature), _pct(row.tr_fa), _pct(row.cv_fa),
             _pct(row.test_error_rate), str(row.seed)]
    if timing:
        cells.append(f"{row.seconds:.2f}")
    return cells


def summarize(rows):
    """Seed mean and sample stddev per (system, spec, T), in row order."""
    groups: dict = {}
    for r in sorted(rows, key=ResultRow.sort_key):
        groups.setdefault((r.system, r.spec, r.temperature), []).append(r)
    out = []
    for (system, spec, t), members in groups.items():
        stats = {}
        for name in ("tr_fa", "cv_fa", "test_error_rate"):
            vals = [getattr(m, name) for m in members]
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            stats[name] = (statistics.fmean(vals), sd)
        out.append((system, spec, t, len(members), stats))
    return out


def _summary_cells(entry):
    system, spec, t, n, stats = entry
    return [system, spec, _temp(t)] + [
        f"{100 * m:.1f}±{100 * s:.1f}" for m, s in (stats["tr_fa"], stats["cv_fa"], stats["test_error_rate"])
    ] + [str(n)]


def emit_report(rows, fmt="csv", *, timing=False) -> str:
    """Render rows plus a seed-mean±stddev block as CSV or markdown text.

    The CSV holds the per-seed rows, a blank line, then the summary block
    (whose last column counts seeds). Wall time is included only with
    ``timing=True`` so that the default output is byte-reproducible.
    """
    if not rows:
        raise ValueError("cannot emit a report with no rows")
    rows = sorted(rows, key=ResultRow.sort_key)
    header = list(HEADER) + (["seconds"] if timing else [])
    summary = summarize(rows)
    summary_header = list(HEADER[:6]) + ["seeds"]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(_cells(r, timing))
        buf.write("\n")
        w.writerow(summary_header)
        for entry in summary:
            w.writerow(_summary_cells(entry))
        return buf.getvalue()
    if fmt == "markdown":
        lines = []

        def table(head, body):
            lines.append("| " + " | ".join(head) + " |")
            lines.append("|" + "|".join("---" for _ in head) + "|")
            lines.extend("| " + " | ".join(cells) + " |" for cells in body)

        table(HEADER[:6], [_cells(r, False)[:6] for r in rows])
        lines.append("")
        lines.append("Mean ± stddev over seeds:")
        lines.append("")
        table(summary_header, [_summary_cells(e) for e in summary])
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(text):
    """Per-seed rows of a CSV report as lists of strings (header excluded)."""
    block = text.split("\n\n", 1)[0]
    rows = list(csv.reader(io.StringIO(block)))
    return rows[1:]


def write_reports(tables: dict, out_dir, fmt="csv", *, timing=False):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if fmt == "csv" else "md"
    paths = []
    for t in sorted(tables):
        path = out / f"table{t}.{ext}"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(emit_report(tables[t], fmt, timing=timing))
        paths.append(path)
    return paths


def gradient_diagnostic(config: ExperimentConfig, seed, splits=None, student=None):
    """Gradient statistics of a (by default freshly initialised) 1-layer
    LSTM student against the strong teacher's soft targets."""
    splits = splits or load_splits(config)
    teacher, _ = train_teacher(config, splits, seed, config.teacher_sizes, "strong")
    n = min(config.diagnostic_sequences, splits.train.num_sequences)
    sample = splits.train.frames[:n]
    frames = int(splits.train.offsets[n])
    if student is None:
        student = StackedLstm.init(splits.train.feature_dim, config.lstm_hidden, 1,
                                   splits.train.num_classes, rng_for(seed, "diagnostic-init"))
    targets = {}
    for t in config.diagnostic_temperatures:
        targets[t] = generate_soft_targets(teacher, splits.train, t).posteriors[:frames]
    return gradient_variance_diagnostic(student, sample, config.diagnostic_temperatures, targets)


def default_out_dir(flag=None):
    return flag or os.environ.get("KTPT_OUT") or DEFAULT_OUT


__all__ = [
    "ExperimentConfig", "ResultRow", "reproduce_table_1", "reproduce_table_2", "reproduce_table_3",
    "emit_report", "parse_report_csv", "run_tables", "write_reports", "gradient_diagnostic",
    "train_teacher", "default_out_dir",
]
