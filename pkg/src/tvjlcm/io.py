"""CSV datasets, run configuration files and chain persistence.

Reals are written with 17 significant digits so every float survives a
write/read cycle exactly.
"""

from __future__ import annotations

import configparser
import csv
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, ModelSpec
from .errors import ChainFormatError, DataError, DomainError, ParseError, SchemaError
from .mcmc import Chain, MCMCConfig
from .model import ParamState, Priors

FLOAT_FMT = "%.17g"
CHAIN_FORMAT = "tvjlcm-chain"
CHAIN_VERSION = 1
INTERCEPT = "1"


def fmt(x) -> str:
    return FLOAT_FMT % x


# ----------------------------------------------------------------------
# Schema maps
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Binds CSV columns to model roles.

    Covariate lists may contain the token "1" for an intercept column.
    Non-numeric covariate columns are dummy coded against their
    alphabetically first level.
    """

    subject: str = "subject"
    response: str = "y"
    visit_time: str = "visit_time"
    followup: str = "followup"
    event: str = "event"
    x1: tuple[str, ...] = ()
    x2: tuple[str, ...] = ()
    z: tuple[str, ...] = ()
    x3: tuple[str, ...] = ()

    def required_columns(self) -> list[str]:
        cols = [self.subject, self.response, self.visit_time, self.followup, self.event]
        for group in (self.x1, self.x2, self.z, self.x3):
            cols += [c for c in group if c != INTERCEPT]
        return list(dict.fromkeys(cols))


def generic_schema(header) -> Schema:
    """Schema for files written by ``write_dataset`` (x1_*, x2_*, z_*, x3_*)."""
    header = list(header)

    def group(prefix):
        return tuple(c for c in header if c.startswith(prefix) and c[len(prefix):].isdigit())

    return Schema(x1=group("x1_"), x2=group("x2_"), z=group("z_"), x3=group("x3_"))


# Membership on (intercept, prior AIDS diagnosis, time); class-specific CD4
# intercept and slope; random intercept and slope; survival on the four
# baseline factors.
AIDS_SCHEMA = Schema(
    subject="patient",
    response="CD4",
    visit_time="obstime",
    followup="Time",
    event="death",
    x1=(INTERCEPT, "prevOI", "obstime"),
    x2=(INTERCEPT, "obstime"),
    z=(INTERCEPT, "obstime"),
    x3=("drug", "gender", "prevOI", "AZT"),
)

SCHEMAS = {"aids": AIDS_SCHEMA}


def schema_by_name(name: str | None, header) -> Schema:
    if name in (None, "generic"):
        return generic_schema(header)
    try:
        return SCHEMAS[name]
    except KeyError:
        raise SchemaError(f"unknown schema {name!r}; choose from generic, {', '.join(SCHEMAS)}") from None


# ----------------------------------------------------------------------
# Dataset loading
# ----------------------------------------------------------------------


@dataclass
class DesignNames:
    x1: list[str]
    x2: list[str]
    z: list[str]
    x3: list[str]


def _float(value: str, column: str, line: int) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"column {column!r}: cannot parse {value!r} as a number", line) from None
    if not np.isfinite(out):
        raise ParseError(f"column {column!r}: non-finite value {value!r}", line)
    return out


def _is_number(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def _encoder(column: str, values: list[str]):
    """(names, function value -> list of floats) for one covariate column."""
    if column == INTERCEPT:
        return [INTERCEPT], lambda v, line: [1.0]
    if all(_is_number(v) for v in values):
        return [column], lambda v, line: [_float(v, column, line)]
    levels = sorted(set(values))
    others = levels[1:]

    def enc(v, line):
        if v not in levels:
            raise ParseError(f"column {column!r}: unknown level {v!r}", line)
        return [float(v == lev) for lev in others]

    return [f"{column}[{lev}]" for lev in others], enc


def read_dataset(path, schema: Schema | str | None = None) -> tuple[Dataset, DesignNames]:
    """Load a long-format CSV (one row per visit) into a Dataset."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError(f"{path}: missing header row")
        rows = []
        for rec in reader:
            if None in rec or any(v is None for v in rec.values()):
                raise ParseError("wrong number of fields", reader.line_num)
            rows.append((reader.line_num, rec))
    if not isinstance(schema, Schema):
        schema = schema_by_name(schema, header)
    missing = [c for c in schema.required_columns() if c not in header]
    if missing:
        raise SchemaError(f"column {missing[0]!r} bound in the schema is missing from {path.name}")
    if not rows:
        raise DataError(f"{path}: no data rows")

    groups = {}
    for role in ("x1", "x2", "z", "x3"):
        encs = [_encoder(c, [r[c] for _, r in rows] if c != INTERCEPT else []) for c in getattr(schema, role)]
        groups[role] = encs

    order: dict = {}
    visits = {}
    surv = {}
    for line, rec in rows:
        sid_raw = rec[schema.subject].strip()
        if sid_raw == "":
            raise ParseError(f"column {schema.subject!r}: empty subject id", line)
        sid = int(sid_raw) if sid_raw.lstrip("-").isdigit() else sid_raw
        order.setdefault(sid, len(order))
        t = _float(rec[schema.visit_time], schema.visit_time, line)
        y = _float(rec[schema.response], schema.response, line)
        T = _float(rec[schema.followup], schema.followup, line)
        ev = _float(rec[schema.event], schema.event, line)
        if ev not in (0.0, 1.0):
            raise DomainError(f"line {line}: column {schema.event!r} must be 0 or 1, got {rec[schema.event]!r}")
        cov = {}
        for role in ("x1", "x2", "z", "x3"):
            vals = []
            for col, (_, enc) in zip(getattr(schema, role), groups[role]):
                vals += enc(rec.get(col, ""), line)
            cov[role] = vals
        s_rec = (T, int(ev), tuple(cov["x3"]))
        if sid in surv and surv[sid] != s_rec:
            raise DataError(f"line {line}: subject {sid!r} has inconsistent follow-up, event or survival covariates")
        surv[sid] = s_rec
        visits.setdefault(sid, []).append((t, y, cov["x1"], cov["x2"], cov["z"], line))

    ids = sorted(order, key=order.get)
    subj, vt, yy, x1, x2, z = [], [], [], [], [], []
    for i, sid in enumerate(ids):
        vs = sorted(visits[sid], key=lambda v: v[0])
        times = [v[0] for v in vs]
        if len(set(times)) != len(times):
            raise DataError(f"subject {sid!r} has repeated visit times")
        if surv[sid][0] < times[-1]:
            raise DataError(f"subject {sid!r}: follow-up {surv[sid][0]} precedes last visit {times[-1]}")
        for t, y, a, b, c, _ in vs:
            subj.append(i)
            vt.append(t)
            yy.append(y)
            x1.append(a)
            x2.append(b)
            z.append(c)
    n = len(subj)
    data = Dataset(
        subject_ids=ids,
        subject=np.array(subj, dtype=np.intp),
        visit_time=np.array(vt),
        y=np.array(yy),
        X1=np.array(x1, dtype=float).reshape(n, -1),
        X2=np.array(x2, dtype=float).reshape(n, -1),
        Z=np.array(z, dtype=float).reshape(n, -1),
        followup=np.array([surv[s][0] for s in ids]),
        event=np.array([surv[s][1] for s in ids]),
        X3=np.array([surv[s][2] for s in ids], dtype=float).reshape(len(ids), -1),
    )
    data.validate()
    names = DesignNames(*[sum((n for n, _ in groups[r]), []) for r in ("x1", "x2", "z", "x3")])
    return data, names


def load_dataset(path, schema: Schema | str | None = None) -> Dataset:
    return read_dataset(path, schema)[0]


def write_dataset(data: Dataset, path, labels=None) -> None:
    """Write in the generic layout; optional true labels go in ``true_class``."""
    cols = ["subject", "visit_time", "y", "followup", "event"]
    cols += [f"x1_{j + 1}" for j in range(data.X1.shape[1])]
    cols += [f"x2_{j + 1}" for j in range(data.X2.shape[1])]
    cols += [f"z_{j + 1}" for j in range(data.Z.shape[1])]
    cols += [f"x3_{j + 1}" for j in range(data.X3.shape[1])]
    if labels is not None:
        labels = np.asarray(labels)
        cols.append("true_class")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in range(data.n):
            i = data.subject[r]
            row = [data.subject_ids[i], fmt(data.visit_time[r]), fmt(data.y[r]), fmt(data.followup[i]), int(data.event[i])]
            row += [fmt(v) for v in data.X1[r]] + [fmt(v) for v in data.X2[r]] + [fmt(v) for v in data.Z[r]]
            row += [fmt(v) for v in data.X3[i]]
            if labels is not None:
                row.append(int(labels[r]) + 1)
            w.writerow(row)


def read_true_labels(path) -> np.ndarray | None:
    """0-based labels from a ``true_class`` column, in Dataset row order."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if "true_class" not in (reader.fieldnames or []):
            return None
        recs = [(r["subject"], float(r["visit_time"]), int(r["true_class"]) - 1) for r in reader]
    order = {}
    for s, _, _ in recs:
        order.setdefault(s, len(order))
    recs.sort(key=lambda r: (order[r[0]], r[1]))
    return np.array([r[2] for r in recs], dtype=np.intp)


def write_table(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_truth(state: ParamState, path) -> None:
    rows = []
    for name in ("xi", "beta", "omega", "delta", "tau", "lambda0", "sigma_u"):
        arr = np.atleast_1d(getattr(state, name))
        for idx in np.ndindex(arr.shape):
            rows.append([f"{name}[{','.join(str(i + 1) for i in idx)}]", float(arr[idx])])
    write_table(path, ["parameter", "value"], rows)


# ----------------------------------------------------------------------
# Run configuration
# ----------------------------------------------------------------------


@dataclass
class RunConfig:
    """Everything needed to reproduce a fit; parsed from key = value text."""

    data: str = ""
    schema: str = "generic"
    K: int = 2
    n_steps: int = 1
    reference_class_constraint: bool = True
    subject_level_labels: bool = False
    iterations: int = 5000
    burn_in: int = 2000
    seed: int = 0
    gibbs_tau_lambda: bool = False
    am_sigma2: float = 2.38**2
    am_alpha: float = 0.05
    theta_steps: int = 6
    beta_var: float = 100.0
    lambda_shape: float = 0.01
    lambda_rate: float = 0.01
    tau_shape: float = 0.01
    tau_rate: float = 0.01
    t: float = 0.5
    dt: float = 0.3
    dic_variant: str = "conditional"
    chain_out: str = "chain.csv"
    summary_out: str = "summary.csv"

    def __post_init__(self):
        if self.K < 1:
            raise DomainError("K must be at least 1")
        if not 0 <= self.burn_in < self.iterations:
            raise DomainError("burn_in must be smaller than iterations")
        if self.dic_variant not in ("conditional", "marginal"):
            raise DomainError("dic_variant must be conditional or marginal")

    def mcmc_config(self) -> MCMCConfig:
        return MCMCConfig(
            iterations=self.iterations,
            burn_in=self.burn_in,
            seed=self.seed,
            gibbs_tau_lambda=self.gibbs_tau_lambda,
            am_sigma2=self.am_sigma2,
            am_alpha=self.am_alpha,
            theta_steps=self.theta_steps,
        )

    def model_spec(self, data: Dataset) -> ModelSpec:
        return ModelSpec.for_data(
            data,
            self.K,
            n_steps=self.n_steps,
            reference_class_constraint=self.reference_class_constraint,
            subject_level_labels=self.subject_level_labels,
        )

    def priors(self, spec: ModelSpec) -> Priors:
        return Priors.default(
            spec,
            beta_cov=self.beta_var * np.eye(spec.dim_x2),
            lambda_shape=self.lambda_shape,
            lambda_rate=self.lambda_rate,
            tau_shape=self.tau_shape,
            tau_rate=self.tau_rate,
        )

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ParseError(f"config: {exc}") from None
        return cls.from_mapping(dict(parser["run"]))

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            if key not in types:
                raise ParseError(f"config: unknown key {key!r}")
            kw[key] = _coerce(key, raw, types[key])
        return cls(**kw)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {fmt(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"


def _coerce(key, raw, typ):
    raw = str(raw).strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ParseError(f"config: key {key!r} has invalid value {raw!r}") from None
    return raw


# ----------------------------------------------------------------------
# Chain persistence
# ----------------------------------------------------------------------

_CHAIN_FIELDS = ("xi", "beta", "omega", "delta", "tau", "lambda0", "sigma_u", "u", "r")


def _spec_to_json(spec: ModelSpec) -> str:
    return json.dumps(
        {
            "K": spec.K,
            "dim_x1": spec.dim_x1,
            "dim_x2": spec.dim_x2,
            "dim_x3": spec.dim_x3,
            "q": spec.q,
            "knots": [[fmt(v) for v in row] for row in spec.knots],
            "reference_class_constraint": spec.reference_class_constraint,
            "subject_level_labels": spec.subject_level_labels,
        }
    )


def _spec_from_json(text: str) -> ModelSpec:
    d = json.loads(text)
    d["knots"] = np.array([[float(v) for v in row] for row in d["knots"]])
    return ModelSpec(**d)


def _columns(chain: Chain) -> list[str]:
    cols = []
    for f in _CHAIN_FIELDS:
        shape = chain.draws[f].shape[1:]
        for idx in np.ndindex(shape):
            cols.append("_".join([f] + [str(i + 1) for i in idx]))
    return cols + ["am_trace"]


def persist_chain(chain: Chain, path, dic_variant: str = "conditional") -> None:
    """Plain-text chain: '#' header lines, a column row, one row per draw."""
    M = len(chain)
    header = {
        "format": f"{CHAIN_FORMAT} {CHAIN_VERSION}",
        "seed": chain.seed,
        "burn_in": chain.burn_in,
        "draws": M,
        "shapes": json.dumps({f: list(chain.draws[f].shape[1:]) for f in _CHAIN_FIELDS}),
        "acceptance": json.dumps({k: list(map(int, v)) for k, v in chain.acceptance.items()}),
        "relabel": chain.meta.get("relabel", "none"),
        "dic_variant": dic_variant,
        "meta": json.dumps({k: v for k, v in chain.meta.items() if k != "relabel"}, default=str),
        "spec": _spec_to_json(chain.spec),
        "column_order": "fields " + " ".join(_CHAIN_FIELDS) + " row-major, then am_trace",
    }
    flat = [chain.draws[f].reshape(M, -1) for f in _CHAIN_FIELDS]
    trace = chain.am_trace if chain.am_trace is not None else np.full(M, np.nan)
    with Path(path).open("w", newline="") as fh:
        for k, v in header.items():
            fh.write(f"# {k} = {v}\n")
        fh.write(",".join(_columns(chain)) + "\n")
        for i in range(M):
            parts = []
            for f, arr in zip(_CHAIN_FIELDS, flat):
                if f == "r":
                    parts.append(",".join(str(int(v)) for v in arr[i]))
                elif arr.shape[1]:
                    parts.append(",".join(fmt(v) for v in arr[i]))
            parts.append(fmt(trace[i]))
            fh.write(",".join(p for p in parts if p != "") + "\n")


def load_chain(path) -> Chain:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ChainFormatError(f"cannot read chain file {path}: {exc}") from None
    header = {}
    body = 0
    for line in lines:
        if not line.startswith("# "):
            break
        key, sep, value = line[2:].partition(" = ")
        if not sep:
            raise ChainFormatError(f"malformed header line {body + 1}")
        header[key] = value
        body += 1
    fmt_line = header.get("format", "")
    name, _, version = fmt_line.partition(" ")
    if name != CHAIN_FORMAT:
        raise ChainFormatError(f"{path.name} is not a chain file")
    if version != str(CHAIN_VERSION):
        raise ChainFormatError(f"chain format version {version!r} is not supported (expected {CHAIN_VERSION})")
    try:
        M = int(header["draws"])
        shapes = json.loads(header["shapes"])
        spec = _spec_from_json(header["spec"])
        acceptance = {k: list(v) for k, v in json.loads(header["acceptance"]).items()}
        meta = json.loads(header.get("meta", "{}"))
        seed = int(header["seed"])
        burn_in = int(header["burn_in"])
    except (KeyError, ValueError) as exc:
        raise ChainFormatError(f"chain header incomplete or malformed: {exc}") from None
    meta["relabel"] = header.get("relabel", "none")
    meta["dic_variant"] = header.get("dic_variant", "conditional")
    if len(lines) < body + 1:
        raise ChainFormatError("chain file has no column row")
    ncols = len(lines[body].split(","))
    rows = lines[body + 1 :]
    if len(rows) != M:
        raise ChainFormatError(f"chain file truncated: header promises {M} draws, found {len(rows)}")
    sizes = {f: int(np.prod(shapes[f])) for f in _CHAIN_FIELDS}
    expected = sum(sizes.values()) + 1
    if ncols != expected:
        raise ChainFormatError(f"column row has {ncols} entries, expected {expected}")
    values = np.empty((M, expected))
    for i, row in enumerate(rows):
        parts = row.split(",") if row else []
        if len(parts) != expected:
            raise ChainFormatError(f"draw {i + 1} has {len(parts)} values, expected {expected} (truncated?)")
        try:
            values[i] = [float(p) for p in parts]
        except ValueError:
            raise ChainFormatError(f"draw {i + 1} contains a non-numeric value") from None
    draws = {}
    pos = 0
    for f in _CHAIN_FIELDS:
        block = values[:, pos : pos + sizes[f]]
        pos += sizes[f]
        shape = (M,) + tuple(shapes[f])
        draws[f] = block.astype(np.int8 if spec.K < 128 else np.int32).reshape(shape) if f == "r" else block.reshape(shape).copy()
    trace = values[:, pos].copy()
    return Chain(spec, draws, burn_in, seed, acceptance, trace, meta)
