"""On-disk formats: matrix CSV snapshots, dataset CSV, JSON lines, flat TOML.

All floats are written with the %.17g format so that round-tripping through
text preserves the exact double. Matrix files begin with a single comment line

    # rows=<m> cols=<n> name=<identifier>

followed by m comma-separated rows. One-dimensional arrays are written as a
single row (rows=1).

The TOML emitter below covers only the flat schema used by this package
(scalars, lists of scalars, and one level of tables); a writer dependency is
deliberately avoided since configs never nest deeper.
"""

import json
import re

import numpy as np

try:
    import tomllib as _toml
except ImportError:  # python < 3.11
    import tomli as _toml

FLOAT_FMT = ".17g"

_HEADER_RE = re.compile(r"#\s*rows=(\d+)\s+cols=(\d+)\s+name=(\S+)")


def fmt_float(x) -> str:
    return format(float(x), FLOAT_FMT)


# ---------------------------------------------------------------------------
# matrix CSV


def save_matrix_csv(path, arr, name: str) -> None:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"save_matrix_csv expects a 1-D or 2-D array, got ndim={arr.ndim}")
    m, n = arr.shape
    lines = [f"# rows={m} cols={n} name={name}"]
    for row in arr:
        lines.append(",".join(fmt_float(x) for x in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_matrix_csv(path):
    """Returns (array of shape (rows, cols), name)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        match = _HEADER_RE.match(header)
        if match is None:
            raise ValueError(f"{path}: missing '# rows=... cols=... name=...' header")
        m, n, name = int(match.group(1)), int(match.group(2)), match.group(3)
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape != (m, n):
        raise ValueError(f"{path}: header says {m}x{n}, file holds {data.shape[0]}x{data.shape[1]}")
    return data, name


def load_vector_csv(path):
    arr, name = load_matrix_csv(path)
    return arr.ravel(), name


# ---------------------------------------------------------------------------
# dataset CSV


def save_dataset_csv(path, s0, s, a, r, s_next) -> None:
    n = len(s0)
    lines = ["s0,s,a,r,s_next"]
    for j in range(n):
        lines.append(f"{int(s0[j])},{int(s[j])},{int(a[j])},{fmt_float(r[j])},{int(s_next[j])}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset_csv(path):
    """Returns (s0, s, a, r, s_next) arrays; integer columns as int64."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "s0,s,a,r,s_next":
            raise ValueError(f"{path}: expected header 's0,s,a,r,s_next', got {header!r}")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty dataset")
    cols = list(zip(*rows))
    s0 = np.array([int(x) for x in cols[0]])
    s = np.array([int(x) for x in cols[1]])
    a = np.array([int(x) for x in cols[2]])
    r = np.array([float(x) for x in cols[3]])
    s_next = np.array([int(x) for x in cols[4]])
    return s0, s, a, r, s_next


# ---------------------------------------------------------------------------
# JSON lines


def _json_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if not np.isfinite(x):
            # NaN/inf are not valid JSON; traces use null for absent values
            return "null"
        return fmt_float(x)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{_json_value(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ",".join(_json_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)!r} to JSON")


def json_line(record: dict) -> str:
    """One JSON object on one line, floats in %.17g, keys in insertion order."""
    return _json_value(dict(record))


# ---------------------------------------------------------------------------
# TOML


def toml_loads(text: str) -> dict:
    return _toml.loads(text)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return _toml.load(fh)


def _toml_scalar(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if not np.isfinite(x):
            raise ValueError("non-finite float in TOML output")
        out = fmt_float(x)
        # TOML floats require a decimal point or exponent
        if re.fullmatch(r"-?\d+", out):
            out += ".0"
        return out
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_toml_scalar(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)!r} to TOML")


def toml_dumps(data: dict) -> str:
    """Serialize a dict of scalars/lists plus one level of sub-tables."""
    top = []
    tables = []
    for key, value in data.items():
        if isinstance(value, dict):
            body = "".join(f"{k} = {_toml_scalar(v)}\n" for k, v in value.items())
            tables.append(f"[{key}]\n{body}")
        else:
            top.append(f"{key} = {_toml_scalar(value)}\n")
    return "".join(top) + ("\n" if top and tables else "") + "\n".join(tables)


def save_toml(path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(toml_dumps(data))
