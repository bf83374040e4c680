"""Model serialization for one-shot exchange between sites.

A fitted model travels as a ``.fedmodel`` file: a small, self-describing
text envelope holding split rules, leaf values and leaf counts, never
subject-level rows.  The format is versioned and checksummed so a
receiving site can reject truncated, tampered or unknown files before
building anything from them.

File layout (version 1, LF newlines, ASCII)::

    fedmodel/1
    checksum:<16 hex chars, sha-256 of the payload truncated to 64 bits>
    <payload: "key:value" header lines, then tree blocks, then "end">

Node records are one line each, in pre-order::

    node <id> split  <feature> <threshold>  <left> <right> <value> <count>
    node <id> csplit <feature> <l1,l2,...>  <left> <right> <value> <count>
    node <id> leaf   .         .            .      .       <value> <count>

Leaves of ensemble models carry one extra field, the per-site histogram
of estimation-row weight in that leaf, which is what the per-site weight
query needs.  Reals are written with 17 significant digits, so export,
import and re-export reproduce the original file byte for byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import fmt_real
from .ensemble import EnsembleModel
from .errors import (
    FormatError,
    IntegrityError,
    IoError,
    ValidationError,
    VersionError,
)
from .local import LocalModel, PropensityModel
from .tree import (
    LEAF,
    Categorical,
    FeatureSchema,
    FitParams,
    ForestModel,
    Numeric,
    TreeModel,
)

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
MAGIC = "fedmodel"

_LOCAL_KINDS = ("ct", "cf")
_ENSEMBLE_KINDS = ("et", "ef")


@dataclass(frozen=True)
class _NodeRecord:
    """One parsed node line; ``extra`` holds the ensemble leaf histogram."""

    id: int
    kind: str
    feature: int
    threshold: float
    levels: tuple | None
    left: int
    right: int
    value: float
    count: float
    extra: tuple | None = None


@dataclass
class ModelEnvelope:
    """Parsed form of a ``.fedmodel`` file.

    ``payload`` is the exact checksummed byte region; ``header`` the
    key/value lines; ``trees`` the node records per tree.
    """

    format_version: int
    model_type: str
    kind: str
    site_id: int
    n_k: int
    dim: int
    propensity: str
    checksum: str
    header: dict = field(default_factory=dict)
    trees: list = field(default_factory=list)
    payload: bytes = b""


# ============================================================
# Encoding
# ============================================================


def _encode_propensity(prop: PropensityModel | None) -> str:
    if prop is None:
        return "none"
    clip = f"clip={fmt_real(prop.clip[0])},{fmt_real(prop.clip[1])}"
    if prop.kind == "constant":
        return f"constant p={fmt_real(prop.p)} {clip}"
    cov = ",".join(str(c) for c in prop.covariates)
    beta = ",".join(fmt_real(b) for b in prop.beta)
    return f"logistic cov={cov} beta={beta} {clip}"


def _encode_schema(schema: FeatureSchema) -> str:
    toks = []
    for f in schema.features:
        toks.append("num" if isinstance(f, Numeric) else f"cat{f.n_levels}")
    return ",".join(toks)


def _encode_tree(lines: list, index: int, tree: TreeModel, counts: np.ndarray | None) -> None:
    lines.append(f"tree {index} nodes={tree.n_nodes}")
    for nid in range(tree.n_nodes):
        value = fmt_real(tree.value[nid])
        cnt = str(int(tree.count[nid]))
        if tree.feature[nid] == LEAF:
            rec = f"node {nid} leaf . . . . {value} {cnt}"
            if counts is not None:
                rec += " " + ",".join(fmt_real(c) for c in counts[nid])
        elif tree.levels[nid] is not None:
            lv = ",".join(str(l) for l in tree.levels[nid])
            rec = (
                f"node {nid} csplit {int(tree.feature[nid])} {lv} "
                f"{int(tree.left[nid])} {int(tree.right[nid])} {value} {cnt}"
            )
        else:
            thr = fmt_real(tree.threshold[nid])
            rec = (
                f"node {nid} split {int(tree.feature[nid])} {thr} "
                f"{int(tree.left[nid])} {int(tree.right[nid])} {value} {cnt}"
            )
        lines.append(rec)


def _payload_lines(model) -> list:
    lines = []
    if isinstance(model, LocalModel):
        if model.kind not in _LOCAL_KINDS:
            raise ValidationError(
                f"local model kind {model.kind!r} cannot be exported; oracle models "
                "exist only inside simulations"
            )
        inner = model.model
        schema = inner.schema
        lines.append("model:local")
        lines.append(f"kind:{model.kind}")
        lines.append(f"site_id:{model.site_id}")
        lines.append(f"n_k:{model.n_rows}")
        lines.append(f"dim:{len(schema.features)}")
        lines.append(f"schema:{_encode_schema(schema)}")
        lines.append(f"propensity:{_encode_propensity(model.propensity)}")
        trees = inner.trees if isinstance(inner, ForestModel) else [inner]
        lines.append(f"trees:{len(trees)}")
        for i, t in enumerate(trees):
            _encode_tree(lines, i, t, None)
    elif isinstance(model, EnsembleModel):
        inner = model.model
        schema = inner.schema
        lines.append("model:ensemble")
        lines.append(f"kind:{model.method}")
        lines.append("site_id:1")
        lines.append(f"n_k:{model.n_subjects}")
        lines.append(f"dim:{model.base_dim}")
        lines.append(f"schema:{_encode_schema(schema)}")
        lines.append("propensity:none")
        lines.append(f"k_sites:{model.k_sites}")
        lines.append(f"n_subjects:{model.n_subjects}")
        lines.append(f"honest:{int(model.honest)}")
        lines.append(f"subject_mode:{int(model.subject_mode)}")
        if model.eta is None:
            lines.append("eta:none")
        else:
            lines.append("eta:" + ",".join(fmt_real(e) for e in model.eta))
        fp = model.table_fingerprint if model.table_fingerprint else "none"
        lines.append(f"fingerprint:{fp}")
        trees = inner.trees if isinstance(inner, ForestModel) else [inner]
        lines.append(f"trees:{len(trees)}")
        for i, t in enumerate(trees):
            _encode_tree(lines, i, t, model.site_counts[i])
    else:
        raise ValidationError(f"cannot export object of type {type(model).__name__}")
    lines.append("end")
    return lines


def _checksum(payload: bytes) -> str:
    return hashlib.sha256(payload).digest()[:8].hex()


def export_model(model, path: str) -> ModelEnvelope:
    """Serialize a fitted model to ``path`` and return its envelope.

    The encoding is a pure function of the model: exporting the same model
    twice produces byte-identical files.  Oracle local models are refused,
    they wrap a ground-truth function rather than a fitted artifact.
    """
    payload = ("\n".join(_payload_lines(model)) + "\n").encode("ascii")
    digest = _checksum(payload)
    blob = f"{MAGIC}/{FORMAT_VERSION}\nchecksum:{digest}\n".encode("ascii") + payload
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return _parse_envelope(blob, origin=path)


# ============================================================
# Decoding
# ============================================================


def _fail(origin: str, lineno: int, msg: str) -> FormatError:
    if lineno <= 0:
        return FormatError(f"{origin}: {msg}")
    return FormatError(f"{origin}, line {lineno}: {msg}")


def _parse_int(origin: str, lineno: int, tok: str, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise _fail(origin, lineno, f"bad {what} {tok!r}") from None


def _parse_real(origin: str, lineno: int, tok: str, what: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise _fail(origin, lineno, f"bad {what} {tok!r}") from None
    if not np.isfinite(v):
        raise _fail(origin, lineno, f"{what} must be finite, got {tok}")
    return v


def _parse_schema(origin: str, lineno: int, text: str) -> FeatureSchema:
    feats = []
    for tok in text.split(","):
        if tok == "num":
            feats.append(Numeric())
        elif tok.startswith("cat"):
            feats.append(Categorical(_parse_int(origin, lineno, tok[3:], "level count")))
        else:
            raise _fail(origin, lineno, f"unknown feature descriptor {tok!r}")
    return FeatureSchema(tuple(feats))


def _parse_node(origin: str, lineno: int, parts: list, schema: FeatureSchema, k_hist: int):
    # parts[0] == "node" checked by the caller.
    if len(parts) < 9:
        raise _fail(origin, lineno, f"node record needs 9 fields, got {len(parts)}")
    want = 9 + (1 if k_hist and parts[2] == "leaf" else 0)
    if len(parts) != want:
        raise _fail(origin, lineno, f"expected {want} fields, got {len(parts)}")
    nid = _parse_int(origin, lineno, parts[1], "node id")
    kind = parts[2]
    value = _parse_real(origin, lineno, parts[7], "leaf value")
    count = _parse_int(origin, lineno, parts[8], "node count")
    if count < 0:
        raise _fail(origin, lineno, "node count must be nonnegative")
    if kind == "leaf":
        if parts[3:7] != [".", ".", ".", "."]:
            raise _fail(origin, lineno, "leaf children fields must be '.'")
        extra = None
        if k_hist:
            hist = tuple(
                _parse_real(origin, lineno, t, "site count") for t in parts[9].split(",")
            )
            if len(hist) != k_hist:
                raise _fail(
                    origin, lineno, f"site histogram has {len(hist)} entries, expected {k_hist}"
                )
            if any(h < 0 for h in hist) or sum(hist) <= 0:
                raise _fail(origin, lineno, "site histogram must be nonnegative with positive sum")
            extra = hist
        return _NodeRecord(nid, "leaf", LEAF, float("nan"), None, LEAF, LEAF, value, count, extra)
    if kind not in ("split", "csplit"):
        raise _fail(origin, lineno, f"unknown node kind {kind!r}")
    j = _parse_int(origin, lineno, parts[3], "feature index")
    if not 0 <= j < len(schema.features):
        raise _fail(origin, lineno, f"feature index {j} outside schema")
    feat = schema.features[j]
    if kind == "split":
        if not isinstance(feat, Numeric):
            raise _fail(origin, lineno, f"numeric split on categorical feature {j}")
        thr = _parse_real(origin, lineno, parts[4], "threshold")
        levels = None
    else:
        if not isinstance(feat, Categorical):
            raise _fail(origin, lineno, f"level split on numeric feature {j}")
        levels = tuple(_parse_int(origin, lineno, t, "level") for t in parts[4].split(","))
        if not levels or len(set(levels)) != len(levels) or list(levels) != sorted(levels):
            raise _fail(origin, lineno, "levels must be distinct and ascending")
        if levels[0] < 1 or levels[-1] > feat.n_levels or len(levels) >= feat.n_levels:
            raise _fail(origin, lineno, "levels must be a proper subset of 1..L")
        thr = float("nan")
    left = _parse_int(origin, lineno, parts[5], "left child")
    right = _parse_int(origin, lineno, parts[6], "right child")
    return _NodeRecord(nid, kind, j, thr, levels, left, right, value, count, None)


def _check_topology(origin: str, lineno: int, records: list) -> None:
    n = len(records)
    seen = np.zeros(n, dtype=np.int64)
    for rec in records:
        if rec.kind == "leaf":
            continue
        for child in (rec.left, rec.right):
            if not rec.id < child < n:
                raise _fail(
                    origin, lineno, f"node {rec.id} references child {child} out of order"
                )
            seen[child] += 1
    if n and seen[0] != 0:
        raise _fail(origin, lineno, "root must not be a child")
    bad = np.flatnonzero(seen[1:] != 1)
    if bad.size:
        raise _fail(origin, lineno, f"node {int(bad[0]) + 1} is referenced {int(seen[bad[0] + 1])} times")


_HEADER_KEYS_LOCAL = ("model", "kind", "site_id", "n_k", "dim", "schema", "propensity", "trees")
_HEADER_KEYS_ENSEMBLE = (
    "model",
    "kind",
    "site_id",
    "n_k",
    "dim",
    "schema",
    "propensity",
    "k_sites",
    "n_subjects",
    "honest",
    "subject_mode",
    "eta",
    "fingerprint",
    "trees",
)


def _parse_envelope(blob: bytes, origin: str) -> ModelEnvelope:
    try:
        text = blob.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{origin}: not an ascii model file ({exc})") from exc
    lines = text.split("\n")
    if len(lines) < 3:
        raise FormatError(f"{origin}: truncated, no payload")
    magic = lines[0]
    if not magic.startswith(MAGIC + "/"):
        raise FormatError(f"{origin}, line 1: expected '{MAGIC}/<version>', got {magic!r}")
    try:
        version = int(magic.split("/", 1)[1])
    except ValueError:
        raise FormatError(f"{origin}, line 1: bad version in {magic!r}") from None
    if version not in SUPPORTED_VERSIONS:
        supported = ", ".join(str(v) for v in SUPPORTED_VERSIONS)
        raise VersionError(
            f"{origin}: format version {version} not supported (supported versions: {supported})"
        )
    if not lines[1].startswith("checksum:"):
        raise FormatError(f"{origin}, line 2: expected 'checksum:<hex>'")
    declared = lines[1][len("checksum:"):]

    payload = text[len(lines[0]) + 1 + len(lines[1]) + 1 :].encode("ascii")
    body = lines[2:]
    if body and body[-1] == "":
        body = body[:-1]
    if not body or body[-1] != "end":
        raise FormatError(f"{origin}: truncated, missing end marker")
    if _checksum(payload) != declared:
        raise IntegrityError(f"{origin}: checksum mismatch, file corrupted or tampered")

    # Header lines up to trees:, then tree blocks.
    header: dict = {}
    i = 0
    while i < len(body):
        line = body[i]
        lineno = i + 3
        if ":" not in line:
            raise _fail(origin, lineno, f"expected 'key:value', got {line!r}")
        key, val = line.split(":", 1)
        if key in header:
            raise _fail(origin, lineno, f"duplicate header {key!r}")
        header[key] = val
        i += 1
        if key == "trees":
            break
    mtype = header.get("model")
    if mtype not in ("local", "ensemble"):
        raise FormatError(f"{origin}: unknown or missing model type {mtype!r}")
    wanted = _HEADER_KEYS_LOCAL if mtype == "local" else _HEADER_KEYS_ENSEMBLE
    missing = [k for k in wanted if k not in header]
    extra = [k for k in header if k not in wanted]
    if missing or extra:
        raise FormatError(
            f"{origin}: header mismatch (missing: {missing or 'none'}, unknown: {extra or 'none'})"
        )
    kind = header["kind"]
    if mtype == "local" and kind not in _LOCAL_KINDS:
        raise FormatError(f"{origin}: local model kind {kind!r} unknown")
    if mtype == "ensemble" and kind not in _ENSEMBLE_KINDS:
        raise FormatError(f"{origin}: ensemble model kind {kind!r} unknown")

    schema = _parse_schema(origin, 0, header["schema"])
    dim = _parse_int(origin, 0, header["dim"], "dim")
    k_hist = 0
    if mtype == "ensemble":
        k_hist = _parse_int(origin, 0, header["k_sites"], "k_sites")
        if len(schema.features) != dim + 1:
            raise FormatError(f"{origin}: ensemble schema must list dim+1 features")
        last = schema.features[-1]
        if not isinstance(last, Categorical) or last.n_levels != k_hist:
            raise FormatError(f"{origin}: last feature must be cat{k_hist} (the site id)")
    elif len(schema.features) != dim:
        raise FormatError(f"{origin}: schema lists {len(schema.features)} features for dim {dim}")

    n_trees = _parse_int(origin, 0, header["trees"], "tree count")
    if n_trees < 1:
        raise FormatError(f"{origin}: tree count must be positive")

    trees = []
    for t in range(n_trees):
        if i >= len(body):
            raise FormatError(f"{origin}: truncated, expected tree {t}")
        lineno = i + 3
        parts = body[i].split(" ")
        if len(parts) != 3 or parts[0] != "tree" or not parts[2].startswith("nodes="):
            raise _fail(origin, lineno, f"expected 'tree {t} nodes=<n>', got {body[i]!r}")
        if _parse_int(origin, lineno, parts[1], "tree index") != t:
            raise _fail(origin, lineno, f"tree blocks out of order at {body[i]!r}")
        n_nodes = _parse_int(origin, lineno, parts[2][len("nodes="):], "node count")
        if n_nodes < 1:
            raise _fail(origin, lineno, "a tree needs at least one node")
        i += 1
        records = []
        for nid in range(n_nodes):
            if i >= len(body):
                raise FormatError(f"{origin}: truncated inside tree {t}")
            lineno = i + 3
            parts = body[i].split(" ")
            if parts[0] != "node":
                raise _fail(origin, lineno, f"expected node record, got {body[i]!r}")
            rec = _parse_node(origin, lineno, parts, schema, k_hist)
            if rec.id != nid:
                raise _fail(origin, lineno, f"node ids must be 0..{n_nodes - 1} in order")
            records.append(rec)
            i += 1
        _check_topology(origin, i + 2, records)
        trees.append(records)
    if i != len(body) - 1 or body[i] != "end":
        raise FormatError(f"{origin}: trailing content after tree blocks")

    return ModelEnvelope(
        format_version=version,
        model_type=mtype,
        kind=kind,
        site_id=_parse_int(origin, 0, header["site_id"], "site_id"),
        n_k=_parse_int(origin, 0, header["n_k"], "n_k"),
        dim=dim,
        propensity=header["propensity"],
        checksum=declared,
        header=header,
        trees=trees,
        payload=payload,
    )


def read_envelope(path: str) -> ModelEnvelope:
    """Read and validate a ``.fedmodel`` file without building the model."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return _parse_envelope(blob, origin=path)


def _decode_propensity(origin: str, text: str) -> PropensityModel | None:
    if text == "none":
        return None
    parts = text.split(" ")
    fields = {}
    for p in parts[1:]:
        if "=" not in p:
            raise FormatError(f"{origin}: bad propensity field {p!r}")
        k, v = p.split("=", 1)
        fields[k] = v
    try:
        lo, hi = (float(v) for v in fields["clip"].split(","))
    except (KeyError, ValueError):
        raise FormatError(f"{origin}: propensity clip missing or malformed") from None
    if parts[0] == "constant":
        if "p" not in fields:
            raise FormatError(f"{origin}: constant propensity needs p=")
        return PropensityModel(kind="constant", p=float(fields["p"]), clip=(lo, hi))
    if parts[0] == "logistic":
        try:
            cov = tuple(int(c) for c in fields["cov"].split(","))
            beta = np.array([float(b) for b in fields["beta"].split(",")])
        except (KeyError, ValueError):
            raise FormatError(f"{origin}: logistic propensity needs cov= and beta=") from None
        if len(beta) != len(cov) + 1:
            raise FormatError(f"{origin}: beta length must be len(cov)+1")
        return PropensityModel(kind="logistic", beta=beta, covariates=cov, clip=(lo, hi))
    raise FormatError(f"{origin}: unknown propensity kind {parts[0]!r}")


def _build_tree(records: list, schema: FeatureSchema) -> TreeModel:
    n = len(records)
    feature = np.full(n, LEAF, dtype=np.int32)
    threshold = np.full(n, np.nan)
    levels = [None] * n
    left = np.full(n, LEAF, dtype=np.int32)
    right = np.full(n, LEAF, dtype=np.int32)
    value = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for rec in records:
        value[rec.id] = rec.value
        count[rec.id] = int(rec.count)
        if rec.kind == "leaf":
            continue
        feature[rec.id] = rec.feature
        left[rec.id] = rec.left
        right[rec.id] = rec.right
        if rec.kind == "split":
            threshold[rec.id] = rec.threshold
        else:
            levels[rec.id] = rec.levels
    return TreeModel(
        schema=schema,
        feature=feature,
        threshold=threshold,
        levels=tuple(levels),
        left=left,
        right=right,
        value=value,
        count=count,
    )


def import_model(path: str):
    """Load a ``.fedmodel`` file into a ready-to-predict model.

    Raises:
        FormatError: malformed or truncated file, inconsistent nodes.
        IntegrityError: checksum mismatch.
        VersionError: format version not supported.
        IoError: unreadable path.
    """
    env = read_envelope(path)
    schema = _parse_schema(path, 0, env.header["schema"])
    built = [_build_tree(records, schema) for records in env.trees]
    if env.kind in ("ct", "et") and len(built) != 1:
        raise FormatError(f"{path}: a single-tree envelope must hold exactly one tree")
    if env.kind in ("ct", "et"):
        model = built[0]
    else:
        model = ForestModel(schema=schema, trees=built)
    if env.model_type == "local":
        return LocalModel(
            site_id=env.site_id,
            kind=env.kind,
            model=model,
            propensity=_decode_propensity(path, env.propensity),
            n_rows=env.n_k,
        )
    k = int(env.header["k_sites"])
    site_counts = []
    for t, records in enumerate(env.trees):
        sc = np.zeros((len(records), k))
        for rec in records:
            if rec.extra is not None:
                sc[rec.id] = rec.extra
        site_counts.append(sc)
    eta_text = env.header["eta"]
    eta = None
    if eta_text != "none":
        eta = np.array([float(e) for e in eta_text.split(",")])
        if len(eta) != k:
            raise FormatError(f"{path}: eta must list {k} site weights")
    fp = env.header["fingerprint"]
    return EnsembleModel(
        method=env.kind,
        model=model,
        k_sites=k,
        n_subjects=int(env.header["n_subjects"]),
        base_dim=env.dim,
        honest=env.header["honest"] == "1",
        subject_mode=env.header["subject_mode"] == "1",
        eta=eta,
        site_counts=site_counts,
        table_fingerprint=None if fp == "none" else fp,
    )


# ============================================================
# Privacy audit
# ============================================================


@dataclass
class PrivacyReport:
    """Outcome of :func:`audit_privacy`.

    ``violations`` holds (tree index, node id, reason); ``tree_status`` one
    boolean per tree.
    """

    ok: bool
    min_leaf: int
    violations: list
    tree_status: list


def audit_privacy(envelope: ModelEnvelope, params: FitParams) -> PrivacyReport:
    """Check an envelope against the no-subject-data rules.

    Every leaf must describe at least ``params.min_leaf`` rows, and no node
    may carry row-level arrays: the only array-valued field allowed is the
    K-long site histogram on ensemble leaves.  Report-only, never raises.
    """
    violations = []
    tree_status = []
    k = 0
    if envelope.model_type == "ensemble":
        k = int(envelope.header.get("k_sites", "0"))
    for t, records in enumerate(envelope.trees):
        bad_before = len(violations)
        for rec in records:
            if rec.kind != "leaf":
                continue
            if rec.count < params.min_leaf:
                violations.append(
                    (t, rec.id, f"leaf count {int(rec.count)} below min_leaf {params.min_leaf}")
                )
            if rec.extra is not None:
                if envelope.model_type != "ensemble":
                    violations.append((t, rec.id, "unexpected array field on a local model leaf"))
                elif len(rec.extra) != k:
                    violations.append(
                        (t, rec.id, f"array field of length {len(rec.extra)} is not the K-site histogram")
                    )
        tree_status.append(len(violations) == bad_before)
    return PrivacyReport(
        ok=not violations,
        min_leaf=params.min_leaf,
        violations=violations,
        tree_status=tree_status,
    )
