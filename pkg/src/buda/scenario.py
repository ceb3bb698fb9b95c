"""Synthetic boundless-adaptation scenarios.

Each class c has an embedding a_c.  A fixed seeded matrix M maps embeddings
to class means in input space, so a source pixel of class c is
``M a_c + noise`` and a target pixel is ``W_t (M a_c) + s_t + noise``.
Private-class embeddings are convex combinations of two or three shared
ones, which makes the embedding geometry carry over to input space exactly.

Grids are painted as a background class plus a few axis-aligned rectangles.
Source grids only ever use shared classes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .metrics import ABSENT
from .tensor import Rng

FORMAT_VERSION = 1
SPLIT_MAGIC = b"BUDA1\0"
SPLITS = ("source", "target_train", "target_test")
ORACLE_SUFFIX = ".oracle"


@dataclass
class ScenarioSpec:
    n_shared: int = 6
    n_private: int = 2
    H: int = 16
    W: int = 16
    d_in: int = 8
    d_a: int = 8
    n_source: int = 200
    n_target_train: int = 200
    n_target_test: int = 100
    noise_std: float = 0.35
    shift_strength: float = 0.5
    shift_offset: float = 1.0
    shift_matrix: list | None = None
    shift_vector: list | None = None
    rects_min: int = 2
    rects_max: int = 5
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_shared < 2:
            raise ContractError("need at least two shared classes")
        if self.n_private < 1:
            raise ContractError("boundless adaptation needs at least one private class")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")
        if min(self.H, self.W, self.d_in, self.d_a) < 1:
            raise ContractError("grid and vector dimensions must be >= 1")
        if min(self.n_source, self.n_target_train, self.n_target_test) < 0:
            raise ContractError("split sizes must be non-negative")
        if not 0 <= self.rects_min <= self.rects_max:
            raise ContractError("need 0 <= rects_min <= rects_max")
        if self.n_shared + self.n_private >= ABSENT:
            raise ContractError("too many classes for 16-bit labels")

    @property
    def n_classes(self) -> int:
        return self.n_shared + self.n_private

    @property
    def shared_ids(self) -> list[int]:
        return list(range(self.n_shared))

    @property
    def private_ids(self) -> list[int]:
        return list(range(self.n_shared, self.n_classes))

    def split_size(self, split: str) -> int:
        return {"source": self.n_source, "target_train": self.n_target_train,
                "target_test": self.n_target_test}[split]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EmbeddingTable:
    vectors: np.ndarray                       # (n_classes, d_a)
    anchors: dict[int, tuple[list[int], list[float]]] = field(default_factory=dict)

    def __getitem__(self, c: int) -> np.ndarray:
        return self.vectors[c]


def convex_embedding(anchor_vectors: np.ndarray, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ContractError("convex weights must be non-negative and sum to 1")
    return w @ np.asarray(anchor_vectors, dtype=float)


def make_embeddings(spec: ScenarioSpec, rng: Rng) -> EmbeddingTable:
    vecs = rng.child("shared").normal((spec.n_shared, spec.d_a))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    rows = [v for v in vecs]
    anchors = {}
    for c in spec.private_ids:
        r = rng.child("private", c)
        k = min(int(r.integers(2, 4)), spec.n_shared)
        ids = sorted(int(i) for i in r.choice(spec.n_shared, k, replace=False))
        w = r.dirichlet(np.ones(k))
        w = w / w.sum()
        anchors[c] = (ids, [float(x) for x in w])
        rows.append(convex_embedding(vecs[ids], w))
    return EmbeddingTable(np.array(rows), anchors)


@dataclass
class Split:
    inputs: np.ndarray   # (N, H, W, d_in), float32-representable float64
    labels: np.ndarray   # (N, H, W) uint16, ABSENT where unlabeled
    domain: str

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def pixels(self) -> np.ndarray:
        return self.inputs.reshape(-1, self.inputs.shape[-1])


@dataclass
class Dataset:
    spec: ScenarioSpec
    embeddings: EmbeddingTable
    source: Split
    target_train: Split
    target_test: Split
    mixing: np.ndarray            # M, (d_in, d_a)
    shift_matrix: np.ndarray      # W_t
    shift_vector: np.ndarray      # s_t
    oracle_digests: list[str]
    _oracle: np.ndarray | None = None
    _oracle_path: Path | None = None

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def has_oracle(self) -> bool:
        return self._oracle is not None

    def oracle_labels(self) -> np.ndarray:
        """Hidden ground truth of target_train; read from the sidecar on first use."""
        if self._oracle is None:
            if self._oracle_path is None:
                raise ContractError("dataset has no oracle sidecar")
            self._oracle = _read_oracle(self._oracle_path, self.spec)
        return self._oracle

    @property
    def class_names(self) -> list[str]:
        s = self.spec
        return [f"shared_{i}" for i in range(s.n_shared)] + [f"private_{i}" for i in range(s.n_private)]


def grid_digest(inputs: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(inputs, dtype="<f4").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    return h.hexdigest()[:16]


def _shift(spec: ScenarioSpec, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    d = spec.d_in
    if spec.shift_matrix is not None:
        Wt = np.asarray(spec.shift_matrix, dtype=float)
    else:
        Wt = np.eye(d) + spec.shift_strength * rng.child("Wt").normal((d, d)) / np.sqrt(d)
    if spec.shift_vector is not None:
        st = np.asarray(spec.shift_vector, dtype=float)
    else:
        g = rng.child("st").normal(d)
        st = spec.shift_offset * g / np.linalg.norm(g)
    if Wt.shape != (d, d) or st.shape != (d,):
        raise ContractError("shift matrix/vector do not match d_in")
    return Wt, st


def paint_layout(spec: ScenarioSpec, palette: list[int], rng: Rng) -> np.ndarray:
    """Background class, then rectangles painted in order (later ones on top)."""
    H, W = spec.H, spec.W
    lab = np.full((H, W), palette[int(rng.integers(0, len(palette)))], dtype=np.uint16)
    for _ in range(int(rng.integers(spec.rects_min, spec.rects_max + 1))):
        h = int(rng.integers(max(1, H // 4), max(2, H // 2 + 1)))
        w = int(rng.integers(max(1, W // 4), max(2, W // 2 + 1)))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        lab[top:top + h, left:left + w] = palette[int(rng.integers(0, len(palette)))]
    return lab


def _render(labels: np.ndarray, means: np.ndarray, tau: float, rng: Rng) -> np.ndarray:
    x = means[labels.astype(np.int64)]
    if tau > 0:
        x = x + tau * rng.normal(x.shape)
    return x.astype(np.float32).astype(np.float64)


def generate_scenario(spec: ScenarioSpec) -> Dataset:
    spec.validate()
    root = Rng(spec.seed, ("scenario",))
    emb = make_embeddings(spec, root.child("embeddings"))
    M = root.child("mixing").normal((spec.d_in, spec.d_a))
    Wt, st = _shift(spec, root.child("shift"))
    src_means = emb.vectors @ M.T
    trg_means = src_means @ Wt.T + st

    splits = {}
    oracle = None
    for name in SPLITS:
        n = spec.split_size(name)
        palette = spec.shared_ids if name == "source" else spec.shared_ids + spec.private_ids
        means = src_means if name == "source" else trg_means
        labels = np.empty((n, spec.H, spec.W), dtype=np.uint16)
        inputs = np.empty((n, spec.H, spec.W, spec.d_in))
        for i in range(n):
            r = root.child(name, i)
            labels[i] = paint_layout(spec, palette, r.child("layout"))
            inputs[i] = _render(labels[i], means, spec.noise_std, r.child("noise"))
        if name == "target_train":
            oracle = labels
            labels = np.full_like(labels, ABSENT)
        splits[name] = Split(inputs, labels, "source" if name == "source" else "target")

    tt = splits["target_train"]
    digests = [grid_digest(tt.inputs[i], oracle[i]) for i in range(len(tt))]
    return Dataset(spec, emb, splits["source"], tt, splits["target_test"], M, Wt, st, digests, _oracle=oracle)


def validate_scenario(ds: Dataset, check_oracle: bool | None = None) -> list[str]:
    """List of human-readable violations; empty when the dataset is sound.

    The oracle sidecar is only inspected when it is already in memory or when
    ``check_oracle`` is true, so validating a loaded dataset never opens it
    implicitly.
    """
    spec = ds.spec
    C = spec.n_classes
    out: list[str] = []
    for name in SPLITS:
        sp = ds.split(name)
        n = spec.split_size(name)
        if sp.inputs.shape != (n, spec.H, spec.W, spec.d_in) or sp.labels.shape != (n, spec.H, spec.W):
            out.append(f"{name}: shape {sp.inputs.shape}/{sp.labels.shape} does not match spec")
            continue
        if name == "target_train":
            if np.any(sp.labels != ABSENT):
                out.append("target_train: split carries labels; they belong in the oracle sidecar")
            continue
        for i in range(n):
            lab = sp.labels[i]
            if np.any(lab == ABSENT) or np.any(lab >= C):
                out.append(f"{name}[{i}]: invalid label id")
            elif name == "source" and np.any(lab >= spec.n_shared):
                out.append(f"source[{i}]: {int(np.count_nonzero(lab >= spec.n_shared))} private-class pixels")
    if ds.embeddings.vectors.shape != (C, spec.d_a):
        out.append(f"embedding table shape {ds.embeddings.vectors.shape} != ({C}, {spec.d_a})")
    for c, (ids, w) in ds.embeddings.anchors.items():
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            out.append(f"private class {c}: convex weights invalid")
    if len(ds.oracle_digests) != len(ds.target_train):
        out.append("oracle digest count does not match target_train")
    if check_oracle is None:
        check_oracle = ds.has_oracle()
    if check_oracle:
        try:
            oracle = ds.oracle_labels()
        except (ContractError, FormatError, OSError) as exc:
            out.append(f"oracle sidecar unreadable: {exc}")
        else:
            if oracle.shape != ds.target_train.labels.shape:
                out.append(f"oracle sidecar shape {oracle.shape} misaligned with target_train")
            else:
                if np.any(oracle >= C):
                    out.append("oracle sidecar: invalid label id")
                bad = [i for i in range(len(oracle))
                       if grid_digest(ds.target_train.inputs[i], oracle[i]) != ds.oracle_digests[i]]
                if bad:
                    out.append(f"oracle sidecar misaligned with target_train at {len(bad)} grids")
    return out


# ---------------------------------------------------------------- file format

def _split_header(n: int, spec: ScenarioSpec) -> bytes:
    return SPLIT_MAGIC + struct.pack("<5I", n, spec.H, spec.W, spec.d_in, spec.n_classes)


def _read_header(raw: bytes, path) -> tuple[int, int, int, int, int]:
    if raw[:6] != SPLIT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:6]!r}")
    if len(raw) < 26:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack("<5I", raw[6:26])


def _write_split(path: Path, sp: Split, spec: ScenarioSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(_split_header(len(sp), spec))
        for i in range(len(sp)):
            fh.write(np.ascontiguousarray(sp.inputs[i].transpose(2, 0, 1), dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(sp.labels[i], dtype="<u2").tobytes())


def _read_split(path: Path, spec: ScenarioSpec, domain: str) -> Split:
    raw = path.read_bytes()
    n, H, W, d, C = _read_header(raw, path)
    if (H, W, d, C) != (spec.H, spec.W, spec.d_in, spec.n_classes):
        raise FormatError(f"{path}: header {(H, W, d, C)} disagrees with manifest")
    per_in, per_lab = 4 * d * H * W, 2 * H * W
    if len(raw) != 26 + n * (per_in + per_lab):
        raise FormatError(f"{path}: expected {26 + n * (per_in + per_lab)} bytes, found {len(raw)}")
    inputs = np.empty((n, H, W, d))
    labels = np.empty((n, H, W), dtype=np.uint16)
    off = 26
    for i in range(n):
        inputs[i] = np.frombuffer(raw, "<f4", d * H * W, off).reshape(d, H, W).transpose(1, 2, 0)
        off += per_in
        labels[i] = np.frombuffer(raw, "<u2", H * W, off).reshape(H, W)
        off += per_lab
    return Split(inputs, labels, domain)


def _write_oracle(path: Path, labels: np.ndarray, spec: ScenarioSpec) -> None:
    with open(path, "wb") as fh:
        fh.write(_split_header(len(labels), spec))
        for lab in labels:
            fh.write(np.ascontiguousarray(lab, dtype="<u2").tobytes())


def _read_oracle(path: Path, spec: ScenarioSpec) -> np.ndarray:
    raw = Path(path).read_bytes()
    n, H, W, _, _ = _read_header(raw, path)
    if len(raw) != 26 + 2 * n * H * W:
        raise FormatError(f"{path}: truncated oracle sidecar")
    return np.frombuffer(raw, "<u2", n * H * W, 26).reshape(n, H, W).copy()


def save_dataset(ds: Dataset, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    oracle = ds.oracle_labels()
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": ds.spec.to_dict(),
        "class_names": ds.class_names,
        "n_classes": ds.spec.n_classes,
        "embeddings": ds.embeddings.vectors.tolist(),
        "private_anchors": {str(c): {"anchors": a, "weights": w} for c, (a, w) in ds.embeddings.anchors.items()},
        "mixing": ds.mixing.tolist(),
        "shift_matrix": ds.shift_matrix.tolist(),
        "shift_vector": ds.shift_vector.tolist(),
        "oracle_digests": ds.oracle_digests,
        "files": {name: f"{name}.bin" for name in SPLITS} | {"oracle": "target_train" + ORACLE_SUFFIX},
    }
    for name in SPLITS:
        _write_split(d / f"{name}.bin", ds.split(name), ds.spec)
    _write_oracle(d / ("target_train" + ORACLE_SUFFIX), oracle, ds.spec)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(dir_path) -> Dataset:
    """Load a dataset directory.  The oracle sidecar is not opened here."""
    d = Path(dir_path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{d}: unreadable manifest ({exc})") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{d}: unsupported format version {manifest.get('format_version')}")
    try:
        spec = ScenarioSpec.from_dict(manifest["spec"])
        vectors = np.asarray(manifest["embeddings"], dtype=float)
        if manifest["n_classes"] != spec.n_classes or len(manifest["class_names"]) != vectors.shape[0] \
                or vectors.shape[0] != spec.n_classes:
            raise FormatError(f"{d}: class count disagrees with embedding rows")
        anchors = {int(c): (v["anchors"], v["weights"]) for c, v in manifest["private_anchors"].items()}
        splits = {name: _read_split(d / manifest["files"][name], spec,
                                    "source" if name == "source" else "target") for name in SPLITS}
        return Dataset(spec, EmbeddingTable(vectors, anchors), splits["source"], splits["target_train"],
                       splits["target_test"], np.asarray(manifest["mixing"]), np.asarray(manifest["shift_matrix"]),
                       np.asarray(manifest["shift_vector"]), list(manifest["oracle_digests"]),
                       _oracle_path=d / manifest["files"]["oracle"])
    except (KeyError, TypeError, ContractError) as exc:
        raise FormatError(f"{d}: malformed manifest ({exc})") from None


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    same = a.spec == b.spec and np.array_equal(a.embeddings.vectors, b.embeddings.vectors)
    same = same and {k: (list(v[0]), list(v[1])) for k, v in a.embeddings.anchors.items()} == \
        {k: (list(v[0]), list(v[1])) for k, v in b.embeddings.anchors.items()}
    for name in SPLITS:
        sa, sb = a.split(name), b.split(name)
        same = same and np.array_equal(sa.inputs, sb.inputs) and np.array_equal(sa.labels, sb.labels)
    return bool(same and a.oracle_digests == b.oracle_digests
                and np.array_equal(a.oracle_labels(), b.oracle_labels()))
